//! Putting a trained model to work: conditioned rollouts, backward history
//! sampling and marginal state queries.

use flexibit_tensor::Scalar;
use rand::Rng;

use crate::gridworld::{
    sample_categorical, sample_initial, step, Action, Cell, GridState, Trajectory, NUM_ACTIONS, NUM_CELLS,
    NUM_GRID_STATES,
};
use crate::model::{predict_distributions, Distributions, MaskedBatch, ModelParams};
use crate::oracle::Evidence;
use crate::{Error, Result};

pub const MAX_RETRIES: usize = 32;
pub const INCONSISTENT_FLAG: &str = "inconsistent-evidence";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Argmax,
    Sample,
}

/// A partially specified state; a missing key stays hidden from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateSpec {
    pub agent: Cell,
    pub key: Option<Cell>,
}

impl From<GridState> for StateSpec {
    fn from(s: GridState) -> Self {
        Self {
            agent: s.agent,
            key: Some(s.key),
        }
    }
}

/// Extra tokens revealed to the model during a rollout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conditioning {
    /// Shown at the last timestep.
    pub goal: Option<StateSpec>,
    pub rtg0: Option<i32>,
    pub waypoints: Vec<(usize, StateSpec)>,
}

fn reveal(ev: &mut Evidence, t: usize, s: StateSpec) {
    ev.agent[t] = Some(s.agent);
    ev.key[t] = s.key;
}

/// Evidence for predicting `a_t` after the given history, with the
/// conditioning placed where the goal, reward and waypoint schemes put it.
pub fn action_query(len: usize, states: &[GridState], actions: &[Action], cond: &Conditioning) -> Result<Evidence> {
    let t = states.len().checked_sub(1).ok_or_else(|| Error::InvalidArgument("empty history".into()))?;
    if actions.len() != t || t >= len {
        return Err(Error::InvalidArgument(format!(
            "history of {} states and {} actions does not fit {len} steps",
            states.len(),
            actions.len()
        )));
    }
    let mut ev = Evidence::empty(len);
    if let Some(g) = cond.goal {
        reveal(&mut ev, len - 1, g);
    }
    for &(w, s) in &cond.waypoints {
        if w >= len {
            return Err(Error::InvalidArgument(format!("waypoint timestep {w} out of range")));
        }
        reveal(&mut ev, w, s);
    }
    for (i, &s) in states.iter().enumerate() {
        ev.observe_state(i, s);
    }
    for (i, &a) in actions.iter().enumerate() {
        ev.observe_action(i, a);
    }
    ev.rtg0 = cond.rtg0;
    Ok(ev)
}

/// Model input revealing exactly what `evidence` observes. Hidden slots
/// carry placeholder tokens that the model never reads.
pub fn batch_from_evidence(evidence: &[Evidence]) -> Result<MaskedBatch> {
    let len = evidence.first().map_or(0, Evidence::horizon);
    let n = evidence.len() * len;
    let mut b = MaskedBatch {
        size: evidence.len(),
        len,
        agent: Vec::with_capacity(n),
        key: Vec::with_capacity(n),
        action: Vec::with_capacity(n),
        agent_visible: Vec::with_capacity(n),
        key_visible: Vec::with_capacity(n),
        action_visible: Vec::with_capacity(n),
        agent_target: vec![false; n],
        key_target: vec![false; n],
        action_target: vec![false; n],
        rtg0: Vec::with_capacity(evidence.len()),
        rtg_visible: Vec::with_capacity(evidence.len()),
    };
    for ev in evidence {
        if ev.horizon() != len {
            return Err(Error::InvalidArgument("evidence horizons differ".into()));
        }
        ev.validate()?;
        for t in 0..len {
            b.agent.push(ev.agent[t].map_or(0, Cell::index));
            b.key.push(ev.key[t].map_or(0, Cell::index));
            b.action.push(ev.action[t].map_or(0, Action::index));
            b.agent_visible.push(ev.agent[t].is_some());
            b.key_visible.push(ev.key[t].is_some());
            b.action_visible.push(ev.action[t].is_some());
        }
        b.rtg0.push(ev.rtg0.unwrap_or(0));
        b.rtg_visible.push(ev.rtg0.is_some());
    }
    Ok(b)
}

pub fn predict<F: Scalar>(params: &ModelParams<F>, evidence: &[Evidence]) -> Result<Distributions> {
    predict_distributions(params, &batch_from_evidence(evidence)?)
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn choose<R: Rng + ?Sized>(p: &[f64], mode: Mode, rng: &mut R) -> usize {
    match mode {
        Mode::Argmax => argmax(p),
        Mode::Sample => sample_categorical(p, rng),
    }
}

pub fn next_action<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    states: &[GridState],
    actions: &[Action],
    cond: &Conditioning,
    mode: Mode,
    rng: &mut R,
) -> Result<Action> {
    let ev = action_query(params.config.context, states, actions, cond)?;
    let d = predict(params, &[ev])?;
    Ok(Action::ALL[choose(d.action(0, actions.len()), mode, rng)])
}

/// Runs one rollout per initial state in lockstep. The environment supplies
/// every state; the model only picks actions.
pub fn rollout_batch<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    initial: &[GridState],
    cond: &Conditioning,
    steps: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let len = params.config.context;
    if steps == 0 || steps > len {
        return Err(Error::InvalidArgument(format!("steps must be in 1..={len}")));
    }
    let mut states: Vec<Vec<GridState>> = initial.iter().map(|&s| vec![s]).collect();
    let mut actions: Vec<Vec<Action>> = vec![Vec::new(); initial.len()];
    for t in 0..steps {
        let evs = (0..initial.len())
            .map(|i| action_query(len, &states[i], &actions[i], cond))
            .collect::<Result<Vec<_>>>()?;
        let d = predict(params, &evs)?;
        for i in 0..initial.len() {
            let a = Action::ALL[choose(d.action(i, t), mode, rng)];
            actions[i].push(a);
            if t + 1 < steps {
                let next = step(states[i][t], a);
                states[i].push(next);
            }
        }
    }
    Ok(states
        .into_iter()
        .zip(actions)
        .map(|(s, a)| Trajectory::from_states_actions(s, a))
        .collect())
}

pub fn rollout<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    initial: GridState,
    cond: &Conditioning,
    steps: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Trajectory> {
    Ok(rollout_batch(params, &[initial], cond, steps, mode, rng)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferredHistory {
    pub trajectory: Trajectory,
    pub flags: Vec<String>,
    /// Timesteps where rejection sampling ran out and the most probable
    /// consistent predecessor was forced.
    pub forced: Vec<usize>,
}

fn joint(d: &Distributions, t: usize, s: GridState, a: Action) -> f64 {
    d.agent(0, t)[s.agent.index()] * d.key(0, t)[s.key.index()] * d.action(0, t)[a.index()]
}

/// Samples a history ending in `last` at timestep `len - 1`, walking
/// backwards one step at a time with everything later revealed.
pub fn backward_infer<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    last: GridState,
    len: usize,
    rng: &mut R,
    max_retries: usize,
) -> Result<InferredHistory> {
    let ctx = params.config.context;
    if len == 0 || len > ctx {
        return Err(Error::InvalidArgument(format!("length must be in 1..={ctx}")));
    }
    let predecessors: Vec<(GridState, Action)> = {
        let mut v = Vec::new();
        for g in (0..NUM_GRID_STATES).filter_map(GridState::from_index) {
            for a in Action::ALL {
                if g.is_valid() && step(g, a) == last {
                    v.push((g, a));
                }
            }
        }
        v
    };
    if len > 1 && predecessors.is_empty() {
        return Err(Error::Unreachable(last.to_string()));
    }
    let mut states = vec![last; len];
    let mut actions = vec![Action::Up; len];
    let mut ev = Evidence::empty(ctx);
    ev.observe_state(len - 1, last);
    let d = predict(params, &[ev.clone()])?;
    actions[len - 1] = Action::ALL[sample_categorical(d.action(0, len - 1), rng)];
    ev.observe_action(len - 1, actions[len - 1]);
    let mut forced = Vec::new();
    for t in (0..len - 1).rev() {
        let d = predict(params, &[ev.clone()])?;
        let next = states[t + 1];
        let mut pick = None;
        for _ in 0..max_retries {
            let agent = Cell::new(sample_categorical(d.agent(0, t), rng)).unwrap();
            let key = Cell::new(sample_categorical(d.key(0, t), rng)).unwrap();
            let a = Action::ALL[sample_categorical(d.action(0, t), rng)];
            let s = GridState::new(agent, key);
            if s.is_valid() && step(s, a) == next {
                pick = Some((s, a));
                break;
            }
        }
        let (s, a) = match pick {
            Some(p) => p,
            None => {
                let mut best: Option<((GridState, Action), f64)> = None;
                for g in (0..NUM_GRID_STATES).filter_map(GridState::from_index) {
                    if !g.is_valid() {
                        continue;
                    }
                    for a in Action::ALL {
                        if step(g, a) == next {
                            let p = joint(&d, t, g, a);
                            if best.is_none_or(|(_, q)| p > q) {
                                best = Some(((g, a), p));
                            }
                        }
                    }
                }
                forced.push(t);
                best.ok_or_else(|| Error::Unreachable(next.to_string()))?.0
            }
        };
        states[t] = s;
        actions[t] = a;
        ev.observe_state(t, s).observe_action(t, a);
    }
    let mut flags = Vec::new();
    if !states[0].is_initial() {
        flags.push(INCONSISTENT_FLAG.to_string());
    }
    Ok(InferredHistory {
        trajectory: Trajectory::from_states_actions(states, actions),
        flags,
        forced,
    })
}

/// Agent-cell distribution at every timestep from a single forward pass.
pub fn marginal_state_distributions<F: Scalar>(
    params: &ModelParams<F>,
    evidence: &Evidence,
) -> Result<Vec<[f64; NUM_CELLS]>> {
    let d = predict(params, std::slice::from_ref(evidence))?;
    Ok((0..evidence.horizon())
        .map(|t| d.agent(0, t).try_into().expect("agent head width"))
        .collect())
}

pub fn marginal_state_distribution<F: Scalar>(
    params: &ModelParams<F>,
    evidence: &Evidence,
    t: usize,
) -> Result<[f64; NUM_CELLS]> {
    if t >= evidence.horizon() {
        return Err(Error::InvalidArgument(format!("query timestep {t} out of range")));
    }
    Ok(marginal_state_distributions(params, evidence)?[t])
}

/// Per-timestep frequencies of agent cells and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub agent: Vec<[f64; NUM_CELLS]>,
    pub action: Vec<[f64; NUM_ACTIONS]>,
}

impl Visitation {
    pub fn of(trajectories: &[Trajectory]) -> Self {
        let len = trajectories.iter().map(Trajectory::len).max().unwrap_or(0);
        let mut v = Visitation {
            agent: vec![[0.0; NUM_CELLS]; len],
            action: vec![[0.0; NUM_ACTIONS]; len],
        };
        let mut counts = vec![0usize; len];
        for tr in trajectories {
            for t in 0..tr.len() {
                v.agent[t][tr.states[t].agent.index()] += 1.0;
                v.action[t][tr.actions[t].index()] += 1.0;
                counts[t] += 1;
            }
        }
        for t in 0..len {
            let n = counts[t].max(1) as f64;
            v.agent[t].iter_mut().for_each(|x| *x /= n);
            v.action[t].iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    /// Mean over timesteps of the agent-cell total-variation distance.
    pub fn mean_tv(&self, other: &Visitation) -> f64 {
        let n = self.agent.len().min(other.agent.len());
        if n == 0 {
            return 0.0;
        }
        (0..n)
            .map(|t| crate::oracle::total_variation(&self.agent[t], &other.agent[t]))
            .sum::<f64>()
            / n as f64
    }
}

/// Sample-mode rollouts from fresh initial states, tallied per timestep.
pub fn empirical_visitation<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    n: usize,
    rng: &mut R,
) -> Result<(Visitation, Vec<Trajectory>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    let initial: Vec<GridState> = (0..n).map(|_| sample_initial(rng)).collect();
    let trajectories = rollout_batch(
        params,
        &initial,
        &Conditioning::default(),
        params.config.context,
        Mode::Sample,
        rng,
    )?;
    Ok((Visitation::of(&trajectories), trajectories))
}
