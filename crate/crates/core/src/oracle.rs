//! Exact inference over the data-generating process.
//!
//! The chain runs over (grid state, cumulative reward) pairs so that a
//! return-to-go observation becomes evidence on the last cumulative reward.
//! Messages are kept in log space.

use std::fmt;
use std::str::FromStr;

use crate::gridworld::{
    initial_states, noisy_policy, reward, step, Action, Cell, GridState, Trajectory, GOAL, HORIZON,
    NUM_ACTIONS, NUM_CELLS, NUM_GRID_STATES,
};
use crate::masking::MaskedExample;
use crate::{Error, Result};

const REWARD_LEVELS: usize = 2 * HORIZON + 1;
const NUM_AUG: usize = NUM_GRID_STATES * REWARD_LEVELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentedState {
    pub grid: GridState,
    /// Reward collected before the current timestep.
    pub cum_reward: i32,
}

fn aug_index(grid: usize, cum: i32) -> usize {
    grid * REWARD_LEVELS + (cum + HORIZON as i32) as usize
}

fn aug_split(x: usize) -> (usize, i32) {
    (x / REWARD_LEVELS, (x % REWARD_LEVELS) as i32 - HORIZON as i32)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Observations on the first `horizon` timesteps of an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    pub agent: Vec<Option<Cell>>,
    pub key: Vec<Option<Cell>>,
    pub action: Vec<Option<Action>>,
    pub rtg0: Option<i32>,
}

impl Evidence {
    pub fn empty(horizon: usize) -> Self {
        Self {
            agent: vec![None; horizon],
            key: vec![None; horizon],
            action: vec![None; horizon],
            rtg0: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.agent.len()
    }

    pub fn observe_state(&mut self, t: usize, s: GridState) -> &mut Self {
        self.agent[t] = Some(s.agent);
        self.key[t] = Some(s.key);
        self
    }

    pub fn observe_action(&mut self, t: usize, a: Action) -> &mut Self {
        self.action[t] = Some(a);
        self
    }

    /// Every state and action of `t`, and its return.
    pub fn full(t: &Trajectory) -> Self {
        let mut ev = Evidence::empty(t.len());
        for i in 0..t.len() {
            ev.observe_state(i, t.states[i]).observe_action(i, t.actions[i]);
        }
        ev.rtg0 = Some(t.episode_return());
        ev
    }

    /// What the model sees of a masked example.
    pub fn from_example(ex: &MaskedExample) -> Self {
        let p = &ex.pattern;
        let mut ev = Evidence::empty(p.len());
        for t in 0..p.len() {
            if p.state_visible[t] {
                ev.observe_state(t, ex.states[t]);
            }
            if p.action_visible[t] {
                ev.observe_action(t, ex.actions[t]);
            }
        }
        ev.rtg0 = ex.visible_rtg();
        ev
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.horizon();
        if h == 0 || h > HORIZON || self.key.len() != h || self.action.len() != h {
            return Err(Error::InvalidArgument(format!("evidence horizon must be in 1..={HORIZON}")));
        }
        if let Some(v) = self.rtg0 {
            if v.unsigned_abs() as usize > h {
                return Err(Error::InvalidArgument(format!("return {v} outside [-{h}, {h}]")));
            }
        }
        Ok(())
    }

    fn state_ok(&self, t: usize, g: GridState) -> bool {
        self.agent[t].is_none_or(|c| c == g.agent) && self.key[t].is_none_or(|c| c == g.key)
    }

    fn action_ok(&self, t: usize, a: Action) -> bool {
        self.action[t].is_none_or(|o| o == a)
    }

    fn return_ok(&self, cum: i32) -> bool {
        self.rtg0.is_none_or(|v| v == cum)
    }
}

/// Space-separated `s<t>=agent:<c>[,key:<c>]`, `a<t>=<action>` and
/// `rtg=<v>` items, e.g. `s0=agent:0,key:5 s3=agent:7 rtg=4`.
impl FromStr for Evidence {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = |item: &str, why: &str| Error::InvalidArgument(format!("evidence item `{item}`: {why}"));
        let mut ev = Evidence::empty(HORIZON);
        for item in text.split(|c: char| c.is_whitespace() || c == ';').filter(|s| !s.is_empty()) {
            let (lhs, rhs) = item.split_once('=').ok_or_else(|| bad(item, "expected `=`"))?;
            if lhs == "rtg" {
                ev.rtg0 = Some(rhs.parse().map_err(|_| bad(item, "return must be an integer"))?);
                continue;
            }
            let (kind, t) = lhs
                .char_indices()
                .nth(1)
                .map(|(i, _)| lhs.split_at(i))
                .ok_or_else(|| bad(item, "expected s<t>, a<t> or rtg"))?;
            let t: usize = t.parse().map_err(|_| bad(item, "bad timestep"))?;
            if t >= HORIZON {
                return Err(bad(item, "timestep out of range"));
            }
            match kind {
                "a" => ev.action[t] = Some(rhs.parse().map_err(|e: String| bad(item, &e))?),
                "s" => {
                    for part in rhs.split(',') {
                        let (name, cell) = part.split_once(':').ok_or_else(|| bad(item, "expected name:cell"))?;
                        let cell = cell
                            .parse::<usize>()
                            .ok()
                            .and_then(Cell::new)
                            .ok_or_else(|| bad(item, "cell must be in 0..16"))?;
                        match name {
                            "agent" => ev.agent[t] = Some(cell),
                            "key" => ev.key[t] = Some(cell),
                            _ => return Err(bad(item, "expected agent or key")),
                        }
                    }
                }
                _ => return Err(bad(item, "expected s<t>, a<t> or rtg")),
            }
        }
        ev.validate()?;
        Ok(ev)
    }
}

impl fmt::Display for Evidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut items = Vec::new();
        for t in 0..self.horizon() {
            let mut parts = Vec::new();
            if let Some(c) = self.agent[t] {
                parts.push(format!("agent:{c}"));
            }
            if let Some(c) = self.key[t] {
                parts.push(format!("key:{c}"));
            }
            if !parts.is_empty() {
                items.push(format!("s{t}={}", parts.join(",")));
            }
            if let Some(a) = self.action[t] {
                items.push(format!("a{t}={a}"));
            }
        }
        if let Some(v) = self.rtg0 {
            items.push(format!("rtg={v}"));
        }
        f.write_str(&items.join(" "))
    }
}

/// Posterior distributions for every timestep of the evidence horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub agent: Vec<[f64; NUM_CELLS]>,
    pub key: Vec<[f64; NUM_CELLS]>,
    /// Joint over grid states, indexed by [`GridState::index`].
    pub state: Vec<Vec<f64>>,
    pub action: Vec<[f64; NUM_ACTIONS]>,
    /// Episode return over `-HORIZON..=HORIZON`, offset by `HORIZON`.
    pub rtg0: Vec<f64>,
    pub log_likelihood: f64,
}

impl Marginals {
    fn zeros(h: usize) -> Self {
        Self {
            agent: vec![[0.0; NUM_CELLS]; h],
            key: vec![[0.0; NUM_CELLS]; h],
            state: vec![vec![0.0; NUM_GRID_STATES]; h],
            action: vec![[0.0; NUM_ACTIONS]; h],
            rtg0: vec![0.0; REWARD_LEVELS],
            log_likelihood: f64::NEG_INFINITY,
        }
    }

    pub fn horizon(&self) -> usize {
        self.agent.len()
    }

    pub fn expected_return(&self) -> f64 {
        self.rtg0
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 - HORIZON as f64) * p)
            .sum()
    }

    /// Largest absolute difference over every reported probability.
    pub fn max_abs_diff(&self, other: &Marginals) -> f64 {
        let mut m: f64 = 0.0;
        let mut upd = |a: &[f64], b: &[f64]| {
            for (x, y) in a.iter().zip(b) {
                m = m.max((x - y).abs());
            }
        };
        for t in 0..self.horizon().min(other.horizon()) {
            upd(&self.agent[t], &other.agent[t]);
            upd(&self.key[t], &other.key[t]);
            upd(&self.state[t], &other.state[t]);
            upd(&self.action[t], &other.action[t]);
        }
        upd(&self.rtg0, &other.rtg0);
        m
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Transition structure of a fixed policy, immutable once built.
#[derive(Debug, Clone)]
pub struct Chain {
    policy: Vec<[f64; NUM_ACTIONS]>,
    log_policy: Vec<[f64; NUM_ACTIONS]>,
    next: Vec<[usize; NUM_ACTIONS]>,
    reward: Vec<[i32; NUM_ACTIONS]>,
    initial: Vec<usize>,
}

impl Default for Chain {
    fn default() -> Self {
        Self::build()
    }
}

impl Chain {
    /// The chain of the data-generating agent.
    pub fn build() -> Self {
        Self::with_policy(noisy_policy)
    }

    pub fn with_policy(policy: impl Fn(GridState) -> [f64; NUM_ACTIONS]) -> Self {
        let grids: Vec<GridState> = (0..NUM_GRID_STATES).filter_map(GridState::from_index).collect();
        let policy: Vec<[f64; NUM_ACTIONS]> = grids.iter().map(|&g| policy(g)).collect();
        Self {
            log_policy: policy.iter().map(|p| p.map(f64::ln)).collect(),
            policy,
            next: grids.iter().map(|&g| Action::ALL.map(|a| step(g, a).index())).collect(),
            reward: grids.iter().map(|&g| Action::ALL.map(|a| reward(g, step(g, a)))).collect(),
            initial: initial_states().iter().map(|s| s.index()).collect(),
        }
    }

    pub fn policy(&self, s: GridState) -> [f64; NUM_ACTIONS] {
        self.policy[s.index()]
    }

    /// Action-labelled successors of `x` with their probabilities.
    pub fn successors(&self, x: AugmentedState) -> [(Action, f64, AugmentedState); NUM_ACTIONS] {
        let g = x.grid.index();
        Action::ALL.map(|a| {
            let i = a.index();
            let next = AugmentedState {
                grid: GridState::from_index(self.next[g][i]).unwrap(),
                cum_reward: x.cum_reward + self.reward[g][i],
            };
            (a, self.policy[g][i], next)
        })
    }

    /// Augmented states with nonzero probability at some timestep `0..=horizon`.
    pub fn reachable(&self, horizon: usize) -> Vec<AugmentedState> {
        let mut seen = vec![false; NUM_AUG];
        let mut frontier: Vec<usize> = self.initial.iter().map(|&g| aug_index(g, 0)).collect();
        for &x in &frontier {
            seen[x] = true;
        }
        for _ in 0..horizon {
            let mut next = Vec::new();
            for &x in &frontier {
                let (g, c) = aug_split(x);
                for a in 0..NUM_ACTIONS {
                    if self.policy[g][a] <= 0.0 {
                        continue;
                    }
                    let y = aug_index(self.next[g][a], c + self.reward[g][a]);
                    if !seen[y] {
                        seen[y] = true;
                        next.push(y);
                    }
                }
            }
            frontier = next;
        }
        (0..NUM_AUG)
            .filter(|&x| seen[x])
            .map(|x| {
                let (g, c) = aug_split(x);
                AugmentedState {
                    grid: GridState::from_index(g).unwrap(),
                    cum_reward: c,
                }
            })
            .collect()
    }

    fn grid(&self, g: usize) -> GridState {
        GridState::from_index(g).unwrap()
    }

    /// Forward messages `alpha[0..=h]`; `alpha[t]` includes the state
    /// evidence at `t` (for `t < h`).
    fn forward(&self, ev: &Evidence) -> Vec<Vec<f64>> {
        let h = ev.horizon();
        let mut alpha = vec![vec![f64::NEG_INFINITY; NUM_AUG]; h + 1];
        let log_init = -(self.initial.len() as f64).ln();
        for &g in &self.initial {
            if ev.state_ok(0, self.grid(g)) {
                alpha[0][aug_index(g, 0)] = log_init;
            }
        }
        for t in 0..h {
            let (cur, rest) = alpha.split_at_mut(t + 1);
            let (cur, nxt) = (&cur[t], &mut rest[0]);
            for (x, &w) in cur.iter().enumerate() {
                if w == f64::NEG_INFINITY {
                    continue;
                }
                let (g, c) = aug_split(x);
                for a in Action::ALL {
                    let i = a.index();
                    if !ev.action_ok(t, a) || self.policy[g][i] <= 0.0 {
                        continue;
                    }
                    let g2 = self.next[g][i];
                    if t + 1 < h && !ev.state_ok(t + 1, self.grid(g2)) {
                        continue;
                    }
                    let y = aug_index(g2, c + self.reward[g][i]);
                    nxt[y] = log_add(nxt[y], w + self.log_policy[g][i]);
                }
            }
        }
        alpha
    }

    /// Backward messages, evaluated only where `alpha` is positive.
    fn backward(&self, ev: &Evidence, alpha: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = ev.horizon();
        let mut beta = vec![vec![f64::NEG_INFINITY; NUM_AUG]; h + 1];
        for x in 0..NUM_AUG {
            if alpha[h][x] > f64::NEG_INFINITY && ev.return_ok(aug_split(x).1) {
                beta[h][x] = 0.0;
            }
        }
        for t in (0..h).rev() {
            for x in 0..NUM_AUG {
                if alpha[t][x] == f64::NEG_INFINITY {
                    continue;
                }
                let (g, c) = aug_split(x);
                let mut terms = [f64::NEG_INFINITY; NUM_ACTIONS];
                for a in Action::ALL {
                    let i = a.index();
                    if !ev.action_ok(t, a) || self.policy[g][i] <= 0.0 {
                        continue;
                    }
                    let g2 = self.next[g][i];
                    if t + 1 < h && !ev.state_ok(t + 1, self.grid(g2)) {
                        continue;
                    }
                    terms[i] = self.log_policy[g][i] + beta[t + 1][aug_index(g2, c + self.reward[g][i])];
                }
                beta[t][x] = log_sum_exp(&terms);
            }
        }
        beta
    }

    /// Exact per-timestep posteriors given `ev`.
    pub fn posterior_marginals(&self, ev: &Evidence) -> Result<Marginals> {
        ev.validate()?;
        let h = ev.horizon();
        let alpha = self.forward(ev);
        let beta = self.backward(ev, &alpha);
        let joint0: Vec<f64> = (0..NUM_AUG).map(|x| alpha[0][x] + beta[0][x]).collect();
        let log_z = log_sum_exp(&joint0);
        if log_z == f64::NEG_INFINITY {
            return Err(Error::ZeroLikelihood);
        }
        let mut m = Marginals::zeros(h);
        m.log_likelihood = log_z;
        for t in 0..h {
            for x in 0..NUM_AUG {
                let lw = alpha[t][x] + beta[t][x];
                if lw == f64::NEG_INFINITY {
                    continue;
                }
                let (g, c) = aug_split(x);
                let p = (lw - log_z).exp();
                let s = self.grid(g);
                m.agent[t][s.agent.index()] += p;
                m.key[t][s.key.index()] += p;
                m.state[t][g] += p;
                for a in Action::ALL {
                    let i = a.index();
                    if !ev.action_ok(t, a) || self.policy[g][i] <= 0.0 {
                        continue;
                    }
                    let g2 = self.next[g][i];
                    if t + 1 < h && !ev.state_ok(t + 1, self.grid(g2)) {
                        continue;
                    }
                    let y = aug_index(g2, c + self.reward[g][i]);
                    let lw = alpha[t][x] + self.log_policy[g][i] + beta[t + 1][y];
                    m.action[t][i] += (lw - log_z).exp();
                }
            }
        }
        for x in 0..NUM_AUG {
            let lw = alpha[h][x] + beta[h][x];
            if lw > f64::NEG_INFINITY {
                m.rtg0[(aug_split(x).1 + HORIZON as i32) as usize] += (lw - log_z).exp();
            }
        }
        Ok(m)
    }

    /// `P(a_t | s_0..s_t, a_0..a_{t-1})` through the message-passing path.
    pub fn conditional_action_distribution(
        &self,
        states: &[GridState],
        actions: &[Action],
    ) -> Result<[f64; NUM_ACTIONS]> {
        let t = states.len().checked_sub(1).ok_or_else(|| Error::InvalidArgument("empty history".into()))?;
        if actions.len() != t {
            return Err(Error::InvalidArgument(format!(
                "history of {} states needs {t} actions, got {}",
                states.len(),
                actions.len()
            )));
        }
        let mut ev = Evidence::empty(t + 1);
        for (i, &s) in states.iter().enumerate() {
            ev.observe_state(i, s);
        }
        for (i, &a) in actions.iter().enumerate() {
            ev.observe_action(i, a);
        }
        Ok(self.posterior_marginals(&ev)?.action[t])
    }

    /// Posterior over the episode return over the full episode.
    pub fn return_distribution(&self, ev: &Evidence) -> Result<Vec<f64>> {
        Ok(self.posterior_marginals(ev)?.rtg0)
    }

    pub fn expected_return(&self) -> f64 {
        self.posterior_marginals(&Evidence::empty(HORIZON))
            .expect("empty evidence has positive likelihood")
            .expected_return()
    }

    /// The smallest return whose cumulative probability reaches one half.
    pub fn median_return(&self) -> i32 {
        let dist = self.return_distribution(&Evidence::empty(HORIZON)).expect("empty evidence");
        let mut acc = 0.0;
        for (i, p) in dist.iter().enumerate() {
            acc += p;
            if acc >= 0.5 {
                return i as i32 - HORIZON as i32;
            }
        }
        HORIZON as i32
    }

    /// Probability that the agent stands on the goal after the last action.
    pub fn success_probability(&self) -> f64 {
        let alpha = self.forward(&Evidence::empty(HORIZON));
        let goal: f64 = alpha[HORIZON]
            .iter()
            .enumerate()
            .filter(|(x, w)| **w > f64::NEG_INFINITY && self.grid(aug_split(*x).0).agent == GOAL)
            .map(|(_, w)| w.exp())
            .sum();
        goal
    }

    /// Mean posterior entropy of the prediction targets, in nats per
    /// predicted token. Agent cell, key cell and action count as separate
    /// tokens, matching how the model scores them.
    pub fn bayes_optimal_loss(&self, examples: &[MaskedExample]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in examples {
            let m = self.posterior_marginals(&Evidence::from_example(ex))?;
            let p = &ex.pattern;
            for t in 0..p.len() {
                if p.state_target[t] {
                    total += entropy(&m.agent[t]) + entropy(&m.key[t]);
                    count += 2;
                }
                if p.action_target[t] {
                    total += entropy(&m.action[t]);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::NoTargets);
        }
        Ok(total / count as f64)
    }
}

/// Marginals by summing over every initial state and action sequence.
/// The cost is `132 * 4^h` paths, so keep the horizon small.
pub fn brute_force_marginals(
    ev: &Evidence,
    policy: impl Fn(GridState) -> [f64; NUM_ACTIONS],
) -> Result<Marginals> {
    ev.validate()?;
    let h = ev.horizon();
    let inits = initial_states();
    let p0 = 1.0 / inits.len() as f64;
    let mut m = Marginals::zeros(h);
    let mut z = 0.0;
    let mut states = vec![inits[0]; h];
    let mut actions = vec![Action::Up; h];
    for &s0 in &inits {
        'seq: for code in 0..4usize.pow(h as u32) {
            let mut s = s0;
            let mut w = p0;
            let mut ret = 0;
            let mut rest = code;
            for t in 0..h {
                if !ev.state_ok(t, s) {
                    continue 'seq;
                }
                let a = Action::ALL[rest % 4];
                rest /= 4;
                if !ev.action_ok(t, a) {
                    continue 'seq;
                }
                w *= policy(s)[a.index()];
                states[t] = s;
                actions[t] = a;
                let n = step(s, a);
                ret += reward(s, n);
                s = n;
            }
            if !ev.return_ok(ret) || w == 0.0 {
                continue;
            }
            z += w;
            for t in 0..h {
                m.agent[t][states[t].agent.index()] += w;
                m.key[t][states[t].key.index()] += w;
                m.state[t][states[t].index()] += w;
                m.action[t][actions[t].index()] += w;
            }
            m.rtg0[(ret + HORIZON as i32) as usize] += w;
        }
    }
    if z == 0.0 {
        return Err(Error::ZeroLikelihood);
    }
    for t in 0..h {
        m.agent[t].iter_mut().for_each(|v| *v /= z);
        m.key[t].iter_mut().for_each(|v| *v /= z);
        m.state[t].iter_mut().for_each(|v| *v /= z);
        m.action[t].iter_mut().for_each(|v| *v /= z);
    }
    m.rtg0.iter_mut().for_each(|v| *v /= z);
    m.log_likelihood = z.ln();
    Ok(m)
}
