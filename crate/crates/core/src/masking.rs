//! Tasks expressed as masking schemes over trajectory tokens.
//!
//! A trajectory of length `k` has `k` state tokens, `k` action tokens and a
//! single return-to-go token for the first timestep. A [`MaskPattern`] says
//! which of those the model sees and which it must predict; each [`TaskKind`]
//! is a random rule for drawing patterns.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::gridworld::{Action, GridState, Trajectory, HORIZON};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Bc,
    Goal,
    Reward,
    Waypoint,
    Future,
    Past,
    ForwardDyn,
    InverseDyn,
    All,
    Rnd,
}

impl TaskKind {
    pub const EVERY: [TaskKind; 10] = [
        TaskKind::Bc,
        TaskKind::Goal,
        TaskKind::Reward,
        TaskKind::Waypoint,
        TaskKind::Future,
        TaskKind::Past,
        TaskKind::ForwardDyn,
        TaskKind::InverseDyn,
        TaskKind::All,
        TaskKind::Rnd,
    ];

    /// The eight single-task schemes, which double as evaluation tasks.
    pub const SINGLE: [TaskKind; 8] = [
        TaskKind::Bc,
        TaskKind::Goal,
        TaskKind::Reward,
        TaskKind::Waypoint,
        TaskKind::Future,
        TaskKind::Past,
        TaskKind::ForwardDyn,
        TaskKind::InverseDyn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Bc => "bc",
            TaskKind::Goal => "goal",
            TaskKind::Reward => "reward",
            TaskKind::Waypoint => "waypoint",
            TaskKind::Future => "future",
            TaskKind::Past => "past",
            TaskKind::ForwardDyn => "fwd-dyn",
            TaskKind::InverseDyn => "inv-dyn",
            TaskKind::All => "all",
            TaskKind::Rnd => "rnd",
        }
    }

    pub fn is_single(self) -> bool {
        !matches!(self, TaskKind::All | TaskKind::Rnd)
    }

    pub fn is_dynamics(self) -> bool {
        matches!(self, TaskKind::ForwardDyn | TaskKind::InverseDyn)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::EVERY
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Snippet length `k`.
    pub snippet_len: usize,
    pub min_waypoints: usize,
    pub max_waypoints: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            snippet_len: HORIZON,
            min_waypoints: 1,
            max_waypoints: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snippet_len < 2 || self.snippet_len > HORIZON {
            return Err(Error::InvalidArgument(format!(
                "snippet length {} outside [2, {HORIZON}]",
                self.snippet_len
            )));
        }
        if self.min_waypoints == 0 || self.min_waypoints > self.max_waypoints {
            return Err(Error::InvalidArgument("waypoint range must be 1 <= min <= max".into()));
        }
        Ok(())
    }
}

impl From<TaskKind> for TaskSpec {
    fn from(kind: TaskKind) -> Self {
        TaskSpec::new(kind)
    }
}

/// Per-timestep visibility and prediction-target bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskPattern {
    pub state_visible: Vec<bool>,
    pub action_visible: Vec<bool>,
    pub state_target: Vec<bool>,
    pub action_target: Vec<bool>,
    pub rtg_visible: bool,
}

impl MaskPattern {
    /// Nothing visible, nothing predicted.
    pub fn hidden(len: usize) -> Self {
        Self {
            state_visible: vec![false; len],
            action_visible: vec![false; len],
            state_target: vec![false; len],
            action_target: vec![false; len],
            rtg_visible: false,
        }
    }

    pub fn all_visible(len: usize) -> Self {
        Self {
            state_visible: vec![true; len],
            action_visible: vec![true; len],
            rtg_visible: true,
            ..Self::hidden(len)
        }
    }

    /// Everything hidden and every state and action predicted.
    pub fn all_targets(len: usize) -> Self {
        Self {
            state_target: vec![true; len],
            action_target: vec![true; len],
            ..Self::hidden(len)
        }
    }

    pub fn len(&self) -> usize {
        self.state_visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// State and action tokens hidden from the input.
    pub fn masked_count(&self) -> usize {
        self.state_visible.iter().chain(&self.action_visible).filter(|v| !**v).count()
    }

    pub fn target_count(&self) -> usize {
        self.state_target.iter().chain(&self.action_target).filter(|v| **v).count()
    }

    /// Targets are hidden and at least one exists.
    pub fn is_well_formed(&self) -> bool {
        let n = self.len();
        let lengths = [self.action_visible.len(), self.state_target.len(), self.action_target.len()];
        if lengths.iter().any(|&l| l != n) {
            return false;
        }
        let hidden_targets = (0..n).all(|t| {
            !(self.state_target[t] && self.state_visible[t])
                && !(self.action_target[t] && self.action_visible[t])
        });
        hidden_targets && self.target_count() > 0
    }
}

fn bc_prefix(k: usize, j: usize) -> MaskPattern {
    let mut p = MaskPattern::hidden(k);
    for t in 0..=j {
        p.state_visible[t] = true;
    }
    for t in 0..j {
        p.action_visible[t] = true;
    }
    p.action_target[j] = true;
    p
}

fn future_from(k: usize, j: usize) -> MaskPattern {
    let mut p = bc_prefix(k, j);
    for t in j..k {
        p.action_target[t] = true;
    }
    for t in j + 1..k {
        p.state_target[t] = true;
    }
    p
}

fn past_from(k: usize, i: usize) -> MaskPattern {
    let mut p = MaskPattern::hidden(k);
    for t in 0..k {
        let before = t < i;
        p.state_visible[t] = !before;
        p.action_visible[t] = !before;
        p.state_target[t] = before;
        p.action_target[t] = before;
    }
    p
}

/// Draws one pattern for `task`.
pub fn sample_pattern<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R) -> MaskPattern {
    let k = task.snippet_len;
    match task.kind {
        TaskKind::Bc => bc_prefix(k, rng.random_range(0..k)),
        TaskKind::Goal => {
            let mut p = bc_prefix(k, rng.random_range(0..k));
            p.state_visible[k - 1] = true;
            p
        }
        TaskKind::Reward => {
            let mut p = bc_prefix(k, rng.random_range(0..k));
            p.rtg_visible = true;
            p
        }
        TaskKind::Waypoint => {
            let mut p = bc_prefix(k, rng.random_range(0..k));
            let slots = k - 1;
            let hi = task.max_waypoints.min(slots);
            let lo = task.min_waypoints.min(hi);
            let m = rng.random_range(lo..=hi);
            for t in sample(rng, slots, m) {
                p.state_visible[t + 1] = true;
            }
            p
        }
        TaskKind::Future => future_from(k, rng.random_range(0..k)),
        TaskKind::Past => past_from(k, rng.random_range(1..k)),
        TaskKind::ForwardDyn => {
            let i = rng.random_range(0..k - 1);
            let mut p = MaskPattern::hidden(k);
            p.state_visible[i] = true;
            p.action_visible[i] = true;
            p.state_target[i + 1] = true;
            p
        }
        TaskKind::InverseDyn => {
            let i = rng.random_range(1..k);
            let mut p = MaskPattern::hidden(k);
            p.state_visible[i] = true;
            p.action_visible[i - 1] = true;
            p.state_target[i - 1] = true;
            p
        }
        TaskKind::All => sample_any_single(task, rng).1,
        TaskKind::Rnd => sample_random_masking(k, rng),
    }
}

/// The ALL scheme, also reporting which single-task scheme was drawn.
pub fn sample_any_single<R: Rng + ?Sized>(task: &TaskSpec, rng: &mut R) -> (TaskKind, MaskPattern) {
    let kind = TaskKind::SINGLE[rng.random_range(0..TaskKind::SINGLE.len())];
    (kind, sample_pattern(&TaskSpec { kind, ..*task }, rng))
}

const RND_RETRIES: usize = 16;

/// Uniform-rate random masking: `p ~ U(0, 1)`, each state and action token
/// hidden independently with probability `p`, return-to-go shown with
/// probability one half. This is the raw draw and may have no targets.
pub fn draw_random_masking<R: Rng + ?Sized>(len: usize, rng: &mut R) -> MaskPattern {
    let p: f64 = rng.random();
    let mut out = MaskPattern::hidden(len);
    for t in 0..len {
        let hide = rng.random::<f64>() < p;
        out.state_visible[t] = !hide;
        out.state_target[t] = hide;
    }
    for t in 0..len {
        let hide = rng.random::<f64>() < p;
        out.action_visible[t] = !hide;
        out.action_target[t] = hide;
    }
    out.rtg_visible = rng.random::<bool>();
    out
}

fn sample_random_masking<R: Rng + ?Sized>(len: usize, rng: &mut R) -> MaskPattern {
    for _ in 0..RND_RETRIES {
        let p = draw_random_masking(len, rng);
        if p.target_count() > 0 {
            return p;
        }
    }
    let mut p = draw_random_masking(len, rng);
    if p.target_count() == 0 {
        let token = rng.random_range(0..2 * len);
        if token < len {
            p.state_visible[token] = false;
            p.state_target[token] = true;
        } else {
            p.action_visible[token - len] = false;
            p.action_target[token - len] = true;
        }
    }
    p
}

/// Fixed-rate masking as in masked language modelling, kept as the
/// comparison baseline for the uniform-rate scheme.
pub fn fixed_rate_masking<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> MaskPattern {
    let mut out = MaskPattern::hidden(len);
    for t in 0..2 * len {
        let hide = rng.random::<f64>() < rate;
        if t < len {
            out.state_visible[t] = !hide;
            out.state_target[t] = hide;
        } else {
            out.action_visible[t - len] = !hide;
            out.action_target[t - len] = hide;
        }
    }
    out
}

fn prefix_len(bits: &[bool]) -> usize {
    bits.iter().take_while(|b| **b).count()
}

fn only(bits: &[bool], at: usize) -> bool {
    bits.iter().enumerate().all(|(t, &b)| b == (t == at))
}

fn none(bits: &[bool]) -> bool {
    bits.iter().all(|b| !b)
}

/// Does `p` belong to the pattern family of the single-task scheme `kind`?
/// Multi-task kinds accept any well-formed pattern.
pub fn recognize(kind: TaskKind, p: &MaskPattern) -> bool {
    if !p.is_well_formed() {
        return false;
    }
    let k = p.len();
    let bc_core = |p: &MaskPattern| -> Option<usize> {
        let j = prefix_len(&p.action_visible);
        (j < k
            && p.action_visible[j..].iter().all(|b| !b)
            && only(&p.action_target, j)
            && none(&p.state_target)
            && p.state_visible[..=j].iter().all(|b| *b))
        .then_some(j)
    };
    match kind {
        TaskKind::Bc | TaskKind::Reward => match bc_core(p) {
            Some(j) => {
                p.state_visible[j + 1..].iter().all(|b| !b) && p.rtg_visible == (kind == TaskKind::Reward)
            }
            None => false,
        },
        TaskKind::Goal => match bc_core(p) {
            Some(j) => {
                p.state_visible[k - 1]
                    && (j + 1..k - 1).all(|t| !p.state_visible[t])
                    && !p.rtg_visible
            }
            None => false,
        },
        TaskKind::Waypoint => match bc_core(p) {
            Some(j) => {
                let extra = p.state_visible[j + 1..].iter().filter(|b| **b).count();
                extra <= 3 && !p.rtg_visible
            }
            None => false,
        },
        TaskKind::Future => {
            let j = prefix_len(&p.action_visible);
            j < k
                && p.state_visible == (0..k).map(|t| t <= j).collect::<Vec<_>>()
                && p.action_visible == (0..k).map(|t| t < j).collect::<Vec<_>>()
                && p.action_target == (0..k).map(|t| t >= j).collect::<Vec<_>>()
                && p.state_target == (0..k).map(|t| t > j).collect::<Vec<_>>()
                && !p.rtg_visible
        }
        TaskKind::Past => {
            let i = p.state_target.iter().take_while(|b| **b).count();
            (1..k).contains(&i) && *p == past_from(k, i)
        }
        TaskKind::ForwardDyn => match p.state_visible.iter().position(|b| *b) {
            Some(i) if i + 1 < k => {
                only(&p.state_visible, i)
                    && only(&p.action_visible, i)
                    && only(&p.state_target, i + 1)
                    && none(&p.action_target)
                    && !p.rtg_visible
            }
            _ => false,
        },
        TaskKind::InverseDyn => match p.state_visible.iter().position(|b| *b) {
            Some(i) if i >= 1 => {
                only(&p.state_visible, i)
                    && only(&p.action_visible, i - 1)
                    && only(&p.state_target, i - 1)
                    && none(&p.action_target)
                    && !p.rtg_visible
            }
            _ => false,
        },
        TaskKind::All => TaskKind::SINGLE.iter().any(|&kd| recognize(kd, p)),
        TaskKind::Rnd => true,
    }
}

/// A trajectory with its pattern attached. Ground-truth tokens are kept for
/// every slot; visibility decides what the model reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
    pub rtg0: i32,
    pub pattern: MaskPattern,
}

impl MaskedExample {
    /// Ground truth with masks removed.
    pub fn unmask(&self) -> Trajectory {
        Trajectory::from_states_actions(self.states.clone(), self.actions.clone())
    }

    /// The return-to-go token as the model may read it.
    pub fn visible_rtg(&self) -> Option<i32> {
        self.pattern.rtg_visible.then_some(self.rtg0)
    }
}

pub fn apply_pattern(trajectory: &Trajectory, pattern: &MaskPattern) -> Result<MaskedExample> {
    if pattern.len() != trajectory.len() {
        return Err(Error::LengthMismatch {
            pattern: pattern.len(),
            trajectory: trajectory.len(),
        });
    }
    Ok(MaskedExample {
        states: trajectory.states.clone(),
        actions: trajectory.actions.clone(),
        rtg0: trajectory.episode_return(),
        pattern: pattern.clone(),
    })
}

/// Uniformly placed length-`k` window of `trajectory`, with returns-to-go
/// measured from the window start.
pub fn sample_snippet<R: Rng + ?Sized>(trajectory: &Trajectory, k: usize, rng: &mut R) -> Trajectory {
    let n = trajectory.len();
    if k >= n {
        return trajectory.clone();
    }
    let start = rng.random_range(0..=n - k);
    let end = start + k;
    let tail: i32 = trajectory.rewards[end..].iter().sum();
    Trajectory {
        states: trajectory.states[start..end].to_vec(),
        actions: trajectory.actions[start..end].to_vec(),
        rewards: trajectory.rewards[start..end].to_vec(),
        rtg: trajectory.rtg[start..end].iter().map(|r| r - tail).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternStats {
    pub samples: usize,
    /// `count_histogram[n]` = draws with exactly `n` state/action tokens hidden.
    pub count_histogram: Vec<u64>,
    /// Hide frequency per token, states first then actions.
    pub position_frequency: Vec<f64>,
    /// How often each timestep carries an action target.
    pub action_target_histogram: Vec<u64>,
    pub rtg_visible_rate: f64,
}

/// Empirical statistics of a scheme's masking draws. The random-masking
/// schemes are measured on their raw draw, before empty-target rejection.
pub fn pattern_statistics<R: Rng + ?Sized>(task: &TaskSpec, samples: usize, rng: &mut R) -> PatternStats {
    let k = task.snippet_len;
    let mut stats = PatternStats {
        samples,
        count_histogram: vec![0; 2 * k + 1],
        position_frequency: vec![0.0; 2 * k],
        action_target_histogram: vec![0; k],
        rtg_visible_rate: 0.0,
    };
    let mut rtg = 0usize;
    for _ in 0..samples {
        let p = match task.kind {
            TaskKind::Rnd => draw_random_masking(k, rng),
            _ => sample_pattern(task, rng),
        };
        stats.count_histogram[p.masked_count()] += 1;
        for (i, v) in p.state_visible.iter().chain(&p.action_visible).enumerate() {
            if !v {
                stats.position_frequency[i] += 1.0;
            }
        }
        for (t, &b) in p.action_target.iter().enumerate() {
            if b {
                stats.action_target_histogram[t] += 1;
            }
        }
        rtg += p.rtg_visible as usize;
    }
    let n = samples.max(1) as f64;
    stats.position_frequency.iter_mut().for_each(|f| *f /= n);
    stats.rtg_visible_rate = rtg as f64 / n;
    stats
}
