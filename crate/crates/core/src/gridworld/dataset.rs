//! Trajectories, seeded dataset generation and the JSON-lines file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{reward, sample_action, sample_initial, step, Action, Cell, GridState, HORIZON};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
    /// `rewards[t]` belongs to the transition `t -> t+1`.
    pub rewards: Vec<i32>,
    /// Suffix sums of `rewards`; `rtg[0]` is the episode return.
    pub rtg: Vec<i32>,
}

fn suffix_sums(rewards: &[i32]) -> Vec<i32> {
    let mut rtg = vec![0; rewards.len()];
    let mut acc = 0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        rtg[t] = acc;
    }
    rtg
}

impl Trajectory {
    /// Builds rewards and returns from states and actions, which must be
    /// dynamics-consistent.
    pub fn from_states_actions(states: Vec<GridState>, actions: Vec<Action>) -> Self {
        let rewards: Vec<i32> = states
            .iter()
            .zip(&actions)
            .map(|(&s, &a)| reward(s, step(s, a)))
            .collect();
        let rtg = suffix_sums(&rewards);
        Self {
            states,
            actions,
            rewards,
            rtg,
        }
    }

    /// Replays `actions` through the environment from `initial`.
    pub fn replay(initial: GridState, actions: &[Action]) -> Self {
        let mut states = Vec::with_capacity(actions.len());
        let mut s = initial;
        for &a in actions {
            states.push(s);
            s = step(s, a);
        }
        Self::from_states_actions(states, actions.to_vec())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn episode_return(&self) -> i32 {
        self.rtg.first().copied().unwrap_or(0)
    }

    /// State after the last action.
    pub fn final_state(&self) -> Option<GridState> {
        Some(step(*self.states.last()?, *self.actions.last()?))
    }

    /// Index of the first transition that disagrees with `step`, if any.
    pub fn first_inconsistency(&self) -> Option<usize> {
        (1..self.states.len()).find(|&t| step(self.states[t - 1], self.actions[t - 1]) != self.states[t])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if self.actions.len() != n || self.rewards.len() != n || self.rtg.len() != n {
            return Err(Error::InvalidTrajectory("sequence lengths differ".into()));
        }
        if let Some(s) = self.states.iter().find(|s| !s.is_valid()) {
            return Err(Error::InvalidTrajectory(format!("invalid state {s}")));
        }
        if let Some(t) = self.first_inconsistency() {
            return Err(Error::InvalidTrajectory(format!("transition {} -> {t} violates dynamics", t - 1)));
        }
        for t in 0..n {
            let want = reward(self.states[t], step(self.states[t], self.actions[t]));
            if self.rewards[t] != want {
                return Err(Error::InvalidTrajectory(format!("reward at {t} is {} not {want}", self.rewards[t])));
            }
        }
        if self.rtg != suffix_sums(&self.rewards) {
            return Err(Error::InvalidTrajectory("returns-to-go are not suffix sums".into()));
        }
        Ok(())
    }
}

/// One episode of the noisy-rational agent.
pub fn generate_trajectory<R: Rng + ?Sized>(rng: &mut R) -> Trajectory {
    let mut s = sample_initial(rng);
    let mut states = Vec::with_capacity(HORIZON);
    let mut actions = Vec::with_capacity(HORIZON);
    for _ in 0..HORIZON {
        let a = sample_action(s, rng);
        states.push(s);
        actions.push(a);
        s = step(s, a);
    }
    Trajectory::from_states_actions(states, actions)
}

/// Random stream for trajectory `index` of a dataset seeded with `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
}

/// Validation share is one tenth, rounded down, with at least one
/// validation trajectory whenever there are two or more.
pub fn validation_count(n: usize) -> usize {
    match n {
        0 | 1 => 0,
        _ => (n / 10).max(1),
    }
}

impl Dataset {
    /// Splits in file order: the first 90% train, the rest validate.
    pub fn from_trajectories(seed: u64, mut all: Vec<Trajectory>) -> Self {
        let n_val = validation_count(all.len());
        let validation = all.split_off(all.len() - n_val);
        Self {
            seed,
            train: all,
            validation,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.train.iter().chain(&self.validation)
    }
}

pub fn generate_dataset(n: usize, seed: u64) -> Dataset {
    let all = (0..n as u64)
        .map(|i| generate_trajectory(&mut trajectory_rng(seed, i)))
        .collect();
    Dataset::from_trajectories(seed, all)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub agent: Vec<usize>,
    pub key: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<i32>,
    pub rtg: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flags: Option<Vec<String>>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            agent: t.states.iter().map(|s| s.agent.index()).collect(),
            key: t.states.iter().map(|s| s.key.index()).collect(),
            actions: t.actions.iter().map(|a| a.index()).collect(),
            rewards: t.rewards.clone(),
            rtg: t.rtg.clone(),
            flags: None,
        }
    }

    pub fn to_trajectory(&self) -> std::result::Result<Trajectory, String> {
        let n = self.agent.len();
        if [self.key.len(), self.actions.len(), self.rewards.len(), self.rtg.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err("field lengths differ".into());
        }
        let cell = |i: usize| Cell::new(i).ok_or_else(|| format!("cell {i} out of range"));
        let states = self
            .agent
            .iter()
            .zip(&self.key)
            .map(|(&a, &k)| Ok(GridState::new(cell(a)?, cell(k)?)))
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let actions = self
            .actions
            .iter()
            .map(|&a| Action::from_index(a).ok_or_else(|| format!("action {a} out of range")))
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Trajectory {
            states,
            actions,
            rewards: self.rewards.clone(),
            rtg: self.rtg.clone(),
        })
    }
}

pub fn write_records(path: &Path, header: &DatasetHeader, records: &[TrajectoryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(header).expect("header serializes"))?;
    for r in records {
        emit(serde_json::to_string(r).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<(DatasetHeader, Vec<TrajectoryRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let fmt_err = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let first = lines
        .next()
        .ok_or_else(|| fmt_err(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| fmt_err(1, format!("bad header: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| fmt_err(i + 2, e.to_string()))?;
        records.push(rec);
    }
    Ok((header, records))
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let header = DatasetHeader {
        version: 1,
        horizon: HORIZON,
        seed: data.seed,
        n: data.len(),
    };
    let records: Vec<TrajectoryRecord> = data.iter().map(TrajectoryRecord::from_trajectory).collect();
    write_records(path, &header, &records)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (header, records) = read_records(path)?;
    let fmt_err = |line: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        line,
        reason,
    };
    if header.version != 1 || header.horizon != HORIZON {
        return Err(fmt_err(1, format!("unsupported header {header:?}")));
    }
    if header.n != records.len() {
        return Err(fmt_err(1, format!("header says {} records, found {}", header.n, records.len())));
    }
    let mut all = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let t = rec.to_trajectory().map_err(|e| fmt_err(i + 2, e))?;
        if t.len() != HORIZON {
            return Err(fmt_err(i + 2, format!("trajectory length {} != {HORIZON}", t.len())));
        }
        t.validate().map_err(|e| fmt_err(i + 2, e.to_string()))?;
        all.push(t);
    }
    Ok(Dataset::from_trajectories(header.seed, all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_trajectories_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let t = generate_trajectory(&mut rng);
            assert_eq!(t.len(), HORIZON);
            t.validate().unwrap();
            assert_eq!(t.rtg[HORIZON - 1], t.rewards[HORIZON - 1]);
            assert!(t.rtg.iter().all(|r| (-10..=10).contains(r)));
            assert_eq!(Trajectory::replay(t.states[0], &t.actions), t);
        }
    }

    #[test]
    fn split_sizes() {
        let d = generate_dataset(50, 1);
        assert_eq!((d.train.len(), d.validation.len()), (45, 5));
        let d = generate_dataset(500, 1);
        assert_eq!((d.train.len(), d.validation.len()), (450, 50));
        assert_eq!(validation_count(1), 0);
        assert_eq!(validation_count(5), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_dataset(500, 7), generate_dataset(500, 7));
        assert_ne!(generate_dataset(20, 7), generate_dataset(20, 8));
    }

    #[test]
    fn validation_rejects_tampering() {
        let mut t = generate_trajectory(&mut ChaCha8Rng::seed_from_u64(5));
        t.rtg[0] += 1;
        assert!(t.validate().is_err());
    }
}
