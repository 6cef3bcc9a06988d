//! Cross-task loss matrix, column normalization, the regime comparison and
//! behavioral success rates.

mod heatmap;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use flexibit_tensor::Scalar;
use rand::Rng;

use crate::gridworld::{sample_categorical, sample_initial, step, Action, GridState, NUM_ACTIONS, GOAL, HORIZON};
use crate::inference::{rollout_batch, Conditioning, Mode};
use crate::masking::TaskKind;
use crate::model::{CheckpointMeta, ModelParams};
use crate::oracle::Chain;
use crate::training::{evaluate_examples, ValidationSuite};
use crate::{Error, Result};

pub use heatmap::{emit_heatmap, heatmap_svg, HeatmapFiles};

pub const NORMALIZE_EPS: f64 = 1e-4;
pub const ALL_ROW: &str = "all";
pub const RND_ROW: &str = "rnd";
pub const RND_FT_ROW: &str = "rnd+ft";
const EVAL_BATCH: usize = 100;

/// The eleven regimes in display order.
pub fn standard_rows() -> Vec<String> {
    let mut rows: Vec<String> = TaskKind::SINGLE.iter().map(|k| k.name().to_string()).collect();
    rows.extend([ALL_ROW, RND_ROW, RND_FT_ROW].map(String::from));
    rows
}

/// Mean raw CE per (training regime, evaluation task). Missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<TaskKind>,
    pub values: Vec<Vec<f64>>,
}

impl LossMatrix {
    pub fn empty(rows: Vec<String>, columns: Vec<TaskKind>) -> Self {
        let values = vec![vec![f64::NAN; columns.len()]; rows.len()];
        Self { rows, columns, values }
    }

    pub fn row_index(&self, row: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == row)
    }

    pub fn column_index(&self, task: TaskKind) -> Option<usize> {
        self.columns.iter().position(|&c| c == task)
    }

    pub fn get(&self, row: &str, task: TaskKind) -> Option<f64> {
        Some(self.values[self.row_index(row)?][self.column_index(task)?])
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |r| r[j])
    }

    /// Header `regime,<task>...`, one line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime");
        for c in &self.columns {
            s.push(',');
            s.push_str(c.name());
        }
        s.push('\n');
        for (r, vals) in self.rows.iter().zip(&self.values) {
            s.push_str(r);
            for v in vals {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| Error::Format {
            path: "<matrix csv>".into(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty".into()))?;
        let mut fields = header.split(',');
        if fields.next() != Some("regime") {
            return Err(bad(1, "header must start with `regime`".into()));
        }
        let columns = fields.map(str::parse).collect::<Result<Vec<TaskKind>>>()?;
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut f = line.split(',');
            rows.push(f.next().unwrap_or_default().to_string());
            let vals = f
                .map(|v| v.parse::<f64>().map_err(|e| bad(i + 2, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != columns.len() {
                return Err(bad(i + 2, format!("{} values for {} columns", vals.len(), columns.len())));
            }
            values.push(vals);
        }
        Ok(Self { rows, columns, values })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| match e {
            Error::Format { line, reason, .. } => Error::Format {
                path: path.into(),
                line,
                reason,
            },
            other => other,
        })
    }
}

impl fmt::Display for LossMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", "")?;
        for c in &self.columns {
            write!(f, " {:>8}", c.name())?;
        }
        writeln!(f)?;
        for (r, vals) in self.rows.iter().zip(&self.values) {
            write!(f, "{r:>8}")?;
            for v in vals {
                write!(f, " {v:>8.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Raw (unweighted) cross-entropy on the suite's examples for `task`.
pub fn evaluate_cell<F: Scalar>(params: &ModelParams<F>, suite: &ValidationSuite, task: TaskKind) -> Result<f64> {
    Ok(evaluate_examples(params, suite.get(task), EVAL_BATCH)?.token_ce())
}

/// Matrix row a checkpoint belongs to, and the columns it fills. Fine-tuned
/// models only fill the column of the task they were tuned on.
pub fn placement(meta: &CheckpointMeta) -> Result<(String, Vec<TaskKind>)> {
    match (&meta.finetuned_from, &meta.finetune_task) {
        (Some(base), Some(task)) => Ok((format!("{base}+ft"), vec![task.parse()?])),
        _ => Ok((meta.regime.clone(), TaskKind::SINGLE.to_vec())),
    }
}

/// Averages repeated (row, column) observations, typically across seeds.
#[derive(Debug, Default, Clone)]
pub struct MatrixBuilder {
    cells: BTreeMap<(String, usize), (f64, usize)>,
}

impl MatrixBuilder {
    pub fn add(&mut self, row: &str, task: TaskKind, value: f64) {
        let j = TaskKind::SINGLE.iter().position(|&k| k == task).expect("evaluation task");
        let e = self.cells.entry((row.to_string(), j)).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    pub fn add_model<F: Scalar>(
        &mut self,
        params: &ModelParams<F>,
        suite: &ValidationSuite,
        row: &str,
        columns: &[TaskKind],
    ) -> Result<()> {
        for &c in columns {
            let v = evaluate_cell(params, suite, c)?;
            self.add(row, c, v);
        }
        Ok(())
    }

    /// Standard rows first, then any other labels alphabetically.
    pub fn build(&self) -> LossMatrix {
        let mut rows = standard_rows();
        for (r, _) in self.cells.keys() {
            if !rows.contains(r) {
                rows.push(r.clone());
            }
        }
        let mut m = LossMatrix::empty(rows, TaskKind::SINGLE.to_vec());
        for ((r, j), (sum, n)) in &self.cells {
            let i = m.row_index(r).unwrap();
            m.values[i][*j] = sum / *n as f64;
        }
        m
    }
}

/// Divides each column by its smallest entry, guarded below by
/// [`NORMALIZE_EPS`]. NaN cells stay NaN.
pub fn normalize_columns(m: &LossMatrix) -> Result<LossMatrix> {
    let mut out = m.clone();
    for (j, task) in m.columns.iter().enumerate() {
        let present: Vec<f64> = m.column(j).filter(|v| !v.is_nan()).collect();
        if present.is_empty() || present.iter().all(|&v| v.abs() <= NORMALIZE_EPS) {
            return Err(Error::DegenerateColumn(task.name().into()));
        }
        let min = present.iter().copied().fold(f64::INFINITY, f64::min).max(NORMALIZE_EPS);
        for row in &mut out.values {
            row[j] /= min;
        }
    }
    Ok(out)
}

/// Column-wise win counts behind the four regime hypotheses. A tie counts
/// as a win for the row being tested.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub columns: usize,
    pub rnd_vs_specialized: usize,
    pub all_vs_specialized: usize,
    pub ft_vs_specialized: usize,
    pub rnd_vs_all: usize,
    pub ft_vs_rnd: usize,
    pub ft_vs_all: usize,
    /// Fine-tuned within 5% of the specialized model.
    pub ft_near_specialized: usize,
    pub h1: bool,
    pub h2: bool,
    pub h3: bool,
    pub h4: bool,
}

fn wins(m: &LossMatrix, row: &str, against: impl Fn(TaskKind) -> Option<f64>, ratio: f64) -> usize {
    m.columns
        .iter()
        .filter(|&&c| match (m.get(row, c), against(c)) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => a <= ratio * b,
            _ => false,
        })
        .count()
}

pub fn regime_comparison(m: &LossMatrix) -> HypothesisReport {
    let spec = |c: TaskKind| m.get(c.name(), c);
    let row = |r: &'static str| move |c: TaskKind| m.get(r, c);
    let n = m.columns.len();
    let majority = n / 2 + 1;
    let rnd_vs_specialized = wins(m, RND_ROW, spec, 1.0);
    let all_vs_specialized = wins(m, ALL_ROW, spec, 1.0);
    let ft_vs_specialized = wins(m, RND_FT_ROW, spec, 1.0);
    let rnd_vs_all = wins(m, RND_ROW, row(ALL_ROW), 1.0);
    let ft_vs_rnd = wins(m, RND_FT_ROW, row(RND_ROW), 1.0);
    let ft_vs_all = wins(m, RND_FT_ROW, row(ALL_ROW), 1.0);
    HypothesisReport {
        columns: n,
        rnd_vs_specialized,
        all_vs_specialized,
        ft_vs_specialized,
        rnd_vs_all,
        ft_vs_rnd,
        ft_vs_all,
        ft_near_specialized: wins(m, RND_FT_ROW, spec, 1.05),
        h1: 2 * ft_vs_specialized >= n,
        h2: rnd_vs_specialized.max(all_vs_specialized) >= 1,
        h3: rnd_vs_all >= majority,
        h4: ft_vs_rnd >= majority && ft_vs_all >= majority,
    }
}

impl fmt::Display for HypothesisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.columns;
        writeln!(f, "H1 rnd+ft <= specialized: {} ({}/{n})", self.h1, self.ft_vs_specialized)?;
        writeln!(
            f,
            "H2 multi-task <= specialized: {} (all {}/{n}, rnd {}/{n})",
            self.h2, self.all_vs_specialized, self.rnd_vs_specialized
        )?;
        writeln!(f, "H3 rnd <= all: {} ({}/{n})", self.h3, self.rnd_vs_all)?;
        writeln!(
            f,
            "H4 rnd+ft <= rnd, all: {} ({}/{n}, {}/{n})",
            self.h4, self.ft_vs_rnd, self.ft_vs_all
        )?;
        writeln!(f, "RND wins {}/{n}", self.rnd_vs_specialized)?;
        write!(f, "rnd+ft within 5% of specialized: {}/{n}", self.ft_near_specialized)
    }
}

/// Normalized diagonal entry of each specialized model.
pub fn normalized_diagonal(normalized: &LossMatrix) -> Vec<(TaskKind, f64)> {
    normalized
        .columns
        .iter()
        .filter_map(|&c| Some((c, normalized.get(c.name(), c)?)))
        .collect()
}

fn reached_goal(last: GridState, a: Action) -> bool {
    step(last, a).agent == GOAL
}

/// Fraction of model rollouts whose agent ends on the goal after the last action.
pub fn success_rate<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    n: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    let mut hits = 0usize;
    let mut left = n;
    while left > 0 {
        let chunk = left.min(500);
        let initial: Vec<GridState> = (0..chunk).map(|_| sample_initial(rng)).collect();
        let steps = params.config.context;
        for tr in rollout_batch(params, &initial, &Conditioning::default(), steps, mode, rng)? {
            hits += reached_goal(tr.states[steps - 1], tr.actions[steps - 1]) as usize;
        }
        left -= chunk;
    }
    Ok(hits as f64 / n as f64)
}

/// Monte-Carlo success rate of a state-conditioned policy over `HORIZON` steps.
pub fn policy_success_rate<R: Rng + ?Sized>(
    policy: impl Fn(GridState) -> [f64; NUM_ACTIONS],
    n: usize,
    rng: &mut R,
) -> f64 {
    let mut hits = 0usize;
    for _ in 0..n {
        let mut s = sample_initial(rng);
        for _ in 0..HORIZON {
            s = step(s, Action::ALL[sample_categorical(&policy(s), rng)]);
        }
        hits += (s.agent == GOAL) as usize;
    }
    hits as f64 / n.max(1) as f64
}

/// Exact success probability of a policy, from the oracle chain.
pub fn oracle_success_rate(policy: impl Fn(GridState) -> [f64; NUM_ACTIONS]) -> f64 {
    Chain::with_policy(policy).success_probability()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{noisy_policy, uniform_policy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(values: Vec<Vec<f64>>) -> LossMatrix {
        let rows = (0..values.len()).map(|i| format!("r{i}")).collect();
        LossMatrix {
            rows,
            columns: TaskKind::SINGLE[..values[0].len()].to_vec(),
            values,
        }
    }

    #[test]
    fn column_scaled_by_minimum() {
        let n = normalize_columns(&matrix(vec![vec![2.0], vec![3.0], vec![4.0]])).unwrap();
        assert_eq!(n.values, vec![vec![1.0], vec![1.5], vec![2.0]]);
        let same = normalize_columns(&matrix(vec![vec![0.7], vec![0.7]])).unwrap();
        assert_eq!(same.values, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn near_zero_column_uses_guard_and_zero_column_fails() {
        let n = normalize_columns(&matrix(vec![vec![1e-6], vec![2e-3]])).unwrap();
        assert!((n.values[1][0] - 20.0).abs() < 1e-9);
        let err = normalize_columns(&matrix(vec![vec![0.0], vec![5e-5]]));
        assert!(matches!(err, Err(Error::DegenerateColumn(ref c)) if c == "bc"));
    }

    #[test]
    fn csv_round_trip() {
        let m = matrix(vec![vec![0.1, 1.0 / 3.0], vec![2.5, f64::NAN]]);
        let back = LossMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.values[0], m.values[0]);
        assert!(back.values[1][1].is_nan());
    }

    fn standard(f: impl Fn(&str, usize) -> f64) -> LossMatrix {
        let rows = standard_rows();
        let values = rows.iter().map(|r| (0..8).map(|j| f(r, j)).collect()).collect();
        LossMatrix {
            rows,
            columns: TaskKind::SINGLE.to_vec(),
            values,
        }
    }

    #[test]
    fn fine_tuned_dominance() {
        let m = standard(|r, _| if r == RND_FT_ROW { 1.0 } else { 2.0 });
        let rep = regime_comparison(&m);
        assert!(rep.h1 && rep.h4);
        assert_eq!(rep.ft_vs_specialized, 8);
    }

    #[test]
    fn rnd_wins_are_counted() {
        let m = standard(|r, j| match r {
            RND_ROW if j < 4 => 1.0,
            RND_ROW => 3.0,
            _ => 2.0,
        });
        let rep = regime_comparison(&m);
        assert_eq!(rep.rnd_vs_specialized, 4);
        assert!(rep.to_string().contains("RND wins 4/8"));
    }

    #[test]
    fn builder_averages_seeds() {
        let mut b = MatrixBuilder::default();
        b.add("bc", TaskKind::Bc, 1.0);
        b.add("bc", TaskKind::Bc, 2.0);
        let m = b.build();
        assert_eq!(m.get("bc", TaskKind::Bc), Some(1.5));
        assert!(m.get("bc", TaskKind::Goal).unwrap().is_nan());
        assert_eq!(m.rows.len(), 11);
    }

    #[test]
    fn placement_of_fine_tuned_checkpoint() {
        let meta = CheckpointMeta {
            regime: "rnd".into(),
            finetuned_from: Some("rnd".into()),
            finetune_task: Some("goal".into()),
            ..Default::default()
        };
        assert_eq!(placement(&meta).unwrap(), (RND_FT_ROW.to_string(), vec![TaskKind::Goal]));
    }

    #[test]
    fn scripted_agent_beats_uniform() {
        let agent = oracle_success_rate(noisy_policy);
        let uniform = oracle_success_rate(uniform_policy);
        assert!(agent > uniform + 0.2, "{agent} vs {uniform}");
        let mc = policy_success_rate(noisy_policy, 4000, &mut ChaCha8Rng::seed_from_u64(0));
        let sigma = (agent * (1.0 - agent) / 4000.0).sqrt();
        assert!((mc - agent).abs() < 3.0 * sigma, "{mc} vs {agent}");
    }
}
