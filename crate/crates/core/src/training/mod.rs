//! Epoch loop with a fresh mask per trajectory per epoch, best-validation
//! checkpointing and patience-based stopping.

mod adam;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use flexibit_tensor::{Scalar, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gridworld::{Dataset, Trajectory};
use crate::masking::{apply_pattern, sample_pattern, MaskedExample, TaskKind, TaskSpec};
use crate::model::{forward_loss, LossBreakdown, MaskedBatch, ModelParams};
use crate::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};

pub const DESK_EPOCHS: usize = 300;
pub const PAPER_EPOCHS: usize = 6000;
pub const DESK_FINETUNE_EPOCHS: usize = 100;
pub const PAPER_FINETUNE_EPOCHS: usize = 1000;
pub const FINETUNE_LR: f64 = 5e-5;
pub const PATTERNS_PER_TRAJECTORY: usize = 4;
/// Default seed of the frozen validation suite, shared by every model.
pub const SUITE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub eval_interval: usize,
    /// Epochs between evaluations on all eight task suites; 0 evaluates
    /// them only for the returned parameters.
    pub task_eval_interval: usize,
    pub task: TaskSpec,
    pub seed: u64,
    pub suite_seed: u64,
}

impl TrainConfig {
    pub fn desk(task: TaskKind, seed: u64) -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 100,
            max_epochs: DESK_EPOCHS,
            patience: 50,
            eval_interval: 1,
            task_eval_interval: 0,
            task: TaskSpec::new(task),
            seed,
            suite_seed: SUITE_SEED,
        }
    }

    pub fn finetune(task: TaskKind, seed: u64) -> Self {
        let mut c = Self::desk(task, seed);
        c.adam.lr = FINETUNE_LR;
        c.max_epochs = DESK_FINETUNE_EPOCHS;
        c
    }

    /// Epoch caps of the full-size experiments.
    pub fn paper_scale(mut self) -> Self {
        self.max_epochs = if self.adam.lr == FINETUNE_LR {
            PAPER_FINETUNE_EPOCHS
        } else {
            PAPER_EPOCHS
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidArgument("batch size, patience and eval interval must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        self.task.validate()
    }
}

/// Frozen masked validation examples per task, reused by every model.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSuite {
    pub seed: u64,
    pub tasks: Vec<(TaskKind, Vec<MaskedExample>)>,
}

impl ValidationSuite {
    pub fn get(&self, kind: TaskKind) -> &[MaskedExample] {
        self.tasks
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }
}

pub fn fixed_validation_suite(dataset: &Dataset, seed: u64) -> Result<ValidationSuite> {
    suite_for(&dataset.validation, seed)
}

pub fn suite_for(trajectories: &[Trajectory], seed: u64) -> Result<ValidationSuite> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let mut tasks = Vec::new();
    for (i, kind) in TaskKind::EVERY.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let spec = TaskSpec::new(kind);
        let mut examples = Vec::with_capacity(trajectories.len() * PATTERNS_PER_TRAJECTORY);
        for t in trajectories {
            for _ in 0..PATTERNS_PER_TRAJECTORY {
                examples.push(apply_pattern(t, &sample_pattern(&spec, &mut rng))?);
            }
        }
        tasks.push((kind, examples));
    }
    Ok(ValidationSuite { seed, tasks })
}

/// Pools batch results, weighting each cross-entropy by its target count.
#[derive(Debug, Clone, Copy, Default)]
struct Pooled {
    agent: f64,
    key: f64,
    action: f64,
    total: f64,
    states: usize,
    actions: usize,
    batches: usize,
}

impl Pooled {
    fn add(&mut self, b: &LossBreakdown) {
        self.agent += b.agent_ce * b.state_targets as f64;
        self.key += b.key_ce * b.state_targets as f64;
        self.action += b.action_ce * b.action_targets as f64;
        self.total += b.total;
        self.states += b.state_targets;
        self.actions += b.action_targets;
        self.batches += 1;
    }

    fn finish(&self) -> LossBreakdown {
        let div = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        LossBreakdown {
            total: div(self.total, self.batches),
            agent_ce: div(self.agent, self.states),
            key_ce: div(self.key, self.states),
            action_ce: div(self.action, self.actions),
            state_targets: self.states,
            action_targets: self.actions,
        }
    }
}

/// Scores `examples` in batches; cross-entropies are pooled over all targets.
pub fn evaluate_examples<F: Scalar>(
    params: &ModelParams<F>,
    examples: &[MaskedExample],
    batch_size: usize,
) -> Result<LossBreakdown> {
    let mut pooled = Pooled::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = MaskedBatch::from_examples(chunk)?;
        if batch.target_count() == 0 {
            continue;
        }
        pooled.add(&crate::model::evaluate_batch(params, &batch)?);
    }
    if pooled.batches == 0 {
        return Err(Error::NoTargets);
    }
    Ok(pooled.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Weighted training loss, mean over the epoch's batches.
    pub train_loss: f64,
    /// Training cross-entropy per predicted token.
    pub train_ce: f64,
    /// Validation cross-entropy per predicted token on the training task.
    pub val_ce: f64,
    /// Per-token validation cross-entropy on each evaluation task, in
    /// [`TaskKind::SINGLE`] order, when measured at this row.
    pub tasks: Option<[f64; 8]>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub config: TrainConfig,
    /// All-task validation of the returned parameters.
    pub final_tasks: [f64; 8],
}

impl TrainLog {
    /// CSV with one row per validation point. Wall-clock time is left out
    /// unless asked for, so reruns produce identical files.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("epoch,train_loss,train_ce,val_ce");
        for k in TaskKind::SINGLE {
            write!(out, ",{k}").unwrap();
        }
        if with_timing {
            out.push_str(",wall_secs");
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{:.6},{:.6},{:.6}", r.epoch, r.train_loss, r.train_ce, r.val_ce).unwrap();
            for i in 0..8 {
                match r.tasks {
                    Some(t) => write!(out, ",{:.6}", t[i]).unwrap(),
                    None => out.push(','),
                }
            }
            if with_timing {
                write!(out, ",{:.3}", r.wall_secs).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path, with_timing: bool) -> Result<()> {
        std::fs::write(path, self.to_csv(with_timing)).map_err(|e| Error::io(path, e))
    }
}

fn all_tasks<F: Scalar>(params: &ModelParams<F>, suite: &ValidationSuite, batch: usize) -> Result<[f64; 8]> {
    let mut out = [0.0; 8];
    for (i, k) in TaskKind::SINGLE.into_iter().enumerate() {
        out[i] = evaluate_examples(params, suite.get(k), batch)?.token_ce();
    }
    Ok(out)
}

pub fn train(init: ModelParams<f32>, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainLog)> {
    train_observed(init, dataset, cfg, &mut |_| {})
}

/// As [`train`], calling `observe` after every validation point.
pub fn train_observed(
    init: ModelParams<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&LogRow),
) -> Result<(ModelParams<f32>, TrainLog)> {
    cfg.validate()?;
    init.config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if cfg.task.snippet_len != init.config.context {
        return Err(Error::InvalidArgument(format!(
            "snippet length {} must equal the model context {}",
            cfg.task.snippet_len, init.config.context
        )));
    }
    let suite = fixed_validation_suite(dataset, cfg.suite_seed)?;
    let val_set = suite.get(cfg.task.kind);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut params = init;
    let mut state = AdamState::new(&params.tensors);
    let mut best = params.clone();
    let mut best_val = evaluate_examples(&params, val_set, cfg.batch_size)?.token_ce();
    let mut best_epoch = 0;
    let mut rows = vec![LogRow {
        epoch: 0,
        train_loss: f64::NAN,
        train_ce: f64::NAN,
        val_ce: best_val,
        tasks: None,
        wall_secs: 0.0,
    }];
    observe(&rows[0]);
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut pooled = Pooled::default();
        for chunk in order.chunks(cfg.batch_size) {
            let examples = chunk
                .iter()
                .map(|&i| apply_pattern(&dataset.train[i], &sample_pattern(&cfg.task, &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let batch = MaskedBatch::from_examples(&examples)?;
            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape, true);
            let (loss, b) = forward_loss(&mut tape, &bound, &batch)?;
            tape.backward(loss)?;
            let grads: Vec<&[f32]> = bound.values.iter().map(|&v| tape.grad(v).expect("trainable")).collect();
            adam_step(&mut params.tensors, &grads, &mut state, &cfg.adam, &params.names)?;
            pooled.add(&b);
        }
        if epoch % cfg.eval_interval != 0 && epoch != cfg.max_epochs {
            continue;
        }
        let val = evaluate_examples(&params, val_set, cfg.batch_size)?.token_ce();
        let tr = pooled.finish();
        let tasks = (cfg.task_eval_interval > 0 && epoch % cfg.task_eval_interval == 0)
            .then(|| all_tasks(&params, &suite, cfg.batch_size))
            .transpose()?;
        let row = LogRow {
            epoch,
            train_loss: tr.total,
            train_ce: tr.token_ce(),
            val_ce: val,
            tasks,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        observe(&row);
        rows.push(row);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let final_tasks = all_tasks(&best, &suite, cfg.batch_size)?;
    Ok((
        best,
        TrainLog {
            rows,
            best_epoch,
            best_val,
            stopped_early,
            config: *cfg,
            final_tasks,
        },
    ))
}

/// Continues training `pretrained` on `cfg.task`, normally with the
/// fine-tune learning rate and epoch budget.
pub fn finetune(
    pretrained: ModelParams<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    let layout = pretrained.config.layout();
    let compatible = layout.len() == pretrained.tensors.len()
        && layout
            .iter()
            .zip(pretrained.names.iter().zip(&pretrained.tensors))
            .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
    if !compatible {
        return Err(Error::ConfigMismatch("parameters do not match their config layout".into()));
    }
    train(pretrained, dataset, cfg)
}
