mod config;
mod render;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flexibit_core::evaluation::{
    emit_heatmap, normalize_columns, normalized_diagonal, placement, regime_comparison, MatrixBuilder,
};
use flexibit_core::gridworld::{
    generate_dataset, read_dataset, sample_initial, write_dataset, Cell, GridState, TrajectoryRecord, GOAL,
};
use flexibit_core::inference::{backward_infer, rollout, Conditioning, Mode, StateSpec, MAX_RETRIES};
use flexibit_core::masking::TaskKind;
use flexibit_core::model::{init_params, load_checkpoint, save_checkpoint, CheckpointMeta};
use flexibit_core::oracle::{Chain, Evidence};
use flexibit_core::training::{
    finetune, fixed_validation_suite, train_observed, TrainConfig, TrainLog, PAPER_EPOCHS,
    PAPER_FINETUNE_EPOCHS, SUITE_SEED,
};
use flexibit_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "flexibit", version, about = "Masked trajectory modeling on a DoorKey gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of noisy-rational trajectories
    GenData(GenDataArgs),
    /// Train a model from scratch under one masking regime
    Train(TrainArgs),
    /// Continue training a checkpoint on one task
    Finetune(FinetuneArgs),
    /// Fill the cross-task loss matrix from a directory of checkpoints
    Eval(EvalArgs),
    /// Roll a model out, optionally conditioned, or infer a history backwards
    Rollout(RolloutArgs),
    /// Exact posterior marginals under the data-generating process
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing file
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Overrides {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Full-size epoch budget
    #[arg(long)]
    paper_scale: bool,
    /// Training log CSV; defaults to the checkpoint path with `.csv`
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `.fxbt` checkpoints
    #[arg(long)]
    ckpts: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SUITE_SEED)]
    suite_seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RolloutMode {
    Bc,
    Goal,
    Reward,
    Waypoint,
    Backward,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    mode: RolloutMode,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    rtg: Option<i32>,
    /// Goal cell, `cell` or `agent/key`
    #[arg(long, value_parser = parse_spec)]
    goal: Option<StateSpec>,
    /// Comma-separated `t:cell` or `t:agent/key`
    #[arg(long, value_parser = parse_waypoints)]
    waypoints: Option<Waypoints>,
    /// Final state for backward mode, `agent/key`
    #[arg(long = "final", value_parser = parse_state)]
    final_state: Option<GridState>,
    /// Initial state, `agent/key`; sampled when absent
    #[arg(long, value_parser = parse_state)]
    start: Option<GridState>,
    /// Sample actions instead of taking the most probable one
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    seed: u64,
    /// JSON-lines dump
    #[arg(long, default_value = "rollout.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// e.g. `s0=agent:2,key:5 a1=Right rtg=6`; empty gives the prior
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    query: String,
}

#[derive(Clone)]
struct Waypoints(Vec<(usize, StateSpec)>);

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_cell(s: &str) -> Result<Cell, String> {
    s.trim()
        .parse::<usize>()
        .ok()
        .and_then(Cell::new)
        .ok_or_else(|| format!("`{s}` is not a cell in 0..16"))
}

fn parse_state(s: &str) -> Result<GridState, String> {
    let (a, k) = s.split_once('/').ok_or_else(|| format!("expected agent/key, got `{s}`"))?;
    Ok(GridState::new(parse_cell(a)?, parse_cell(k)?))
}

/// A bare cell inside the locked room implies the key is held; elsewhere
/// the key stays unobserved.
fn parse_spec(s: &str) -> Result<StateSpec, String> {
    if s.contains('/') {
        return parse_state(s).map(StateSpec::from);
    }
    let agent = parse_cell(s)?;
    Ok(StateSpec {
        agent,
        key: agent.is_locked().then_some(agent),
    })
}

fn parse_waypoints(s: &str) -> Result<Waypoints, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (t, c) = p.split_once(':').ok_or_else(|| format!("expected t:cell, got `{p}`"))?;
            let t = t.trim().parse().map_err(|_| format!("bad timestep in `{p}`"))?;
            Ok((t, parse_spec(c)?))
        })
        .collect::<Result<_, _>>()
        .map(Waypoints)
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) | Error::ConfigMismatch(_) => 1,
            Error::UnknownTask(_) | Error::InvalidArgument(_) => 2,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> Outcome {
    if a.n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    if a.out.exists() && !a.force {
        return Err(Failure::runtime(format!(
            "{} exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    let data = generate_dataset(a.n, a.seed);
    write_dataset(&a.out, &data)?;
    println!(
        "wrote {} trajectories ({} train, {} validation) to {}",
        data.len(),
        data.train.len(),
        data.validation.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve(base: TrainConfig, opts: &Overrides, paper_epochs: usize) -> Result<RunConfig, Failure> {
    let mut c = RunConfig::load(base, opts.config.as_deref()).map_err(Failure::usage)?;
    if opts.paper_scale {
        c.train.max_epochs = paper_epochs;
    }
    if let Some(s) = opts.seed {
        c.train.seed = s;
    }
    if let Some(e) = opts.epochs {
        c.train.max_epochs = e;
    }
    if let Some(lr) = opts.lr {
        c.train.adam.lr = lr;
    }
    c.model.validate().map_err(|e| Failure::usage(e.to_string()))?;
    c.train.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(c)
}

fn run_training(
    opts: &Overrides,
    out: &Path,
    log: (TrainLog, flexibit_core::model::ModelParams<f32>),
    meta: CheckpointMeta,
) -> Outcome {
    let (log, params) = log;
    save_checkpoint(out, &params, &meta)?;
    let log_path = opts.log.clone().unwrap_or_else(|| out.with_extension("csv"));
    log.write_csv(&log_path, false)?;
    println!(
        "best validation CE {:.4} at epoch {}{}; checkpoint {}, log {}",
        log.best_val,
        log.best_epoch,
        if log.stopped_early { " (stopped early)" } else { "" },
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn progress(quiet: bool) -> impl FnMut(&flexibit_core::training::LogRow) {
    move |row| {
        if !quiet && (row.epoch % 25 == 0) {
            eprintln!("epoch {:>5}  train {:.4}  val {:.4}", row.epoch, row.train_ce, row.val_ce);
        }
    }
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let c = resolve(TrainConfig::desk(a.task, 0), &a.opts, PAPER_EPOCHS)?;
    let data = read_dataset(&a.data)?;
    let init = init_params::<f32>(&c.model, c.train.seed)?;
    let (params, log) = train_observed(init, &data, &c.train, &mut progress(a.opts.quiet))?;
    let meta = CheckpointMeta {
        regime: a.task.name().into(),
        seed: c.train.seed,
        epochs: log.rows.last().map_or(0, |r| r.epoch),
        finetuned_from: None,
        finetune_task: None,
    };
    run_training(&a.opts, &a.out, (log, params), meta)
}

fn cmd_finetune(a: FinetuneArgs) -> Outcome {
    let (pre, base) = load_checkpoint(&a.from, None)?;
    let mut c = resolve(TrainConfig::finetune(a.task, base.seed), &a.opts, PAPER_FINETUNE_EPOCHS)?;
    c.model = pre.config;
    let data = read_dataset(&a.data)?;
    let (params, log) = finetune(pre, &data, &c.train)?;
    let meta = CheckpointMeta {
        regime: format!("{}+ft", base.regime),
        seed: c.train.seed,
        epochs: log.rows.last().map_or(0, |r| r.epoch),
        finetuned_from: Some(base.regime),
        finetune_task: Some(a.task.name().into()),
    };
    run_training(&a.opts, &a.out, (log, params), meta)
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let entries = std::fs::read_dir(&a.ckpts).map_err(|e| Failure::from(Error::Io {
        path: a.ckpts.clone(),
        source: e,
    }))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fxbt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::runtime(format!("no .fxbt checkpoints in {}", a.ckpts.display())));
    }
    let data = read_dataset(&a.data)?;
    let suite = fixed_validation_suite(&data, a.suite_seed)?;
    let mut builder = MatrixBuilder::default();
    for p in &paths {
        let (params, meta) = load_checkpoint(p, None)?;
        let (row, columns) = placement(&meta)?;
        builder.add_model(&params, &suite, &row, &columns)?;
        eprintln!("evaluated {} as {row}", p.display());
    }
    let matrix = builder.build();
    let files = emit_heatmap(&matrix, &a.out)?;
    let normalized = normalize_columns(&matrix)?;
    let report = regime_comparison(&matrix);
    let mut text = format!("{report}\n");
    for (task, v) in normalized_diagonal(&normalized) {
        text.push_str(&format!("diagonal {}: {v:.4}\n", task.name()));
    }
    let report_path = a.out.join("report.txt");
    std::fs::write(&report_path, &text).map_err(|e| Failure::from(Error::Io {
        path: report_path.clone(),
        source: e,
    }))?;
    println!("{matrix}\n{text}");
    println!(
        "wrote {}, {}, {}, {}",
        files.raw_csv.display(),
        files.normalized_csv.display(),
        files.svg.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> Outcome {
    let (params, _) = load_checkpoint(&a.ckpt, None)?;
    let ctx = params.config.context;
    let steps = a.steps.unwrap_or(ctx);
    if steps == 0 || steps > ctx {
        return Err(Failure::usage(format!("--steps must be in 1..={ctx}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut cond = Conditioning::default();
    match a.mode {
        RolloutMode::Bc | RolloutMode::Backward => {}
        RolloutMode::Goal => {
            cond.goal = Some(a.goal.unwrap_or(StateSpec {
                agent: GOAL,
                key: Some(GOAL),
            }))
        }
        RolloutMode::Reward => {
            cond.rtg0 = Some(a.rtg.ok_or_else(|| Failure::usage("--mode reward requires --rtg"))?)
        }
        RolloutMode::Waypoint => {
            cond.waypoints = a
                .waypoints
                .clone()
                .ok_or_else(|| Failure::usage("--mode waypoint requires --waypoints"))?
                .0
        }
    }
    let (tr, flags, forced) = if a.mode == RolloutMode::Backward {
        let last = a
            .final_state
            .ok_or_else(|| Failure::usage("--mode backward requires --final agent/key"))?;
        let h = backward_infer(&params, last, steps, &mut rng, MAX_RETRIES)?;
        (h.trajectory, h.flags, h.forced)
    } else {
        let start = a.start.unwrap_or_else(|| sample_initial(&mut rng));
        let mode = if a.sample { Mode::Sample } else { Mode::Argmax };
        (rollout(&params, start, &cond, steps, mode, &mut rng)?, Vec::new(), Vec::new())
    };
    print!("{}", render::trajectory(&tr));
    if !flags.is_empty() {
        println!("flags: {}", flags.join(", "));
    }
    let spec = |s: &StateSpec| json!({"agent": s.agent.index(), "key": s.key.map(Cell::index)});
    let header = json!({
        "mode": a.mode.to_possible_value().unwrap().get_name(),
        "seed": a.seed,
        "steps": steps,
        "rtg0": cond.rtg0,
        "goal": cond.goal.as_ref().map(spec),
        "waypoints": cond.waypoints.iter().map(|(t, s)| json!({"t": t, "state": spec(s)})).collect::<Vec<_>>(),
        "forced": forced,
    });
    let mut rec = TrajectoryRecord::from_trajectory(&tr);
    if !flags.is_empty() {
        rec.flags = Some(flags);
    }
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
        writeln!(f, "{header}")?;
        writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        f.flush()
    };
    write().map_err(|e| Failure::from(Error::Io {
        path: a.out.clone(),
        source: e,
    }))?;
    Ok(())
}

fn top(p: &[f64]) -> String {
    p.iter()
        .enumerate()
        .filter(|(_, &v)| v >= 5e-4)
        .map(|(i, v)| format!("{i}:{v:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_oracle(a: OracleArgs) -> Outcome {
    let ev: Evidence = a.query.parse()?;
    let m = Chain::build().posterior_marginals(&ev)?;
    println!("evidence: {ev}");
    println!("log-likelihood: {:.6}", m.log_likelihood);
    for t in 0..m.horizon() {
        println!("t={t}");
        println!("  agent  {}", top(&m.agent[t]));
        println!("  key    {}", top(&m.key[t]));
        let acts: Vec<String> = flexibit_core::gridworld::Action::ALL
            .iter()
            .map(|x| format!("{x}:{:.3}", m.action[t][x.index()]))
            .collect();
        println!("  action {}", acts.join(" "));
    }
    let h = m.horizon() as i32;
    let ret: Vec<String> = m
        .rtg0
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 5e-4)
        .map(|(i, v)| format!("{}:{v:.3}", i as i32 - h))
        .collect();
    println!("return {}", ret.join(" "));
    println!("expected return {:.4}", m.expected_return());
    Ok(())
}
