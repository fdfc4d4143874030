use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use dualsource::gradsuite::{run_suite, DEFAULT_SEEDS, GRAD_TOLERANCE};
use dualsource::io::results::{load_results, write_loss_csv, write_results};
use dualsource::io::synth::{synth_sequence, Scenario, SynthOptions};
use dualsource::io::{evaluate, load_sequence, save_sequence};
use dualsource::training::{train_toy, TrainOptions};
use dualsource::{validate_config, EdgeUpdate, EngineConfig, Model, Tracker};

/// Environment variable naming a config file, used when `--config` is absent.
const CONFIG_ENV: &str = "DUALSOURCE_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "dualsource", version, about = "Online multi-person pose tracking with dual-source attention")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// JSON engine configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint with trained weights.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Appearance/geometry gate in [0, 1].
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Duplicate threshold in [0, 1].
    #[arg(long, global = true)]
    tau_dup: Option<f64>,
    /// Unmatched frames before a track is closed.
    #[arg(long, global = true)]
    tau_age: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; standard output when omitted (required by `train`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Track a sequence and write one JSON result per frame.
    Track {
        sequence: PathBuf,
        /// Ignore appearance vectors and embed crops with the toy backbone.
        #[arg(long)]
        backbone: bool,
    },
    /// Train on labelled sequences; writes a checkpoint and a loss CSV.
    Train {
        #[arg(required = true)]
        sequences: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long)]
        lr: Option<f64>,
        /// Use the linear null-column term in the match loss.
        #[arg(long)]
        literal_null_term: bool,
        /// Feed gated attention weights instead of gated logits to the edge update.
        #[arg(long)]
        gated_weights: bool,
        /// Loss curve path; defaults to the checkpoint path with `.loss.csv` appended.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score tracking results against a labelled sequence.
    Eval {
        results: PathBuf,
        ground_truth: PathBuf,
        /// Sequence that was tracked, if different from the ground truth file.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Generate a synthetic labelled sequence.
    Synth {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        gap: Option<usize>,
    },
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<dualsource::Error> for Failure {
    fn from(e: dualsource::Error) -> Self {
        match e {
            dualsource::Error::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::Track { sequence, backbone } => track(g, sequence, *backbone),
        Command::Train {
            sequences,
            iterations,
            lr,
            literal_null_term,
            gated_weights,
            loss_csv,
        } => {
            let mut opts = TrainOptions {
                iterations: *iterations,
                literal_null_term: *literal_null_term,
                ..TrainOptions::default()
            };
            if let Some(lr) = lr {
                opts.optimizer.lr = *lr;
            }
            train(g, sequences, opts, *gated_weights, loss_csv.as_deref())
        }
        Command::Eval {
            results,
            ground_truth,
            detections,
        } => eval(g, results, ground_truth, detections.as_deref()),
        Command::Gradcheck { filter } => gradcheck(g, filter.as_deref()),
        Command::Synth {
            scenario,
            frames,
            separation,
            gap,
        } => synth(g, *scenario, *frames, *separation, *gap),
    }
}

/// Reads the config file named by `--config` or the environment, if any.
fn config_file(g: &GlobalOpts) -> CliResult<Option<Value>> {
    let path = match &g.config {
        Some(p) => p.clone(),
        None => match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => return Ok(None),
        },
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Failure::Usage(format!("config {}: expected a JSON object", path.display())));
    }
    Ok(Some(value))
}

/// `base`, overlaid with the config file, overlaid with flags, then validated.
fn resolve_config(g: &GlobalOpts, base: EngineConfig) -> CliResult<EngineConfig> {
    let mut merged = serde_json::to_value(&base).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(Value::Object(file)) = config_file(g)? {
        let target = merged.as_object_mut().expect("config serialises to an object");
        for (k, v) in file {
            if !target.contains_key(&k) {
                log::warn!("ignoring unknown config field `{k}`");
                continue;
            }
            target.insert(k, v);
        }
    }
    let mut cfg: EngineConfig =
        serde_json::from_value(merged).map_err(|e| Failure::Usage(format!("invalid config: {e}")))?;
    if cfg.oks_kappas.len() != cfg.num_keypoints && base.num_keypoints != cfg.num_keypoints {
        cfg = cfg.clone().with_keypoints(cfg.num_keypoints);
    }
    if let Some(a) = g.alpha {
        cfg.alpha = a;
    }
    if let Some(t) = g.tau_dup {
        cfg.tau_dup = t;
    }
    if let Some(t) = g.tau_age {
        cfg.tau_age = t;
    }
    validate_config(cfg).map_err(|e| Failure::Usage(e.to_string()))
}

fn output(g: &GlobalOpts) -> CliResult<Box<dyn Write>> {
    Ok(match &g.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_model(g: &GlobalOpts) -> CliResult<Model> {
    match &g.weights {
        Some(path) => {
            let model = Model::load(path).with_context(|| format!("loading weights {}", path.display()))?;
            let cfg = resolve_config(g, model.config.clone())?;
            Ok(model.with_runtime_settings(&cfg)?)
        }
        None => {
            let cfg = resolve_config(g, EngineConfig::small())?;
            Ok(Model::reference(cfg)?)
        }
    }
}

fn track(g: &GlobalOpts, sequence: &Path, backbone: bool) -> CliResult<ExitCode> {
    let model = load_model(g)?;
    if backbone && !model.has_backbone() {
        return Err(Failure::Usage("--backbone needs weights that include the backbone".into()));
    }
    let seq = load_sequence(sequence, model.config.num_keypoints)
        .with_context(|| format!("loading {}", sequence.display()))?;
    let mut tracker = Tracker::new(model);
    let mut results = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let mut dets = frame.plain_detections();
        if backbone {
            for d in &mut dets {
                d.appearance = None;
            }
        }
        results.push(tracker.step(frame.index, &dets).with_context(|| format!("frame {}", frame.index))?);
    }
    let mut out = output(g)?;
    write_results(&mut out, &results)?;
    out.flush().context("writing results")?;
    Ok(ExitCode::SUCCESS)
}

fn train(
    g: &GlobalOpts,
    sequences: &[PathBuf],
    opts: TrainOptions,
    gated_weights: bool,
    loss_csv: Option<&Path>,
) -> CliResult<ExitCode> {
    let out = g
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("train needs --out for the checkpoint".into()))?;
    if g.weights.is_some() {
        log::warn!("train starts from a fresh initialisation; --weights is ignored");
    }
    let mut cfg = resolve_config(g, EngineConfig::small())?;
    if gated_weights {
        cfg.edge_update = EdgeUpdate::GatedWeights;
    }
    let seqs = sequences
        .iter()
        .map(|p| load_sequence(p, cfg.num_keypoints).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let outcome = train_toy(&seqs, &cfg, &opts, g.seed.unwrap_or(0))?;
    outcome.model.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let csv_path = loss_csv.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut w = BufWriter::new(File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?);
    write_loss_csv(&mut w, &outcome.curve)?;
    w.flush().context("writing loss curve")?;
    eprintln!(
        "trained {} iterations: mean window loss {:.4} -> {:.4}",
        outcome.curve.len(),
        outcome.initial_loss,
        outcome.final_loss
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(g: &GlobalOpts, results: &Path, gt: &Path, detections: Option<&Path>) -> CliResult<ExitCode> {
    let cfg = resolve_config(g, EngineConfig::small())?;
    let k = cfg.num_keypoints;
    let results = load_results(results).with_context(|| format!("loading {}", results.display()))?;
    let gt_seq = load_sequence(gt, k).with_context(|| format!("loading {}", gt.display()))?;
    let det_seq = match detections {
        Some(p) => load_sequence(p, k).with_context(|| format!("loading {}", p.display()))?,
        None => gt_seq.clone(),
    };
    let report = evaluate(&results, &det_seq, &gt_seq)?;
    let mut out = output(g)?;
    serde_json::to_writer_pretty(&mut out, &report).context("writing report")?;
    writeln!(out).and_then(|_| out.flush()).context("writing report")?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(g: &GlobalOpts, filter: Option<&str>) -> CliResult<ExitCode> {
    let seeds: Vec<u64> = match g.seed {
        Some(s) => (s..s + DEFAULT_SEEDS.len() as u64).collect(),
        None => DEFAULT_SEEDS.to_vec(),
    };
    let report = run_suite(&seeds, filter)?;
    if report.outcomes.is_empty() {
        return Err(Failure::Usage(format!("no gradient case matches `{}`", filter.unwrap_or(""))));
    }
    let mut out = output(g)?;
    let write = |out: &mut Box<dyn Write>| -> io::Result<()> {
        for o in &report.outcomes {
            let status = if o.report.passed(GRAD_TOLERANCE) { "ok" } else { "FAIL" };
            writeln!(
                out,
                "{status:4} {:32} seed {:>10}  max rel error {:.2e}  ({} entries)",
                o.name, o.seed, o.report.max_rel_error, o.report.checked
            )?;
            if let Some(reason) = &o.report.skipped {
                writeln!(out, "     skipped: {reason}")?;
            }
        }
        writeln!(
            out,
            "{} checks, {} failed, max rel error {:.2e}, tolerance {:.0e}, {:.2?}",
            report.outcomes.len(),
            report.failures().count(),
            report.max_rel_error(),
            GRAD_TOLERANCE,
            report.elapsed
        )?;
        out.flush()
    };
    write(&mut out).context("writing report")?;
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn synth(
    g: &GlobalOpts,
    scenario: Scenario,
    frames: usize,
    separation: Option<f64>,
    gap: Option<usize>,
) -> CliResult<ExitCode> {
    let cfg = resolve_config(g, EngineConfig::small())?;
    let mut opts = SynthOptions {
        embed_dim: cfg.embed_dim,
        num_keypoints: cfg.num_keypoints,
        ..SynthOptions::default()
    };
    if let Some(s) = separation {
        opts.separation = s;
    }
    if let Some(gap) = gap {
        opts.gap = gap;
    }
    let seq = synth_sequence(scenario, frames, g.seed.unwrap_or(0), &opts);
    match &g.out {
        Some(p) => save_sequence(p, &seq).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = output(g)?;
            serde_json::to_writer_pretty(&mut out, &seq).context("writing sequence")?;
            writeln!(out).and_then(|_| out.flush()).context("writing sequence")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
