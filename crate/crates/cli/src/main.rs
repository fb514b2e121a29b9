//! `coa`: generate demonstrations, train, evaluate, run ablations and
//! analyses from one resolved configuration.
//!
//! Exit codes: 0 success, 1 operational error, 2 usage or configuration
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use coa::analysis::{
    attention_metrics, emit_report, eval_episodes, evaluate, evaluate_policy, run_ablation_matrix, AblationPlan,
    AnalysisJson, AttentionDump, EvalReport, ResultRow, Split, VariancePoint, EVAL_SEED_BASE,
};
use coa::config::{resolve, set_flag, Resolved, RunConfig};
use coa::dataset::{collect_demos, read_dataset, spatial_variance, write_dataset, Dataset, Ordering};
use coa::executor::{write_rollout_log, RolloutOptions};
use coa::model::{policy_grad_check, prepare_obs, GenerateContext, Policy};
use coa::sim::Env;
use coa::trainer::{
    initial_checkpoint, load_checkpoint, read_trace, run, save_checkpoint, write_trace, Checkpoint, TrainData,
    TrainHooks, TraceRow,
};
use coa::{CoaError, Result};

#[derive(Parser)]
#[command(name = "coa", version, about = "Keyframe-anchored reverse action-chain policy on a planar testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; flags override the config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper | desk
    #[arg(long)]
    profile: Option<String>,
    /// reach_target | push_button | pick_place | slide_block
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// reverse | forward | hybrid | chunk | chunk_kf
    #[arg(long)]
    ordering: Option<String>,
    #[arg(long)]
    mtp_heads: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Object placement spread σ
    #[arg(long)]
    spread: Option<f64>,
    /// Execute each chain's next action without temporal ensembling
    #[arg(long)]
    no_ensemble: bool,
    /// Any other setting as `dotted.key=toml_value`, e.g. `model.dropout=0.0`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect scripted demonstrations into `<out>/<task>.jsonl`
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes checkpoints and `loss_trace.csv` into `--out`
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes `results.csv` and episode logs
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file, or a training output directory
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// all | interp | extrap
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label of the results row
        #[arg(long, default_value = "coa")]
        variant: String,
    },
    /// Train and evaluate the ablation matrix
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success against spatial variance for the chain policy and the chunk
    /// baseline, plus attention metrics
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decoder self-attention of one generation
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode seed (defaults to the first evaluation seed)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = coa::analysis::DEFAULT_LOCALITY_WINDOW)]
        window: usize,
    },
    /// Finite-difference check of the full training loss on a toy config
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn flags(c: &Common) -> Result<Table> {
    let mut t = Table::new();
    let s = |v: &str| Value::String(v.to_string());
    if let Some(v) = &c.profile {
        set_flag(&mut t, "profile", s(v));
    }
    if let Some(v) = &c.task {
        set_flag(&mut t, "task.task", s(v));
    }
    if let Some(v) = c.seed {
        set_flag(&mut t, "seed", Value::Integer(v as i64));
    }
    if let Some(v) = &c.ordering {
        set_flag(&mut t, "model.ordering", s(v));
    }
    if let Some(v) = c.mtp_heads {
        set_flag(&mut t, "model.mtp_heads", Value::Integer(v as i64));
    }
    if let Some(v) = c.iterations {
        set_flag(&mut t, "train.iterations", Value::Integer(v as i64));
    }
    if let Some(v) = c.batch_size {
        set_flag(&mut t, "train.batch_size", Value::Integer(v as i64));
    }
    if let Some(v) = c.lr {
        set_flag(&mut t, "train.lr", Value::Float(v));
    }
    if let Some(v) = c.spread {
        set_flag(&mut t, "task.spread", Value::Float(v));
    }
    if c.no_ensemble {
        set_flag(&mut t, "model.ensemble.enabled", Value::Boolean(false));
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CoaError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let parsed: Table = format!("v = {v}")
            .parse()
            .or_else(|_| format!("v = {:?}", v.trim()).parse())
            .map_err(|e| CoaError::Config(format!("--set {k}: {e}")))?;
        set_flag(&mut t, k.trim(), parsed["v"].clone());
    }
    Ok(t)
}

fn load(c: &Common) -> Result<Resolved> {
    let flags = flags(c)?;
    match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CoaError::io(p, e))?;
            resolve(Some((p, &text)), &flags)
        }
        None => resolve(None, &flags),
    }
}

fn write_resolved(dir: &Path, r: &Resolved) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoaError::io(dir, e))?;
    let path = dir.join("resolved_config.toml");
    fs::write(&path, r.render()?).map_err(|e| CoaError::io(&path, e))
}

/// `path` itself, `<path>.ckpt`, or `<path>/final.ckpt`.
fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.join("final.ckpt");
    }
    if !path.exists() {
        let with_ext = path.with_extension("ckpt");
        if with_ext.exists() {
            return with_ext;
        }
    }
    path.to_path_buf()
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    if ds.manifest.task != cfg.task.task {
        return Err(CoaError::Config(format!(
            "{} holds {} demonstrations but the run is configured for {}",
            path.display(),
            ds.manifest.task.name(),
            cfg.task.task.name()
        )));
    }
    Ok(ds)
}

fn gen_data(common: &Common, n: Option<usize>, out: &Path) -> Result<()> {
    let mut common = common.clone();
    if let Some(n) = n {
        common.set.push(format!("data.n_demos={n}"));
    }
    let r = load(&common)?;
    let cfg = &r.config;
    let demos = collect_demos(&cfg.task, cfg.data.n_demos, cfg.seed, cfg.data.layout)?;
    let ds = Dataset::from_demos(cfg.task.task, demos)?;
    let path = out.join(format!("{}.jsonl", cfg.task.task.name()));
    write_dataset(&path, &ds)?;
    write_resolved(out, &r)?;
    println!("wrote {} demonstrations to {}", ds.demos.len(), path.display());
    Ok(())
}

fn train(common: &Common, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let r = load(common)?;
    let cfg = &r.config;
    let ds = load_data(data, cfg)?;
    let tdata = TrainData::new(&ds, &cfg.task, &cfg.model)?;
    let (start, mut trace) = match resume {
        Some(p) => {
            let ck = load_checkpoint(checkpoint_file(p))?;
            let trace_path = out.join("loss_trace.csv");
            let earlier: Vec<TraceRow> = if trace_path.exists() {
                read_trace(&trace_path)?.into_iter().filter(|t| t.iter < ck.iteration).collect()
            } else {
                Vec::new()
            };
            (ck, earlier)
        }
        None => (initial_checkpoint(&tdata, &cfg.model, &cfg.train_config())?, Vec::new()),
    };
    write_resolved(out, &r)?;
    let eval_n = start.train.eval_episodes;
    let spec = cfg.task.clone();
    let stats = ds.manifest.norm_stats.clone();
    let opts = RolloutOptions::new(cfg.model.ensemble);
    let mut eval = |policy: &Policy, _done: u64| -> Result<f64> {
        let (spec, seeds) = eval_episodes(&spec, Split::All, eval_n, None)?;
        Ok(evaluate_policy(policy, &spec, &stats, &seeds, Split::All, "train", &opts)?.0.success_rate)
    };
    let hooks = TrainHooks {
        eval: Some(&mut eval),
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let outcome = run(&tdata, start, hooks)?;
    trace.extend(outcome.trace);
    write_trace(out.join("loss_trace.csv"), &trace)?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&final_path, &outcome.checkpoint)?;
    if let Some(last) = trace.last() {
        println!("iteration {}: total loss {:.5}", last.iter + 1, last.loss.total);
    }
    println!("wrote {}", final_path.display());
    Ok(())
}

fn eval(
    common: &Common,
    ckpt: &Path,
    episodes: Option<usize>,
    split: Option<&str>,
    out: Option<&Path>,
    variant: &str,
) -> Result<()> {
    let r = load(common)?;
    let path = checkpoint_file(ckpt);
    let ck = load_checkpoint(&path)?;
    let n = episodes.unwrap_or(r.config.eval.episodes);
    let split = match split {
        Some(s) => s.parse()?,
        None => r.config.eval.split,
    };
    let mut ensemble = ck.model.ensemble;
    if common.no_ensemble {
        ensemble.enabled = false;
    }
    let opts = RolloutOptions::new(ensemble);
    let (report, episodes) = evaluate(&ck, n, split, variant, &opts)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("eval"));
    let row = ResultRow::from_reports(&[(ck.train.seed, &report)], None)?;
    emit_report(&out, &[row], std::slice::from_ref(&report), &AnalysisJson::default(), None)?;
    for e in &episodes {
        write_rollout_log(out.join("rollouts").join(format!("episode_{}.json", e.seed)), e)?;
    }
    write_resolved(&out, &r)?;
    println!(
        "{} {} on {}: success {}/{} = {:.3}",
        variant,
        split,
        report.task.name(),
        report.successes(),
        report.n,
        report.success_rate
    );
    Ok(())
}

fn ablate(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let r = load(common)?;
    let cfg = &r.config;
    let ds = load_data(data, cfg)?;
    write_resolved(out, &r)?;
    let plan = AblationPlan {
        task: cfg.task.clone(),
        dataset: ds,
        base_model: cfg.model.clone(),
        train: cfg.train_config(),
        axes: cfg.ablate.axes.clone(),
        seeds: cfg.ablate.seeds.clone(),
        episodes: cfg.eval.episodes,
        split: cfg.eval.split,
    };
    let matrix = run_ablation_matrix(&plan)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for cell in &matrix.cells {
        if cell.failed() {
            log::warn!("cell {} failed on every seed", cell.label);
            continue;
        }
        let refs: Vec<(u64, &EvalReport)> = cell.reports.iter().map(|(s, r)| (*s, r)).collect();
        rows.push(ResultRow::from_reports(&refs, cell.paper_ref)?);
        reports.extend(cell.reports.iter().map(|(_, r)| r.clone()));
        let (m, s) = cell.mean_std();
        println!("{:<24} {m:.3} ± {s:.3}", cell.label);
    }
    emit_report(out, &rows, &reports, &AnalysisJson::default(), None)
}

fn analyze(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let r = load(common)?;
    let cfg = &r.config;
    let ds = load_data(data, cfg)?;
    write_resolved(out, &r)?;
    let train_cfg = cfg.train_config();
    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut attention = None;
    for (label, ordering) in [("coa", cfg.model.ordering), ("act", Ordering::Chunk)] {
        let model = coa::model::ModelConfig {
            ordering,
            ..cfg.model.clone()
        };
        let tdata = TrainData::new(&ds, &cfg.task, &model)?;
        let ck = run(&tdata, initial_checkpoint(&tdata, &model, &train_cfg)?, TrainHooks::default())?.checkpoint;
        let policy = ck.policy()?;
        let mut opts = RolloutOptions::new(model.ensemble);
        opts.record_attention = attention.is_none();
        for &spread in &cfg.ablate.spreads {
            let base = cfg.task.clone().with_spread(spread);
            let (spec, seeds) = eval_episodes(&base, Split::All, cfg.eval.episodes, None)?;
            let (report, eps) = evaluate_policy(&policy, &spec, &ck.norm_stats, &seeds, Split::All, label, &opts)?;
            if attention.is_none() {
                attention = eps.first().and_then(|e| e.attention.first().cloned());
            }
            let positions: Vec<[f64; 2]> = eps.iter().map(|e| e.objects[0]).collect();
            points.push(VariancePoint {
                variant: label.to_string(),
                spread,
                variance: spatial_variance(&positions)?,
                success_rate: report.success_rate,
            });
            let mut row = ResultRow::from_reports(&[(cfg.seed, &report)], None)?;
            row.variant = format!("{label}@{spread}");
            rows.push(row);
            reports.push(report);
        }
    }
    let correlation = coa::analysis::variance_success_analysis(&points, Some(("coa", "act")))?;
    let maps = attention.unwrap_or_default();
    let analysis = AnalysisJson {
        correlation: Some(correlation),
        attention: attention_metrics(&maps, cfg.eval.locality_window)?,
        ..AnalysisJson::default()
    };
    let dump = if maps.is_empty() { None } else { Some(AttentionDump::from_maps(&maps)?) };
    emit_report(out, &rows, &reports, &analysis, dump.as_ref())?;
    for c in analysis.correlation.iter().flat_map(|c| c.per_variant.iter().chain(c.gap.iter())) {
        match c.r {
            Some(r) => println!("pearson r ({}) = {r:.4}", c.label),
            None => println!("pearson r ({}) undefined: {}", c.label, c.note.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

fn attn_dump(ckpt: &Path, seed: Option<u64>, out: &Path, window: usize) -> Result<()> {
    let ck: Checkpoint = load_checkpoint(checkpoint_file(ckpt))?;
    let policy = ck.policy()?;
    let (env, obs) = Env::reset(&ck.task, seed.unwrap_or(EVAL_SEED_BASE))?;
    let input = prepare_obs(&policy.config.obs, &ck.task, &ck.norm_stats, &obs);
    let ee = env.state().ee;
    let ctx = GenerateContext {
        ee_xy: Some([ee[0], ee[1]]),
        stats: Some(&ck.norm_stats),
    };
    let chain = policy.generate_chain(&input, &ctx)?;
    let dump = AttentionDump::from_maps(&chain.attention)?;
    let metrics = attention_metrics(&chain.attention, window)?;
    for m in &metrics {
        println!(
            "layer {}: locality({window}) {:.3}, anchor {:.3}",
            m.layer, m.locality_mass, m.anchor_mass
        );
    }
    fs::create_dir_all(out).map_err(|e| CoaError::io(out, e))?;
    let analysis = AnalysisJson {
        attention: metrics,
        ..AnalysisJson::default()
    };
    let row = ResultRow {
        variant: "attn-dump".into(),
        task: ck.task.task.name().into(),
        split: Split::All.name().into(),
        seeds: vec![seed.unwrap_or(EVAL_SEED_BASE)],
        mean_sr: f64::NAN,
        std_sr: f64::NAN,
        paper_ref_value: None,
    };
    emit_report(out, &[row], &[], &analysis, Some(&dump))
}

fn grad_check(seed: u64, tolerance: f64) -> Result<bool> {
    let errs = policy_grad_check(seed)?;
    let worst = errs
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| CoaError::Model("no parameters".into()))?;
    println!("{} parameters checked; worst relative error {:.3e} ({})", errs.len(), worst.1, worst.0);
    Ok(worst.1 <= tolerance)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { common, n, out } => gen_data(&common, n, &out)?,
        Command::Train {
            common,
            data,
            out,
            resume,
        } => train(&common, &data, &out, resume.as_deref())?,
        Command::Eval {
            common,
            ckpt,
            episodes,
            split,
            out,
            variant,
        } => eval(&common, &ckpt, episodes, split.as_deref(), out.as_deref(), &variant)?,
        Command::Ablate { common, data, out } => ablate(&common, &data, &out)?,
        Command::Analyze { common, data, out } => analyze(&common, &data, &out)?,
        Command::AttnDump {
            ckpt,
            seed,
            out,
            window,
        } => attn_dump(&ckpt, seed, &out, window)?,
        Command::GradCheck { seed, tolerance } => {
            if !grad_check(seed, tolerance)? {
                eprintln!("error: gradient check exceeded tolerance {tolerance:e}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("COA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("COA_THREADS ignored: {e}");
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CoaError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
