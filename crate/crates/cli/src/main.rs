use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ovseg_core::encoders::Nonlinearity;
use ovseg_core::prompt::InitMode;
use ovseg_core::world::Split;
use ovseg_cli::pipeline::{self, OutDir, Verdict};
use ovseg_cli::{exit_code, ProtocolChoice, RunConfig, UsageError, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

/// Weakly supervised open-vocabulary segmentation on a synthetic world.
///
/// Settings resolve in order: built-in defaults (seed from OVSEG_SEED),
/// the output directory's run.toml, --config, --set, then named flags.
#[derive(Debug, Parser)]
#[command(name = "ovseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory; nothing is written anywhere else.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Flat TOML file of config keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    flags: Flags,
}

/// Shortcuts for the most used keys.
#[derive(Debug, Args)]
struct Flags {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true, value_enum)]
    nonlinearity: Option<NonlinearityArg>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    context_tokens: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long = "lr", global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true, value_enum)]
    init: Option<InitArg>,
    /// Remove the batch-mean path entirely (needs lambda 0).
    #[arg(long, global = true)]
    reference: bool,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    drop: Option<f64>,
    #[arg(long, global = true)]
    jitter: Option<usize>,
    #[arg(long, global = true)]
    spurious: Option<usize>,
    #[arg(long, global = true)]
    softness: Option<f64>,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolChoice>,
    /// Ways per few-shot episode.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Shots per few-shot class.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    train_scenes: Option<usize>,
    #[arg(long, global = true)]
    test_scenes: Option<usize>,
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    offset_norm: Option<f64>,
    #[arg(long, global = true)]
    offset_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum NonlinearityArg {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum InitArg {
    Normal,
    Zeros,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset under <out>/dataset.
    Gen,
    /// Train prompts on the fold's seen classes.
    Train {
        /// Dataset directory (default <out>/dataset).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate trained prompts with the configured protocol.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prompts file (default <out>/prompts.json).
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Also export label maps of the first N test scenes.
        #[arg(long, default_value_t = 0)]
        maps: usize,
        /// Regenerate the report from scratch and compare bytes.
        #[arg(long)]
        verify: bool,
    },
    /// Prompt-strategy and pseudo-label sweeps.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        verify: bool,
    },
    /// Export image and text embeddings.
    DumpEmbeddings {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Regenerate a stored report and compare bytes.
    Verify {
        /// Report to check.
        report: PathBuf,
    },
}

fn overrides(f: &Flags) -> anyhow::Result<toml::Table> {
    let mut t = toml::Table::new();
    macro_rules! put {
        ($($field:ident),*) => {$(
            if let Some(v) = &f.$field {
                t.insert(stringify!($field).into(), toml::Value::try_from(v)?);
            }
        )*};
    }
    put!(seed, classes, dim, folds, fold, lambda, tau, context_tokens, batch_size, steps, learning_rate);
    put!(rho, drop, jitter, spurious, softness, protocol, n, k, episodes, train_scenes, test_scenes, sigma);
    put!(offset_norm, offset_sigma);
    if let Some(nl) = f.nonlinearity {
        let v = match nl {
            NonlinearityArg::Relu => Nonlinearity::Relu,
            NonlinearityArg::Identity => Nonlinearity::Identity,
        };
        t.insert("nonlinearity".into(), toml::Value::try_from(v)?);
    }
    if let Some(init) = f.init {
        let v = match init {
            InitArg::Normal => InitMode::Normal,
            InitArg::Zeros => InitMode::Zeros,
        };
        t.insert("init".into(), toml::Value::try_from(v)?);
    }
    if f.reference {
        t.insert("reference".into(), toml::Value::Boolean(true));
    }
    Ok(t)
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::base()?;
    let stored = common.out.join(pipeline::RUN_FILE);
    if stored.is_file() {
        cfg = cfg.merge_file(&stored)?;
    }
    if let Some(path) = &common.config {
        if !path.is_file() {
            return Err(UsageError(format!("config file {} not found", path.display())).into());
        }
        cfg = cfg.merge_file(path)?;
    }
    cfg = cfg.merge_pairs(&common.set)?.merge(overrides(&common.flags)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let common = &cli.common;
    if let Command::Verify { report } = &cli.command {
        let stored = std::fs::read(report).with_context(|| format!("reading {}", report.display()))?;
        let verdict = ovseg_core::exec::with_threads(common.threads, || pipeline::verify(&stored))??;
        return Ok(match verdict {
            Verdict::Match => {
                println!("verify: {} reproduces byte for byte", report.display());
                EXIT_OK
            }
            Verdict::Mismatch { first_difference } => {
                eprintln!("verify: {} differs from a fresh run at byte {first_difference}", report.display());
                EXIT_RUNTIME
            }
        });
    }
    let cfg = resolve(common)?;
    let out = OutDir::new(&common.out);
    ovseg_core::exec::with_threads(common.threads, || execute(&cli.command, &cfg, &out))?
}

fn data_dir(out: &OutDir, data: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match data {
        Some(d) => Ok(d.clone()),
        None => out.path(pipeline::DATASET_DIR),
    }
}

fn prompts_file(out: &OutDir, prompts: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    match prompts {
        Some(p) => Ok(p.clone()),
        None => out.path(pipeline::PROMPTS_FILE),
    }
}

fn execute(command: &Command, cfg: &RunConfig, out: &OutDir) -> anyhow::Result<i32> {
    out.write(pipeline::RUN_FILE, cfg.to_toml()?.as_bytes())?;
    match command {
        Command::Gen => {
            let ds = pipeline::generate(cfg)?;
            pipeline::write_dataset(out, cfg, &ds)?;
            let folds = pipeline::folds(cfg, &ds)?;
            println!(
                "dataset: {} classes, {} train / {} test scenes, {} folds",
                ds.taxonomy().len(),
                ds.scenes(Split::Train).len(),
                ds.scenes(Split::Test).len(),
                folds.len()
            );
            for f in &folds {
                let ids = |s: &std::collections::BTreeSet<ovseg_core::ClassId>| {
                    s.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
                };
                println!("fold {}: unseen {}", f.fold, ids(&f.unseen));
            }
        }
        Command::Train { data } => {
            let ds = pipeline::load_dataset(&data_dir(out, data)?, cfg)?;
            let (artifact, log) = pipeline::train(cfg, &ds)?;
            out.write(pipeline::PROMPTS_FILE, &pipeline::to_json(&artifact)?)?;
            out.write(pipeline::TRAIN_LOG_FILE, &pipeline::to_json(&log)?)?;
            match (log.first_decile_loss, log.last_decile_loss) {
                (Some(a), Some(b)) => println!("trained {} steps: loss {a:.4} -> {b:.4}", log.losses.len()),
                _ => println!("0 steps: prompts left at initialization"),
            }
        }
        Command::Eval { data, prompts, maps, verify } => {
            let ds = pipeline::load_dataset(&data_dir(out, data)?, cfg)?;
            let artifact = pipeline::load_prompts(&prompts_file(out, prompts)?, cfg, &ds)?;
            let report = pipeline::evaluate(cfg, &ds, &artifact)?;
            let bytes = report.to_json()?;
            let path = out.write(&pipeline::report_file(cfg.protocol), &bytes)?;
            println!("report: {}", path.display());
            summarize(&report.result);
            if *maps > 0 {
                let n = pipeline::write_maps(out, cfg, &ds, &artifact, *maps)?;
                println!("maps: {n} written under {}", out.path(pipeline::MAPS_DIR)?.display());
            }
            if *verify {
                return check(&bytes);
            }
        }
        Command::Ablate { data, verify } => {
            let ds = pipeline::load_dataset(&data_dir(out, data)?, cfg)?;
            let report = pipeline::ablate(cfg, &ds)?;
            let bytes = report.to_json()?;
            let path = out.write(pipeline::ABLATION_FILE, &bytes)?;
            println!("ablation: {}", path.display());
            let rows: Vec<pipeline::AblationRow> = serde_json::from_value(report.result)?;
            println!("{:<13} {:>7} {:>5} {:>8}", "strategy", "lambda", "rho", "harmonic");
            for r in rows {
                let h = r.harmonic_miou.map_or("-".to_string(), |h| format!("{h:.4}"));
                println!("{:<13} {:>7} {:>5} {:>8}", r.strategy, r.lambda, r.rho, h);
            }
            if *verify {
                return check(&bytes);
            }
        }
        Command::DumpEmbeddings { data, prompts } => {
            let ds = pipeline::load_dataset(&data_dir(out, data)?, cfg)?;
            let artifact = pipeline::load_prompts(&prompts_file(out, prompts)?, cfg, &ds)?;
            let rows = pipeline::dump_embeddings(cfg, &ds, &artifact)?;
            let path = out.write(pipeline::EMBEDDINGS_FILE, &pipeline::to_json(&rows)?)?;
            println!("embeddings: {} rows in {}", rows.len(), path.display());
        }
        Command::Verify { .. } => unreachable!("handled before config resolution"),
    }
    Ok(EXIT_OK)
}

fn check(bytes: &[u8]) -> anyhow::Result<i32> {
    Ok(match pipeline::verify(bytes)? {
        Verdict::Match => {
            println!("verify: fresh run matches");
            EXIT_OK
        }
        Verdict::Mismatch { first_difference } => {
            eprintln!("verify: fresh run differs at byte {first_difference}");
            EXIT_RUNTIME
        }
    })
}

fn summarize(result: &serde_json::Value) {
    let show = |prefix: &str, m: &serde_json::Value| {
        for key in ["seen_miou", "unseen_miou", "harmonic_miou", "episode_mean_miou"] {
            if let Some(v) = m.get(key).and_then(|v| v.as_f64()) {
                println!("{prefix}{key}: {v:.4}");
            }
        }
    };
    match result.get("zero_shot") {
        Some(z) => {
            show("zero_shot.", z);
            if let Some(o) = result.get("one_shot").filter(|o| !o.is_null()) {
                show("one_shot.", o);
            }
        }
        None => show("", result),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    };
    ExitCode::from(code as u8)
}
