use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use pram_core::checkpoint;
use pram_core::config::{parse_far_list, KEYS};
use pram_core::dataset::load_split;
use pram_core::eval::{evaluate, write_cmc_csv, write_metrics_csv};
use pram_core::suites::{run_scope, Scope};
use pram_core::synth::{generate_dataset, TEST_SPLIT, TRAIN_SPLIT};
use pram_core::trainer::{
    protocol_from_embeddings, read_embeddings, write_embeddings, write_loss_csv,
};
use pram_core::{Error, GenConfig, Perturbation, TrainConfig, Trainer};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOSS_FILE: &str = "loss.csv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "pram", version, about = "Part relation attention for NIR-VIS face matching")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic paired NIR/VIS dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, loss log and config.
    Train(TrainArgs),
    /// Compute embeddings for one split.
    Embed(EmbedArgs),
    /// Rank-1, CMC and VR@FAR on the NIR-probe / VIS-gallery protocol.
    Eval(EvalArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training identities.
    #[arg(long, default_value_t = 20)]
    ids: usize,
    /// Samples per identity per domain.
    #[arg(long, default_value_t = 4)]
    per_id: usize,
    /// Held-out identities written to the test split.
    #[arg(long, default_value_t = 10)]
    test_ids: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Perturbation level: none, mild or severe.
    #[arg(long, default_value = "mild")]
    level: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint. Only `--train.steps` may be overridden.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Print a progress line every N steps (0 = only the final line).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[command(flatten)]
    overrides: Overrides,
}

/// One optional `--<key> <value>` flag per config key.
#[derive(Debug, Default)]
struct Overrides(Vec<(String, String)>);

impl Args for Overrides {
    fn augment_args(cmd: Command) -> Command {
        let defaults = TrainConfig::default();
        KEYS.iter().fold(cmd, |cmd, &key| {
            let default = defaults.get(key).expect("listed key");
            cmd.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help(format!("[default: {default}]")),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl FromArgMatches for Overrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut o = Overrides::default();
        o.update_from_arg_matches(m)?;
        Ok(o)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        for &key in KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.0.push((key.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = TEST_SPLIT)]
    split: String,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "embeddings", conflicts_with = "embeddings")]
    checkpoint: Option<PathBuf>,
    /// Embedding CSV written by `embed`, instead of a checkpoint.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, required_unless_present = "embeddings")]
    data: Option<PathBuf>,
    #[arg(long, default_value = TEST_SPLIT)]
    split: String,
    /// Comma-separated false accept rates.
    #[arg(long, default_value = "0.01,0.001")]
    far: String,
    /// Directory for metrics.csv and cmc.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// ops, pram, losses or full.
    #[arg(long, default_value = "full")]
    scope: String,
    /// Maximum relative error [default: 1e-6 for ops, 1e-4 otherwise].
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Gradient checks ran but at least one coordinate exceeded the tolerance.
#[derive(Debug)]
struct GradcheckFailed {
    scope: Scope,
    tolerance: f64,
    max_error: f64,
}

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck --scope {} failed: max relative error {:.3e} is not below tolerance {:.1e}",
            self.scope, self.max_error, self.tolerance
        )?;
        if self.tolerance < 1e-10 {
            write!(f, " (tolerances this small are below float64 finite-difference noise)")?;
        }
        Ok(())
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return 6;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(
            Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) | Error::Dataset(_),
        ) => 3,
        Some(Error::NonFinite { .. }) => 4,
        Some(Error::Protocol(_)) => 5,
        _ => 1,
    }
}

/// Kernels are single-threaded, so any valid value gives identical results.
fn check_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PRAM_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "PRAM_THREADS must be a positive integer, got `{v}`"
                ))
                .into())
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = check_threads().and_then(|()| match cli.command {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Embed(a) => embed(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let level: Perturbation = a.level.parse()?;
    let cfg = GenConfig {
        num_ids: a.ids,
        test_ids: a.test_ids,
        per_id: a.per_id,
        seed: a.seed,
        level,
    };
    let s = generate_dataset(&a.out, &cfg)?;
    println!(
        "wrote {}: train {} ids / {} samples, test {} ids / {} samples, level {level}, empty component masks {}",
        a.out.display(),
        s.train_ids,
        s.train_samples,
        s.test_ids,
        s.test_samples,
        s.empty_masks
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let dataset = load_split(&a.data, TRAIN_SPLIT)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = checkpoint::load(path)?;
            for (key, value) in &a.overrides.0 {
                if key != "train.steps" {
                    return Err(Error::Config(format!(
                        "--{key} cannot change when resuming; only --train.steps may"
                    ))
                    .into());
                }
                let mut cfg = t.config().clone();
                cfg.set(key, value)?;
                cfg.validate()?;
                t = t.with_steps(cfg.steps);
            }
            t
        }
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &a.config {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                cfg.apply_text(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
            for (key, value) in &a.overrides.0 {
                cfg.set(key, value)?;
            }
            cfg.validate()?;
            Trainer::new(cfg, &dataset)?
        }
    };

    let c = trainer.config();
    println!(
        "lr={} wd={} batch={} m={} s={} steps={} pram_on={} cat_on={} mining={}",
        c.lr,
        c.weight_decay,
        c.batch_size,
        c.loss.margin,
        c.loss.softmax_scale,
        c.steps,
        c.pram_on,
        c.cat_on,
        c.mining
    );
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_text(&a.out.join(CONFIG_FILE), &trainer.config().to_text())?;

    let every = a.log_every;
    let logs = trainer.train(&dataset, |l| {
        if every > 0 && l.step % every == 0 {
            eprintln!(
                "step {:>5}  l_softmax {:.4}  l_cat {:.4}  l_total {:.4}  mean_lambda {:.3}",
                l.step, l.l_softmax, l.l_cat, l.l_total, l.mean_lambda
            );
        }
    })?;
    checkpoint::save(&trainer, &a.out.join(CHECKPOINT_FILE))?;
    write_loss_csv(&a.out.join(LOSS_FILE), &logs)?;
    match logs.last() {
        Some(l) => println!(
            "final step {}: l_softmax={:.6} l_cat={:.6} l_total={:.6}",
            l.step, l.l_softmax, l.l_cat, l.l_total
        ),
        None => println!("no steps to run (already at step {})", trainer.step()),
    }
    println!("wrote {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn embed(a: EmbedArgs) -> anyhow::Result<()> {
    let trainer = checkpoint::load(&a.checkpoint)?;
    let dataset = load_split(&a.data, &a.split)?;
    let records = trainer.embed_dataset(&dataset)?;
    write_embeddings(&a.out, &records)?;
    println!(
        "wrote {} embeddings of dimension {} to {}",
        records.len(),
        records.first().map_or(0, |r| r.embedding.len()),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let fars = parse_far_list(&a.far)?;
    let records = match (&a.embeddings, &a.checkpoint, &a.data) {
        (Some(path), _, _) => read_embeddings(path)?,
        (None, Some(ck), Some(data)) => {
            let trainer = checkpoint::load(ck)?;
            let dataset = load_split(data, &a.split)?;
            trainer.embed_dataset(&dataset)?
        }
        _ => bail!(Error::InvalidArgument(
            "eval needs --embeddings, or --checkpoint with --data".into()
        )),
    };
    let protocol = protocol_from_embeddings(&records)?;
    let metrics = evaluate(&protocol, &fars)?;
    println!("rank1,{:.6}", metrics.rank1);
    for (far, vr) in &metrics.vr {
        println!("vr@far={far},{vr:.6}");
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
        write_cmc_csv(&out.join("cmc.csv"), &metrics.cmc)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let scope: Scope = a.scope.parse()?;
    let tolerance = a.tolerance.unwrap_or(match scope {
        Scope::Ops => 1e-6,
        _ => 1e-4,
    });
    if !(tolerance > 0.0) {
        bail!(Error::InvalidArgument(format!(
            "--tolerance must be positive, got {tolerance}"
        )));
    }
    let report = run_scope(scope, tolerance, a.seed).context("running gradient checks")?;
    print!("{}", report.table());
    let max_error = report.max_error();
    if !report.passed() {
        return Err(GradcheckFailed {
            scope,
            tolerance,
            max_error,
        }
        .into());
    }
    println!("gradcheck --scope {scope}: passed, max relative error {max_error:.3e} < {tolerance:.1e}");
    Ok(())
}
