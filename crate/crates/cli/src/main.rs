//! `zsl`: synthesize bundles, train SetNet models and detector ensembles,
//! calibrate, and evaluate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use zsl_core::dataio::{gen_synthetic, load_bundle, save_bundle, DatasetBundle, SyntheticSpec};
use zsl_core::eval::{eval_gzsl, eval_ood, eval_zsl};
use zsl_core::metrics::{EvalReport, DEFAULT_FNR_GRID};
use zsl_core::pipeline::GzslSystem;
use zsl_core::setnet::export_attention;
use zsl_core::train::{
    calibration_degrees, load_checkpoint, save_checkpoint, train_ddm, train_setnet, Checkpoint, TrainConfig,
};
use zsl_core::{DdmEnsemble64, SetNet64};

/// Run configuration; flags given on the command line take precedence.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    synthetic: SyntheticSpec,
    train: TrainConfig,
    #[serde(default = "default_grid")]
    fnr_grid: Vec<f64>,
    #[serde(default)]
    paths: Paths,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Paths {
    bundle: Option<PathBuf>,
    setnet: Option<PathBuf>,
    gzsl_setnet: Option<PathBuf>,
    ddm: Option<PathBuf>,
}

fn default_grid() -> Vec<f64> {
    DEFAULT_FNR_GRID.to_vec()
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.synthetic.validate().context("config `synthetic`")?;
        cfg.train.validate().context("config `train`")?;
        validate_grid(&cfg.fnr_grid)?;
        Ok(cfg)
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        bail!("fnr_grid is empty");
    }
    if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        bail!("fnr_grid value {v} outside (0, 1)");
    }
    Ok(())
}

#[derive(Parser)]
#[command(name = "zsl", version, about = "Zero-shot recognition with SetNet and ID3M")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a SetNet model; prints `epoch,loss` CSV.
    TrainSetnet(TrainArgs),
    /// Train an uncalibrated detector ensemble; prints `epoch,loss` CSV.
    TrainDdm(TrainArgs),
    /// Set the detector threshold from the held-out seen-class split.
    Calibrate {
        #[arg(long)]
        ddm: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        fnr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// ZSL accuracy on unseen-class test samples.
    EvalZsl {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// GZSL accuracy with detector routing.
    EvalGzsl {
        /// Model for inputs flagged unseen.
        #[arg(long)]
        zsl: Option<PathBuf>,
        /// Model for the rest; defaults to the ZSL model.
        #[arg(long)]
        gzsl: Option<PathBuf>,
        #[arg(long)]
        ddm: Option<PathBuf>,
        /// Override the detector threshold (`-inf` flags nothing).
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<f64>,
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Detector TNR over the FNR grid and routing accuracy.
    EvalOod {
        #[arg(long)]
        ddm: Option<PathBuf>,
        /// Comma-separated FNR grid.
        #[arg(long, value_delimiter = ',')]
        fnr_grid: Option<Vec<f64>>,
        #[arg(long)]
        curves: Option<PathBuf>,
        #[command(flatten)]
        common: EvalArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Write the attention maps of one test sample as CSV.
    #[arg(long)]
    attn: Option<PathBuf>,
    /// Test-split position of the sample for `--attn`.
    #[arg(long, default_value_t = 0)]
    attn_sample: usize,
}

impl EvalArgs {
    fn config(&self) -> Result<Option<RunConfig>> {
        self.config.as_deref().map(RunConfig::load).transpose()
    }
}

fn pick(flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str, key: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .with_context(|| format!("no {name} path: pass --{name} or set paths.{key} in the config"))
}

fn bundle_at(path: &Path) -> Result<DatasetBundle> {
    load_bundle(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn checkpoint_at(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Creates missing parent directories of an output path.
fn out_path(path: &Path) -> Result<&Path> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(path)
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.validate()?;
    fs::write(out_path(path)?, report.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    let pct = |v: Option<f64>| v.map_or("-".to_owned(), |x| format!("{:.2}%", 100.0 * x));
    println!(
        "acc={} acc_seen={} acc_unseen={} h={}",
        pct(Some(report.acc)),
        pct(report.acc_seen),
        pct(report.acc_unseen),
        pct(report.h)
    );
    Ok(())
}

fn write_attention(model: &SetNet64, bundle: &DatasetBundle, sample: usize, path: &Path) -> Result<()> {
    let test = bundle.test_indices();
    let Some(&i) = test.get(sample) else {
        bail!("attention sample {sample} outside {} test samples", test.len());
    };
    let maps = model.attention_maps(&bundle.feature_map(i)?)?;
    export_attention(&maps, out_path(path)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_losses(losses: &[f64]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "epoch,loss")?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(out, "{},{}", e + 1, l)?;
    }
    Ok(())
}

fn train_config(args: &TrainArgs, base: TrainConfig) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        seed: args.seed.unwrap_or(base.seed),
        learning_rate: args.lr.unwrap_or(base.learning_rate),
        epochs: args.epochs.unwrap_or(base.epochs),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        lambda: args.lambda.unwrap_or(base.lambda),
        heads: args.heads.unwrap_or(base.heads),
        folds: args.folds.unwrap_or(base.folds),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let spec = SyntheticSpec {
                seed: seed.unwrap_or(cfg.synthetic.seed),
                ..cfg.synthetic
            };
            let bundle = gen_synthetic(&spec)?;
            save_bundle(&bundle, out_path(&out)?).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::TrainSetnet(args) => {
            let run = RunConfig::load(&args.config)?;
            let bundle = bundle_at(&pick(args.bundle.clone(), run.paths.bundle, "bundle", "bundle")?)?;
            let cfg = train_config(&args, run.train)?;
            let trained = train_setnet::<f64>(&bundle, &cfg)?;
            save_checkpoint(&Checkpoint::from_setnet(&trained.model, &cfg), out_path(&args.out)?)
                .with_context(|| format!("writing {}", args.out.display()))?;
            print_losses(&trained.epoch_losses)?;
        }
        Command::TrainDdm(args) => {
            let run = RunConfig::load(&args.config)?;
            let bundle = bundle_at(&pick(args.bundle.clone(), run.paths.bundle, "bundle", "bundle")?)?;
            let cfg = train_config(&args, run.train)?;
            let trained = train_ddm::<f64>(&bundle, &cfg)?;
            save_checkpoint(&Checkpoint::from_ddm(&trained.model, &cfg), out_path(&args.out)?)
                .with_context(|| format!("writing {}", args.out.display()))?;
            print_losses(&trained.epoch_losses)?;
        }
        Command::Calibrate { ddm, bundle, fnr, out } => {
            if !(fnr > 0.0 && fnr < 1.0) {
                bail!("--fnr {fnr} outside (0, 1)");
            }
            let ckpt = checkpoint_at(&ddm)?;
            let mut ensemble: DdmEnsemble64 = ckpt.to_ddm()?;
            let bundle = bundle_at(&bundle)?;
            let degrees = calibration_degrees(&ensemble, &bundle, ckpt.config.seed)?;
            let theta = ensemble.calibrate(&degrees, fnr)?;
            let flagged = degrees.iter().filter(|&&d| d < theta).count();
            save_checkpoint(&Checkpoint::from_ddm(&ensemble, &ckpt.config), out_path(&out)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("theta={theta} flagged={flagged}/{}", degrees.len());
        }
        Command::EvalZsl { model, common } => {
            let run = common.config()?;
            let paths = run.map(|r| r.paths).unwrap_or_default();
            let bundle = bundle_at(&pick(common.bundle.clone(), paths.bundle, "bundle", "bundle")?)?;
            let model: SetNet64 = checkpoint_at(&pick(model, paths.setnet, "model", "setnet")?)?.to_setnet()?;
            write_report(&eval_zsl(&model, &bundle)?, &common.report)?;
            if let Some(p) = &common.attn {
                write_attention(&model, &bundle, common.attn_sample, p)?;
            }
        }
        Command::EvalGzsl {
            zsl,
            gzsl,
            ddm,
            theta,
            common,
        } => {
            let run = common.config()?;
            let paths = run.map(|r| r.paths).unwrap_or_default();
            let bundle = bundle_at(&pick(common.bundle.clone(), paths.bundle, "bundle", "bundle")?)?;
            let zsl_model: SetNet64 = checkpoint_at(&pick(zsl, paths.setnet, "zsl", "setnet")?)?.to_setnet()?;
            let gzsl_model: SetNet64 = match gzsl.or(paths.gzsl_setnet) {
                Some(p) => checkpoint_at(&p)?.to_setnet()?,
                None => zsl_model.clone(),
            };
            let mut detector: DdmEnsemble64 = checkpoint_at(&pick(ddm, paths.ddm, "ddm", "ddm")?)?.to_ddm()?;
            if let Some(t) = theta {
                detector.set_theta(t)?;
            }
            if detector.theta().is_none() {
                bail!("detector has no threshold: run `calibrate` or pass --theta");
            }
            let system = GzslSystem::new(
                detector,
                zsl_model,
                gzsl_model,
                bundle.unseen_table()?,
                bundle.semantic_table()?,
            )?;
            write_report(&eval_gzsl(&system, &bundle)?, &common.report)?;
            if let Some(p) = &common.attn {
                write_attention(&system.zsl_model, &bundle, common.attn_sample, p)?;
            }
        }
        Command::EvalOod {
            ddm,
            fnr_grid,
            curves,
            common,
        } => {
            if common.attn.is_some() {
                bail!("--attn needs a SetNet model; use eval-zsl or eval-gzsl");
            }
            let run = common.config()?;
            let (paths, config_grid) = match run {
                Some(r) => (r.paths, r.fnr_grid),
                None => (Paths::default(), default_grid()),
            };
            let grid = fnr_grid.unwrap_or(config_grid);
            validate_grid(&grid)?;
            let bundle = bundle_at(&pick(common.bundle.clone(), paths.bundle, "bundle", "bundle")?)?;
            let detector: DdmEnsemble64 = checkpoint_at(&pick(ddm, paths.ddm, "ddm", "ddm")?)?.to_ddm()?;
            let report = eval_ood(&detector, &bundle, &grid)?;
            write_report(&report, &common.report)?;
            if let Some(p) = &curves {
                fs::write(out_path(p)?, report.curve_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
