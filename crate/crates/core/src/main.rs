use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use s2ldm::autoencoder::{encode, LossRecord};
use s2ldm::error::{Error, Result};
use s2ldm::phantom::{normalize_pair, NormalizedImage, PhantomSpec};
use s2ldm::pipeline::dataset::{
    image_container, list_containers, read_dataset, read_image, read_manifest, sample_from_container, write_dataset,
};
use s2ldm::pipeline::{
    ae_checkpoint, ae_from_checkpoint, diff_checkpoint, diff_from_checkpoint, emit_pgm, evaluate_images,
    load_checkpoint, prepare_pairs, save_checkpoint, train_stage1, train_stage2, translate_all, Container, EpochLog,
    RunConfig,
};
use s2ldm::similarity::{cosine_map, dynamic_mask, COSINE_EPS};

#[derive(Parser, Debug)]
#[command(name = "s2ldm", version, about = "Non-contrast to contrast-enhanced CT translation with a similarity-aware latent diffusion model")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired phantom dataset
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder on the training split of a dataset
    TrainAe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-step loss curve as JSON
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the denoiser on latents of a frozen autoencoder
    TrainDiff {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-epoch mask means and losses as JSON
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Translate non-contrast images (a container or a directory of them)
    Translate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        diff: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Start of the reverse process (defaults to the checkpoint's value)
        #[arg(long)]
        t_start: Option<usize>,
        /// Only translate the held-out split of a dataset directory
        #[arg(long)]
        holdout: bool,
        /// Config used for the split and the HU window
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write single-image output as PGM
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Compare predicted images with targets and write a JSON metric report
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the latent similarity map (or the dynamic mask) of a pair as PGM
    Simmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit the dynamic mask at this epoch instead of the raw similarity
        #[arg(long)]
        tau: Option<u64>,
        #[arg(long, default_value_t = 10)]
        epochs: u64,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: PathBuf,
    /// `key = value` run configuration; defaults apply to absent keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Stage1Log<'a> {
    steps: &'a [LossRecord],
    diverged: Option<&'a str>,
}

#[derive(Serialize)]
struct Stage2Log<'a> {
    epochs: &'a [EpochLog],
    step_losses: Vec<f64>,
    diverged: Option<&'a str>,
}

fn training_pairs(run: &RunArgs, cfg: &RunConfig) -> Result<Vec<s2ldm::phantom::NormalizedPair>> {
    let samples = read_dataset(&run.data)?;
    Ok(prepare_pairs(&samples, cfg)?.0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Gen { n, size, seed, out } => {
            let m = write_dataset(&out, n, size, seed, &PhantomSpec::default())?;
            log::info!("wrote {} pairs to {}", m.count, out.display());
        }
        Command::TrainAe { run, out, log } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let train = training_pairs(&run, &cfg)?;
            let res = train_stage1(&cfg, &train)?;
            let mut ck = ae_checkpoint(&res.model);
            ck.diverged = res.diverged.is_some();
            save_checkpoint(&out, &ck)?;
            if let Some(p) = log {
                write_json(&p, &Stage1Log { steps: &res.log, diverged: res.diverged.as_deref() })?;
            }
            if let Some(reason) = res.diverged {
                return Err(Error::Divergence(reason));
            }
        }
        Command::TrainDiff { run, ae, out, log } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let model = ae_from_checkpoint(&load_checkpoint(&ae)?)?;
            let train = training_pairs(&run, &cfg)?;
            let res = train_stage2(&cfg, &train, &model)?;
            let mut ck = diff_checkpoint(&res.bundle);
            ck.diverged = res.diverged.is_some();
            save_checkpoint(&out, &ck)?;
            if let Some(p) = log {
                let l = Stage2Log {
                    epochs: &res.epochs,
                    step_losses: res.steps.iter().map(|s| s.loss).collect(),
                    diverged: res.diverged.as_deref(),
                };
                write_json(&p, &l)?;
            }
            if let Some(reason) = res.diverged {
                return Err(Error::Divergence(reason));
            }
        }
        Command::Translate { input, ae, diff, seed, out, t_start, holdout, config, pgm } => {
            let cfg = load_config(config.as_deref(), Some(seed))?;
            let model = ae_from_checkpoint(&load_checkpoint(&ae)?)?;
            let bundle = diff_from_checkpoint(&load_checkpoint(&diff)?)?;
            let t0 = t_start.unwrap_or(bundle.t_start_default);
            let load = |p: &Path| read_image(&Container::load(p)?, &["ncct"], cfg.window_width, cfg.window_level);
            if input.is_dir() {
                let files = if holdout {
                    let m = read_manifest(&input)?;
                    let (_, val) = s2ldm::phantom::split_dataset(m.files, cfg.seed)?;
                    val.into_iter().map(|f| input.join(f)).collect()
                } else {
                    list_containers(&input)?
                };
                let images = files.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&NormalizedImage> = images.iter().collect();
                let preds = translate_all(&refs, &model, &bundle, t0, seed)?;
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                for (f, y) in files.iter().zip(&preds) {
                    let name = f.file_name().expect("listed files have names");
                    image_container(y)?.save(&out.join(name))?;
                }
            } else {
                let x = load(&input)?;
                let y = translate_all(&[&x], &model, &bundle, t0, seed)?.remove(0);
                image_container(&y)?.save(&out)?;
                if let Some(p) = pgm {
                    emit_pgm(&y, &p)?;
                }
            }
        }
        Command::Eval { pred, target, report, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            let files = list_containers(&pred)?;
            if files.is_empty() {
                return Err(Error::InvalidArgument {
                    arg: "pred",
                    reason: format!("no .s2t1 files in {}", pred.display()),
                });
            }
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            for f in &files {
                let name = f.file_name().expect("listed files have names");
                preds.push(read_image(&Container::load(f)?, &[], cfg.window_width, cfg.window_level)?);
                targets.push(read_image(
                    &Container::load(&target.join(name))?,
                    &["cect"],
                    cfg.window_width,
                    cfg.window_level,
                )?);
            }
            let refs: Vec<&NormalizedImage> = targets.iter().collect();
            let r = evaluate_images(&preds, &refs)?;
            std::fs::write(&report, r.to_json()?).map_err(|e| Error::io(&report, e))?;
        }
        Command::Simmap { input, ae, out, tau, epochs, alpha, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            let model = ae_from_checkpoint(&load_checkpoint(&ae)?)?;
            let pair = normalize_pair(&sample_from_container(&Container::load(&input)?)?, cfg.window_width, cfg.window_level)?;
            let e_n = encode(&pair.ncct, &model.encoder)?;
            let e_c = encode(&pair.cect, &model.encoder)?;
            let sim = cosine_map(&e_n, &e_c, COSINE_EPS)?;
            match tau {
                Some(t) => emit_pgm(&dynamic_mask(&sim, t, epochs, alpha)?, &out)?,
                None => emit_pgm(&sim, &out)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
