use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evseg::events::{clip_event_frames, frames_to_events};
use evseg::lowlight::{degrade, sample_params};
use evseg_harness::config::Config;
use evseg_harness::dataset::{self, Clip, Dataset};
use evseg_harness::error::{Error, Result};
use evseg_harness::{ablate, eval, io, report, train};

#[derive(Parser)]
#[command(name = "evseg", version, about = "Event-guided low-light video segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Darken the PNG frames of a clip with freshly sampled low-light parameters.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate event frames from the PNG frames of a clip.
    Events {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Contrast threshold; defaults to `events.contrast_threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Frame rate; defaults to `dataset.fps`.
        #[arg(long)]
        fps: Option<f64>,
        /// Also write the raw stream as `events.csv` (x,y,p,t).
        #[arg(long)]
        csv: bool,
    },
    /// Generate the moving-shapes dataset.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the validation clips, or score mask directories.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Predicted masks, `<clip>/frame_NNNN.png`. Written when a checkpoint
        /// is given, read otherwise.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        /// Ground-truth masks, `<clip>/masks/` or `<clip>/`.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// mVC windows, from {8, 16}.
        #[arg(long, value_delimiter = ',')]
        window: Option<Vec<usize>>,
        /// JSON report path; the table is printed either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict masks for one dataset clip.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several fusion arms over several seeds.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated arms, e.g. `no_fusion,channel_then_spatial`.
        #[arg(long)]
        arms: Option<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Render tables and plots for an ablation or evaluation result.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn load_config(g: &Global) -> Result<Config> {
    Config::load(g.config.as_deref(), &g.overrides)
}

fn read_frames(dir: &Path) -> Result<Vec<(PathBuf, evseg::autograd::Tensor)>> {
    let files = io::list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no PNG frames", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let t = io::read_image(&p, 3)?;
            Ok((p, t))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { input, out, seed } => {
            let params = sample_params(seed);
            io::create_dir(&out)?;
            for (path, frame) in read_frames(&input)? {
                let dark = degrade(&frame, &params)?;
                io::write_image(&out.join(path.file_name().expect("file")), &dark)?;
            }
            io::write_json(&out.join("lowlight.json"), &params)?;
            println!(
                "alpha {:.4} beta {:.4} gamma {:.4} (seed {seed})",
                params.alpha, params.beta, params.gamma
            );
        }
        Command::Events {
            input,
            out,
            threshold,
            fps,
            csv,
        } => {
            let cfg = load_config(&cli.global)?;
            let mut sim = cfg.events;
            if let Some(t) = threshold {
                sim.contrast_threshold = t;
            }
            sim.validate()?;
            let fps = fps.unwrap_or(cfg.dataset.fps);
            let frames = read_frames(&input)?;
            let tensors: Vec<_> = frames.iter().map(|(_, t)| t.clone()).collect();
            io::create_dir(&out)?;
            for ((path, _), ef) in frames.iter().zip(clip_event_frames(&tensors, fps, &sim)?) {
                io::write_image(&out.join(path.file_name().expect("file")), &ef.image)?;
            }
            if csv {
                let path = out.join("events.csv");
                let mut w = csv::Writer::from_path(&path)?;
                let dt = 1.0 / fps;
                let mut n = 0;
                for (i, pair) in tensors.windows(2).enumerate() {
                    for e in frames_to_events(&pair[0], &pair[1], i as f64 * dt, (i + 1) as f64 * dt, &sim)? {
                        w.serialize(e)?;
                        n += 1;
                    }
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
                println!("{n} events written to {}", path.display());
            }
        }
        Command::MakeDataset { out } => {
            let cfg = load_config(&cli.global)?;
            let m = dataset::make_dataset(&cfg, &out)?;
            println!(
                "{} train + {} validation clips in {}",
                m.train.len(),
                m.val.len(),
                out.display()
            );
        }
        Command::Train { dataset, out } => {
            let cfg = load_config(&cli.global)?;
            let data = Dataset::open(&dataset)?;
            let outcome = train::train(&cfg, &data, &out)?;
            if let (Some(a), Some(b)) = (outcome.log.first(), outcome.log.last()) {
                println!("loss {:.4} -> {:.4}", a.loss, b.loss);
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            pred_dir,
            gt_dir,
            window,
            out,
        } => {
            let base = load_config(&cli.global)?;
            let metrics = match (checkpoint, dataset) {
                (Some(ckpt), Some(ds)) => {
                    let (mut cfg, model, store) = train::load_checkpoint(&ckpt)?;
                    cfg.eval = base.eval.clone();
                    if let Some(w) = window {
                        cfg.eval.windows = w;
                    }
                    let data = Dataset::open(&ds)?;
                    let (m, preds) = eval::evaluate(&model, &store, &data.val, &cfg.train.offsets, &cfg.eval)?;
                    if let Some(dir) = &pred_dir {
                        eval::write_predictions(dir, &data.val, &preds)?;
                    }
                    m
                }
                (None, None) => {
                    let (Some(pred), Some(gt)) = (pred_dir, gt_dir) else {
                        return Err(Error::Config(
                            "eval needs --checkpoint and --dataset, or --pred-dir and --gt-dir".into(),
                        ));
                    };
                    let mut ecfg = base.eval.clone();
                    if let Some(w) = window {
                        ecfg.windows = w;
                    }
                    let cost = eval::config_cost(&base.model_config())?;
                    eval::evaluate_dirs(&pred, &gt, base.dataset.num_classes, &ecfg, &cost)?
                }
                _ => {
                    return Err(Error::Config("--checkpoint and --dataset go together".into()));
                }
            };
            if let Some(path) = out {
                io::write_json(&path, &metrics)?;
            }
            print!("{}", report::metrics_table(&metrics));
        }
        Command::Predict {
            checkpoint,
            clip,
            out,
        } => {
            let (cfg, model, store) = train::load_checkpoint(&checkpoint)?;
            let clip = Clip::load(&clip)?;
            let preds = eval::predict_clip(&model, &store, &clip, &cfg.train.offsets)?;
            io::create_dir(&out)?;
            for (t, m) in preds.iter().enumerate() {
                io::write_mask(&out.join(io::frame_name(t)), m)?;
            }
            println!("{} masks written to {}", preds.len(), out.display());
        }
        Command::Ablate {
            dataset,
            out,
            arms,
            seeds,
        } => {
            let mut cfg = load_config(&cli.global)?;
            if let Some(a) = arms {
                cfg.ablate.arms = ablate::parse_arms(&a)?;
            }
            if let Some(s) = seeds {
                cfg.ablate.seeds = s;
            }
            let data = Dataset::open(&dataset)?;
            let r = ablate::run_ablation(&cfg, &data, &out)?;
            print!("{}", report::ablation_table(&r));
        }
        Command::Report { input, out } => {
            print!("{}", report::render(&input, &out)?);
        }
        Command::ShowConfig => {
            print!("{}", load_config(&cli.global)?.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
