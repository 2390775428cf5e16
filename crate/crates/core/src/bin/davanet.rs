use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use davanet::config::AppConfig;
use davanet::eval::{self, Variant};
use davanet::exec::{self, Mode};
use davanet::geometry::View;
use davanet::network::{read_checkpoint, Checkpoint, Davanet, ForwardOptions};
use davanet::synth::{self, Split};
use davanet::training::{self, Stage};
use davanet::{Error, Result};

/// Stereo deblurring: dataset synthesis, training, evaluation and inference.
#[derive(Parser)]
#[command(name = "davanet", version)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo-blur dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one stage. Without --resume, the disp stage starts from
    /// `<out>/deblur.ckpt` and the joint stage from `<out>/disp.ckpt` when
    /// they exist.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config entry, e.g. `train.base_lr=0.001`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate one model variant on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Restore one stereo pair.
    Deblur {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every ablation variant found under a checkpoint directory.
    Ablate {
        #[arg(long = "ckpt-dir")]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.sequential {
        exec::set_mode(Mode::Sequential);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, seed, count } => {
            let mut cfg = AppConfig::load(&config)?.synth;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(count) = count {
                cfg.count = count;
            }
            let manifest = synth::generate_dataset(&cfg, &out)?;
            log::info!(
                "wrote {} train and {} test samples to {}",
                manifest.train.len(),
                manifest.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            stage,
            data,
            config,
            out,
            resume,
            overrides,
        } => {
            let cfg = AppConfig::load_with(&config, &overrides)?;
            let start = starting_checkpoint(stage, &cfg, &out, resume.as_deref())?;
            training::check_start(stage, &start)?;
            let samples = synth::load_split(&data, Split::Train)?;
            let outcome = training::train_stage(stage, start, &samples, &cfg.train, Some(&out))?;
            if let Some((first, last)) = training::initial_and_final(&outcome.losses, cfg.train.smoothing_window) {
                log::info!("{stage}: smoothed loss {first:.5} -> {last:.5}");
            }
            if let Some(p) = outcome.path {
                log::info!("checkpoint written to {}", p.display());
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            split,
            variant,
            report,
        } => {
            let variant = Variant::parse(&variant)?;
            let split = Split::parse(&split).map_err(|e| Error::config(e.to_string()))?;
            let ckpt = read_checkpoint(&ckpt, None)?;
            let samples = synth::load_split(&data, split)?;
            let r = eval::evaluate(&ckpt.model, &samples, variant, split.name())?;
            eval::write_json(&r, &report)?;
            let psnr = r.mean_psnr.map_or("inf".to_string(), |p| format!("{p:.3} dB"));
            log::info!("{}: PSNR {psnr}, SSIM {:.4} over {} pairs", variant.name(), r.mean_ssim, r.samples.len());
            Ok(())
        }
        Command::Deblur { ckpt, left, right, out } => {
            let ckpt = read_checkpoint(&ckpt, None)?;
            deblur_pair(&ckpt.model, &left, &right, &out)
        }
        Command::Ablate {
            ckpt_dir,
            data,
            split,
            report,
        } => {
            let split = Split::parse(&split).map_err(|e| Error::config(e.to_string()))?;
            let samples = synth::load_split(&data, split)?;
            let r = eval::ablate(&ckpt_dir, &samples, split.name())?;
            eval::write_json(&r, &report)?;
            print!("{}", r.table);
            Ok(())
        }
    }
}

fn starting_checkpoint(stage: Stage, cfg: &AppConfig, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    if let Some(path) = resume {
        return read_checkpoint(path, Some(&cfg.model));
    }
    let previous = match stage {
        Stage::Deblur => None,
        Stage::Disp => Some(out.join("deblur.ckpt")),
        Stage::Joint => Some(out.join("disp.ckpt")),
    };
    match previous.filter(|p| p.is_file()) {
        Some(p) => {
            log::info!("starting from {}", p.display());
            read_checkpoint(&p, Some(&cfg.model))
        }
        None => Ok(Checkpoint::fresh(Davanet::new(cfg.model.clone())?, cfg.train.seed)),
    }
}

fn deblur_pair(model: &Davanet, left: &Path, right: &Path, out: &Path) -> Result<()> {
    let l = synth::read_rgb(left)?;
    let r = synth::read_rgb(right)?;
    if l.shape() != r.shape() {
        return Err(Error::data(format!("left {:?} and right {:?} differ in size", l.shape(), r.shape())));
    }
    let o = model.forward(&l, &r, &ForwardOptions::default())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for view in [View::Left, View::Right] {
        let tag = match view {
            View::Left => "left",
            View::Right => "right",
        };
        synth::write_rgb(o.restored(view), &out.join(format!("restored_{tag}.png")))?;
        synth::write_pfm(&o.disparity(view, 0, 0)?, &out.join(format!("disp_{tag}.pfm")))?;
        let gate = match view {
            View::Left => &o.gate_left,
            View::Right => &o.gate_right,
        };
        synth::write_gray(gate.plane(0, 0), gate.width(), gate.height(), &out.join(format!("gate_{tag}.png")))?;
    }
    log::info!("wrote restored pair, disparities and gate maps to {}", out.display());
    Ok(())
}
