use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use difflare::imaging::ImageRgb;
use difflare::pipeline::{Preset, Run, RunConfig, Stage};
use difflare::{Error, Result};

#[derive(Parser)]
#[command(name = "difflare", version, about = "Train and run the difflare flare-removal pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// TOML run configuration; keys override the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory (default `$DIFFLARE_HOME/run`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Sampling {
    /// Classifier-free guidance scale.
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Conditioning token; `null` selects the unconditional branch.
    #[arg(long, value_parser = parse_token)]
    prompt_token: Option<Token>,
}

/// A prompt token, or `None` for the unconditional branch.
#[derive(Clone, Copy)]
struct Token(Option<u32>);

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus manifests and test images.
    Synth(Shared),
    /// Pretrain the VQ autoencoder.
    TrainVq(Shared),
    /// Pretrain the latent denoiser.
    TrainDiffusion(Shared),
    /// Train the structural guidance module against the frozen denoiser.
    TrainSgim(Shared),
    /// Train the fusion network (and its unguided ablation).
    TrainAffm(Shared),
    /// Restore PNG images with the trained models.
    Infer {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        sampling: Sampling,
        /// Return the plain decode without the fusion network.
        #[arg(long)]
        no_affm: bool,
        /// Directory for the restored images.
        #[arg(long)]
        output: PathBuf,
        /// Images to restore.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Evaluate every variant on the held-out split.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        sampling: Sampling,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    match s {
        "desk" => Ok(Preset::Desk),
        "ci" => Ok(Preset::Ci),
        _ => Err(format!("unknown preset `{s}` (expected desk or ci)")),
    }
}

fn parse_token(s: &str) -> std::result::Result<Token, String> {
    if s.eq_ignore_ascii_case("null") {
        return Ok(Token(None));
    }
    s.parse().map(|t| Token(Some(t))).map_err(|e| format!("{e}"))
}

fn resolve(shared: &Shared, sampling: Option<&Sampling>) -> Result<RunConfig> {
    let mut cfg = match (&shared.config, shared.preset) {
        (Some(path), None) => RunConfig::load(path)?,
        (None, preset) => RunConfig::preset(preset.unwrap_or(Preset::Desk)),
        (Some(_), Some(_)) => {
            return Err(Error::Config("--preset conflicts with --config; set `preset` in the file".into()))
        }
    };
    if let Some(seed) = shared.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &shared.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(s) = sampling {
        if let Some(g) = s.guidance_scale {
            cfg.infer.guidance_scale = g;
        }
        if let Some(Token(t)) = s.prompt_token {
            cfg.infer.prompt_token = t;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let stage = |shared: &Shared, stage: Stage| -> Result<()> {
        let record = Run::new(resolve(shared, None)?)?.run_stage(stage)?;
        println!("{stage}: {} outputs in {:.1} s", record.outputs.len(), record.wall_time_s);
        Ok(())
    };
    match cli.command {
        Command::Synth(s) => stage(&s, Stage::Synth),
        Command::TrainVq(s) => stage(&s, Stage::TrainVq),
        Command::TrainDiffusion(s) => stage(&s, Stage::TrainDiffusion),
        Command::TrainSgim(s) => stage(&s, Stage::TrainSgim),
        Command::TrainAffm(s) => stage(&s, Stage::TrainAffm),
        Command::Infer {
            shared,
            sampling,
            no_affm,
            output,
            inputs,
        } => {
            let mut cfg = resolve(&shared, Some(&sampling))?;
            cfg.infer.no_affm |= no_affm;
            let run = Run::new(cfg)?;
            let images = inputs.iter().map(ImageRgb::load_png).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ImageRgb> = images.iter().collect();
            let restored = run.infer_images(&refs)?;
            std::fs::create_dir_all(&output).map_err(|e| Error::Io {
                path: output.clone(),
                source: e,
            })?;
            for (path, img) in inputs.iter().zip(&restored) {
                let name = path.file_name().ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
                img.save_png(output.join(name))?;
            }
            println!("restored {} images into {}", restored.len(), output.display());
            Ok(())
        }
        Command::Eval { shared, sampling } => {
            let run = Run::new(resolve(&shared, Some(&sampling))?)?;
            let report = run.evaluate()?;
            println!("{:<14} {:>10} {:>10} {:>8} {:>12} {:>10}", "variant", "mean PSNR", "med PSNR", "SSIM", "free MAE", ">input");
            for (v, a) in &report.aggregate {
                println!(
                    "{:<14} {:>10.3} {:>10.3} {:>8.4} {:>12} {:>9.0}%",
                    v.name(),
                    a.mean_psnr_db,
                    a.median_psnr_db,
                    a.mean_ssim,
                    a.mean_flare_free_mae.map_or("-".into(), |m| format!("{m:.5}")),
                    100.0 * a.psnr_above_input
                );
            }
            println!("report: {}", run.root().join(difflare::pipeline::EVAL_REPORT).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
