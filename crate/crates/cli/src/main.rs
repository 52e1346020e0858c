use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sinodiff::ablation::{self, Axis};
use sinodiff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sinodiff::config::RunConfig;
use sinodiff::dataset::{make_pair, HELDOUT_OFFSET};
use sinodiff::frequency::decompose;
use sinodiff::geometry::fbp;
use sinodiff::metrics::compare;
use sinodiff::recon::{reconstruct, PwlsMode, ReconInput};
use sinodiff::tensor_io::{read_image, read_sinogram, write_image, write_png, write_sinogram};
use sinodiff::training::{loss_curve_csv, train, validation_loss, identity_loss, Trainer};
use sinodiff::{Error, Result};

#[derive(Parser)]
#[command(name = "sinodiff", version, about = "Low-dose CT sinogram restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Photon count: 1e4, 5e4, 1e5, any positive number, or `custom` for
    /// the config value.
    #[arg(long)]
    dose: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Corrected,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Modules,
    Attention,
    Fusion,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantoms and clean/noisy sinogram pairs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of pairs; defaults to training.n_pairs.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write the low/high/full frequency bands of a sinogram.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Sinogram tensor file; defaults to simulated pair 0.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the restoration network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct an image from low-dose data.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sinogram or image tensor file; defaults to held-out phantom 0.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reference image tensor for metrics.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Metrics for image pairs, or for held-out phantoms with a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference image files, paired in order with `--test`.
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        test: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train and score component ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        axis: AxisArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation { .. }
        | Error::ArchitectureMismatch(_)
        | Error::Version { .. }
        | Error::Integrity { .. } => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, f64)> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| {
        Error::Validation {
            field: "--config".into(),
            reason: format!("{}: {e}", common.config.display()),
        }
    })?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let dose = match common.dose.as_deref() {
        None | Some("custom") => cfg.dose.photon_count,
        Some(s) => match s.parse::<f64>() {
            Ok(v) if v > 0.0 => v,
            _ => {
                return Err(Error::Validation {
                    field: "--dose".into(),
                    reason: format!("expected 1e4, 5e4, 1e5, a positive number or custom, got `{s}`"),
                })
            }
        },
    };
    cfg.dose.photon_count = dose;
    cfg.validate()?;
    Ok((cfg, dose))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn apply_mode(cfg: &mut RunConfig, mode: Option<ModeArg>) {
    if let Some(m) = mode {
        cfg.recon.pwls.mode = match m {
            ModeArg::Corrected => PwlsMode::Corrected,
            ModeArg::Literal => PwlsMode::Literal,
        };
    }
}

fn checkpoint_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.paths.checkpoint.clone()).ok_or_else(|| Error::Validation {
        field: "--checkpoint".into(),
        reason: "required (or set paths.checkpoint in the config)".into(),
    })
}

fn load_for(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_architecture(cfg)?;
    Ok(ckpt)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, count } => {
            let (cfg, dose) = load_config(&common)?;
            let out = &common.out;
            cfg.write_snapshot(out)?;
            let n = count.unwrap_or(cfg.training.n_pairs);
            for i in 0..n as u64 {
                let p = make_pair(&cfg.geometry, &cfg.phantom, dose, cfg.dose.electronic_sigma, cfg.seed, i)?;
                let dir = out.join(format!("pair_{i:04}"));
                mkdir(&dir)?;
                write_image(&dir.join("phantom.img"), &p.phantom)?;
                write_sinogram(&dir.join("clean.sino"), &p.clean)?;
                write_sinogram(&dir.join("noisy.sino"), &p.noisy)?;
                let n = cfg.geometry.image_size;
                write_png(&dir.join("phantom.png"), n, n, p.phantom.pixels(), None)?;
                let (v, d) = p.noisy.shape();
                write_png(&dir.join("noisy.png"), v, d, p.noisy.values(), None)?;
            }
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Decompose { common, input } => {
            let (cfg, dose) = load_config(&common)?;
            let out = &common.out;
            cfg.write_snapshot(out)?;
            let sino = match input {
                Some(p) => read_sinogram(&p)?,
                None => make_pair(&cfg.geometry, &cfg.phantom, dose, cfg.dose.electronic_sigma, cfg.seed, 0)?.noisy,
            };
            let bands = decompose(&sino, cfg.denoiser.sigma)?;
            let (v, d) = sino.shape();
            for (name, s) in [("low", &bands.low), ("high", &bands.high), ("full", &bands.full)] {
                write_sinogram(&out.join(format!("{name}.sino")), s)?;
                write_png(&out.join(format!("{name}.png")), v, d, s.values(), None)?;
            }
            println!("wrote bands to {}", out.display());
        }
        Command::Train { common, resume } => {
            let (cfg, _) = load_config(&common)?;
            let out = common.out.clone();
            cfg.write_snapshot(&out)?;
            let (train_set, held_out) = ablation::datasets(&cfg)?;
            let mut trainer = match resume {
                Some(p) => load_for(&cfg, &p)?.into_trainer(),
                None => Trainer::new(&cfg)?,
            };
            let interval = cfg.training.checkpoint_interval;
            let started = std::time::Instant::now();
            let curve = train(&mut trainer, &train_set, &cfg, cfg.training.iterations, |tr, _| {
                if interval > 0 && tr.iteration % interval == 0 {
                    let path = out.join(format!("checkpoint_{:06}.ckpt", tr.iteration));
                    save_checkpoint(&Checkpoint::from_trainer(&cfg, tr), &path)?;
                }
                Ok(())
            })?;
            let seconds = started.elapsed().as_secs_f64();
            save_checkpoint(&Checkpoint::from_trainer(&cfg, &trainer), &out.join("checkpoint.ckpt"))?;
            write_text(&out.join("loss.csv"), &loss_curve_csv(&curve))?;
            let t = cfg.schedule.steps;
            let summary = json!({
                "iterations": trainer.iteration,
                "seconds": seconds,
                "validation_loss_at_T": validation_loss(&trainer.params, &held_out, t, &cfg)?,
                "identity_loss_at_T": identity_loss(&held_out, t, &cfg)?,
            });
            write_text(&out.join("summary.json"), &format!("{summary:#}\n"))?;
            println!("{summary}");
        }
        Command::Reconstruct { common, checkpoint, input, reference, mode } => {
            let (mut cfg, dose) = load_config(&common)?;
            apply_mode(&mut cfg, mode);
            let ckpt = load_for(&cfg, &checkpoint_path(checkpoint, &cfg)?)?;
            let out = &common.out;
            cfg.write_snapshot(out)?;
            let ps = cfg.geometry.pixel_size();
            let (input, reference) = match input {
                Some(p) => {
                    let inp = match read_sinogram(&p) {
                        Ok(s) => ReconInput::Sinogram(s),
                        Err(_) => ReconInput::Image(read_image(&p, ps)?),
                    };
                    let r = reference.map(|r| read_image(&r, ps)).transpose()?;
                    (inp, r)
                }
                None => {
                    let p = make_pair(&cfg.geometry, &cfg.phantom, dose, cfg.dose.electronic_sigma, cfg.seed, HELDOUT_OFFSET)?;
                    let r = match reference {
                        Some(r) => read_image(&r, ps)?,
                        None => p.reference(&cfg.geometry)?,
                    };
                    (ReconInput::Sinogram(p.noisy), Some(r))
                }
            };
            let (image, report) = reconstruct(&input, &ckpt.params, &cfg, dose, reference.as_ref())?;
            write_image(&out.join("recon.img"), &image)?;
            write_png(&out.join("recon.png"), image.height(), image.width(), image.pixels(), None)?;
            let mut steps = String::from("t,fidelity_residual,tv\n");
            for s in &report.steps {
                steps.push_str(&format!("{},{:e},{:e}\n", s.t, s.fidelity_residual, s.tv));
            }
            write_text(&out.join("steps.csv"), &steps)?;
            if let Some(q) = report.quality {
                write_text(&out.join("metrics.csv"), &format!("psnr,ssim,mse\n{:.6},{:.6},{:e}\n", q.psnr, q.ssim, q.mse))?;
                let m = json!({"psnr": q.psnr, "ssim": q.ssim, "mse": q.mse, "photon_count": dose});
                write_text(&out.join("metrics.json"), &format!("{m:#}\n"))?;
                println!("{m}");
            }
        }
        Command::Evaluate { common, checkpoint, reference, test, mode } => {
            let (mut cfg, dose) = load_config(&common)?;
            apply_mode(&mut cfg, mode);
            let out = &common.out;
            cfg.write_snapshot(out)?;
            let mut csv = String::from("name,psnr,ssim,mse\n");
            if !reference.is_empty() || !test.is_empty() {
                if reference.len() != test.len() {
                    return Err(Error::Validation {
                        field: "--test".into(),
                        reason: format!("{} references but {} test images", reference.len(), test.len()),
                    });
                }
                let ps = cfg.geometry.pixel_size();
                for (r, t) in reference.iter().zip(&test) {
                    let q = compare(&read_image(r, ps)?, &read_image(t, ps)?)?;
                    csv.push_str(&format!("{},{:.6},{:.6},{:e}\n", t.display(), q.psnr, q.ssim, q.mse));
                }
            } else {
                let ckpt = load_for(&cfg, &checkpoint_path(checkpoint, &cfg)?)?;
                let (_, held_out) = ablation::datasets(&cfg)?;
                for (i, p) in held_out.iter().enumerate() {
                    let r = p.reference(&cfg.geometry)?;
                    let base = compare(&r, &fbp(&p.noisy, &cfg.geometry)?)?;
                    let inp = ReconInput::Sinogram(p.noisy.clone());
                    let (_, rep) = reconstruct(&inp, &ckpt.params, &cfg, dose, Some(&r))?;
                    let q = rep.quality.expect("reference given");
                    csv.push_str(&format!("fbp_{i},{:.6},{:.6},{:e}\n", base.psnr, base.ssim, base.mse));
                    csv.push_str(&format!("recon_{i},{:.6},{:.6},{:e}\n", q.psnr, q.ssim, q.mse));
                }
            }
            write_text(&out.join("metrics.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Ablate { common, axis } => {
            let (cfg, _) = load_config(&common)?;
            let out = common.out.clone();
            cfg.write_snapshot(&out)?;
            let axes: Vec<Axis> = match axis {
                AxisArg::Modules => vec![Axis::Modules],
                AxisArg::Attention => vec![Axis::Attention],
                AxisArg::Fusion => vec![Axis::Fusion],
                AxisArg::All => Axis::ALL.to_vec(),
            };
            let (train_set, held_out) = ablation::datasets(&cfg)?;
            let mut rows = Vec::new();
            for a in axes {
                rows.extend(ablation::run_axis(a, &cfg, &train_set, &held_out, |row, ckpt| {
                    let dir = out.join(a.name()).join(row.name.replace('+', "_"));
                    ckpt.config.write_snapshot(&dir)?;
                    save_checkpoint(ckpt, &dir.join("checkpoint.ckpt"))
                })?);
            }
            let fbp_q = ablation::evaluate_fbp(&cfg, &held_out)?;
            rows.push(ablation::AblationRow {
                axis: "baseline".into(),
                name: "FBP".into(),
                quality: fbp_q,
            });
            let csv = ablation::rows_csv(&rows);
            write_text(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
