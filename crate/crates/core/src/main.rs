use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctsim::container;
use ctsim::degrade::{self, DegradeSpec, Mode};
use ctsim::harness::dataset::{ensure_dataset, load_split};
use ctsim::harness::experiment::{decisions, evaluate, metric_row, train_models};
use ctsim::harness::{
    build_degraded_variants, generate_dataset, render_report, run_retrain_experiment,
    run_robustness_experiment, summary_csv, DatasetManifest, ExperimentConfig, ReportKind,
    RobustnessReport, Split, ORIGINAL_TAG,
};
use ctsim::phantom::{rasterize, sample_phantom, Phantom};
use ctsim::projector::{forward_project_analytic, forward_project_grid};
use ctsim::recon::{fbp, FilterSpec, Kernel};
use ctsim::triage::read_model;
use ctsim::{Error, Result};

/// Simulated CT degradation and triage-robustness experiments.
#[derive(Parser)]
#[command(name = "ctsim", version)]
struct Cli {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed: the phantom or noise seed for single-image commands, the
    /// master seed for experiment commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a phantom; writes phantom.json and a rasterized phantom.ctimg.
    Phantom {
        #[arg(long, default_value_t = 256)]
        n_pixels: usize,
    },
    /// Forward-project a phantom (or a rasterized image with --grid) to sinogram.ctsino.
    Project {
        #[arg(long)]
        input: PathBuf,
        /// Treat the input as a CTIMGG01 image and use the grid projector.
        #[arg(long)]
        grid: bool,
    },
    /// Degrade a sinogram; writes degraded.ctsino.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        factor: u32,
    },
    /// Filtered back projection; writes image.ctimg.
    Recon {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "ramp_hann")]
        kernel: Kernel,
        #[arg(long)]
        n_pixels: Option<usize>,
        #[arg(long)]
        fov: Option<f64>,
    },
    /// Generate phantoms, sinograms and original reconstructions.
    GenDataset,
    /// Reconstruct every degraded variant of the generated dataset.
    BuildVariants,
    /// Train one model per configured seed on a variant.
    Train {
        #[arg(long, default_value = ORIGINAL_TAG)]
        variant: String,
    },
    /// Evaluate a model on a variant's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = ORIGINAL_TAG)]
        variant: String,
    },
    /// Baseline models on original data, evaluated on every variant.
    Robustness,
    /// Retrain on each limited-angle variant.
    Retrain,
    /// Render report.svg and summary.csv from the stored reports.
    Report,
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.dataset.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    match &cli.command {
        Command::Phantom { n_pixels } => {
            let cfg = experiment_config(cli)?;
            let spec = &cfg.dataset.phantom;
            let phantom = sample_phantom(spec, cli.seed.unwrap_or(0))?;
            let dir = out_dir(cli);
            let json = dir.join("phantom.json");
            container::write_bytes(&json, phantom.to_json()?.as_bytes())?;
            announce(&json);
            let img = dir.join("phantom.ctimg");
            container::write_image(&img, &rasterize(&phantom, *n_pixels, spec.field_of_view)?)?;
            announce(&img);
        }
        Command::Project { input, grid } => {
            let cfg = experiment_config(cli)?;
            let sino = if *grid {
                forward_project_grid(&container::read_image(input)?, &cfg.geometry)?
            } else {
                let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
                forward_project_analytic(&Phantom::from_json(&text)?, &cfg.geometry)?
            };
            let path = out_dir(cli).join("sinogram.ctsino");
            container::write_sinogram(&path, &sino)?;
            announce(&path);
        }
        Command::Degrade { input, mode, factor } => {
            let cfg = experiment_config(cli)?;
            let spec = match mode {
                Mode::Current => DegradeSpec::current(*factor, &cfg.dose, cli.seed.unwrap_or(0)),
                _ => DegradeSpec::selection(*mode, *factor),
            };
            spec.validate()?;
            let out = degrade::apply(&spec, &container::read_sinogram(input)?)?;
            let path = out_dir(cli).join("degraded.ctsino");
            container::write_sinogram(&path, &out)?;
            announce(&path);
        }
        Command::Recon {
            input,
            kernel,
            n_pixels,
            fov,
        } => {
            let cfg = experiment_config(cli)?;
            let sino = container::read_sinogram(input)?;
            let filter = FilterSpec::for_detectors(*kernel, sino.geometry.n_detectors);
            let r = &cfg.reconstruction;
            let img = fbp(
                &sino,
                n_pixels.unwrap_or(r.n_pixels),
                fov.unwrap_or(r.field_of_view),
                &filter,
            )?;
            let path = out_dir(cli).join("image.ctimg");
            container::write_image(&path, &img)?;
            announce(&path);
        }
        Command::GenDataset => {
            let cfg = experiment_config(cli)?;
            let m = generate_dataset(&cfg)?;
            println!(
                "{} images ({} abnormal), manifest {}",
                m.n_images,
                m.abnormal_count,
                DatasetManifest::path(&cfg.output_dir).display()
            );
        }
        Command::BuildVariants => {
            let cfg = experiment_config(cli)?;
            let m = DatasetManifest::load(&cfg.output_dir)?;
            let m = build_degraded_variants(&m, &cfg)?;
            println!("variants: {}", m.variant_tags.join(", "));
        }
        Command::Train { variant } => {
            let cfg = experiment_config(cli)?;
            let m = ensure_dataset(&cfg)?;
            let models = train_models(&cfg, &m, variant, &cfg.seeds)?;
            for model in &models {
                let last = model.training_curve.last();
                println!(
                    "seed {}: best epoch {}, final val loss {}",
                    model.seed,
                    model.best_epoch,
                    last.map_or(f64::NAN, |r| r.val_loss)
                );
            }
        }
        Command::Eval { model, variant } => {
            let cfg = experiment_config(cli)?;
            let m = DatasetManifest::load(&cfg.output_dir)?;
            let model = read_model(model)?;
            let (_, original) = load_split(&m, &cfg, ORIGINAL_TAG, Split::Test)?;
            let (_, test) = load_split(&m, &cfg, variant, Split::Test)?;
            let reference = decisions(&evaluate(&model, &original)?);
            let scores = evaluate(&model, &test)?;
            let row = metric_row(variant, model.seed, &scores, &test.labels, &reference)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
        }
        Command::Robustness => {
            let cfg = experiment_config(cli)?;
            let report = run_robustness_experiment(&cfg)?;
            print_summaries(&report);
            announce(&RobustnessReport::csv_path(&cfg.output_dir, ReportKind::Robustness));
        }
        Command::Retrain => {
            let cfg = experiment_config(cli)?;
            let report = run_retrain_experiment(&cfg)?;
            print_summaries(&report);
            announce(&RobustnessReport::csv_path(&cfg.output_dir, ReportKind::Retrain));
        }
        Command::Report => {
            let cfg = experiment_config(cli)?;
            let dir = &cfg.output_dir;
            let robust = RobustnessReport::read(dir, ReportKind::Robustness)?;
            let retrain = if RobustnessReport::json_path(dir, ReportKind::Retrain).is_file() {
                Some(RobustnessReport::read(dir, ReportKind::Retrain)?)
            } else {
                None
            };
            let svg = dir.join("report.svg");
            container::write_bytes(&svg, render_report(&robust, retrain.as_ref())?.as_bytes())?;
            announce(&svg);
            let table = dir.join("summary.csv");
            container::write_bytes(&table, summary_csv(&robust, retrain.as_ref())?.as_bytes())?;
            announce(&table);
        }
    }
    Ok(())
}

fn print_summaries(report: &RobustnessReport) {
    if let Some(b) = &report.baseline {
        println!("{:<16} AUROC {:.4} (std = {:.4})", "baseline", b.auroc_mean, b.auroc_std);
    }
    for s in &report.summaries {
        println!(
            "{:<16} AUROC {:.4} (std = {:.4})  kappa {:.3}  sens {:.3}  spec {:.3}",
            s.dataset_tag, s.auroc_mean, s.auroc_std, s.kappa_mean, s.sensitivity_mean, s.specificity_mean
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
