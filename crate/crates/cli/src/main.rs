// SPDX-License-Identifier: Apache-2.0

//! `lidar-cls`: range-image instance classification from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lidar_cls::classifier::weights::save_weights;
use lidar_cls::classifier::Architecture;
use lidar_cls::config::{InstanceMode, PipelineConfig};
use lidar_cls::features::write_patch_dump;
use lidar_cls::pipeline::{self, RunReport, ScanSettings};
use lidar_cls::pointcloud::{load_labels, load_scan};
use lidar_cls::range_image::build;
use lidar_cls::{Error, Execution};

#[derive(Parser)]
#[command(name = "lidar-cls", version, about = "Lidar instance classification on range images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the overrides shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding `sequences/`.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// LCNW weight file.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Comma-separated channels, e.g. `I,HNV,VNV`.
    #[arg(long, global = true)]
    channels: Option<String>,
    /// `clustered` or `gt`.
    #[arg(long, global = true)]
    instances: Option<String>,
    /// Comma-separated sequence names.
    #[arg(long, global = true)]
    sequences: Option<String>,
    /// Scan-level workers; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Project one scan and report image occupancy.
    Project { scan: PathBuf },
    /// Print instance proposals of one scan, one per line.
    Cluster {
        scan: PathBuf,
        /// Label file; required with `--instances gt`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Run the pipeline over the dataset and write detections.
    Classify,
    /// Run the pipeline over a labeled dataset and print metrics.
    Evaluate,
    /// Time forward passes over one batch of synthetic patches.
    Bench {
        #[arg(long, default_value_t = 100)]
        n_instances: usize,
        /// Thread limit; repeat for several reports. 0 means unlimited.
        #[arg(long, default_values_t = [0])]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
    },
    /// Write seeded random weights for the configured channels.
    GenWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        out: PathBuf,
    },
    /// Write one grayscale PNG per selected channel plus the mask.
    Export { scan: PathBuf },
    /// Write a labeled synthetic dataset in SemanticKITTI layout.
    Synth {
        #[arg(long, default_value_t = 10)]
        scans: usize,
        #[arg(long, default_value_t = 12)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "00")]
        sequence: String,
    },
    /// Write labeled patches of the dataset as an LPCH file for training.
    Dump { out: PathBuf },
}

fn load_config(common: &Common) -> lidar_cls::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(r) = &common.root {
        cfg.dataset.root = Some(r.clone());
    }
    if let Some(w) = &common.weights {
        cfg.model.weights = Some(w.clone());
    }
    if let Some(c) = &common.channels {
        cfg.features.channels = c.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(m) = &common.instances {
        cfg.dataset.instances = match m.as_str() {
            "clustered" => InstanceMode::Clustered,
            "gt" => InstanceMode::Gt,
            other => return Err(Error::Config(format!("unknown instance mode `{other}`"))),
        };
    }
    if let Some(s) = &common.sequences {
        cfg.dataset.sequences = s.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(w) = common.workers {
        cfg.run.workers = w;
    }
    if let Some(o) = &common.output {
        cfg.run.output = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scan".into())
}

fn print_run(report: &RunReport) {
    eprintln!(
        "{} scans processed, {} failed, {:.2} s",
        report.processed.len(),
        report.failed.len(),
        report.timing.total_seconds
    );
    for (id, e) in &report.failed {
        eprintln!("  {id}: {e}");
    }
}

fn run(command: Command, cfg: PipelineConfig) -> anyhow::Result<u8> {
    if !matches!(command, Command::Synth { .. }) {
        cfg.check_paths()?;
    }
    match command {
        Command::Project { scan } => {
            let s = load_scan(&scan)?;
            let img = build(&s, &cfg.projection, Execution::Parallel)?;
            println!("points {}", s.len());
            println!("pixels {}", cfg.projection.pixels());
            println!("filled {}", img.filled_pixels());
            println!("occluded {}", s.len() - img.filled_pixels() - img.skipped_points);
            println!("skipped {}", img.skipped_points);
        }
        Command::Cluster { scan, labels } => {
            let settings = ScanSettings::from_config(&cfg)?;
            let s = load_scan(&scan)?;
            let (s, l) = match labels {
                Some(p) => {
                    let labeled = load_labels(p, s)?;
                    (labeled.scan, Some(labeled.labels))
                }
                None => (s, None),
            };
            let (_, proposals) = pipeline::propose(&s, l.as_deref(), &settings, Execution::Parallel)?;
            for p in &proposals {
                println!("{}", p.to_line());
            }
            eprintln!("{} proposals", proposals.len());
        }
        Command::Classify | Command::Evaluate => {
            let evaluate = matches!(command, Command::Evaluate);
            let report = pipeline::run_pipeline(&cfg)?;
            print_run(&report);
            if evaluate {
                match &report.metrics {
                    Some(m) => print!("{}", m.to_table()),
                    None if report.processed.is_empty() => {}
                    None => bail!("no labels found; nothing to evaluate"),
                }
            }
            return Ok(report.exit_code() as u8);
        }
        Command::Bench {
            n_instances,
            threads,
            repetitions,
        } => {
            let model = pipeline::load_model(&cfg)?;
            for t in threads {
                let r = pipeline::bench(&model, n_instances, (t > 0).then_some(t), repetitions)?;
                println!("{r}");
            }
        }
        Command::GenWeights { seed, out } => {
            let arch = Architecture {
                patch_side: cfg.features.patch_side,
                ..Architecture::with_channels(cfg.channel_config()?)
            };
            let model = arch.init_random(seed)?;
            save_weights(&model, &out)?;
            eprintln!("{} parameters written to {}", model.param_count(), out.display());
        }
        Command::Export { scan } => {
            let out = cfg.run.output.clone().unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let s = load_scan(&scan)?;
            let img = build(&s, &cfg.projection, Execution::Parallel)?;
            let id = stem(&scan);
            let (h, w) = (img.height() as u32, img.width() as u32);
            for ch in cfg.channel_config()?.channels() {
                let path = out.join(format!("{id}_{}.png", ch.name()));
                image::GrayImage::from_raw(w, h, img.to_gray8(ch))
                    .context("image buffer size")?
                    .save(&path)
                    .with_context(|| path.display().to_string())?;
                println!("{}", path.display());
            }
        }
        Command::Synth {
            scans,
            objects,
            seed,
            sequence,
        } => {
            let root = cfg.dataset.root.clone().context("--root is required")?;
            let written = lidar_cls::synth::write_dataset(&root, &sequence, scans, objects, seed, &cfg.projection)?;
            eprintln!("{} scans written under {}", written.len(), root.display());
        }
        Command::Dump { out } => {
            let root = cfg.dataset.root.clone().context("--root is required")?;
            let settings = ScanSettings::from_config(&cfg)?;
            let entries = pipeline::discover_scans(&root, &cfg.dataset.sequences, &cfg.dataset.scans)?;
            let mut patches = Vec::new();
            for entry in &entries {
                let (scan, labels) = pipeline::load_entry(entry)?;
                let Some(labels) = labels else {
                    log::warn!("{}: no labels, skipped", entry.id);
                    continue;
                };
                patches.extend(pipeline::labeled_patches(&scan, &labels, &settings, Execution::Parallel)?);
            }
            if patches.is_empty() {
                bail!("no patches found in {} scans", entries.len());
            }
            let file = fs::File::create(&out).with_context(|| out.display().to_string())?;
            write_patch_dump(std::io::BufWriter::new(file), &patches)?;
            eprintln!("{} patches from {} scans written to {}", patches.len(), entries.len(), out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, cfg) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
