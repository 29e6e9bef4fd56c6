//! Command-line front end: dataset generation, two-phase training,
//! evaluation, free-text search, ablation grids, and attention export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssjdn::data::{generate_synthetic_dataset, load_dataset, save_dataset, GeneratorSpec};
use ssjdn::harness::{
    evaluate, export_attention, load_image, run_ablation, search, train_classifiers,
    train_retrieval, Checkpoint, Config, Variant,
};
use ssjdn::Result;

#[derive(Parser)]
#[command(
    name = "ssjdn",
    about = "Scale- and semantics-decoupled image-text retrieval",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config-loading flags for the training-style subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the size knobs with the full-scale profile
    /// (512-dim embeddings, batches of 100, 70 epochs).
    #[arg(long)]
    full_scale: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::from_toml_path(path)?,
            None => Config::default(),
        };
        if self.full_scale {
            config.apply_full_scale();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-scene dataset.
    GenData {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        num_images: usize,
        /// Number of shape categories (1–8).
        #[arg(long, default_value_t = 8)]
        categories: usize,
        /// Side length of the square images.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Phase 1: train the image and text category classifiers.
    TrainClassifiers {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Phase 2: train the retrieval towers against frozen classifiers.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Phase-1 classifier checkpoint.
        #[arg(long)]
        classifiers: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a retrieval checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as JSON to this path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank a dataset's images against a free-text query.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Train and compare model variants across seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant tokens, e.g. "full,w/o-bsd,boost-0.8".
        #[arg(long)]
        variants: String,
        /// Number of seeds (0, 1, ..., n-1).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Also write the result grid as JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Save a checkpoint's attention maps for one image as PNGs.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            num_images,
            categories,
            image_size,
            seed,
        } => {
            let spec = GeneratorSpec::new(num_images, image_size, categories, seed);
            let dataset = generate_synthetic_dataset(&spec)?;
            save_dataset(&dataset, &out)?;
            println!(
                "wrote {} images ({} categories, {}x{}) to {}",
                dataset.len(),
                dataset.num_categories,
                image_size,
                image_size,
                out.display()
            );
        }
        Command::TrainClassifiers { data, out, config } => {
            let config = config.load()?;
            let dataset = load_dataset(&data)?;
            let checkpoint = train_classifiers(&dataset, &config)?;
            checkpoint.save(&out)?;
            if let Some(last) = checkpoint.history.last() {
                for (name, value) in &last.metrics {
                    println!("final {name}: {value:.4}");
                }
            }
            println!("wrote classifier checkpoint to {}", out.display());
        }
        Command::Train {
            data,
            classifiers,
            out,
            config,
        } => {
            let config = config.load()?;
            let dataset = load_dataset(&data)?;
            let classifiers = Checkpoint::load(&classifiers)?;
            let checkpoint = train_retrieval(&dataset, &classifiers, &config)?;
            checkpoint.save(&out)?;
            if let Some(last) = checkpoint.history.last() {
                for (name, value) in &last.metrics {
                    println!("final {name}: {value:.4}");
                }
            }
            println!("wrote retrieval checkpoint to {}", out.display());
        }
        Command::Eval { ckpt, data, report } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let result = evaluate(&checkpoint, &dataset)?;
            print!("{}", result.table());
            if let Some(path) = report {
                write_json(&path, &result)?;
                println!("wrote report to {}", path.display());
            }
        }
        Command::Search {
            ckpt,
            data,
            query,
            top_k,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            for (id, score) in search(&checkpoint, &dataset, &query, top_k)? {
                println!("{id} {score:.6}");
            }
        }
        Command::Ablate {
            data,
            variants,
            seeds,
            out,
            config,
        } => {
            let config = config.load()?;
            let dataset = load_dataset(&data)?;
            let variants = variants
                .split(',')
                .map(|token| Variant::parse(token.trim()))
                .collect::<Result<Vec<_>>>()?;
            let seed_list: Vec<u64> = (0..seeds).collect();
            let table = run_ablation(&dataset, &config, &variants, &seed_list)?;
            print!("{}", table.table());
            if let Some(path) = out {
                write_json(&path, &table)?;
                println!("wrote ablation grid to {}", path.display());
            }
        }
        Command::ExportAttention { ckpt, image, out } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let image = load_image(&image)?;
            let paths = export_attention(&checkpoint, &image, &out)?;
            for path in paths {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
