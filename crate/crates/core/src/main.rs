use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpa_codec::autodiff::ParameterStore;
use mpa_codec::entropy::{compress, decompress};
use mpa_codec::harness::{dump_masks, evaluate, parse_grid};
use mpa_codec::model::{Codec, Image, Task};
use mpa_codec::train::{execute, read_dataset, texture_set, write_dataset, TextureKind, TrainRun};
use mpa_codec::{Error, Result};

#[derive(Parser)]
#[command(name = "mpa", version, about = "Variable-rate learned image codec with task-steerable decoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training stage described by a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compress a PPM into a container.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reconstruct a PPM from a container.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        #[arg(long, default_value = "mse")]
        task: Task,
        #[arg(long)]
        output: PathBuf,
        /// Directory receiving one PGM per routed decoder stage.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Sweep quality and task orientation over a dataset, writing CSV.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "1,2,3,4,5,6,7,8")]
        q_grid: String,
        #[arg(long, default_value = "0,1")]
        alpha_grid: String,
        #[arg(long, default_value = "mse")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset (PPMs plus labels).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "mixed")]
        kind: TextureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_model(path: &PathBuf) -> Result<(Codec, ParameterStore<f32>)> {
    let store = ParameterStore::load(path)?;
    Ok((Codec::from_store(&store)?, store))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config } => {
            let summary = execute(&TrainRun::load(config)?)?;
            for l in summary.lines {
                println!("{l}");
            }
        }
        Cmd::Encode { input, model, q, output } => {
            let (codec, store) = load_model(&model)?;
            let img = Image::load(&input)?;
            let c = compress(&codec, &store, &img, q)?;
            std::fs::write(&output, &c.bytes)?;
            println!("bpp_actual={:.6} bpp_estimated={:.6} bytes={}", c.bpp_actual, c.bpp_estimated, c.bytes.len());
        }
        Cmd::Decode { input, model, alpha, task, output, dump_masks: dir } => {
            let (codec, store) = load_model(&model)?;
            let bytes = std::fs::read(&input)?;
            let d = decompress(&codec, &store, &bytes, alpha, task, None)?;
            d.image.save(&output)?;
            if let Some(dir) = dir {
                for p in dump_masks(&d, dir)? {
                    println!("mask: {}", p.display());
                }
            }
            println!("decoded {}x{} at q={} alpha={alpha} task={task}", d.image.width, d.image.height, d.quality);
        }
        Cmd::Eval { dataset, model, q_grid, alpha_grid, task, out } => {
            let (codec, store) = load_model(&model)?;
            let entries = read_dataset(&dataset)?;
            let report = evaluate(&codec, &store, &entries, &parse_grid(&q_grid)?, &parse_grid(&alpha_grid)?, task)?;
            std::fs::write(&out, report.to_csv())?;
            println!("{} rows -> {}", report.rows.len(), out.display());
        }
        Cmd::GenData { out, count, size, kind, seed } => {
            if size == 0 {
                return Err(Error::Config("size must be positive".into()));
            }
            write_dataset(&out, &texture_set(seed, kind, size, count))?;
            println!("{count} images -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
