//! `uodr`: batch front end for synthetic data generation, training,
//! ablations, standalone matching and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use uodr::config::{ExperimentConfig, Flags};
use uodr::evaluate::{evaluate, Metrics};
use uodr::matcher::{match_domains_by, Distance};
use uodr::model::{load_checkpoint, save_checkpoint};
use uodr::synth::{self, load_features, UnlabeledDataset};
use uodr::trainer::{
    run_ablation, run_experiment, save_history, seed_range, ExperimentData, TARGET_FILE,
};
use uodr::{Error, Rng};

#[derive(Parser)]
#[command(
    name = "uodr",
    version,
    about = "Unsupervised open domain recognition experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark into a data directory.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline on a data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss terms to enable, e.g. `lb,sgmd,gcn`, `vanilla` or `baseline`.
        /// Overrides the config's flags section.
        #[arg(long)]
        flags: Option<Flags>,
        /// Overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every ablation variant over consecutive seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Shared data directory. Without it each seed draws its own
        /// synthetic benchmark with `synth.seed` set to the seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two feature sets fold by fold and write the pairs.
    Match {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Distance::L1)]
        distance: Distance,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the target set of a data directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn exit_status(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::NumericFailure { .. } => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> uodr::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> uodr::Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_synth(config: &Path, out: &Path) -> uodr::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let b = synth::generate(&cfg.synth)?;
    let data = ExperimentData {
        source: b.source,
        target: b.target,
        graph: b.graph,
        word_vectors: b.word_vectors,
    };
    data.save(out)?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "config_hash": cfg.hash(),
            "synth": cfg.synth,
            "source_instances": data.source.len(),
            "target_instances": data.target.len(),
            "known_classes": data.graph.known_class_count(),
            "total_classes": data.graph.total_class_count(),
            "graph_nodes": data.graph.num_nodes(),
        }),
    )?;
    info!("wrote benchmark to {}", out.display());
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    flags: Option<Flags>,
    seed: Option<u64>,
) -> uodr::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(f) = flags {
        cfg.flags = f;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = ExperimentData::load(data)?;
    let run = run_experiment(&cfg, &data)?;
    create_dir(out)?;
    let hash = cfg.hash();
    save_checkpoint(&out.join("checkpoint"), &run.state, &hash)?;
    save_history(out, &run.history)?;
    write_json(
        &out.join("metrics.json"),
        &Metrics::new(run.metrics, &hash, cfg.seed),
    )?;
    println!("{}", run.metrics.table_row(&cfg.flags.name()));
    Ok(())
}

fn cmd_ablate(config: &Path, data: Option<&Path>, seeds: usize, out: &Path) -> uodr::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let shared = data.map(ExperimentData::load).transpose()?;
    let per_seed = |s: u64| match &shared {
        Some(d) => Ok(d.clone()),
        None => ExperimentData::synthetic(&synth::SynthConfig {
            seed: s,
            ..cfg.synth.clone()
        }),
    };
    let report = run_ablation(&cfg, &seed_range(cfg.seed, seeds), &per_seed)?;
    create_dir(out)?;
    write_json(&out.join("ablation.json"), &report)?;
    let table = report.table();
    std::fs::write(out.join("ablation.txt"), &table).map_err(|source| Error::Io {
        path: out.join("ablation.txt"),
        source,
    })?;
    print!("{table}");
    Ok(())
}

fn cmd_match(
    source: &Path,
    target: &Path,
    folds: usize,
    seed: u64,
    distance: Distance,
    out: &Path,
) -> uodr::Result<()> {
    let fs = load_features(source)?;
    let ft = load_features(target)?;
    let mut rng = Rng::seed_from_u64(seed);
    let pairs = match_domains_by(&fs, &ft, folds, distance, &mut rng)?;
    pairs.save(out)?;
    info!("{} pairs, total cost {}", pairs.len(), pairs.total_cost);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> uodr::Result<()> {
    let (state, _) = load_checkpoint(checkpoint)?;
    let target = UnlabeledDataset::load(&data.join(TARGET_FILE))?;
    let acc = evaluate(&state, &target)?;
    println!("{}", serde_json::to_string_pretty(&acc)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Synth { config, out } => cmd_synth(config, out),
        Command::Train {
            config,
            data,
            out,
            flags,
            seed,
        } => cmd_train(config, data, out, *flags, *seed),
        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => cmd_ablate(config, data.as_deref(), *seeds, out),
        Command::Match {
            source,
            target,
            folds,
            seed,
            distance,
            out,
        } => cmd_match(source, target, *folds, *seed, *distance, out),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}
