use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ncn::dataset::{
    generate_sbm, load_graph, load_splits, make_split, save_graph, save_splits, SbmSpec,
};
use ncn::error::{Error, Result};
use ncn::gna::{load_grid, propagate, save_grid, PropagationSpec, Scheme};
use ncn::graph::{homophily_ratio, normalize_adjacency, Graph};
use ncn::model::{export_fusion_weights, load_checkpoint, save_checkpoint};
use ncn::trainer::{run_many, sweep_k, train, evaluate, MultiRunResult, TrainConfig};

#[derive(Parser)]
#[command(name = "ncn", about = "Node classification with neighborhood convolutional networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the propagated grid tensor for a dataset and write it to disk.
    Preprocess {
        /// Dataset directory (edges.csv, features.csv, labels.csv)
        dataset_dir: PathBuf,
        #[arg(long)]
        k: usize,
        /// Propagation scheme: ppr or rw
        #[arg(long, default_value = "ppr")]
        scheme: String,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per a JSON run spec: multi-run metrics plus one checkpoint.
    Train {
        config: PathBuf,
    },
    /// Report accuracy of a checkpoint on one split of a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset_dir: PathBuf,
        /// Grid tensor file produced by `preprocess`
        #[arg(long)]
        grid: PathBuf,
        /// Which split to score: train, val, or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Split file; defaults to <dataset_dir>/splits.json
        #[arg(long)]
        splits_file: Option<PathBuf>,
    },
    /// Re-run the full experiment for each K in the run spec's k_values.
    SweepK {
        config: PathBuf,
    },
    /// Generate a stochastic block model dataset directory.
    Synth {
        /// JSON file with the SBM parameters
        spec: PathBuf,
        out_dir: PathBuf,
    },
    /// Print the edge homophily ratio of a dataset.
    Homophily {
        dataset_dir: PathBuf,
    },
    /// Export per-node fusion weights (a0, a1) to CSV.
    ExportWeights {
        checkpoint: PathBuf,
        dataset_dir: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Experiment description consumed by `train` and `sweep-k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSpec {
    /// Directory with an existing CSV dataset. Exactly one of `dataset` and
    /// `sbm` must be set.
    #[serde(default)]
    dataset: Option<PathBuf>,
    /// Parameters for a generated dataset.
    #[serde(default)]
    sbm: Option<SbmSpec>,
    train: TrainConfig,
    out_dir: PathBuf,
    /// Propagation steps to visit (sweep-k only).
    #[serde(default)]
    k_values: Vec<usize>,
}

impl RunSpec {
    fn load(path: &Path) -> Result<RunSpec> {
        let txt = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let spec: RunSpec = serde_json::from_str(&txt)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        spec.train.validate()?;
        match (&spec.dataset, &spec.sbm) {
            (Some(_), Some(_)) | (None, None) => Err(Error::Config(
                "run spec must set exactly one of `dataset` and `sbm`".into(),
            )),
            _ => Ok(spec),
        }
    }

    fn graph(&self) -> Result<Graph> {
        match (&self.dataset, &self.sbm) {
            (Some(dir), None) => load_graph(dir),
            (None, Some(spec)) => generate_sbm(spec),
            _ => unreachable!("validated in load"),
        }
    }
}

fn parse_scheme(s: &str) -> Result<Scheme> {
    match s {
        "ppr" => Ok(Scheme::Ppr),
        "rw" => Ok(Scheme::Rw),
        other => Err(Error::Config(format!(
            "unknown scheme '{}' (expected ppr or rw)",
            other
        ))),
    }
}

fn cmd_preprocess(
    dataset_dir: &Path,
    k: usize,
    scheme: &str,
    gamma: f64,
    out: &Path,
) -> Result<()> {
    let spec = PropagationSpec {
        scheme: parse_scheme(scheme)?,
        k,
        gamma,
    };
    spec.validate()?;
    let graph = load_graph(dataset_dir)?;
    let adj = normalize_adjacency(&graph);
    let grid = propagate(&graph, &adj, &spec)?;
    save_grid(&grid, out)?;
    let bytes = fs::metadata(out)?.len();
    println!("n={} K={} d={} bytes={}", grid.n, grid.k, grid.d, bytes);
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config: &'a TrainConfig,
    result: &'a MultiRunResult,
}

fn cmd_train(config: &Path) -> Result<()> {
    let spec = RunSpec::load(config)?;
    let graph = spec.graph()?;
    let adj = normalize_adjacency(&graph);
    let grid = propagate(&graph, &adj, &spec.train.propagation())?;
    fs::create_dir_all(&spec.out_dir)?;

    eprintln!(
        "training {} run(s) on graph with n={}, m={}, d={}, c={}",
        spec.train.runs, graph.n, graph.edge_count(), graph.d, graph.c
    );
    if spec.sbm.is_some() {
        // generated datasets are not on disk anywhere else; keep a copy so
        // eval / export-weights can be pointed at the run directory
        save_graph(&graph, &spec.out_dir.join("dataset"))?;
    }
    let result = run_many(&graph, &grid, &spec.train)?;
    let metrics_path = spec.out_dir.join("metrics.json");
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&MetricsFile {
            config: &spec.train,
            result: &result,
        })
        .unwrap(),
    )?;

    // checkpoint from a training run on the master-seed split
    let split = make_split(graph.n, (0.6, 0.2, 0.2), spec.train.seed, None)?;
    let (model, _) = train(&graph, &grid, &split, &spec.train)?;
    save_checkpoint(&model, &spec.out_dir.join("model.ckpt"))?;
    save_grid(&grid, &spec.out_dir.join("grid.ncnt"))?;
    save_splits(&split, &spec.out_dir.join("splits.json"))?;

    eprintln!(
        "test accuracy {:.4} +- {:.4} over {} runs",
        result.mean_test_accuracy, result.std_test_accuracy, spec.train.runs
    );
    println!("{}", metrics_path.display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    dataset_dir: &Path,
    grid_path: &Path,
    split_name: &str,
    splits_file: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let graph = load_graph(dataset_dir)?;
    let grid = load_grid(grid_path)?;
    grid.ensure_matches(&graph)?;
    if grid.k != model.cfg.k {
        return Err(Error::Config(format!(
            "grid tensor has K = {} but checkpoint was trained with K = {}",
            grid.k, model.cfg.k
        )));
    }
    let default_splits = dataset_dir.join("splits.json");
    let split = load_splits(splits_file.unwrap_or(&default_splits))?;
    let ids = match split_name {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{}' (expected train, val, or test)",
                other
            )))
        }
    };
    let acc = evaluate(&model, &grid, &graph, ids)?;
    println!("{:.6}", acc);
    Ok(())
}

fn cmd_sweep_k(config: &Path) -> Result<()> {
    let spec = RunSpec::load(config)?;
    if spec.k_values.is_empty() {
        return Err(Error::Config("sweep-k requires non-empty k_values".into()));
    }
    let graph = spec.graph()?;
    fs::create_dir_all(&spec.out_dir)?;
    let rows = sweep_k(&graph, &spec.train, &spec.k_values)?;
    let mut csv = String::from("k,mean_accuracy,std_accuracy\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.k, row.mean_accuracy, row.std_accuracy
        ));
    }
    let out = spec.out_dir.join("sweep_k.csv");
    fs::write(&out, csv)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let txt = fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", spec_path.display(), e)))?;
    let spec: SbmSpec = serde_json::from_str(&txt)
        .map_err(|e| Error::Config(format!("{}: {}", spec_path.display(), e)))?;
    let graph = generate_sbm(&spec)?;
    save_graph(&graph, out_dir)?;
    let split = make_split(graph.n, (0.6, 0.2, 0.2), spec.seed, None)?;
    save_splits(&split, &out_dir.join("splits.json"))?;
    eprintln!(
        "wrote n={} m={} d={} c={} to {}",
        graph.n, graph.edge_count(), graph.d, graph.c, out_dir.display()
    );
    Ok(())
}

fn cmd_homophily(dataset_dir: &Path) -> Result<()> {
    let graph = load_graph(dataset_dir)?;
    println!("{:?}", homophily_ratio(&graph)?);
    Ok(())
}

fn cmd_export_weights(
    checkpoint: &Path,
    dataset_dir: &Path,
    grid_path: &Path,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let graph = load_graph(dataset_dir)?;
    let grid = load_grid(grid_path)?;
    grid.ensure_matches(&graph)?;
    if grid.k != model.cfg.k {
        return Err(Error::Config(format!(
            "grid tensor has K = {} but checkpoint was trained with K = {}",
            grid.k, model.cfg.k
        )));
    }
    let ids: Vec<usize> = (0..graph.n).collect();
    let rows = export_fusion_weights(&model, &grid, &graph, &ids)?;
    let mut csv = String::from("node,a0,a1\n");
    for (node, a0, a1) in rows {
        csv.push_str(&format!("{},{:.6},{:.6}\n", node, a0, a1));
    }
    fs::write(out, csv)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Preprocess {
            dataset_dir,
            k,
            scheme,
            gamma,
            out,
        } => cmd_preprocess(&dataset_dir, k, &scheme, gamma, &out),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Eval {
            checkpoint,
            dataset_dir,
            grid,
            split,
            splits_file,
        } => cmd_eval(&checkpoint, &dataset_dir, &grid, &split, splits_file.as_deref()),
        Cmd::SweepK { config } => cmd_sweep_k(&config),
        Cmd::Synth { spec, out_dir } => cmd_synth(&spec, &out_dir),
        Cmd::Homophily { dataset_dir } => cmd_homophily(&dataset_dir),
        Cmd::ExportWeights {
            checkpoint,
            dataset_dir,
            grid,
            out,
        } => cmd_export_weights(&checkpoint, &dataset_dir, &grid, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit 2 on usage errors; the contract reserves 2 for
            // data errors and uses 1 for usage/config problems
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { 1 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
