use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use fgat_core::featio::{
    gen_synthetic_splits, read_fmap_file, write_fmap, FeatureSample, ScaleDims, SyntheticSpec, TaskManifest,
};
use fgat_core::gradcheck::{run_suite, SuiteOptions, TOLERANCE};
use fgat_core::graphbuild::{FeatureGraph, GraphBuilder, GraphOptions};
use fgat_core::harness::{run_experiment, TaskData, TrainPlan};
use fgat_core::metrics::{evaluate_task, ExperimentSummary, RunResult};
use fgat_core::model::{load_checkpoint, save_checkpoint, ModelConfig};
use fgat_core::Error;

#[derive(Parser)]
#[command(
    name = "fgat",
    version,
    about = "Feature-graph attention networks for online continual learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate over a task manifest for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds to run; overrides the config.
        #[arg(long = "seed", num_args = 1..)]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write synthetic train/test FMAP files and a task manifest.
    GenSynth {
        #[arg(long)]
        classes: u32,
        #[arg(long)]
        tasks: u32,
        /// Training samples per class.
        #[arg(long)]
        per_class: usize,
        /// Test samples per class; defaults to a quarter of `--per-class`.
        #[arg(long)]
        test_per_class: Option<usize>,
        /// Scale dims as `C,H,W;C,H,W;...`, finest first.
        #[arg(long)]
        scales: String,
        #[arg(long)]
        sep: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on an FMAP file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fmap: PathBuf,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Json { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type CliResult = Result<(), Failure>;

/// One experiment. `model` holds any [`ModelConfig`] fields except the
/// data-derived `in_dim`, `grid` and `num_classes`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfig {
    manifest: PathBuf,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_out")]
    out: PathBuf,
    #[serde(default = "empty_object")]
    model: Value,
    #[serde(default)]
    train: TrainPlan,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Completes the model section with the data-derived fields.
fn resolve_model(
    section: &Value,
    in_dim: usize,
    grid: (usize, usize),
    num_classes: usize,
) -> Result<ModelConfig, Failure> {
    let Value::Object(fields) = section else {
        return Err(usage("config: `model` must be an object"));
    };
    let mut merged = fields.clone();
    let derived = [
        ("in_dim", serde_json::json!(in_dim)),
        ("grid", serde_json::json!([grid.0, grid.1])),
        ("num_classes", serde_json::json!(num_classes)),
    ];
    for (key, value) in derived {
        match merged.get(key) {
            Some(v) if *v != value => {
                return Err(usage(format!(
                    "config: model.{key} = {v} does not match the data ({value})"
                )));
            }
            _ => {
                merged.insert(key.into(), value);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("config: model: {e}")))
}

fn cmd_run(config_path: &Path, out: Option<PathBuf>, seeds: Vec<u64>) -> CliResult {
    let text = std::fs::read_to_string(config_path).map_err(|e| Error::Io {
        path: config_path.into(),
        source: e,
    })?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", config_path.display())))?;
    if let Some(out) = out {
        config.out = out;
    }
    if !seeds.is_empty() {
        config.seeds = seeds;
    }
    if config.seeds.is_empty() {
        return Err(usage("config: seed list is empty"));
    }
    config.train.validate()?;
    if config.manifest.is_relative() {
        let base = config_path.parent().unwrap_or(Path::new(""));
        config.manifest = base.join(&config.manifest);
    }
    // Absolute, so the echoed config works from any directory.
    config.manifest = std::fs::canonicalize(&config.manifest).map_err(|e| Error::Io {
        path: config.manifest.clone(),
        source: e,
    })?;
    let manifest = TaskManifest::load(&config.manifest)?;
    let train_file = read_fmap_file(&manifest.train_fmap)?;
    let test_file = read_fmap_file(&manifest.test_fmap)?;
    if train_file.dims != test_file.dims {
        return Err(Failure {
            code: 1,
            msg: format!(
                "train dims {:?} differ from test dims {:?}",
                train_file.dims, test_file.dims
            ),
        });
    }
    manifest.check_covers(&train_file.samples)?;
    manifest.check_covers(&test_file.samples)?;

    let graph_options: GraphOptions = match config.model.get("graph") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| usage(format!("config: model.graph: {e}")))?,
        None => GraphOptions::default(),
    };
    let builder = GraphBuilder::new(&train_file.dims, graph_options)?;
    let build = |samples: &[FeatureSample]| -> Result<Vec<Arc<FeatureGraph>>, Failure> {
        Ok(builder.build_all(samples)?.into_iter().map(Arc::new).collect())
    };
    let train = build(&train_file.samples)?;
    let test = build(&test_file.samples)?;
    drop((train_file, test_file));

    let model_config = resolve_model(
        &config.model,
        builder.feature_dim(),
        builder.grid(),
        manifest.num_classes(),
    )?;
    model_config.validate()?;
    let tasks: Vec<TaskData> = manifest
        .tasks
        .iter()
        .map(|classes| TaskData {
            train: train.iter().filter(|g| classes.contains(&g.label)).cloned().collect(),
            test: test.iter().filter(|g| classes.contains(&g.label)).cloned().collect(),
        })
        .collect();
    if let Some(t) = tasks.iter().position(|t| t.train.is_empty() || t.test.is_empty()) {
        return Err(Failure {
            code: 1,
            msg: format!("task {t} has no train or no test samples"),
        });
    }

    create_dir(&config.out)?;
    let echo = ExperimentConfig {
        model: serde_json::to_value(&model_config).expect("serializable"),
        ..config.clone()
    };
    write_file(&config.out.join("config.echo.json"), to_json(&echo))?;

    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        log::info!("seed {seed}: training {} tasks", tasks.len());
        let outcome = run_experiment(&model_config, &tasks, &config.train, seed)?;
        let dir = config.out.join(seed.to_string());
        create_dir(&dir)?;
        let result = RunResult::new(seed, outcome.matrix)?;
        write_file(&dir.join("matrix.json"), to_json(&result))?;
        let events: String = outcome
            .events
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect();
        write_file(&dir.join("events.jsonl"), events)?;
        save_checkpoint(&dir.join("model.fgck"), &outcome.model)?;
        println!(
            "seed {seed}: average accuracy {:.4}, average forgetting {}",
            result.average_accuracy,
            result.average_forgetting.map_or("n/a".into(), |f| format!("{f:.4}"))
        );
        runs.push(result);
    }
    let summary = ExperimentSummary::new(runs)?;
    write_file(&config.out.join("summary.json"), to_json(&summary))?;
    write_file(&config.out.join("summary.csv"), summary.to_csv())?;
    let a = summary.average_accuracy;
    println!("average accuracy {:.4} ± {:.4} over {} seeds", a.mean, a.std, a.n);
    if let Some(f) = summary.average_forgetting {
        println!("average forgetting {:.4} ± {:.4}", f.mean, f.std);
    }
    Ok(())
}

fn cmd_gradcheck(inject_fault: Option<String>) -> CliResult {
    let reports = run_suite(&SuiteOptions { inject_fault })?;
    for r in &reports {
        println!(
            "{:<26} max rel err {:.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} components within {TOLERANCE:e}", reports.len());
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

fn parse_scales(text: &str) -> Result<Vec<ScaleDims>, Failure> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let parts: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("--scales: bad scale `{s}`: {e}")))?;
            match parts[..] {
                [c, h, w] => Ok(ScaleDims::new(c, h, w)),
                _ => Err(usage(format!("--scales: `{s}` is not C,H,W"))),
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_synth(
    classes: u32,
    tasks: u32,
    per_class: usize,
    test_per_class: Option<usize>,
    scales: &str,
    sep: f64,
    seed: u64,
    out: &Path,
) -> CliResult {
    let manifest = TaskManifest::split_classes("synthetic", classes, tasks, "train.fmap", "test.fmap")
        .map_err(|e| usage(e.to_string()))?;
    let spec = SyntheticSpec {
        num_classes: classes,
        train_per_class: per_class,
        test_per_class: test_per_class.unwrap_or((per_class / 4).max(1)),
        dims: parse_scales(scales)?,
        separation: sep,
    };
    let (train, test) = gen_synthetic_splits(&spec, seed).map_err(|e| usage(e.to_string()))?;
    create_dir(out)?;
    write_fmap(out.join("train.fmap"), &train)?;
    write_fmap(out.join("test.fmap"), &test)?;
    manifest.save(out.join("manifest.json"))?;
    println!(
        "wrote {} train and {} test samples, {} tasks, to {}",
        train.len(),
        test.len(),
        manifest.tasks.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    accuracy: f64,
}

fn cmd_eval(checkpoint: &Path, fmap: &Path) -> CliResult {
    let model = load_checkpoint(checkpoint)?;
    let file = read_fmap_file(fmap)?;
    let builder = GraphBuilder::new(&file.dims, model.config.graph)?;
    let graphs = builder.build_all(&file.samples)?;
    let accuracy = evaluate_task(&model, &graphs, None)?;
    println!(
        "{}",
        serde_json::to_string(&EvalReport {
            samples: graphs.len(),
            accuracy
        })
        .expect("serializable")
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seeds } => cmd_run(&config, out, seeds),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(inject_fault),
        Command::GenSynth {
            classes,
            tasks,
            per_class,
            test_per_class,
            scales,
            sep,
            seed,
            out,
        } => cmd_gen_synth(classes, tasks, per_class, test_per_class, &scales, sep, seed, &out),
        Command::Eval { checkpoint, fmap } => cmd_eval(&checkpoint, &fmap),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fgat: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
