//! `kgalign` command-line interface: generate data, train, evaluate,
//! explain single instances and tabulate runs.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid input, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use kgalign::classify::{ClassifierCheckpoint, MlpClassifier};
use kgalign::data::{
    generate_dataset, load_dataset, save_dataset, GeneratorConfig, SceneInstance, Splits,
};
use kgalign::percept::{Aggregation, DetectorCheckpoint, PartDetector};
use kgalign::shap::{explain_all, ShapMatrix};
use kgalign::train::{background, evaluate, perceive, train, RunReport, ShapSetting, TrainConfig};
use kgalign::xai::{build_sag, shap_ged, GedMode, WeightScheme};
use kgalign::{ErrorKind, KnowledgeGraph};

const DETECTOR_FILE: &str = "detector.json";
const CLASSIFIER_FILE: &str = "classifier.json";
const METRICS_FILE: &str = "metrics.json";
const EVAL_FILE: &str = "eval.json";

#[derive(Parser)]
#[command(
    name = "kgalign",
    version,
    about = "Part-based classification aligned with an expert knowledge graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic part-based dataset as JSON Lines
    Gen {
        /// Knowledge graph JSON (defaults to the built-in MonuMAI graph)
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, env = "XNESYL_SEED", default_value_t = 7)]
        seed: u64,
        /// Probability that a region shows a part atypical of its class
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Region feature dimension
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Minimum distance between part feature means
        #[arg(long, default_value_t = 6.0)]
        sep: f64,
        /// Regions per instance, inclusive, as LO:HI
        #[arg(long, default_value = "2:6", value_parser = parse_range)]
        regions: (usize, usize),
    },
    /// Train detector and classifier and write checkpoints plus metrics
    Train(TrainArgs),
    /// Recompute test metrics from saved checkpoints
    Eval {
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `train`
        #[arg(long)]
        checkpoints: PathBuf,
    },
    /// Explain one instance: SAG as DOT and JSON, SHAP values as CSV
    Explain {
        #[arg(long)]
        kg: Option<PathBuf>,
        /// Run directory written by `train`
        #[arg(long, required_unless_present = "shap_input")]
        checkpoints: Option<PathBuf>,
        /// Dataset holding the instance (defaults to the one used for training)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "shap_input")]
        instance_id: Option<String>,
        /// Explain a precomputed record `{"id", "features", "shap"}` instead of
        /// running the models
        #[arg(long, conflicts_with_all = ["checkpoints", "data"])]
        shap_input: Option<PathBuf>,
        /// Part-detected threshold (defaults to the run's value, else 0.05)
        #[arg(long)]
        s: Option<f64>,
        /// Output directory (defaults to the current directory)
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Tabulate the metrics of every run directory below DIR as CSV
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Also write the table to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Standard,
    ShapBackprop,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    LinearBbox,
    ExpBbox,
    LinearInstance,
    ExpInstance,
}

impl From<SchemeArg> for WeightScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::LinearBbox => WeightScheme::LinearBbox,
            SchemeArg::ExpBbox => WeightScheme::ExpBbox,
            SchemeArg::LinearInstance => WeightScheme::LinearInstance,
            SchemeArg::ExpInstance => WeightScheme::ExpInstance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Frcnn,
    Retina,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapArg {
    Exact,
    Kernel,
}

#[derive(Clone, Copy, ValueEnum)]
enum GedArg {
    Symmetric,
    OneSided,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    mode: Mode,
    /// Loss weighting; required with `--mode shap-backprop`
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long = "agg", value_enum, default_value = "frcnn")]
    aggregation: AggArg,
    #[arg(long, default_value_t = 5)]
    epochs_det: usize,
    #[arg(long, default_value_t = 60)]
    epochs_clf: usize,
    #[arg(long, default_value_t = 0.05)]
    lr_det: f64,
    #[arg(long, default_value_t = 0.02)]
    lr_clf: f64,
    /// Misattribution scale in the loss weights
    #[arg(long, default_value_t = 1.0)]
    h: f64,
    /// Part-detected threshold for attribution graphs
    #[arg(long, default_value_t = 0.05)]
    s: f64,
    /// Part-detected threshold for the misattribution function
    #[arg(long, default_value_t = 0.0)]
    v_threshold: f64,
    #[arg(long, value_enum, default_value = "exact")]
    shap: ShapArg,
    /// Coalition budget for `--shap kernel`
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    bg_size: usize,
    #[arg(long, value_enum, default_value = "symmetric")]
    ged: GedArg,
    /// Keep training the previous epoch's classifier during SHAP-backprop
    #[arg(long)]
    warm_start: bool,
    #[arg(long, env = "XNESYL_SEED", default_value_t = 0)]
    seed: u64,
}

/// An error with its exit code and a message naming the flag or file at fault.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Attaches `context` (a flag or file) to a library error.
trait Context<T> {
    fn context(self, context: impl std::fmt::Display) -> Outcome<T>;
}

impl<T> Context<T> for kgalign::Result<T> {
    fn context(self, context: impl std::fmt::Display) -> Outcome<T> {
        self.map_err(|e| Failure {
            code: match e.kind() {
                ErrorKind::Numerical => 4,
                ErrorKind::Validation | ErrorKind::Io => 3,
            },
            message: format!("{context}: {e}"),
        })
    }
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((parse(lo)?, parse(hi)?))
}

fn load_kg(path: Option<&Path>) -> Outcome<KnowledgeGraph> {
    match path {
        Some(p) => KnowledgeGraph::load(p).context(format!("--kg {}", p.display())),
        None => Ok(KnowledgeGraph::monumai()),
    }
}

fn load_data(path: &Path, kg: &KnowledgeGraph) -> Outcome<Vec<SceneInstance<f64>>> {
    load_dataset(path, kg).context(format!("--data {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("JSON serialization of plain data");
    text.push('\n');
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            kg,
            out,
            count,
            seed,
            noise,
            dim,
            sep,
            regions,
        } => gen(kg.as_deref(), &out, count, seed, noise, dim, sep, regions),
        Command::Train(args) => run_train(&args),
        Command::Eval {
            kg,
            data,
            checkpoints,
        } => run_eval(kg.as_deref(), &data, &checkpoints),
        Command::Explain {
            kg,
            checkpoints,
            data,
            instance_id,
            shap_input,
            s,
            out_dir,
        } => match shap_input {
            Some(input) => explain_record(kg.as_deref(), &input, s, &out_dir),
            None => explain_instance(
                kg.as_deref(),
                checkpoints.as_deref().expect("required by clap"),
                data.as_deref(),
                instance_id.as_deref().expect("required by clap"),
                s,
                &out_dir,
            ),
        },
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gen(
    kg: Option<&Path>,
    out: &Path,
    count: usize,
    seed: u64,
    noise: f64,
    dim: usize,
    sep: f64,
    regions: (usize, usize),
) -> Outcome<()> {
    let kg = load_kg(kg)?;
    let cfg = GeneratorConfig {
        seed,
        feature_dim: dim,
        regions_per_instance: regions.0..=regions.1,
        noise_rate: noise,
        separation: sep,
    };
    cfg.validate().context("generator flags")?;
    let data = generate_dataset::<f64>(&kg, &cfg, count).context("--count/--noise")?;
    save_dataset(out, &kg, &data).context(format!("--out {}", out.display()))?;
    eprintln!("wrote {} instances to {}", data.len(), out.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> Outcome<TrainConfig> {
    let scheme = match (args.mode, args.scheme) {
        (Mode::Standard, Some(_)) => {
            return Err(Failure::usage(
                "--scheme only applies to --mode shap-backprop",
            ));
        }
        (Mode::ShapBackprop, None) => {
            return Err(Failure::usage("--mode shap-backprop requires --scheme"));
        }
        (_, scheme) => scheme.map(WeightScheme::from),
    };
    if args.warm_start && args.mode == Mode::Standard {
        return Err(Failure::usage(
            "--warm-start only applies to --mode shap-backprop",
        ));
    }
    let cfg = TrainConfig {
        seed: args.seed,
        det_epochs: args.epochs_det,
        clf_epochs: args.epochs_clf,
        det_lr: args.lr_det,
        clf_lr: args.lr_clf,
        scheme,
        h: args.h,
        s: args.s,
        v_threshold: args.v_threshold,
        bg_size: args.bg_size,
        shap: match args.shap {
            ShapArg::Exact => ShapSetting::Exact,
            ShapArg::Kernel => ShapSetting::Kernel {
                samples: args.samples,
            },
        },
        aggregation: match args.aggregation {
            AggArg::Frcnn => Aggregation::Frcnn,
            AggArg::Retina => Aggregation::Retina,
        },
        ged_mode: match args.ged {
            GedArg::Symmetric => GedMode::Symmetric,
            GedArg::OneSided => GedMode::OneSided,
        },
        warm_start: args.warm_start,
        ..TrainConfig::default()
    };
    cfg.validate().context("training flags")?;
    Ok(cfg)
}

/// `metrics.json`: the run report plus the inputs it was trained on.
fn metrics_json(report: &RunReport, kg: Option<&Path>, data: &Path) -> Value {
    let absolute = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let mut value = serde_json::to_value(report).expect("report serializes");
    value["inputs"] = json!({
        "kg": kg.map(|p| absolute(p).display().to_string()),
        "data": absolute(data).display().to_string(),
    });
    value
}

fn run_train(args: &TrainArgs) -> Outcome<()> {
    let cfg = train_config(args)?;
    let kg = load_kg(args.kg.as_deref())?;
    let splits = Splits::from_dataset(load_data(&args.data, &kg)?);
    let run = train(&kg, &splits, &cfg).context("training")?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir)
        .map_err(|e| Failure::invalid(format!("--out-dir {}: {e}", dir.display())))?;
    write_text(
        &dir.join(DETECTOR_FILE),
        &pretty(&run.detector.to_checkpoint(&kg)),
    )?;
    write_text(
        &dir.join(CLASSIFIER_FILE),
        &pretty(&run.classifier.to_checkpoint(&kg)),
    )?;
    let metrics = pretty(&metrics_json(
        &run.report(&cfg),
        args.kg.as_deref(),
        &args.data,
    ));
    write_text(&dir.join(METRICS_FILE), &metrics)?;
    print!("{metrics}");
    Ok(())
}

struct LoadedRun {
    config: TrainConfig,
    inputs: Value,
    detector: PartDetector<f64>,
    classifier: MlpClassifier<f64>,
}

fn load_run(dir: &Path, kg: &KnowledgeGraph) -> Outcome<LoadedRun> {
    let metrics: Value = read_json(&dir.join(METRICS_FILE))?;
    let report: RunReport = serde_json::from_value(metrics.clone())
        .map_err(|e| Failure::invalid(format!("{}: {e}", dir.join(METRICS_FILE).display())))?;
    let det_path = dir.join(DETECTOR_FILE);
    let detector =
        PartDetector::from_checkpoint(read_json::<DetectorCheckpoint<f64>>(&det_path)?, kg)
            .context(det_path.display())?;
    let clf_path = dir.join(CLASSIFIER_FILE);
    let classifier =
        MlpClassifier::from_checkpoint(read_json::<ClassifierCheckpoint<f64>>(&clf_path)?, kg)
            .context(clf_path.display())?;
    Ok(LoadedRun {
        config: report.config,
        inputs: metrics.get("inputs").cloned().unwrap_or(Value::Null),
        detector,
        classifier,
    })
}

fn run_eval(kg: Option<&Path>, data: &Path, checkpoints: &Path) -> Outcome<()> {
    let kg = load_kg(kg)?;
    let run = load_run(checkpoints, &kg)?;
    let splits = Splits::from_dataset(load_data(data, &kg)?);
    let evaluation = evaluate(&kg, &run.detector, &run.classifier, &splits, &run.config)
        .context("evaluation")?;
    let text = pretty(&json!({
        "metrics": evaluation.metrics,
        "shap_ged": evaluation.ged.to_json(),
    }));
    write_text(&checkpoints.join(EVAL_FILE), &text)?;
    print!("{text}");
    Ok(())
}

/// Writes `<id>.dot`, `<id>.sag.json` and `<id>.shap.csv` into `out_dir`.
fn write_explanation(
    kg: &KnowledgeGraph,
    id: &str,
    features: &[f64],
    shap: &ShapMatrix<f64>,
    s: f64,
    out_dir: &Path,
) -> Outcome<()> {
    if features.len() != kg.num_parts()
        || shap.num_features() != kg.num_parts()
        || shap.num_classes() != kg.num_objects()
    {
        return Err(Failure::invalid(format!(
            "{id}: expected {} features and a {}x{} SHAP matrix",
            kg.num_parts(),
            kg.num_objects(),
            kg.num_parts()
        )));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::invalid(format!("--out-dir {}: {e}", out_dir.display())))?;
    let sag = build_sag(features, shap, s);
    let dot = out_dir.join(format!("{id}.dot"));
    write_text(&dot, &sag.to_dot(kg))?;
    let edges = out_dir.join(format!("{id}.sag.json"));
    write_text(&edges, &format!("{}\n", sag.to_json(kg)))?;

    let csv_path = out_dir.join(format!("{id}.shap.csv"));
    let csv_err = |e: csv::Error| Failure::invalid(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    let header = ["part", "feature_value"]
        .into_iter()
        .chain(kg.object_classes().iter().map(String::as_str));
    w.write_record(header).map_err(csv_err)?;
    for (j, part) in kg.part_classes().iter().enumerate() {
        let row = [part.clone(), features[j].to_string()]
            .into_iter()
            .chain((0..kg.num_objects()).map(|k| shap.get(k, j).to_string()));
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Failure::invalid(format!("{}: {e}", csv_path.display())))?;

    let ged = shap_ged(&sag, kg, GedMode::Symmetric);
    println!(
        "{}",
        json!({
            "id": id,
            "edges": sag.edges().len(),
            "shap_ged": ged,
            "files": [dot.display().to_string(), edges.display().to_string(), csv_path.display().to_string()],
        })
    );
    Ok(())
}

fn explain_instance(
    kg_path: Option<&Path>,
    checkpoints: &Path,
    data: Option<&Path>,
    id: &str,
    s: Option<f64>,
    out_dir: &Path,
) -> Outcome<()> {
    let kg = load_kg(kg_path)?;
    let run = load_run(checkpoints, &kg)?;
    let data_path = match data {
        Some(p) => p.to_path_buf(),
        None => run.inputs["data"]
            .as_str()
            .map(PathBuf::from)
            .ok_or_else(|| {
                Failure::usage("--data is required: the run does not record its dataset")
            })?,
    };
    let data = load_data(&data_path, &kg)?;
    let instance = data
        .iter()
        .find(|inst| inst.id == id)
        .cloned()
        .ok_or_else(|| {
            Failure::invalid(format!(
                "--instance-id {id}: not found in {}",
                data_path.display()
            ))
        })?;
    let splits = Splits::from_dataset(data);
    let bg = background(&run.detector, &splits.train, &run.config).context("background set")?;
    let features = perceive(
        &run.detector,
        std::slice::from_ref(&instance),
        run.config.aggregation,
    )
    .context(format!("--instance-id {id}"))?
    .features;
    let shap = explain_all(&run.classifier, &features, &bg, run.config.shap_mode())
        .context(format!("--instance-id {id}"))?
        .remove(0);
    write_explanation(
        &kg,
        id,
        &features[0],
        &shap,
        s.unwrap_or(run.config.s),
        out_dir,
    )
}

#[derive(serde::Deserialize)]
struct ShapRecord {
    id: String,
    features: Vec<f64>,
    /// One row per object class.
    shap: Vec<Vec<f64>>,
}

fn explain_record(kg: Option<&Path>, input: &Path, s: Option<f64>, out_dir: &Path) -> Outcome<()> {
    let kg = load_kg(kg)?;
    let record: ShapRecord = read_json(input)?;
    let shap =
        ShapMatrix::from_rows(record.shap).context(format!("--shap-input {}", input.display()))?;
    let s = s.unwrap_or(kgalign::xai::DEFAULT_DETECTION_THRESHOLD);
    write_explanation(&kg, &record.id, &record.features, &shap, s, out_dir)
}

/// Row label used in the report table.
fn procedure(scheme: Option<WeightScheme>) -> &'static str {
    match scheme {
        None => "Standard procedure",
        Some(WeightScheme::LinearBbox) => "Linear BBox-level weighting",
        Some(WeightScheme::ExpBbox) => "Exponential BBox-level weighting",
        Some(WeightScheme::LinearInstance) => "Linear instance-level weighting",
        Some(WeightScheme::ExpInstance) => "Exponential instance-level weighting",
    }
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> Outcome<()> {
    if dir.join(METRICS_FILE).is_file() {
        found.push(dir.to_path_buf());
    }
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::invalid(format!("--runs {}: {e}", dir.display())))?;
    let mut children: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        find_runs(&child, found)?;
    }
    Ok(())
}

fn report(runs: &Path, out: Option<&Path>) -> Outcome<()> {
    let mut dirs = Vec::new();
    find_runs(runs, &mut dirs)?;
    if dirs.is_empty() {
        return Err(Failure::invalid(format!(
            "--runs {}: no {METRICS_FILE} found",
            runs.display()
        )));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::invalid(format!("report: {e}"));
    w.write_record([
        "run",
        "procedure",
        "seed",
        "part_macro_accuracy",
        "accuracy",
        "shap_ged",
    ])
    .map_err(csv_err)?;
    for dir in dirs {
        let path = dir.join(METRICS_FILE);
        let report: RunReport = read_json(&path)?;
        let name = dir.strip_prefix(runs).unwrap_or(&dir).display().to_string();
        let m = report.metrics;
        w.write_record([
            if name.is_empty() {
                ".".to_string()
            } else {
                name
            },
            procedure(report.config.scheme).to_string(),
            report.config.seed.to_string(),
            m.part_macro_accuracy.to_string(),
            m.accuracy.to_string(),
            m.mean_shap_ged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::invalid(format!("report: {e}")))?;
    let text = String::from_utf8(bytes).expect("CSV of UTF-8 fields");
    if let Some(out) = out {
        write_text(out, &text)?;
    }
    print!("{text}");
    Ok(())
}
