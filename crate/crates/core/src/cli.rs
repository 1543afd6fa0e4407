//! Command-line interface.
//!
//! Settings resolve as defaults, then flags, then the `--config` JSON file
//! (the file wins). The resolved configuration is echoed to stderr and
//! written next to every output together with its hash.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::container;
use crate::dataio::{self, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{Ablation, AmaGcnConfig};
use crate::pswe::{build_adjacency, manual_scores, score_measures};
use crate::rng;
use crate::spectral::{normalized_laplacian, ChebBasis};
use crate::trainer::{
    self, config_hash, kfold_split, random_adjacency, ridge_baseline, CvOptions, Dataset, FoldOutcome, GraphSpec,
    MetricsReport, VariantReport,
};

#[derive(Parser, Debug)]
#[command(name = "amagcn", version, about = "Population-graph classification with phenotypic measure selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score phenotypic measures and report which are selected.
    SelectMeasures(RunArgs),
    /// Write the population graph as a dense CSV and a sparse edge list.
    BuildGraph(RunArgs),
    /// Train on all folds but one and evaluate on the held-out fold.
    Train(RunArgs),
    /// k-fold cross-validation.
    CrossValidate(RunArgs),
    /// Single-measure, random-graph and full-graph cross-validation rows.
    Sweep(RunArgs),
    /// Generate a planted synthetic population.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    #[default]
    Pswe,
    Manual,
    Random,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub phenotypes: Option<PathBuf>,
    #[arg(long)]
    pub measures: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Dense adjacency CSV used instead of building a graph.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, noP, noW, noA or noS.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<GraphMode>,
    /// Comma-separated measure list for manual mode and the noP variant.
    #[arg(long, value_delimiter = ',')]
    pub manual_measures: Option<Vec<String>>,
    /// Compute PMS-scores from all labels instead of training folds only.
    #[arg(long)]
    pub paper_faithful: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub holdout_fold: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Record train/validation accuracy in the per-epoch log.
    #[arg(long)]
    pub epoch_accuracy: bool,
    /// Also write the normalized Laplacian (build-graph).
    #[arg(long)]
    pub dump_laplacian: bool,
    /// JSON file overriding any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    /// File-name stem of the emitted triple.
    #[arg(long, default_value = "synth")]
    pub name: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub purity: Option<f64>,
    #[arg(long)]
    pub class_separation: Option<f64>,
    #[arg(long)]
    pub num_features: Option<usize>,
    /// SynthSpec JSON overriding any flag.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

/// Fully resolved settings of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phenotypes: Option<PathBuf>,
    pub measures: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: GraphMode,
    pub manual_measures: Vec<String>,
    pub paper_faithful: bool,
    pub jobs: usize,
    pub folds: usize,
    pub holdout_fold: usize,
    pub ridge_reg: f64,
    pub epoch_accuracy: bool,
    pub dump_laplacian: bool,
    pub model: AmaGcnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phenotypes: None,
            measures: None,
            features: None,
            graph: None,
            out: PathBuf::from("out"),
            seed: 0,
            mode: GraphMode::Pswe,
            manual_measures: Vec::new(),
            paper_faithful: false,
            jobs: 1,
            folds: trainer::DEFAULT_FOLDS,
            holdout_fold: 0,
            ridge_reg: trainer::DEFAULT_RIDGE_REG,
            epoch_accuracy: false,
            dump_laplacian: false,
            model: AmaGcnConfig::default(),
        }
    }
}

impl RunConfig {
    /// Hash over everything that can change results (`out` and `jobs`
    /// excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
            m.remove("jobs");
        }
        config_hash(&v)
    }

    fn required<'a>(&self, p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
    }

    fn graph_spec(&self) -> Result<GraphSpec> {
        if let Some(path) = &self.graph {
            return Ok(GraphSpec::Fixed(dataio::load_features(path)?));
        }
        match self.mode {
            GraphMode::Pswe => GraphSpec::for_ablation(self.model.ablation, &self.manual_measures, self.paper_faithful),
            GraphMode::Manual => {
                if self.manual_measures.is_empty() {
                    return Err(Error::Config("manual mode needs --manual-measures".into()));
                }
                Ok(GraphSpec::Manual {
                    measures: self.manual_measures.clone(),
                })
            }
            GraphMode::Random => Ok(GraphSpec::Random {
                seed: rng::derive_seed(self.seed, "graph"),
            }),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    if !v.is_object() {
        return Err(Error::parse(path, "expected a JSON object"));
    }
    Ok(v)
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(defaults: &T, flags: Map<String, Value>, file: Option<&Path>) -> Result<T> {
    let mut v = serde_json::to_value(defaults).expect("defaults serialize");
    merge(&mut v, Value::Object(flags));
    if let Some(path) = file {
        merge(&mut v, read_json(path)?);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut flags = Map::new();
        let mut model = Map::new();
        let mut put = |k: &str, v: Value| {
            flags.insert(k.to_string(), v);
        };
        for (k, p) in [
            ("phenotypes", &self.phenotypes),
            ("measures", &self.measures),
            ("features", &self.features),
            ("graph", &self.graph),
            ("out", &self.out),
        ] {
            if let Some(p) = p {
                put(k, json!(p));
            }
        }
        if let Some(s) = self.seed {
            put("seed", json!(s));
        }
        if let Some(m) = self.mode {
            put("mode", serde_json::to_value(m).expect("mode serializes"));
        }
        if let Some(m) = &self.manual_measures {
            put("manual_measures", json!(m));
        }
        if self.paper_faithful {
            put("paper_faithful", json!(true));
        }
        if self.epoch_accuracy {
            put("epoch_accuracy", json!(true));
        }
        if self.dump_laplacian {
            put("dump_laplacian", json!(true));
        }
        for (k, v) in [("jobs", self.jobs), ("folds", self.folds), ("holdout_fold", self.holdout_fold)] {
            if let Some(v) = v {
                put(k, json!(v));
            }
        }
        if let Some(a) = &self.ablation {
            model.insert("ablation".into(), json!(a.parse::<Ablation>()?));
        }
        if let Some(e) = self.epochs {
            model.insert("epochs".into(), json!(e));
        }
        if let Some(l) = self.lambda {
            model.insert("lambda".into(), json!(l));
        }
        if !model.is_empty() {
            flags.insert("model".into(), Value::Object(model));
        }
        let mut config: RunConfig = layered(&RunConfig::default(), flags, self.config.as_deref())?;
        config.model = config.model.resolved();
        config.model.validate()?;
        if config.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        Ok(config)
    }
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<(SynthSpec, PathBuf)> {
        let mut flags = Map::new();
        if let Some(s) = self.seed {
            flags.insert("seed".into(), json!(s));
        }
        for (k, v) in [("n", self.n), ("classes", self.classes), ("features", self.num_features)] {
            if let Some(v) = v {
                flags.insert(k.into(), json!(v));
            }
        }
        for (k, v) in [("purity", self.purity), ("class_separation", self.class_separation)] {
            if let Some(v) = v {
                flags.insert(k.into(), json!(v));
            }
        }
        let spec: SynthSpec = layered(&SynthSpec::default(), flags, self.spec.as_deref())?;
        spec.validate()?;
        Ok((spec, self.out.clone().unwrap_or_else(|| PathBuf::from("."))))
    }
}

fn echo<T: Serialize>(command: &str, config: &T) {
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    eprintln!("{command} config:\n{text}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn prepare_out(config: &RunConfig) -> Result<String> {
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let hash = config.hash();
    write_json(&config.out.join("config.json"), &json!({"config_hash": hash, "config": config}))?;
    Ok(hash)
}

fn load_table(config: &RunConfig) -> Result<dataio::LoadedPhenotypes> {
    let pheno = config.required(&config.phenotypes, "phenotypes")?;
    let measures = config.required(&config.measures, "measures")?;
    let loaded = dataio::load_phenotypes(pheno, measures)?;
    if loaded.dropped > 0 {
        eprintln!("dropped {} subjects with empty values", loaded.dropped);
    }
    Ok(loaded)
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let table = load_table(config)?.table;
    let features = dataio::load_features(config.required(&config.features, "features")?)?;
    Dataset::new(table, features)
}

fn cmd_select_measures(config: &RunConfig) -> Result<()> {
    let hash = prepare_out(config)?;
    let loaded = load_table(config)?;
    let scores = score_measures(&loaded.table, None)?;
    write_json(
        &config.out.join("measures_report.json"),
        &json!({"config_hash": hash, "subjects": loaded.table.len(), "dropped": loaded.dropped, "measures": scores}),
    )?;
    for s in &scores {
        println!(
            "{}\t{}\tcount={}\tscore={}\t{}",
            s.measure,
            s.kind.as_str(),
            s.count,
            s.pms_score,
            if s.selected { "selected" } else { "rejected" }
        );
    }
    Ok(())
}

fn cmd_build_graph(config: &RunConfig) -> Result<()> {
    let hash = prepare_out(config)?;
    let table = load_table(config)?.table;
    let (adjacency, scores) = match config.mode {
        GraphMode::Pswe => {
            let scores = score_measures(&table, None)?;
            (build_adjacency(&table, &scores)?, Some(scores))
        }
        GraphMode::Manual => {
            if config.manual_measures.is_empty() {
                return Err(Error::Config("manual mode needs --manual-measures".into()));
            }
            let scores = manual_scores(&table, &config.manual_measures)?;
            (build_adjacency(&table, &scores)?, Some(scores))
        }
        GraphMode::Random => (random_adjacency(table.len(), rng::derive_seed(config.seed, "graph")), None),
    };
    dataio::write_matrix_csv(&config.out.join("adjacency.csv"), &adjacency)?;
    dataio::write_edge_list(&config.out.join("edges.tsv"), &adjacency)?;
    if config.dump_laplacian {
        dataio::write_matrix_csv(&config.out.join("laplacian.csv"), &normalized_laplacian(&adjacency)?)?;
    }
    write_json(
        &config.out.join("graph.json"),
        &json!({"config_hash": hash, "nodes": table.len(), "subject_ids": table.subject_ids(), "measures": scores}),
    )?;
    let edges = adjacency.indexed_iter().filter(|((i, j), w)| i < j && **w > 0.0).count();
    println!("{} nodes, {edges} edges", table.len());
    Ok(())
}

fn checkpoint_meta(config: &RunConfig, hash: &str, fold: &FoldOutcome) -> Value {
    json!({
        "config_hash": hash,
        "seed": config.seed,
        "model_seed": fold.model_seed,
        "fold": fold.metrics.fold,
        "config": config.model,
    })
}

fn write_epoch_log(path: &Path, folds: &[&FoldOutcome]) -> Result<()> {
    let mut out = Vec::new();
    for f in folds {
        for e in &f.epochs {
            let mut v = serde_json::to_value(e).expect("record serializes");
            v["fold"] = json!(f.metrics.fold);
            writeln!(out, "{}", serde_json::to_string(&v).expect("value serializes")).expect("in-memory write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn print_report(report: &MetricsReport) {
    for v in &report.variants {
        println!("{}\tACC {:.4}\tAUC {:.4}", v.variant, v.mean_acc, v.mean_auc);
    }
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let hash = prepare_out(config)?;
    let data = load_dataset(config)?;
    let spec = config.graph_spec()?;
    let plan = kfold_split(data.len(), config.folds, config.seed)?;
    if config.holdout_fold >= plan.k {
        return Err(Error::Config(format!("--holdout-fold must be below {}", plan.k)));
    }
    let adjacency = trainer::fold_adjacency(&data.table, &spec, &plan.train_rows(config.holdout_fold))?;
    let basis = ChebBasis::from_adjacency(&adjacency, config.model.cheb_order)?;
    let outcome = trainer::train_fold(&data, &basis, &adjacency, &config.model, &plan, config.holdout_fold, config.epoch_accuracy)?;
    let report = MetricsReport {
        config_hash: hash.clone(),
        seed: config.seed,
        variants: vec![VariantReport::new(config.model.ablation.as_str(), vec![outcome.metrics.clone()])],
    };
    write_json(&config.out.join("report.json"), &report)?;
    write_epoch_log(&config.out.join("epochs.ndjson"), &[&outcome])?;
    container::save_checkpoint(&config.out.join("checkpoint.bin"), &outcome.params, &checkpoint_meta(config, &hash, &outcome))?;
    print_report(&report);
    Ok(())
}

fn cv_options(config: &RunConfig) -> CvOptions {
    CvOptions {
        folds: config.folds,
        seed: config.seed,
        jobs: config.jobs,
        epoch_accuracy: config.epoch_accuracy,
    }
}

fn cmd_cross_validate(config: &RunConfig) -> Result<()> {
    let hash = prepare_out(config)?;
    let data = load_dataset(config)?;
    let spec = config.graph_spec()?;
    let outcome = trainer::run_cross_validation(&data, &spec, &config.model, &cv_options(config), config.model.ablation.as_str())?;
    let plan = kfold_split(data.len(), config.folds, config.seed)?;
    let ridge = ridge_baseline(&data.features, data.table.labels(), data.table.num_classes(), &plan, config.ridge_reg)?;
    let report = MetricsReport {
        config_hash: hash.clone(),
        seed: config.seed,
        variants: vec![outcome.report.clone(), ridge],
    };
    write_json(&config.out.join("report.json"), &report)?;
    fs::write(config.out.join("report.csv"), report.to_csv()).map_err(|e| Error::io(&config.out, e))?;
    write_epoch_log(&config.out.join("epochs.ndjson"), &outcome.folds.iter().collect::<Vec<_>>())?;
    let dir = config.out.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for f in &outcome.folds {
        let path = dir.join(format!("fold_{}.bin", f.metrics.fold));
        container::save_checkpoint(&path, &f.params, &checkpoint_meta(config, &hash, f))?;
    }
    print_report(&report);
    Ok(())
}

fn cmd_sweep(config: &RunConfig) -> Result<()> {
    let hash = prepare_out(config)?;
    let data = load_dataset(config)?;
    let rows = trainer::run_measure_sweep(&data, &config.model, &cv_options(config), config.paper_faithful)?;
    let report = MetricsReport {
        config_hash: hash,
        seed: config.seed,
        variants: rows,
    };
    write_json(&config.out.join("sweep.json"), &report)?;
    fs::write(config.out.join("sweep.csv"), report.to_csv()).map_err(|e| Error::io(&config.out, e))?;
    print_report(&report);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let (spec, out) = args.resolve()?;
    echo("synth", &spec);
    let data = dataio::generate_synthetic(&spec)?;
    let (p, m, f) = dataio::save_synthetic(&out, &args.name, &data)?;
    println!(
        "{}",
        json!({
            "informative": data.informative,
            "noise": data.noise,
            "files": [p, m, f],
            "config_hash": config_hash(&spec),
        })
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let (name, args) = match &cli.command {
        Command::Synth(a) => return cmd_synth(a),
        Command::SelectMeasures(a) => ("select-measures", a),
        Command::BuildGraph(a) => ("build-graph", a),
        Command::Train(a) => ("train", a),
        Command::CrossValidate(a) => ("cross-validate", a),
        Command::Sweep(a) => ("sweep", a),
    };
    let config = args.resolve()?;
    echo(name, &config);
    match &cli.command {
        Command::SelectMeasures(_) => cmd_select_measures(&config),
        Command::BuildGraph(_) => cmd_build_graph(&config),
        Command::Train(_) => cmd_train(&config),
        Command::CrossValidate(_) => cmd_cross_validate(&config),
        Command::Sweep(_) => cmd_sweep(&config),
        Command::Synth(_) => unreachable!("handled above"),
    }
}

/// Parses arguments and runs, mapping failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> RunArgs {
        let mut all = vec!["amagcn", "train"];
        all.extend(list);
        match Cli::try_parse_from(all).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_fill_in() {
        let c = args(&[]).resolve().unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 9, "model": {"epochs": 5}}"#).unwrap();
        let p = path.to_str().unwrap();
        let c = args(&["--seed", "3", "--epochs", "7", "--lambda", "0.5", "--config", p]).resolve().unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.epochs, 5);
        assert_eq!(c.model.lambda, 0.5);
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochz": 5}"#).unwrap();
        let err = args(&["--config", path.to_str().unwrap()]).resolve().unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn no_s_echoes_zero_lambda() {
        let c = args(&["--ablation", "noS"]).resolve().unwrap();
        assert_eq!(c.model.lambda, 0.0);
        assert!(serde_json::to_string(&c).unwrap().contains("\"lambda\":0.0"));
    }

    #[test]
    fn hash_ignores_out_and_jobs() {
        let a = args(&["--out", "x", "--jobs", "1"]).resolve().unwrap();
        let b = args(&["--out", "y", "--jobs", "4"]).resolve().unwrap();
        let c = args(&["--seed", "1"]).resolve().unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bad_ablation_is_config_error() {
        assert_eq!(args(&["--ablation", "noX"]).resolve().unwrap_err().exit_code(), 1);
        assert_eq!(main_with_args(["amagcn", "train", "--bogus"]), 1);
    }
}
