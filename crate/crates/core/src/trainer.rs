//! Cross-validation, metrics, measure sweeps and the feature-only ridge
//! baseline.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, Ablation, AmaGcn, AmaGcnConfig, ModelParams};
use crate::pswe::{build_adjacency, manual_scores, score_measures, unit_weights, PhenotypeTable};
use crate::rng;
use crate::spectral::{ChebBasis, PopulationGraph};

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_RIDGE_REG: f64 = 1.0;

/// Node-to-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_assignments.len()).filter(|&i| self.fold_assignments[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_assignments.len()).filter(|&i| self.fold_assignments[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.fold_assignments.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Seeded shuffle, then contiguous chunks whose sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot split {n} nodes into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "folds"));
    let mut fold_assignments = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        for &node in &order[pos..pos + size] {
            fold_assignments[node] = f;
        }
        pos += size;
    }
    Ok(FoldPlan {
        fold_assignments,
        k,
        seed,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (midrank Mann-Whitney statistic).
pub fn compute_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u128;
        rank_sum2 += midrank2 * order[i..=j].iter().filter(|&&o| positive[o]).count() as u128;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Binary AUC on the class-1 column; for more classes, the mean one-vs-rest
/// AUC over classes present in both roles.
pub fn multiclass_auc(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let p = scores.ncols();
    if p == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return compute_auc(&scores.column(1).to_vec(), &pos);
    }
    let mut aucs = Vec::new();
    for c in 0..p {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if pos.iter().any(|&x| x) && pos.iter().any(|&x| !x) {
            aucs.push(compute_auc(&scores.column(c).to_vec(), &pos)?);
        }
    }
    if aucs.is_empty() {
        return Err(Error::Data("AUC needs both classes present".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Phenotypes and features aligned by subject order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub table: PhenotypeTable,
    pub features: Array2<f64>,
}

impl Dataset {
    pub fn new(table: PhenotypeTable, features: Array2<f64>) -> Result<Self> {
        if table.len() != features.nrows() {
            return Err(Error::Data(format!(
                "feature matrix has {} rows for {} subjects",
                features.nrows(),
                table.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix has non-finite entries".into()));
        }
        Ok(Dataset { table, features })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// How the population graph of each fold is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphSpec {
    /// Selected and weighted by PMS-scores from training-fold labels.
    Pswe {
        #[serde(default)]
        paper_faithful: bool,
    },
    /// PSWE selection with every selected weight set to 1.
    PsweUnitWeights {
        #[serde(default)]
        paper_faithful: bool,
    },
    /// Weight 1 on each listed measure.
    Manual { measures: Vec<String> },
    /// Dense seeded graph with i.i.d. uniform weights.
    Random { seed: u64 },
    /// A precomputed adjacency.
    #[serde(skip)]
    Fixed(Array2<f64>),
}

impl GraphSpec {
    /// The graph implied by an ablation variant.
    pub fn for_ablation(ablation: Ablation, manual: &[String], paper_faithful: bool) -> Result<Self> {
        Ok(match ablation {
            Ablation::NoP => {
                if manual.is_empty() {
                    return Err(Error::Config("the noP variant needs a manual measure list".into()));
                }
                GraphSpec::Manual {
                    measures: manual.to_vec(),
                }
            }
            Ablation::NoW => GraphSpec::PsweUnitWeights { paper_faithful },
            _ => GraphSpec::Pswe { paper_faithful },
        })
    }

    fn uses_labels(&self) -> bool {
        matches!(
            self,
            GraphSpec::Pswe { paper_faithful: false } | GraphSpec::PsweUnitWeights { paper_faithful: false }
        )
    }
}

/// Symmetric graph with i.i.d. U[0,1) weights and an empty diagonal.
pub fn random_adjacency(n: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "graph/random");
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let w: f64 = r.random();
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
    }
    a
}

/// Adjacency for one fold. Only the labels of `train_rows` enter PMS-scores.
pub fn fold_adjacency(table: &PhenotypeTable, spec: &GraphSpec, train_rows: &[usize]) -> Result<Array2<f64>> {
    match spec {
        GraphSpec::Pswe { paper_faithful } | GraphSpec::PsweUnitWeights { paper_faithful } => {
            let rows = (!paper_faithful).then_some(train_rows);
            let mut scores = score_measures(table, rows)?;
            if matches!(spec, GraphSpec::PsweUnitWeights { .. }) {
                scores = unit_weights(&scores);
            }
            build_adjacency(table, &scores)
        }
        GraphSpec::Manual { measures } => build_adjacency(table, &manual_scores(table, measures)?),
        GraphSpec::Random { seed } => Ok(random_adjacency(table.len(), *seed)),
        GraphSpec::Fixed(a) => {
            if a.dim() != (table.len(), table.len()) {
                return Err(Error::Data(format!("adjacency is {:?} for {} subjects", a.dim(), table.len())));
            }
            Ok(a.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub semi: f64,
    pub sim: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub acc: f64,
    pub auc: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// One evaluated variant (model, graph or baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub folds: Vec<FoldMetrics>,
    pub mean_acc: f64,
    pub mean_auc: f64,
}

impl VariantReport {
    pub fn new(variant: impl Into<String>, folds: Vec<FoldMetrics>) -> Self {
        let k = folds.len().max(1) as f64;
        VariantReport {
            variant: variant.into(),
            mean_acc: folds.iter().map(|f| f.acc).sum::<f64>() / k,
            mean_auc: folds.iter().map(|f| f.auc).sum::<f64>() / k,
            folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub variants: Vec<VariantReport>,
}

impl MetricsReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.variant == name)
    }

    /// One row per (variant, fold).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,fold,acc,auc,train_size,test_size\n");
        for v in &self.variants {
            for f in &v.folds {
                out.push_str(&format!(
                    "{},{},{:?},{:?},{},{}\n",
                    v.variant, f.fold, f.acc, f.auc, f.train_size, f.test_size
                ));
            }
        }
        out
    }
}

/// SHA-256 of the canonical (sorted-key) JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serializes");
    hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("value serializes")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Upper bound on concurrently trained folds.
    pub jobs: usize,
    /// Evaluate train/validation accuracy after every epoch.
    pub epoch_accuracy: bool,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: DEFAULT_FOLDS,
            seed: 0,
            jobs: 1,
            epoch_accuracy: false,
        }
    }
}

/// Everything produced by training on one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    pub epochs: Vec<EpochRecord>,
    pub params: ModelParams,
    pub model_seed: u64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: VariantReport,
    pub folds: Vec<FoldOutcome>,
}

fn masks(n: usize, test: &[usize]) -> (Vec<bool>, Vec<bool>) {
    let mut val = vec![false; n];
    test.iter().for_each(|&i| val[i] = true);
    (val.iter().map(|v| !v).collect(), val)
}

fn masked_accuracy(pred: &[usize], labels: &[usize], mask: &[bool]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, l), m) in pred.iter().zip(labels).zip(mask) {
        if *m {
            total += 1;
            hit += usize::from(p == l);
        }
    }
    hit as f64 / total.max(1) as f64
}

/// Trains one model on the rows outside `fold` and scores the held-out rows.
pub fn train_fold(
    data: &Dataset,
    basis: &ChebBasis,
    adjacency: &Array2<f64>,
    config: &AmaGcnConfig,
    plan: &FoldPlan,
    fold: usize,
    epoch_accuracy: bool,
) -> Result<FoldOutcome> {
    let n = data.len();
    let test = plan.test_rows(fold);
    let (train_mask, val_mask) = masks(n, &test);
    let labels = data.table.labels().to_vec();
    let graph = PopulationGraph::new(
        adjacency.clone(),
        data.features.clone(),
        labels.clone(),
        data.table.num_classes(),
        train_mask.clone(),
        val_mask.clone(),
    )?;
    let model_seed = rng::derive_seed(plan.seed, &format!("fold/{fold}"));
    let mut model = AmaGcn::new(config, data.features.ncols(), data.table.num_classes(), model_seed)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let terms = model.train_step(&graph, basis)?;
        let (train_acc, val_acc) = if epoch_accuracy {
            let pred = model.predict(&graph.features, basis)?;
            (
                Some(masked_accuracy(&pred.classes, &labels, &train_mask)),
                Some(masked_accuracy(&pred.classes, &labels, &val_mask)),
            )
        } else {
            (None, None)
        };
        epochs.push(EpochRecord {
            epoch,
            semi: terms.semi,
            sim: terms.sim,
            total: terms.total,
            train_acc,
            val_acc,
        });
    }
    let pred = model.predict(&graph.features, basis)?;
    let test_scores = pred.scores.select(ndarray::Axis(0), &test);
    let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let test_pred: Vec<usize> = test.iter().map(|&i| pred.classes[i]).collect();
    Ok(FoldOutcome {
        metrics: FoldMetrics {
            fold,
            acc: accuracy(&test_pred, &test_labels),
            auc: multiclass_auc(&test_scores, &test_labels)?,
            train_size: n - test.len(),
            test_size: test.len(),
        },
        epochs,
        params: model.params().clone(),
        model_seed,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// k-fold cross-validation of one model configuration on one graph source.
pub fn run_cross_validation(
    data: &Dataset,
    graph: &GraphSpec,
    config: &AmaGcnConfig,
    options: &CvOptions,
    variant: &str,
) -> Result<CvOutcome> {
    config.validate()?;
    let plan = kfold_split(data.len(), options.folds, options.seed)?;
    let all_rows: Vec<usize> = (0..data.len()).collect();
    let shared = if graph.uses_labels() {
        None
    } else {
        let adj = fold_adjacency(&data.table, graph, &all_rows)?;
        let basis = ChebBasis::from_adjacency(&adj, config.cheb_order)?;
        Some((adj, basis))
    };
    let folds: Vec<Result<FoldOutcome>> = with_pool(options.jobs, || {
        (0..plan.k)
            .into_par_iter()
            .map(|fold| {
                let owned;
                let (adj, basis) = match &shared {
                    Some((a, b)) => (a, b),
                    None => {
                        let adj = fold_adjacency(&data.table, graph, &plan.train_rows(fold))?;
                        let basis = ChebBasis::from_adjacency(&adj, config.cheb_order)?;
                        owned = (adj, basis);
                        (&owned.0, &owned.1)
                    }
                };
                train_fold(data, basis, adj, config, &plan, fold, options.epoch_accuracy)
            })
            .collect()
    })?;
    let folds = folds.into_iter().collect::<Result<Vec<_>>>()?;
    let report = VariantReport::new(variant, folds.iter().map(|f| f.metrics.clone()).collect());
    Ok(CvOutcome { report, folds })
}

/// Closed-form ridge regression on +/-1 targets (one-vs-rest beyond two
/// classes), trained per fold on the features alone.
pub fn ridge_baseline(features: &Array2<f64>, labels: &[usize], num_classes: usize, plan: &FoldPlan, reg: f64) -> Result<VariantReport> {
    if !(reg > 0.0) {
        return Err(Error::Config("ridge regularization must be positive".into()));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature matrix has non-finite entries".into()));
    }
    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let train = plan.train_rows(fold);
        let test = plan.test_rows(fold);
        let x_train = features.select(ndarray::Axis(0), &train);
        let x_test = features.select(ndarray::Axis(0), &test);
        let heads = if num_classes == 2 { 1 } else { num_classes };
        let mut scores = Array2::<f64>::zeros((test.len(), num_classes));
        for h in 0..heads {
            let target = if num_classes == 2 { 1 } else { h };
            let y: Vec<f64> = train.iter().map(|&i| if labels[i] == target { 1.0 } else { -1.0 }).collect();
            let out = ridge_fit_predict(&x_train, &y, &x_test, reg)?;
            for (r, s) in out.iter().enumerate() {
                if num_classes == 2 {
                    scores[[r, 0]] = -s;
                    scores[[r, 1]] = *s;
                } else {
                    scores[[r, h]] = *s;
                }
            }
        }
        let test_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        folds.push(FoldMetrics {
            fold,
            acc: accuracy(&argmax_rows(&scores), &test_labels),
            auc: multiclass_auc(&scores, &test_labels)?,
            train_size: train.len(),
            test_size: test.len(),
        });
    }
    Ok(VariantReport::new("ridge", folds))
}

/// Fits `w, b` minimizing `|Xw + b - y|^2 + reg |w|^2` and returns test
/// outputs. Uses the dual system when there are more features than rows.
fn ridge_fit_predict(x: &Array2<f64>, y: &[f64], x_test: &Array2<f64>, reg: f64) -> Result<Vec<f64>> {
    let (n, m) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty training rows");
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, m, |i, j| x[[i, j]] - mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let w = if m <= n {
        let mut gram = xc.transpose() * &xc;
        gram.iter_mut().step_by(m + 1).for_each(|d| *d += reg);
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NonFinite("ridge normal equations".into()))?;
        chol.solve(&(xc.transpose() * &yc))
    } else {
        let mut gram = &xc * xc.transpose();
        gram.iter_mut().step_by(n + 1).for_each(|d| *d += reg);
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NonFinite("ridge normal equations".into()))?;
        xc.transpose() * chol.solve(&yc)
    };
    Ok(x_test
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(mean.iter()).zip(w.iter()).map(|((v, mu), wj)| (v - mu) * wj).sum::<f64>() + y_mean)
        .collect())
}

/// Kinds of rows in a measure sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepRow {
    Measure(String),
    Random,
    Full,
    FeaturesOnly,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepRow::Measure(m) => write!(f, "measure:{m}"),
            SweepRow::Random => f.write_str("random"),
            SweepRow::Full => f.write_str("full"),
            SweepRow::FeaturesOnly => f.write_str("ridge"),
        }
    }
}

/// One CV run per single-measure graph (unit weight), one on a random graph,
/// one on the full PSWE graph, plus the feature-only ridge row.
pub fn run_measure_sweep(
    data: &Dataset,
    config: &AmaGcnConfig,
    options: &CvOptions,
    paper_faithful: bool,
) -> Result<Vec<VariantReport>> {
    if data.table.measures().is_empty() {
        return Err(Error::Config("the sweep needs at least one measure".into()));
    }
    let mut rows: Vec<(SweepRow, GraphSpec)> = data
        .table
        .measures()
        .iter()
        .map(|m| {
            (
                SweepRow::Measure(m.name.clone()),
                GraphSpec::Manual {
                    measures: vec![m.name.clone()],
                },
            )
        })
        .collect();
    rows.push((
        SweepRow::Random,
        GraphSpec::Random {
            seed: rng::derive_seed(options.seed, "sweep/random"),
        },
    ));
    rows.push((SweepRow::Full, GraphSpec::Pswe { paper_faithful }));
    let mut out = Vec::with_capacity(rows.len() + 1);
    for (row, spec) in rows {
        log::info!("sweep row {row}");
        out.push(run_cross_validation(data, &spec, config, options, &row.to_string())?.report);
    }
    let plan = kfold_split(data.len(), options.folds, options.seed)?;
    out.push(ridge_baseline(&data.features, data.table.labels(), data.table.num_classes(), &plan, DEFAULT_RIDGE_REG)?);
    Ok(out)
}
