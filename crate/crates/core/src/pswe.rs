//! Phenotypic measure selection and weight encoding.
//!
//! Each phenotypic measure gets a discriminative count from the labelled
//! subjects. Counts are turned into PMS-scores (measures scoring below the
//! mean count get weight zero), and the population adjacency is the
//! score-weighted sum of per-measure similarity kernels:
//!
//! ```text
//! A(v, w) = sum_h alpha_h * gamma_h(K_h(v), K_h(w))
//! ```
//!
//! Categorical measures use the Kronecker delta as `gamma`. Quantitative
//! measures use an interval kernel: 1 when both values fall outside the
//! interval `D = [lo, hi]`, `exp(-cbrt|v - w|)` when the values are closer
//! than the width of `D`, 0 otherwise.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THETA: f64 = 0.5;
pub const DEFAULT_DELTA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureKind {
    Quantitative,
    NonQuantitative,
}

impl MeasureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MeasureKind::Quantitative => "quantitative",
            MeasureKind::NonQuantitative => "non-quantitative",
        }
    }
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Config(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Endpoints count as inside.
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

impl TryFrom<[f64; 2]> for Interval {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Interval::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

/// Either a user-fixed interval or `"auto"` (interquartile range of the data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntervalRepr", into = "IntervalRepr")]
pub enum IntervalSpec {
    Fixed(Interval),
    Auto,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum IntervalRepr {
    Range([f64; 2]),
    Keyword(String),
}

impl TryFrom<IntervalRepr> for IntervalSpec {
    type Error = String;

    fn try_from(r: IntervalRepr) -> std::result::Result<Self, String> {
        match r {
            IntervalRepr::Range(v) => Interval::try_from(v)
                .map(IntervalSpec::Fixed)
                .map_err(|e| e.to_string()),
            IntervalRepr::Keyword(k) if k == "auto" => Ok(IntervalSpec::Auto),
            IntervalRepr::Keyword(k) => Err(format!("interval must be [lo, hi] or \"auto\", got \"{k}\"")),
        }
    }
}

impl From<IntervalSpec> for IntervalRepr {
    fn from(s: IntervalSpec) -> Self {
        match s {
            IntervalSpec::Fixed(i) => IntervalRepr::Range(i.into()),
            IntervalSpec::Auto => IntervalRepr::Keyword("auto".into()),
        }
    }
}

/// Declaration of one phenotypic measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub name: String,
    pub kind: MeasureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<IntervalSpec>,
}

impl MeasureSpec {
    pub fn categorical(name: impl Into<String>, theta: f64) -> Self {
        MeasureSpec {
            name: name.into(),
            kind: MeasureKind::NonQuantitative,
            theta: Some(theta),
            delta: None,
            interval: None,
        }
    }

    pub fn quantitative(name: impl Into<String>, delta: f64, interval: IntervalSpec) -> Self {
        MeasureSpec {
            name: name.into(),
            kind: MeasureKind::Quantitative,
            theta: None,
            delta: Some(delta),
            interval: Some(interval),
        }
    }

    /// Fills defaults (theta 0.5, delta 0.2, interval auto) and checks the
    /// kind-specific field constraints.
    pub fn normalized(mut self) -> Result<Self> {
        let bad = |msg: &str| Err(Error::Config(format!("measure `{}`: {msg}", self.name)));
        match self.kind {
            MeasureKind::NonQuantitative => {
                if self.delta.is_some() || self.interval.is_some() {
                    return bad("delta/interval are only valid for quantitative measures");
                }
                self.theta.get_or_insert(DEFAULT_THETA);
            }
            MeasureKind::Quantitative => {
                if self.theta.is_some() {
                    return bad("theta is only valid for non-quantitative measures");
                }
                self.delta.get_or_insert(DEFAULT_DELTA);
                self.interval.get_or_insert(IntervalSpec::Auto);
            }
        }
        for t in [self.theta, self.delta].into_iter().flatten() {
            if !(t.is_finite() && t >= 0.0) {
                return bad("thresholds must be finite and nonnegative");
            }
        }
        Ok(self)
    }

    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or(DEFAULT_THETA)
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(DEFAULT_DELTA)
    }
}

/// Values of one measure over all subjects.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Quantitative(Vec<f64>),
    /// Tokens interned per column; `codes[i]` indexes `levels`.
    Categorical { levels: Vec<String>, codes: Vec<u32> },
}

impl Column {
    pub fn categorical_from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut index: HashMap<&str, u32> = HashMap::new();
        let mut levels = Vec::new();
        let mut codes = Vec::with_capacity(tokens.len());
        for t in tokens {
            let t = t.as_ref();
            let code = *index.entry(t).or_insert_with(|| {
                levels.push(t.to_string());
                (levels.len() - 1) as u32
            });
            codes.push(code);
        }
        Column::Categorical { levels, codes }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Quantitative(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> MeasureKind {
        match self {
            Column::Quantitative(_) => MeasureKind::Quantitative,
            Column::Categorical { .. } => MeasureKind::NonQuantitative,
        }
    }

    /// Cell rendered as text (CSV output).
    pub fn cell(&self, row: usize) -> String {
        match self {
            Column::Quantitative(v) => format!("{:?}", v[row]),
            Column::Categorical { levels, codes } => levels[codes[row] as usize].clone(),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Quantitative(v) => Column::Quantitative(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical { levels, codes } => Column::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
            },
        }
    }
}

/// Per-subject measure values and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeTable {
    subject_ids: Vec<String>,
    labels: Vec<usize>,
    num_classes: usize,
    measures: Vec<MeasureSpec>,
    columns: Vec<Column>,
}

impl PhenotypeTable {
    /// `num_classes` defaults to `max(label) + 1` and must be at least 2.
    pub fn new(
        subject_ids: Vec<String>,
        labels: Vec<usize>,
        measures: Vec<MeasureSpec>,
        columns: Vec<Column>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} subjects", labels.len())));
        }
        if measures.len() != columns.len() {
            return Err(Error::Data(format!(
                "{} measure specs for {} columns",
                measures.len(),
                columns.len()
            )));
        }
        let measures = measures
            .into_iter()
            .map(MeasureSpec::normalized)
            .collect::<Result<Vec<_>>>()?;
        for (m, c) in measures.iter().zip(&columns) {
            if c.len() != n {
                return Err(Error::Data(format!("measure `{}` has {} values for {n} subjects", m.name, c.len())));
            }
            if c.kind() != m.kind {
                return Err(Error::KindMismatch {
                    name: m.name.clone(),
                    expected: m.kind.as_str(),
                    actual: c.kind().as_str(),
                });
            }
        }
        let observed = labels.iter().max().map_or(0, |&l| l + 1);
        let num_classes = num_classes.unwrap_or(observed).max(observed);
        if num_classes < 2 {
            return Err(Error::Data("at least two classes are required".into()));
        }
        Ok(PhenotypeTable {
            subject_ids,
            labels,
            num_classes,
            measures,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn measures(&self) -> &[MeasureSpec] {
        &self.measures
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn measure_index(&self, name: &str) -> Result<usize> {
        self.measures
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::UnknownMeasure(name.to_string()))
    }

    pub fn measure(&self, name: &str) -> Result<(&MeasureSpec, &Column)> {
        let i = self.measure_index(name)?;
        Ok((&self.measures[i], &self.columns[i]))
    }

    /// Sub-table of the given rows (class count preserved).
    pub fn select_rows(&self, rows: &[usize]) -> PhenotypeTable {
        PhenotypeTable {
            subject_ids: rows.iter().map(|&r| self.subject_ids[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            measures: self.measures.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
        }
    }

    /// Same table restricted to the named measures, in the given order.
    pub fn select_measures(&self, names: &[String]) -> Result<PhenotypeTable> {
        let idx = names
            .iter()
            .map(|n| self.measure_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhenotypeTable {
            subject_ids: self.subject_ids.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            measures: idx.iter().map(|&i| self.measures[i].clone()).collect(),
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
        })
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<PhenotypeTable> {
        PhenotypeTable::new(
            self.subject_ids.clone(),
            labels,
            self.measures.clone(),
            self.columns.clone(),
            Some(self.num_classes),
        )
    }
}

/// PMS-score outcome for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureScore {
    pub measure: String,
    pub kind: MeasureKind,
    pub count: f64,
    pub pms_score: f64,
    pub selected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<Interval>,
}

fn expect_kind(spec: &MeasureSpec, kind: MeasureKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::KindMismatch {
            name: spec.name.clone(),
            expected: kind.as_str(),
            actual: spec.kind.as_str(),
        });
    }
    Ok(())
}

/// Discriminative count of a categorical measure.
///
/// For every (value u, class p) cell with `n_pu > 0` and
/// `(n_u - n_pu) / n_pu < theta`, `n_pu` is added; the total is divided by
/// the number of distinct values present.
pub fn count_nonquantitative(table: &PhenotypeTable, measure: &str) -> Result<f64> {
    let (spec, column) = table.measure(measure)?;
    expect_kind(spec, MeasureKind::NonQuantitative)?;
    let Column::Categorical { levels, codes } = column else {
        unreachable!("column kind checked at construction")
    };
    let p = table.num_classes();
    let mut cells = vec![0usize; levels.len() * p];
    for (&code, &label) in codes.iter().zip(table.labels()) {
        cells[code as usize * p + label] += 1;
    }
    let theta = spec.theta();
    let mut present = 0usize;
    let mut total = 0usize;
    for row in cells.chunks(p) {
        let n_u: usize = row.iter().sum();
        if n_u == 0 {
            continue;
        }
        present += 1;
        for &n_pu in row {
            if n_pu > 0 && ((n_u - n_pu) as f64 / n_pu as f64) < theta {
                total += n_pu;
            }
        }
    }
    if present == 0 {
        return Ok(0.0);
    }
    Ok(total as f64 / present as f64)
}

/// Discriminative count of a quantitative measure against interval `d`.
///
/// For every class p with `n_ps > 0` subjects outside `d` and
/// `(n_p - n_ps) / n_ps < delta`, `n_ps` is added.
pub fn count_quantitative(table: &PhenotypeTable, measure: &str, d: Interval) -> Result<f64> {
    let (spec, column) = table.measure(measure)?;
    expect_kind(spec, MeasureKind::Quantitative)?;
    if table.is_empty() {
        return Err(Error::Data("cannot count on an empty table".into()));
    }
    let Column::Quantitative(values) = column else {
        unreachable!("column kind checked at construction")
    };
    let p = table.num_classes();
    let mut class_total = vec![0usize; p];
    let mut class_outside = vec![0usize; p];
    for (&v, &label) in values.iter().zip(table.labels()) {
        class_total[label] += 1;
        if !d.contains(v) {
            class_outside[label] += 1;
        }
    }
    let delta = spec.delta();
    let total: usize = class_total
        .iter()
        .zip(&class_outside)
        .filter(|&(&n_p, &n_ps)| n_ps > 0 && ((n_p - n_ps) as f64 / n_ps as f64) < delta)
        .map(|(_, &n_ps)| n_ps)
        .sum();
    Ok(total as f64)
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Interquartile range `[q25, q75]` of the measure's values.
pub fn derive_interval(table: &PhenotypeTable, measure: &str) -> Result<Interval> {
    let (spec, column) = table.measure(measure)?;
    expect_kind(spec, MeasureKind::Quantitative)?;
    let Column::Quantitative(values) = column else {
        unreachable!("column kind checked at construction")
    };
    if values.len() < 4 {
        return Err(Error::DegenerateInterval(measure.to_string()));
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, 0.25);
    let hi = quantile_sorted(&sorted, 0.75);
    if lo >= hi {
        return Err(Error::DegenerateInterval(measure.to_string()));
    }
    Interval::new(lo, hi)
}

/// The interval a quantitative measure uses: fixed, or derived from `table`.
pub fn resolve_interval(table: &PhenotypeTable, measure: &str) -> Result<Interval> {
    let (spec, _) = table.measure(measure)?;
    expect_kind(spec, MeasureKind::Quantitative)?;
    match spec.interval.unwrap_or(IntervalSpec::Auto) {
        IntervalSpec::Fixed(d) => Ok(d),
        IntervalSpec::Auto => derive_interval(table, measure),
    }
}

/// PMS-scores: `H * n_h / sum(n)` where `H * n_h >= sum(n)`, else 0.
pub fn compute_pms_scores(counts: &[(String, f64)]) -> Vec<MeasureScore> {
    let h = counts.len() as f64;
    let total: f64 = counts.iter().map(|(_, c)| c).sum();
    if total == 0.0 {
        log::warn!("all phenotypic measure counts are zero; no measure selected");
    }
    counts
        .iter()
        .map(|(name, count)| {
            let pms_score = if total > 0.0 && h * count >= total {
                h * count / total
            } else {
                0.0
            };
            MeasureScore {
                measure: name.clone(),
                kind: MeasureKind::NonQuantitative,
                count: *count,
                pms_score,
                selected: pms_score > 0.0,
                interval: None,
            }
        })
        .collect()
}

/// Scores every measure of `table`.
///
/// Intervals come from all rows of `table` (label-free); counts use only the
/// rows in `count_rows` when given, so held-out labels never enter the
/// scores.
pub fn score_measures(table: &PhenotypeTable, count_rows: Option<&[usize]>) -> Result<Vec<MeasureScore>> {
    let counting = count_rows.map(|rows| table.select_rows(rows));
    let counting = counting.as_ref().unwrap_or(table);
    let mut counts = Vec::with_capacity(table.measures().len());
    let mut intervals = Vec::with_capacity(table.measures().len());
    for spec in table.measures() {
        let (count, interval) = match spec.kind {
            MeasureKind::NonQuantitative => (count_nonquantitative(counting, &spec.name)?, None),
            MeasureKind::Quantitative => {
                let d = resolve_interval(table, &spec.name)?;
                (count_quantitative(counting, &spec.name, d)?, Some(d))
            }
        };
        counts.push((spec.name.clone(), count));
        intervals.push((spec.kind, interval));
    }
    let mut scores = compute_pms_scores(&counts);
    for (s, (kind, interval)) in scores.iter_mut().zip(intervals) {
        s.kind = kind;
        s.interval = interval;
    }
    Ok(scores)
}

/// Unit-weight scores for a hand-picked measure list (all other measures off).
pub fn manual_scores(table: &PhenotypeTable, names: &[String]) -> Result<Vec<MeasureScore>> {
    for n in names {
        table.measure_index(n)?;
    }
    table
        .measures()
        .iter()
        .map(|spec| {
            let on = names.contains(&spec.name);
            let interval = match spec.kind {
                MeasureKind::Quantitative if on => Some(resolve_interval(table, &spec.name)?),
                _ => None,
            };
            Ok(MeasureScore {
                measure: spec.name.clone(),
                kind: spec.kind,
                count: 0.0,
                pms_score: if on { 1.0 } else { 0.0 },
                selected: on,
                interval,
            })
        })
        .collect()
}

/// Replaces every positive score by 1 (selection kept, weighting dropped).
pub fn unit_weights(scores: &[MeasureScore]) -> Vec<MeasureScore> {
    scores
        .iter()
        .cloned()
        .map(|mut s| {
            if s.selected {
                s.pms_score = 1.0;
            }
            s
        })
        .collect()
}

pub fn similarity_nonquantitative<T: PartialEq + ?Sized>(a: &T, b: &T) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

/// Interval kernel; cases are tried in order, so two values outside `d`
/// score 1 even when they are close.
pub fn similarity_quantitative(v: f64, w: f64, d: Interval) -> f64 {
    let diff = (v - w).abs();
    if !d.contains(v) && !d.contains(w) {
        1.0
    } else if diff < d.width() {
        (-diff.cbrt()).exp()
    } else {
        0.0
    }
}

/// Weighted adjacency over all subjects of `table` from the selected scores.
pub fn build_adjacency(table: &PhenotypeTable, scores: &[MeasureScore]) -> Result<Array2<f64>> {
    enum Kernel<'a> {
        Delta(&'a [u32]),
        Interval(&'a [f64], Interval),
    }
    let mut terms: Vec<(f64, Kernel)> = Vec::new();
    for s in scores.iter().filter(|s| s.selected && s.pms_score > 0.0) {
        let (spec, column) = table.measure(&s.measure)?;
        let kernel = match column {
            Column::Categorical { codes, .. } => Kernel::Delta(codes),
            Column::Quantitative(values) => {
                let d = match s.interval {
                    Some(d) => d,
                    None => resolve_interval(table, &spec.name)?,
                };
                Kernel::Interval(values, d)
            }
        };
        terms.push((s.pms_score, kernel));
    }
    if terms.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let n = table.len();
    let mut adj = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let w: f64 = terms
                .iter()
                .map(|(alpha, k)| {
                    alpha
                        * match k {
                            Kernel::Delta(c) => similarity_nonquantitative(&c[i], &c[j]),
                            Kernel::Interval(v, d) => similarity_quantitative(v[i], v[j], *d),
                        }
                })
                .sum();
            adj[[i, j]] = w;
            adj[[j, i]] = w;
        }
    }
    Ok(adj)
}
