//! Phenotype tables, measure specs and feature matrices on disk, plus the
//! planted synthetic population generator.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{Error, Result};
use crate::pswe::{Column, IntervalSpec, MeasureKind, MeasureSpec, PhenotypeTable, DEFAULT_DELTA, DEFAULT_THETA};
use crate::rng;

/// A phenotype table together with the number of incomplete rows dropped.
#[derive(Debug, Clone)]
pub struct LoadedPhenotypes {
    pub table: PhenotypeTable,
    pub dropped: usize,
}

pub fn load_measure_specs(path: &Path) -> Result<Vec<MeasureSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let specs: Vec<MeasureSpec> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut seen = HashSet::new();
    for s in &specs {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::parse(path, format!("measure `{}` declared twice", s.name)));
        }
    }
    specs.into_iter().map(MeasureSpec::normalized).collect()
}

pub fn save_measure_specs(path: &Path, specs: &[MeasureSpec]) -> Result<()> {
    let text = serde_json::to_string_pretty(specs).expect("specs serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads `subject_id,label,<measures...>`; rows with any empty cell in the
/// used columns are dropped.
pub fn load_phenotypes(path: &Path, measures_path: &Path) -> Result<LoadedPhenotypes> {
    let specs = load_measure_specs(measures_path)?;
    parse_phenotypes(path, specs)
}

pub fn parse_phenotypes(path: &Path, specs: Vec<MeasureSpec>) -> Result<LoadedPhenotypes> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_col = col("subject_id").ok_or_else(|| Error::parse(path, "header lacks `subject_id`"))?;
    let label_col = col("label").ok_or_else(|| Error::parse(path, "header lacks `label`"))?;
    let measure_cols = specs
        .iter()
        .map(|s| col(&s.name).ok_or_else(|| Error::parse(path, format!("measure `{}` missing from header", s.name))))
        .collect::<Result<Vec<_>>>()?;

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); specs.len()];
    let mut dropped = 0;
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let get = |c: usize| record.get(c).unwrap_or("");
        if std::iter::once(id_col)
            .chain(std::iter::once(label_col))
            .chain(measure_cols.iter().copied())
            .any(|c| get(c).is_empty())
        {
            dropped += 1;
            continue;
        }
        let id = get(id_col).to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::parse(path, format!("line {line}: duplicate subject_id `{id}`")));
        }
        let label: usize = get(label_col)
            .parse()
            .map_err(|_| Error::parse(path, format!("line {line}, column `label`: `{}` is not a class index", get(label_col))))?;
        for ((spec, &c), out) in specs.iter().zip(&measure_cols).zip(cells.iter_mut()) {
            let v = get(c);
            if spec.kind == MeasureKind::Quantitative && !v.parse::<f64>().is_ok_and(f64::is_finite) {
                return Err(Error::parse(
                    path,
                    format!("line {line}, column `{}`: `{v}` is not a finite number", spec.name),
                ));
            }
            out.push(v.to_string());
        }
        ids.push(id);
        labels.push(label);
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} subjects with empty values", path.display());
    }
    if ids.is_empty() {
        return Err(Error::parse(path, "no complete rows remain after dropping empty values"));
    }
    let columns = specs
        .iter()
        .zip(cells)
        .map(|(s, c)| match s.kind {
            MeasureKind::Quantitative => Column::Quantitative(c.iter().map(|v| v.parse().expect("validated")).collect()),
            MeasureKind::NonQuantitative => Column::categorical_from_tokens(&c),
        })
        .collect();
    let table = PhenotypeTable::new(ids, labels, specs, columns, None).map_err(|e| match e {
        Error::Data(m) => Error::parse(path, m),
        other => other,
    })?;
    Ok(LoadedPhenotypes { table, dropped })
}

pub fn save_phenotypes(path: &Path, table: &PhenotypeTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut header = vec!["subject_id".to_string(), "label".to_string()];
    header.extend(table.measures().iter().map(|m| m.name.clone()));
    let csv_err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..table.len() {
        let mut rec = vec![table.subject_ids()[i].clone(), table.labels()[i].to_string()];
        rec.extend(table.columns().iter().map(|c| c.cell(i)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense CSV (no header) or a binary container, detected by magic bytes.
pub fn load_features(path: &Path) -> Result<Array2<f64>> {
    if container::is_container(path)? {
        let (header, values) = container::read(path)?;
        let dims = (header["rows"].as_u64(), header["cols"].as_u64());
        let (Some(rows), Some(cols)) = dims else {
            return Err(Error::parse(path, "feature header lacks rows/cols"));
        };
        let (rows, cols) = (rows as usize, cols as usize);
        if rows * cols != values.len() {
            return Err(Error::parse(path, format!("header says {rows}x{cols}, payload has {} values", values.len())));
        }
        let m = Array2::from_shape_vec((rows, cols), values).expect("size checked");
        check_finite(&m, path)?;
        return Ok(m);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::parse(path, format!("row {r} has {} columns, expected {}", record.len(), cols.unwrap())));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(path, format!("row {r}, column {c}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("row {r}, column {c}: non-finite value")));
            }
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| Error::parse(path, e.to_string()))
}

fn check_finite(m: &Array2<f64>, path: &Path) -> Result<()> {
    if let Some(((r, c), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::parse(path, format!("row {r}, column {c}: non-finite value")));
    }
    Ok(())
}

pub fn save_features_bin(path: &Path, features: &Array2<f64>) -> Result<()> {
    let header = json!({"kind": "features", "rows": features.nrows(), "cols": features.ncols()});
    let standard = features.as_standard_layout();
    container::write(path, &header, &[standard.as_slice().expect("standard layout")])
}

/// Dense CSV with full round-trip precision.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 20);
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `i\tj\tweight` for every edge with `i < j` and positive weight.
pub fn write_edge_list(path: &Path, adjacency: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    let n = adjacency.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let w = adjacency[[i, j]];
            if w > 0.0 {
                out.push_str(&format!("{i}\t{j}\t{w:?}\n"));
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of a planted synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub informative_quant: usize,
    pub informative_cat: usize,
    pub noise_quant: usize,
    pub noise_cat: usize,
    /// Distance between class means in feature space (unit noise).
    pub class_separation: f64,
    /// Probability that a subject shows its class's token on an informative
    /// categorical measure.
    pub purity: f64,
    pub features: usize,
    /// Distinct tokens of a noise categorical measure.
    pub noise_levels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 300,
            classes: 2,
            informative_quant: 2,
            informative_cat: 2,
            noise_quant: 1,
            noise_cat: 2,
            class_separation: 1.8,
            purity: 0.9,
            features: 2000,
            noise_levels: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The desk-scale reference population (32 features).
    pub fn reference(seed: u64) -> Self {
        SynthSpec {
            features: 32,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.classes < 2 {
            return bad("at least two classes");
        }
        if self.n < self.classes {
            return bad("n must be at least the class count");
        }
        if self.informative_quant + self.informative_cat + self.noise_quant + self.noise_cat == 0 {
            return bad("at least one measure");
        }
        if !(self.purity <= 1.0 && self.purity >= 1.0 / self.classes as f64) {
            return bad("purity must lie in [1/classes, 1]");
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad("class_separation must be finite and nonnegative");
        }
        if self.features == 0 || self.noise_levels == 0 {
            return bad("features and noise_levels must be positive");
        }
        Ok(())
    }

    pub fn informative_names(&self) -> Vec<String> {
        (0..self.informative_quant)
            .map(|i| format!("info_quant_{i}"))
            .chain((0..self.informative_cat).map(|i| format!("info_cat_{i}")))
            .collect()
    }

    pub fn noise_names(&self) -> Vec<String> {
        (0..self.noise_quant)
            .map(|i| format!("noise_quant_{i}"))
            .chain((0..self.noise_cat).map(|i| format!("noise_cat_{i}")))
            .collect()
    }
}

/// A generated population: phenotypes, features, and the planted truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub table: PhenotypeTable,
    pub features: Array2<f64>,
    pub informative: Vec<String>,
    pub noise: Vec<String>,
}

const QUANT_CENTER: f64 = 50.0;
const QUANT_GAP: f64 = 10.0;
const QUANT_SD: f64 = 2.0;

/// Generates a planted population.
///
/// * labels are balanced and shuffled;
/// * informative categorical measures: class `c` shows token `c` with
///   probability `purity`, otherwise one of the other class tokens uniformly;
/// * informative quantitative measures: class 0 concentrates at the centre,
///   class `c >= 1` sits at `centre +/- c * gap` (side drawn per subject), so
///   the interquartile interval holds class 0 and excludes the others;
/// * noise measures ignore the label;
/// * features: class means at mutually orthogonal offsets with pairwise
///   distance `class_separation`, plus unit Gaussian noise.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let p = spec.classes;
    let n = spec.n;
    let mut labels: Vec<usize> = (0..n).map(|i| i % p).collect();
    labels.shuffle(&mut rng::stream(spec.seed, "synth/labels"));

    let mut measures = Vec::new();
    let mut columns = Vec::new();
    for name in spec.informative_names().into_iter().chain(spec.noise_names()) {
        let mut r = rng::stream(spec.seed, &format!("synth/measure/{name}"));
        let informative = name.starts_with("info");
        if name.contains("quant") {
            let values: Vec<f64> = labels
                .iter()
                .map(|&c| {
                    if !informative {
                        return Normal::new(QUANT_CENTER, 5.0 * QUANT_SD).expect("valid").sample(&mut r);
                    }
                    let noise: f64 = r.sample::<f64, _>(StandardNormal) * QUANT_SD;
                    let side = if c > 0 && r.random_bool(0.5) { -1.0 } else { 1.0 };
                    QUANT_CENTER + side * c as f64 * QUANT_GAP + noise
                })
                .collect();
            measures.push(MeasureSpec::quantitative(name, DEFAULT_DELTA, IntervalSpec::Auto));
            columns.push(Column::Quantitative(values));
        } else {
            let tokens: Vec<String> = labels
                .iter()
                .map(|&c| {
                    if !informative {
                        return format!("level_{}", r.random_range(0..spec.noise_levels));
                    }
                    let token = if p == 1 || r.random_bool(spec.purity) {
                        c
                    } else {
                        let other = r.random_range(0..p - 1);
                        if other >= c {
                            other + 1
                        } else {
                            other
                        }
                    };
                    format!("level_{token}")
                })
                .collect();
            measures.push(MeasureSpec::categorical(name, DEFAULT_THETA));
            columns.push(Column::categorical_from_tokens(&tokens));
        }
    }
    let ids = (0..n).map(|i| format!("subj_{i:05}")).collect();
    let table = PhenotypeTable::new(ids, labels.clone(), measures, columns, Some(p))?;

    let mut r = rng::stream(spec.seed, "synth/features");
    let m = spec.features;
    // orthonormal class directions (Gram-Schmidt on Gaussian draws)
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(p);
    for _ in 0..p {
        let mut v: Vec<f64> = (0..m).map(|_| r.sample(StandardNormal)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|a| *a /= norm);
        }
        dirs.push(v);
    }
    let scale = spec.class_separation / std::f64::consts::SQRT_2;
    let mut features = Array2::<f64>::zeros((n, m));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..m {
            let noise: f64 = r.sample(StandardNormal);
            features[[i, j]] = scale * dirs[c][j] + noise;
        }
    }
    Ok(SynthData {
        table,
        features,
        informative: spec.informative_names(),
        noise: spec.noise_names(),
    })
}

/// Paths of the `<name>.phenotypes.csv / .measures.json / .features.bin` triple.
pub fn synth_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.phenotypes.csv")),
        dir.join(format!("{name}.measures.json")),
        dir.join(format!("{name}.features.bin")),
    )
}

pub fn save_synthetic(dir: &Path, name: &str, data: &SynthData) -> Result<(PathBuf, PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (pheno, measures, features) = synth_paths(dir, name);
    save_phenotypes(&pheno, &data.table)?;
    save_measure_specs(&measures, data.table.measures())?;
    save_features_bin(&features, &data.features)?;
    Ok((pheno, measures, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pswe::{count_nonquantitative, score_measures};
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    const SPECS: &str = r#"[{"name":"age","kind":"quantitative","interval":[20,40]},{"name":"site","kind":"non-quantitative"}]"#;

    #[test]
    fn drops_incomplete_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("subject_id,label,age,site\n");
        for i in 0..10 {
            let age = if i == 3 { String::new() } else { format!("{}", 20 + i) };
            let site = if i == 7 { "" } else { "A" };
            csv.push_str(&format!("s{i},{},{age},{site}\n", i % 2));
        }
        let p = write(dir.path(), "p.csv", &csv);
        let m = write(dir.path(), "m.json", SPECS);
        let loaded = load_phenotypes(&p, &m).unwrap();
        assert_eq!(loaded.table.len(), 8);
        assert_eq!(loaded.dropped, 2);
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.json", SPECS);
        let p = write(dir.path(), "a.csv", "subject_id,label,age,site\ns0,0,31,A\ns1,1,old,B\n");
        let err = load_phenotypes(&p, &m).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("age"), "{err}");

        let p = write(dir.path(), "b.csv", "subject_id,label,age\ns0,0,31\n");
        let err = load_phenotypes(&p, &m).unwrap_err().to_string();
        assert!(err.contains("site"), "{err}");

        let p = write(dir.path(), "c.csv", "subject_id,label,age,site\ns0,0,31,A\ns0,1,32,B\n");
        assert!(load_phenotypes(&p, &m).unwrap_err().to_string().contains("duplicate"));

        let p = write(dir.path(), "d.csv", "subject_id,label,age,site\ns0,0,,A\n");
        assert!(load_phenotypes(&p, &m).is_err());
    }

    #[test]
    fn feature_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.csv", "1,2\n3,4\n5,6\n");
        let f = load_features(&p).unwrap();
        assert_eq!(f.dim(), (3, 2));
        assert_eq!(f[[2, 1]], 6.0);

        let bad = write(dir.path(), "g.csv", "1,2\n3,NaN\n");
        let err = load_features(&bad).unwrap_err().to_string();
        assert!(err.contains("row 1, column 1"), "{err}");

        let bin = dir.path().join("f.bin");
        let m = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64).sin() * 1e-7 + j as f64 / 3.0);
        save_features_bin(&bin, &m).unwrap();
        let back = load_features(&bin).unwrap();
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn synth_roundtrip_and_determinism() {
        let spec = SynthSpec {
            n: 40,
            features: 5,
            ..SynthSpec::reference(3)
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.table, b.table);
        assert!(a.features.iter().zip(b.features.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let dir = tempfile::tempdir().unwrap();
        let (p, m, f) = save_synthetic(dir.path(), "ref", &a).unwrap();
        let loaded = load_phenotypes(&p, &m).unwrap();
        assert_eq!(loaded.dropped, 0);
        assert_eq!(loaded.table, a.table);
        let feats = load_features(&f).unwrap();
        assert!(a.features.iter().zip(feats.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let other = generate_synthetic(&SynthSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(other.table, a.table);
    }

    #[test]
    fn labels_balanced() {
        let data = generate_synthetic(&SynthSpec {
            n: 31,
            classes: 3,
            features: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut counts = [0; 3];
        data.table.labels().iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pure_categorical_counts() {
        // one token per class: every (value, class) cell is pure, count = n / U
        let spec = SynthSpec {
            n: 200,
            purity: 1.0,
            features: 2,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let c = count_nonquantitative(&data.table, "info_cat_0").unwrap();
        assert_eq!(c, 200.0 / 2.0);
    }

    #[test]
    fn chance_purity_counts_vanish() {
        let spec = SynthSpec {
            n: 2000,
            purity: 0.5,
            features: 2,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        for name in ["info_cat_0", "info_cat_1"] {
            let c = count_nonquantitative(&data.table, name).unwrap();
            assert!(c < 0.01 * 2000.0, "{name}: {c}");
        }
    }

    #[test]
    fn planted_measures_recovered() {
        let data = generate_synthetic(&SynthSpec::reference(11)).unwrap();
        let scores = score_measures(&data.table, None).unwrap();
        for s in &scores {
            assert_eq!(s.selected, data.informative.contains(&s.measure), "{s:?}");
        }
    }
}
