//! Graph-spectral preprocessing for Chebyshev graph convolutions.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Adjacency, node features, labels and the train/validation split.
#[derive(Debug, Clone)]
pub struct PopulationGraph {
    pub adjacency: Array2<f64>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
}

impl PopulationGraph {
    pub fn new(
        adjacency: Array2<f64>,
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        train_mask: Vec<bool>,
        val_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = adjacency.nrows();
        check_symmetric(&adjacency)?;
        if features.nrows() != n || labels.len() != n || train_mask.len() != n || val_mask.len() != n {
            return Err(Error::Shape(format!(
                "graph has {n} nodes but {} feature rows, {} labels, {}/{} mask entries",
                features.nrows(),
                labels.len(),
                train_mask.len(),
                val_mask.len()
            )));
        }
        if (0..n).any(|i| adjacency[[i, i]] != 0.0) {
            return Err(Error::Data("adjacency diagonal must be zero".into()));
        }
        if adjacency.iter().any(|&w| w < 0.0) {
            return Err(Error::Data("adjacency has negative weights".into()));
        }
        if train_mask.iter().zip(&val_mask).any(|(&t, &v)| t && v) {
            return Err(Error::Data("train and validation masks overlap".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(PopulationGraph {
            adjacency,
            features,
            labels,
            num_classes,
            train_mask,
            val_mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }
}

/// Chebyshev polynomials `T_0(L~) .. T_K(L~)` of the scaled Laplacian.
#[derive(Debug, Clone)]
pub struct ChebBasis {
    terms: Vec<Array2<f64>>,
}

impl ChebBasis {
    pub fn order(&self) -> usize {
        self.terms.len() - 1
    }

    pub fn terms(&self) -> &[Array2<f64>] {
        &self.terms
    }

    pub fn num_nodes(&self) -> usize {
        self.terms[0].nrows()
    }

    /// Builds the basis of order `k` straight from an adjacency matrix.
    pub fn from_adjacency(adjacency: &Array2<f64>, k: usize) -> Result<Self> {
        let l = normalized_laplacian(adjacency)?;
        Ok(chebyshev_basis(&scaled_laplacian(&l), k))
    }
}

fn check_symmetric(a: &Array2<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("adjacency is {}x{}", n, a.ncols())));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if a[[i, j]] != a[[j, i]] {
                return Err(Error::Data(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `L = I - D^{-1/2} A D^{-1/2}`. Isolated nodes get an identity row.
pub fn normalized_laplacian(adjacency: &Array2<f64>) -> Result<Array2<f64>> {
    check_symmetric(adjacency)?;
    let n = adjacency.nrows();
    let inv_sqrt: Array1<f64> = adjacency
        .rows()
        .into_iter()
        .map(|r| {
            let d: f64 = r.sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..n {
            l[[i, j]] -= inv_sqrt[i] * adjacency[[i, j]] * inv_sqrt[j];
        }
    }
    Ok(l)
}

/// `L~ = L - I`, using the eigenvalue bound 2 of the normalized Laplacian.
pub fn scaled_laplacian(l: &Array2<f64>) -> Array2<f64> {
    l - &Array2::<f64>::eye(l.nrows())
}

/// `T_0 = I`, `T_1 = L~`, `T_k = 2 L~ T_{k-1} - T_{k-2}`.
pub fn chebyshev_basis(scaled: &Array2<f64>, k: usize) -> ChebBasis {
    let n = scaled.nrows();
    let mut terms = vec![Array2::<f64>::eye(n)];
    if k >= 1 {
        terms.push(scaled.clone());
    }
    for i in 2..=k {
        let next = 2.0 * scaled.dot(&terms[i - 1]) - &terms[i - 2];
        terms.push(next);
    }
    // bitwise symmetric
    for t in terms.iter_mut().skip(1) {
        let sym = (&*t + &t.t()) * 0.5;
        *t = sym;
    }
    ChebBasis { terms }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random_graph(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let w = if rng.random_bool(0.6) { rng.random::<f64>() } else { 0.0 };
                a[[i, j]] = w;
                a[[j, i]] = w;
            }
        }
        a
    }

    fn power_iteration(m: &Array2<f64>) -> f64 {
        let n = m.nrows();
        let mut v = Array1::from_iter((0..n).map(|i| 1.0 + i as f64 * 0.01));
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = m.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = v.dot(&w) / v.dot(&v);
            v = w / norm;
        }
        lambda
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(normalized_laplacian(&Array2::zeros((3, 3))).unwrap(), Array2::<f64>::eye(3));
        let two = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(normalized_laplacian(&two).unwrap(), array![[1.0, -1.0], [-1.0, 1.0]]);
        let k3 = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let l = normalized_laplacian(&k3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { -0.5 };
                assert!((l[[i, j]] - want).abs() < 1e-15);
            }
        }
        assert!(normalized_laplacian(&array![[0.0, 1.0], [2.0, 0.0]]).is_err());
    }

    #[test]
    fn scaled_examples() {
        assert_eq!(scaled_laplacian(&Array2::eye(2)), Array2::<f64>::zeros((2, 2)));
        let l = array![[1.0, -1.0], [-1.0, 1.0]];
        assert_eq!(scaled_laplacian(&l), array![[0.0, -1.0], [-1.0, 0.0]]);
    }

    #[test]
    fn scaled_spectrum_within_unit_interval() {
        for seed in 0..10 {
            let a = random_graph(12, seed);
            let lt = scaled_laplacian(&normalized_laplacian(&a).unwrap());
            // spectral radius via the PSD shift: largest eigenvalue of L~ + I (in [0,2])
            let shifted = &lt + &Array2::<f64>::eye(12);
            let top = power_iteration(&shifted);
            assert!(top <= 2.0 + 1e-8, "seed {seed}: {top}");
            // min eigenvalue of L >= 0 via power iteration on -L + 2I
            let l = normalized_laplacian(&a).unwrap();
            let m = 2.0 * Array2::<f64>::eye(12) - &l;
            let top = power_iteration(&m);
            assert!(2.0 - top >= -1e-8, "seed {seed}: min eig {}", 2.0 - top);
        }
    }

    #[test]
    fn basis_examples() {
        let lt = array![[0.0, -0.5], [-0.5, 0.0]];
        let b = chebyshev_basis(&lt, 0);
        assert_eq!(b.order(), 0);
        assert_eq!(b.terms()[0], Array2::<f64>::eye(2));
        let b = chebyshev_basis(&lt, 2);
        assert_eq!(b.terms()[1], lt);
        assert_eq!(b.terms()[2], 2.0 * lt.dot(&lt) - Array2::<f64>::eye(2));
        assert_eq!(chebyshev_basis(&lt, 3).terms().len(), 4);
    }

    #[test]
    fn laplacian_permutation_equivariant() {
        let a = random_graph(7, 3);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let pa = Array2::from_shape_fn((7, 7), |(i, j)| a[[perm[i], perm[j]]]);
        let l = normalized_laplacian(&a).unwrap();
        let pl = normalized_laplacian(&pa).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((pl[[i, j]] - l[[perm[i], perm[j]]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn graph_validation() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let x = Array2::zeros((2, 1));
        assert!(PopulationGraph::new(a.clone(), x.clone(), vec![0, 1], 2, vec![true, false], vec![false, true]).is_ok());
        assert!(PopulationGraph::new(a.clone(), x.clone(), vec![0, 1], 2, vec![true, true], vec![false, true]).is_err());
        assert!(PopulationGraph::new(a, Array2::zeros((3, 1)), vec![0, 1], 2, vec![true, false], vec![false, true]).is_err());
    }
}
