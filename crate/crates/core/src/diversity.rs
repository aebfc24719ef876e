//! Diversity of synthetic view sets: PCA, a diagonal Gaussian mixture fit
//! by EM, and the determinant of the mixture's total covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DatasetSchema, Instance};
use crate::linalg::{self, Matrix};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiversityError {
    #[error("reduced dimension {d} outside 1..={max}")]
    DimensionOutOfRange { d: usize, max: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("rows have inconsistent or non-finite features")]
    BadData,
    #[error("stage {stage} has {got} views, needs {needed}")]
    InsufficientStage { stage: String, got: usize, needed: usize },
}

pub type Result<T> = std::result::Result<T, DiversityError>;

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    if d == 0 || x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(DiversityError::BadData);
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d × D`, orthonormal columns in descending eigenvalue order.
    pub projection: Matrix,
    /// All `d` covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fraction of total variance captured by the kept components.
    pub fn explained_variance(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().map(|e| e.max(0.0)).sum();
        if total == 0.0 {
            return 1.0;
        }
        self.eigenvalues[..self.projection.cols].iter().map(|e| e.max(0.0)).sum::<f64>() / total
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
                self.projection.matvec_t(&centered)
            })
            .collect()
    }
}

/// Sample-covariance PCA keeping `d_out` components.
pub fn pca_fit(x: &[Vec<f64>], d_out: usize) -> Result<Pca> {
    if x.len() < 2 {
        return Err(DiversityError::TooFewPoints { needed: 2, got: x.len() });
    }
    let d = check_rows(x)?;
    let max = d.min(x.len());
    if d_out == 0 || d_out > max {
        return Err(DiversityError::DimensionOutOfRange { d: d_out, max });
    }
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x {
        let c = nalgebra::DVector::from_iterator(d, row.iter().zip(&mean).map(|(a, m)| a - m));
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut projection = Matrix::zeros(d, d_out);
    for (k, &src) in order[..d_out].iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            projection[(r, k)] = sign * col[r];
        }
    }
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(Pca { mean, projection, eigenvalues })
}

/// Fits PCA and returns it with the reduced data `(X − mean)·projection`.
pub fn pca_reduce(x: &[Vec<f64>], d_out: usize) -> Result<(Pca, Vec<Vec<f64>>)> {
    let pca = pca_fit(x, d_out)?;
    let reduced = pca.transform(x);
    Ok((pca, reduced))
}

/// Mixture of axis-aligned Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `N × D`.
    pub means: Matrix,
    /// `N × D` per-dimension variances.
    pub variances: Matrix,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols
    }

    fn log_component(&self, k: usize, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut s = self.weights[k].ln();
        for (j, xj) in x.iter().enumerate() {
            let var = self.variances[(k, j)];
            let diff = xj - self.means[(k, j)];
            s -= 0.5 * (ln2pi + var.ln() + diff * diff / var);
        }
        s
    }

    /// Mean log density over `x`.
    pub fn mean_log_likelihood(&self, x: &[Vec<f64>]) -> f64 {
        let total: f64 = x
            .iter()
            .map(|row| {
                let logs: Vec<f64> = (0..self.components()).map(|k| self.log_component(k, row)).collect();
                linalg::logsumexp(&logs)
            })
            .sum();
        total / x.len() as f64
    }

    /// `Σ pᵢ diag(Σᵢ) + Σ pᵢ (uᵢ − ū)(uᵢ − ū)ᵀ`.
    pub fn total_covariance(&self) -> Matrix {
        let (n, d) = (self.components(), self.dim());
        let mut bar = vec![0.0; d];
        for k in 0..n {
            bar.iter_mut().zip(self.means.row(k)).for_each(|(b, m)| *b += self.weights[k] * m);
        }
        let mut cov = Matrix::zeros(d, d);
        for k in 0..n {
            let p = self.weights[k];
            let diff: Vec<f64> = self.means.row(k).iter().zip(&bar).map(|(m, b)| m - b).collect();
            cov.add_outer(&diff, &diff, p);
            for j in 0..d {
                cov[(j, j)] += p * self.variances[(k, j)];
            }
        }
        cov
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-8, variance_floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood before each M-step and after the last one.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Farthest-point seeding: a seeded random first point, then repeatedly the
/// point farthest from every chosen one (lower index on ties).
fn farthest_point_init(x: &[Vec<f64>], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, "gmm-init", &[]);
    let mut chosen = vec![rng.random_range(0..x.len())];
    let mut nearest: Vec<f64> = x.iter().map(|r| linalg::sq_dist(r, &x[chosen[0]])).collect();
    while chosen.len() < n {
        let mut best = 0;
        for i in 1..x.len() {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (d, r) in nearest.iter_mut().zip(x) {
            *d = d.min(linalg::sq_dist(r, &x[best]));
        }
    }
    chosen
}

pub fn fit_gmm(x: &[Vec<f64>], n: usize, cfg: &GmmConfig) -> Result<GmmFit> {
    if n == 0 || x.len() < n {
        return Err(DiversityError::TooFewPoints { needed: n.max(1), got: x.len() });
    }
    let d = check_rows(x)?;
    let m = x.len() as f64;
    let floor = cfg.variance_floor;
    let mut global_var = vec![0.0; d];
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / m).collect();
    for r in x {
        for j in 0..d {
            global_var[j] += (r[j] - mean[j]).powi(2) / m;
        }
    }
    let init = farthest_point_init(x, n, cfg.seed);
    let mut model = GmmModel {
        weights: vec![1.0 / n as f64; n],
        means: Matrix::from_rows(&init.iter().map(|&i| x[i].clone()).collect::<Vec<_>>()),
        variances: Matrix::from_rows(&vec![global_var.iter().map(|v| v.max(floor)).collect::<Vec<f64>>(); n]),
    };
    let mut history = Vec::new();
    let mut converged = false;
    let mut resp = Matrix::zeros(x.len(), n);
    for _ in 0..cfg.max_iters {
        // E-step; the log-likelihood is that of the current parameters.
        let mut ll = 0.0;
        for (i, row) in x.iter().enumerate() {
            let logs: Vec<f64> = (0..n).map(|k| model.log_component(k, row)).collect();
            let lse = linalg::logsumexp(&logs);
            ll += lse;
            for k in 0..n {
                resp[(i, k)] = (logs[k] - lse).exp();
            }
        }
        ll /= m;
        if let Some(prev) = history.last() {
            if ll - prev < cfg.tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        // M-step with floored variances.
        for k in 0..n {
            let nk: f64 = (0..x.len()).map(|i| resp[(i, k)]).sum();
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            model.weights[k] = nk / m;
            for j in 0..d {
                let mu = (0..x.len()).map(|i| resp[(i, k)] * x[i][j]).sum::<f64>() / nk;
                model.means[(k, j)] = mu;
            }
            for j in 0..d {
                let mu = model.means[(k, j)];
                let var = (0..x.len()).map(|i| resp[(i, k)] * (x[i][j] - mu).powi(2)).sum::<f64>() / nk;
                model.variances[(k, j)] = var.max(floor);
            }
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    if !converged {
        history.push(model.mean_log_likelihood(x));
    }
    Ok(GmmFit { model, log_likelihood: history, converged })
}

/// Determinant of the mixture's total covariance.
pub fn generalized_variance(gmm: &GmmModel) -> f64 {
    let cov = gmm.total_covariance();
    let d = cov.rows;
    let det = DMatrix::from_row_slice(d, d, &cov.data).determinant();
    det.max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub stage: String,
    pub n_views: usize,
    pub d_pca: usize,
    pub n_components: usize,
    pub generalized_variance: f64,
}

/// One generalized variance per stage, with a PCA basis fit on the union
/// of all stages so the numbers are comparable.
pub fn diversity_report(
    stages: &[(String, Vec<Vec<f64>>)],
    d_pca: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<DiversityRow>> {
    for (name, rows) in stages {
        if rows.len() < n.max(2) {
            return Err(DiversityError::InsufficientStage { stage: name.clone(), got: rows.len(), needed: n.max(2) });
        }
    }
    let union: Vec<Vec<f64>> = stages.iter().flat_map(|(_, r)| r.iter().cloned()).collect();
    let pca = pca_fit(&union, d_pca)?;
    stages
        .iter()
        .map(|(name, rows)| {
            let cfg = GmmConfig { seed: rng::derive_seed(seed, "diversity", &[]), ..Default::default() };
            let fit = fit_gmm(&pca.transform(rows), n, &cfg)?;
            Ok(DiversityRow {
                stage: name.clone(),
                n_views: rows.len(),
                d_pca,
                n_components: n,
                generalized_variance: generalized_variance(&fit.model),
            })
        })
        .collect()
}

/// Feature rows of the V-side stages recorded in a dataset after a run
/// with `rounds` generation rounds: `V0`, then `V{i}'` for every round and
/// `V{i}` for every round before the last.
pub fn dataset_stages(dataset: &[Instance], schema: &DatasetSchema, rounds: u32) -> Vec<(String, Vec<Vec<f64>>)> {
    let mut stages = Vec::new();
    let kept_at = |i: u32| -> Vec<Vec<f64>> {
        dataset
            .iter()
            .flat_map(|inst| inst.synthetic_pool.iter())
            .filter(|v| v.is_v_side() && v.kept_through.is_some_and(|k| k >= i) && v.round <= i)
            .map(|v| v.view.data.features(&schema.v_spec))
            .collect()
    };
    let fresh = |i: u32| -> Vec<Vec<f64>> {
        dataset
            .iter()
            .flat_map(|inst| inst.synthetic_pool.iter())
            .filter(|v| v.is_v_side() && v.round == i)
            .map(|v| v.view.data.features(&schema.v_spec))
            .collect()
    };
    stages.push(("V0".to_string(), kept_at(0)));
    for i in 1..=rounds {
        stages.push((format!("V{i}'"), fresh(i)));
        if i < rounds {
            stages.push((format!("V{i}"), kept_at(i)));
        }
    }
    stages
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
    }

    #[test]
    fn rank_one_data_is_fully_explained() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.37 - 2.0;
                vec![t, 2.0 * t + 1.0, -t]
            })
            .collect();
        let (pca, _) = pca_reduce(&x, 1).unwrap();
        assert!(pca.explained_variance() >= 0.999);
    }

    #[test]
    fn full_basis_reconstructs() {
        let x = gaussian_rows(30, 4, 1);
        let (pca, z) = pca_reduce(&x, 4).unwrap();
        for (row, zr) in x.iter().zip(&z) {
            let back = pca.projection.matvec(zr);
            for j in 0..4 {
                assert!((back[j] + pca.mean[j] - row[j]).abs() < 1e-10);
            }
        }
        let gram = pca.projection.transpose().matmul(&pca.projection);
        for a in 0..4 {
            for b in 0..4 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((gram[(a, b)] - want).abs() < 1e-10);
            }
        }
        assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_dimension_is_checked() {
        let x = gaussian_rows(5, 3, 2);
        assert!(matches!(pca_reduce(&x, 0), Err(DiversityError::DimensionOutOfRange { .. })));
        assert!(matches!(pca_reduce(&x, 4), Err(DiversityError::DimensionOutOfRange { .. })));
        assert!(pca_reduce(&x[..1], 1).is_err());
    }

    #[test]
    fn single_component_is_closed_form() {
        let x = gaussian_rows(50, 3, 3);
        let fit = fit_gmm(&x, 1, &GmmConfig::default()).unwrap();
        for j in 0..3 {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / 50.0;
            let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((fit.model.means[(0, j)] - mean).abs() < 1e-10);
            assert!((fit.model.variances[(0, j)] - var).abs() < 1e-10);
        }
        assert!((fit.model.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let mut x = gaussian_rows(200, 2, 4);
        for (i, r) in x.iter_mut().enumerate() {
            let shift = if i % 2 == 0 { -5.0 } else { 5.0 };
            r.iter_mut().for_each(|v| *v = 0.5 * *v + shift);
        }
        let fit = fit_gmm(&x, 2, &GmmConfig::default()).unwrap();
        let mut found: Vec<(f64, f64)> = (0..2).map(|k| (fit.model.means[(k, 0)], fit.model.weights[k])).collect();
        found.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((found[0].0 + 5.0).abs() < 0.1 && (found[1].0 - 5.0).abs() < 0.1, "{found:?}");
        assert!(found.iter().all(|(_, w)| (w - 0.5).abs() < 0.05));
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_gmm(&gaussian_rows(2, 2, 0), 3, &GmmConfig::default()),
            Err(DiversityError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn collapsed_cluster_is_floored() {
        let mut x = vec![vec![1.0, 1.0]; 10];
        x.extend(gaussian_rows(10, 2, 5));
        let fit = fit_gmm(&x, 2, &GmmConfig::default()).unwrap();
        assert!(fit.model.variances.data.iter().all(|v| *v >= 1e-6));
        assert!(fit.log_likelihood.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn generalized_variance_closed_forms() {
        let unit = GmmModel {
            weights: vec![1.0],
            means: Matrix::zeros(1, 2),
            variances: Matrix::from_rows(&[vec![1.0, 1.0]]),
        };
        assert!((generalized_variance(&unit) - 1.0).abs() < 1e-12);
        let two = GmmModel {
            weights: vec![0.5, 0.5],
            means: Matrix::from_rows(&[vec![-1.0], vec![1.0]]),
            variances: Matrix::from_rows(&[vec![1.0], vec![1.0]]),
        };
        assert!((generalized_variance(&two) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_stages_match() {
        let a = gaussian_rows(40, 5, 6);
        let rows = diversity_report(&[("A".into(), a.clone()), ("B".into(), a)], 2, 3, 9).unwrap();
        assert!((rows[0].generalized_variance - rows[1].generalized_variance).abs() < 1e-8);
        let again =
            diversity_report(&[("A".into(), gaussian_rows(40, 5, 6)), ("B".into(), gaussian_rows(40, 5, 6))], 2, 3, 9)
                .unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn added_noise_raises_variance() {
        let a = gaussian_rows(400, 4, 7);
        let noise = gaussian_rows(400, 4, 8);
        let b: Vec<Vec<f64>> =
            a.iter().zip(&noise).map(|(x, e)| x.iter().zip(e).map(|(u, v)| u + 0.7 * v).collect()).collect();
        for d in [2, 4] {
            let rows = diversity_report(&[("A".into(), a.clone()), ("B".into(), b.clone())], d, 3, 1).unwrap();
            assert!(rows[1].generalized_variance > rows[0].generalized_variance);
        }
    }

    #[test]
    fn insufficient_stage_is_reported() {
        let err = diversity_report(&[("V0".into(), gaussian_rows(2, 3, 1))], 2, 3, 0).unwrap_err();
        assert!(matches!(err, DiversityError::InsufficientStage { .. }));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(50))]
        #[test]
        fn em_log_likelihood_never_drops(seed in proptest::prelude::any::<u64>(), n in 1usize..4) {
            let mut x = gaussian_rows(60, 2, seed);
            for (i, r) in x.iter_mut().enumerate() {
                r[0] += (i % 3) as f64 * 2.0;
            }
            let fit = fit_gmm(&x, n, &GmmConfig { seed, ..Default::default() }).unwrap();
            for w in fit.log_likelihood.windows(2) {
                proptest::prop_assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihood);
            }
            let w: f64 = fit.model.weights.iter().sum();
            proptest::prop_assert!((w - 1.0).abs() < 1e-10);
            // Component order does not matter.
            let mut flipped = fit.model.clone();
            flipped.weights.reverse();
            let rev = |m: &Matrix| Matrix::from_rows(&(0..m.rows).rev().map(|k| m.row(k).to_vec()).collect::<Vec<_>>());
            flipped.means = rev(&fit.model.means);
            flipped.variances = rev(&fit.model.variances);
            let (g1, g2) = (generalized_variance(&fit.model), generalized_variance(&flipped));
            proptest::prop_assert!((g1 - g2).abs() <= 1e-10 * g1.max(1.0));
        }
    }
}
