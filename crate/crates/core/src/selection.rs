//! Per-instance filters that turn a scored pool of synthetic views into a
//! kept subset.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Modality, SyntheticView, View, ViewSpec};
use crate::linalg::{self, Matrix};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("view {index} has no teacher loss")]
    UnscoredView { index: usize },
    #[error("keep fraction {0} outside (0, 1]")]
    KeepFraction(f64),
    #[error("embedder cannot handle {0}")]
    Embedder(String),
}

/// Which views to keep. `KeepAll` does no filtering at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SelectionPolicy {
    TeacherLoss { keep_fraction: f64 },
    Similarity { keep_fraction: f64, embedder: EmbedderKind },
    Random { keep_fraction: f64, seed: u64 },
    KeepAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// A fixed random linear map per modality.
    Random,
    /// Ridge map from U features into V feature space, fit on generated pairs.
    #[default]
    Fitted,
}

impl SelectionPolicy {
    pub fn keep_fraction(&self) -> f64 {
        match self {
            Self::TeacherLoss { keep_fraction }
            | Self::Similarity { keep_fraction, .. }
            | Self::Random { keep_fraction, .. } => *keep_fraction,
            Self::KeepAll => 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        check_fraction(self.keep_fraction())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TeacherLoss { .. } => "teacher",
            Self::Similarity { .. } => "similarity",
            Self::Random { .. } => "random",
            Self::KeepAll => "none",
        }
    }
}

/// Indices into the filtered slice, each list ascending.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Selection {
    pub kept: Vec<usize>,
    pub discarded: Vec<usize>,
}

impl Selection {
    fn from_ranking(ranking: &[usize], keep: usize) -> Self {
        let mut kept = ranking[..keep].to_vec();
        let mut discarded = ranking[keep..].to_vec();
        kept.sort_unstable();
        discarded.sort_unstable();
        Self { kept, discarded }
    }
}

/// `⌈ρ·n⌉`, at least one when `n ≥ 1`.
pub fn keep_count(n: usize, rho: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // Shave representation error so 0.6·30 is 18, not 19.
    let k = (rho * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

fn check_fraction(rho: f64) -> Result<(), SelectionError> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(SelectionError::KeepFraction(rho))
    }
}

/// Keeps the `⌈ρ·n⌉` smallest scores, lower index first among equals.
pub fn filter_scores(scores: &[f64], rho: f64) -> Result<Selection, SelectionError> {
    check_fraction(rho)?;
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(Selection::from_ranking(&ranking, keep_count(scores.len(), rho)))
}

pub fn filter_by_loss(views: &[SyntheticView], rho: f64) -> Result<Selection, SelectionError> {
    let losses = views
        .iter()
        .enumerate()
        .map(|(i, v)| v.teacher_loss.ok_or(SelectionError::UnscoredView { index: i }))
        .collect::<Result<Vec<_>, _>>()?;
    filter_scores(&losses, rho)
}

/// Maps both modalities into one space for cosine comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub u_spec: ViewSpec,
    pub v_spec: ViewSpec,
    pub u_map: Matrix,
    pub v_map: Matrix,
}

impl Embedder {
    pub fn random(u_spec: ViewSpec, v_spec: ViewSpec, dim: usize, seed: u64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rng::stream(seed, "embedder", &[]);
        let mut gauss = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
            Matrix::from_vec(rows, cols, data)
        };
        let u_map = gauss(dim, u_spec.feature_dim());
        let v_map = gauss(dim, v_spec.feature_dim());
        Self { u_spec, v_spec, u_map, v_map }
    }

    /// Ridge regression `W = argmin Σ‖W·u − v‖² + λ‖W‖²` for the U tower;
    /// the V tower is the identity.
    pub fn fit(
        u_spec: ViewSpec,
        v_spec: ViewSpec,
        pairs: &[(Vec<f64>, Vec<f64>)],
        ridge: f64,
    ) -> Result<Self, SelectionError> {
        let (du, dv) = (u_spec.feature_dim(), v_spec.feature_dim());
        if pairs.iter().any(|(u, v)| u.len() != du || v.len() != dv) {
            return Err(SelectionError::Embedder("pair dimensions".into()));
        }
        let mut gram = nalgebra::DMatrix::<f64>::identity(du, du) * ridge;
        let mut cross = nalgebra::DMatrix::<f64>::zeros(dv, du);
        for (u, v) in pairs {
            let u = nalgebra::DVector::from_column_slice(u);
            let v = nalgebra::DVector::from_column_slice(v);
            gram += &u * u.transpose();
            cross += &v * u.transpose();
        }
        let inv = gram.try_inverse().ok_or_else(|| SelectionError::Embedder("singular gram matrix".into()))?;
        let w = cross * inv;
        let data = (0..dv).flat_map(|r| (0..du).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect();
        Ok(Self { u_spec, v_spec, u_map: Matrix::from_vec(dv, du, data), v_map: Matrix::identity(dv) })
    }

    pub fn embed(&self, view: &View) -> Vec<f64> {
        match view.modality {
            Modality::U => self.u_map.matvec(&view.data.features(&self.u_spec)),
            Modality::V => self.v_map.matvec(&view.data.features(&self.v_spec)),
        }
    }
}

/// Cosine similarity; −1 when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    linalg::dot(a, b) / (na * nb)
}

/// Keeps the `⌈ρ·n⌉` views most cosine-similar to the real view.
pub fn filter_by_similarity(
    views: &[View],
    real: &View,
    embedder: &Embedder,
    rho: f64,
) -> Result<Selection, SelectionError> {
    let anchor = embedder.embed(real);
    let neg: Vec<f64> = views.iter().map(|v| -cosine(&embedder.embed(v), &anchor)).collect();
    filter_scores(&neg, rho)
}

/// Uniform subset of size `⌈ρ·n⌉`, fixed by `seed`.
pub fn filter_random(n: usize, rho: f64, seed: u64) -> Result<Selection, SelectionError> {
    check_fraction(rho)?;
    let keep = keep_count(n, rho);
    let mut rng = rng::stream(seed, "random-filter", &[n as u64]);
    let mut kept = index::sample(&mut rng, n, keep).into_vec();
    kept.sort_unstable();
    let mut mask = vec![false; n];
    kept.iter().for_each(|&i| mask[i] = true);
    let discarded = (0..n).filter(|&i| !mask[i]).collect();
    Ok(Selection { kept, discarded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Step, ViewData};
    use proptest::prelude::*;

    fn scored(losses: &[f64]) -> Vec<SyntheticView> {
        losses
            .iter()
            .map(|&l| {
                let mut v = SyntheticView::new(ViewData::Vector(vec![0.0]), 0, Step::UToV, 0);
                v.teacher_loss = Some(l);
                v
            })
            .collect()
    }

    #[test]
    fn thirty_at_sixty_percent_keeps_eighteen() {
        let losses: Vec<f64> = (0..30).map(|i| (i as f64 * 0.71).sin()).collect();
        assert_eq!(filter_by_loss(&scored(&losses), 0.6).unwrap().kept.len(), 18);
    }

    #[test]
    fn smallest_losses_are_kept() {
        let sel = filter_by_loss(&scored(&[0.1, 0.9, 0.2, 0.8]), 0.5).unwrap();
        assert_eq!(sel.kept, vec![0, 2]);
        assert_eq!(sel.discarded, vec![1, 3]);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(filter_by_loss(&scored(&[0.5; 5]), 0.4).unwrap().kept, vec![0, 1]);
    }

    #[test]
    fn unscored_view_is_an_error() {
        let mut views = scored(&[0.1, 0.2]);
        views[1].teacher_loss = None;
        assert_eq!(filter_by_loss(&views, 0.5), Err(SelectionError::UnscoredView { index: 1 }));
    }

    #[test]
    fn bad_fraction_is_rejected() {
        assert!(filter_scores(&[1.0], 0.0).is_err());
        assert!(filter_scores(&[1.0], 1.5).is_err());
    }

    fn identity_embedder(d: usize) -> Embedder {
        let spec = ViewSpec::Vector { dim: d };
        Embedder { u_spec: spec, v_spec: spec, u_map: Matrix::identity(d), v_map: Matrix::identity(d) }
    }

    #[test]
    fn identical_view_is_always_kept() {
        let e = identity_embedder(3);
        let real = View::u(ViewData::Vector(vec![1.0, 2.0, 3.0]));
        let views = vec![
            View::v(ViewData::Vector(vec![3.0, 1.0, 0.0])),
            View::v(ViewData::Vector(vec![0.0, 1.0, 2.0])),
            View::v(ViewData::Vector(vec![2.0, 4.0, 6.0])),
        ];
        for rho in [0.1, 0.5, 1.0] {
            assert!(filter_by_similarity(&views, &real, &e, rho).unwrap().kept.contains(&2));
        }
    }

    #[test]
    fn orthogonal_tie_keeps_lower_index() {
        let e = identity_embedder(3);
        let real = View::u(ViewData::Vector(vec![1.0, 0.0, 0.0]));
        let views =
            vec![View::v(ViewData::Vector(vec![0.0, 1.0, 0.0])), View::v(ViewData::Vector(vec![0.0, 0.0, 1.0]))];
        assert_eq!(filter_by_similarity(&views, &real, &e, 0.5).unwrap().kept, vec![0]);
    }

    #[test]
    fn zero_norm_counts_as_minus_one() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
        let e = identity_embedder(2);
        let real = View::u(ViewData::Vector(vec![1.0, 0.0]));
        let views = vec![View::v(ViewData::Vector(vec![0.0, 0.0])), View::v(ViewData::Vector(vec![-1.0, 0.1]))];
        assert_eq!(filter_by_similarity(&views, &real, &e, 0.5).unwrap().kept, vec![1]);
    }

    #[test]
    fn similarity_matches_sort_oracle() {
        let e = Embedder::random(ViewSpec::Vector { dim: 5 }, ViewSpec::Vector { dim: 3 }, 4, 7);
        let mut rng = rng::seeded(11);
        let mut draw = |d: usize| {
            use rand::Rng;
            ViewData::Vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let real = View::u(draw(5));
        let views: Vec<View> = (0..10).map(|_| View::v(draw(3))).collect();
        let anchor = e.u_map.matvec(&real.data.features(&e.u_spec));
        let mut oracle: Vec<(f64, usize)> = views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = e.v_map.matvec(&v.data.features(&e.v_spec));
                let c = linalg::dot(&x, &anchor) / (linalg::norm(&x) * linalg::norm(&anchor));
                (c, i)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut expect: Vec<usize> = oracle[..4].iter().map(|p| p.1).collect();
        expect.sort_unstable();
        assert_eq!(filter_by_similarity(&views, &real, &e, 0.4).unwrap().kept, expect);
    }

    #[test]
    fn fitted_embedder_recovers_a_linear_map() {
        let w = [[1.0, 0.0, 2.0], [0.0, -1.0, 0.5]];
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..40)
            .map(|i| {
                let u = vec![(i as f64 * 0.3).sin(), (i as f64 * 0.7).cos(), (i as f64 * 1.3).sin()];
                let v = w.iter().map(|r| linalg::dot(r, &u)).collect();
                (u, v)
            })
            .collect();
        let e = Embedder::fit(ViewSpec::Vector { dim: 3 }, ViewSpec::Vector { dim: 2 }, &pairs, 1e-9).unwrap();
        for (r, row) in w.iter().enumerate() {
            for (c, x) in row.iter().enumerate() {
                assert!((e.u_map[(r, c)] - x).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn random_filter_full_fraction_and_determinism() {
        assert_eq!(filter_random(7, 1.0, 3).unwrap().kept, (0..7).collect::<Vec<_>>());
        assert_eq!(filter_random(20, 0.3, 9), filter_random(20, 0.3, 9));
    }

    #[test]
    fn random_filter_is_uniform() {
        let (n, rho, trials) = (10usize, 0.35, 10_000u64);
        let keep = keep_count(n, rho);
        let mut hits = vec![0u32; n];
        for seed in 0..trials {
            for i in filter_random(n, rho, seed).unwrap().kept {
                hits[i] += 1;
            }
        }
        let p = keep as f64 / n as f64;
        let mean = p * trials as f64;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((f64::from(h) - mean).abs() <= 3.0 * sd, "{h} vs {mean} ± {sd}");
        }
    }

    proptest! {
        #[test]
        fn every_policy_keeps_ceil(n in 1usize..60, rho in 0.01f64..=1.0, seed in any::<u64>()) {
            let want = keep_count(n, rho);
            prop_assert_eq!(want, ((rho * n as f64) - 1e-9).ceil().max(1.0) as usize);
            let losses: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) % 7) as f64).collect();
            let by_loss = filter_scores(&losses, rho).unwrap();
            prop_assert_eq!(by_loss.kept.len(), want);
            prop_assert_eq!(by_loss.kept.len() + by_loss.discarded.len(), n);
            let worst_kept = by_loss.kept.iter().map(|&i| losses[i]).fold(f64::MIN, f64::max);
            let best_dropped = by_loss.discarded.iter().map(|&i| losses[i]).fold(f64::MAX, f64::min);
            prop_assert!(worst_kept <= best_dropped);
            prop_assert_eq!(filter_random(n, rho, seed).unwrap().kept.len(), want);
        }
    }
}
