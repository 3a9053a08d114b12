//! Diagonal-covariance Gaussian mixtures.
//!
//! Everything that can underflow is computed in the log domain: component
//! densities, the mixture density, and the collision matrix used for the
//! closed-form order-2 Rényi entropy
//!
//! ```text
//! H2(q) = -log ∫ q(z)^2 dz = -log Σ_ij π_i π_j N(μ_i; μ_j, Σ_i + Σ_j)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Smallest standard deviation a component may carry.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-4;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// `log Σ exp(x_i)`; `-inf` entries are ignored and an all-`-inf` input yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// A K-component mixture of axis-aligned Gaussians in `d` dimensions.
///
/// Means and scales are stored flat, component-major (`[k * dim + j]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MixtureParts", try_from = "MixtureParts")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    dim: usize,
}

/// Nested-vector form used on the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureParts {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub scales: Vec<Vec<f64>>,
}

impl From<GaussianMixture> for MixtureParts {
    fn from(m: GaussianMixture) -> Self {
        MixtureParts {
            means: m.means.chunks(m.dim).map(<[f64]>::to_vec).collect(),
            scales: m.scales.chunks(m.dim).map(<[f64]>::to_vec).collect(),
            weights: m.weights,
        }
    }
}

impl TryFrom<MixtureParts> for GaussianMixture {
    type Error = Error;

    fn try_from(p: MixtureParts) -> Result<Self> {
        GaussianMixture::new(p.weights, p.means, p.scales)
    }
}

impl GaussianMixture {
    /// Builds a mixture with the default scale floor.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, scales: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_floor(weights, means, scales, DEFAULT_SCALE_FLOOR)
    }

    pub fn with_floor(weights: Vec<f64>, means: Vec<Vec<f64>>, scales: Vec<Vec<f64>>, floor: f64) -> Result<Self> {
        let k = weights.len();
        check_dim("means (components)", k, means.len())?;
        check_dim("scales (components)", k, scales.len())?;
        let dim = means.first().map_or(0, Vec::len);
        for (m, s) in means.iter().zip(&scales) {
            check_dim("means (dimension)", dim, m.len())?;
            check_dim("scales (dimension)", dim, s.len())?;
        }
        Self::from_flat(weights, means.concat(), scales.concat(), dim, floor)
    }

    /// Builds a mixture from flat component-major parameter blocks.
    ///
    /// Scales below `floor` are raised to it; every other violation is an error.
    pub fn from_flat(weights: Vec<f64>, means: Vec<f64>, mut scales: Vec<f64>, dim: usize, floor: f64) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be at least 1"));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::invalid(format!("scale floor must be positive, got {floor}")));
        }
        check_dim("means", k * dim, means.len())?;
        check_dim("scales", k * dim, scales.len())?;
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mixture means must be finite"));
        }
        for s in &mut scales {
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::invalid("mixture scales must be finite and non-negative"));
            }
            if *s < floor {
                *s = floor;
            }
        }
        Ok(GaussianMixture { weights, means, scales, dim })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component_mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component_scales(&self, k: usize) -> &[f64] {
        &self.scales[k * self.dim..(k + 1) * self.dim]
    }

    /// Log-density of each component at `z`, without the mixture weight.
    ///
    /// Caller guarantees `z.len() == self.dim()`.
    pub(crate) fn component_log_densities(&self, z: &[f64]) -> Vec<f64> {
        (0..self.components())
            .map(|k| {
                let mu = self.component_mean(k);
                let sd = self.component_scales(k);
                let mut acc = -0.5 * LN_2PI * self.dim as f64;
                for ((&zj, &mj), &sj) in z.iter().zip(mu).zip(sd) {
                    let u = (zj - mj) / sj;
                    acc -= sj.ln() + 0.5 * u * u;
                }
                acc
            })
            .collect()
    }

    /// `log q(z)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim("z", self.dim, z.len())?;
        let terms: Vec<f64> =
            self.component_log_densities(z).into_iter().zip(&self.weights).map(|(lp, &w)| w.ln() + lp).collect();
        Ok(log_sum_exp(&terms))
    }

    /// Pairwise component overlaps `N(μ_i; μ_j, Σ_i + Σ_j)`.
    pub fn collision_matrix(&self) -> CollisionMatrix {
        let k = self.components();
        let mut log_entries = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v = log_overlap(
                    self.component_mean(i),
                    self.component_scales(i),
                    self.component_mean(j),
                    self.component_scales(j),
                );
                log_entries[i * k + j] = v;
                log_entries[j * k + i] = v;
            }
        }
        CollisionMatrix { k, log_entries }
    }

    /// Closed-form order-2 Rényi entropy, `-log(πᵀ K π)`. Cost is O(K²·d).
    pub fn renyi2_entropy(&self) -> f64 {
        let k = self.components();
        let cm = self.collision_matrix();
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut terms = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                terms.push(log_w[i] + log_w[j] + cm.log_entry(i, j));
            }
        }
        -log_sum_exp(&terms)
    }

    /// Mixture mean `Σ_k π_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, &w) in self.weights.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.component_mean(k)) {
                *o += w * m;
            }
        }
        out
    }

    /// Draws `n` samples with a ChaCha8 stream seeded from `seed`.
    pub fn sample(&self, seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }

    /// Draws one sample: categorical component choice, then a diagonal Gaussian draw.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.pick_component(rng.random::<f64>());
        self.component_mean(k)
            .iter()
            .zip(self.component_scales(k))
            .map(|(&m, &s)| {
                let e: f64 = rng.sample(StandardNormal);
                m + s * e
            })
            .collect()
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

fn log_overlap(mu_a: &[f64], sd_a: &[f64], mu_b: &[f64], sd_b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (((&ma, &sa), &mb), &sb) in mu_a.iter().zip(sd_a).zip(mu_b).zip(sd_b) {
        let var = sa * sa + sb * sb;
        let diff = ma - mb;
        acc -= 0.5 * (LN_2PI + var.ln()) + 0.5 * diff * diff / var;
    }
    acc
}

/// Symmetric K×K matrix of Gaussian overlap integrals, held as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionMatrix {
    k: usize,
    log_entries: Vec<f64>,
}

impl CollisionMatrix {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.log_entries[i * self.k + j]
    }

    /// Entry `(i, j)`; may round to zero for very distant components even though
    /// the log entry stays finite.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.log_entry(i, j).exp()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.k).map(|i| (0..self.k).map(|j| self.entry(i, j)).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(mu: f64) -> GaussianMixture {
        GaussianMixture::new(vec![1.0], vec![vec![mu]], vec![vec![1.0]]).unwrap()
    }

    fn two_far() -> GaussianMixture {
        GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![10.0]], vec![vec![1.0], vec![1.0]]).unwrap()
    }

    // scalar normal pdf, independent of the log-domain code paths above
    fn pdf(x: f64, mean: f64, var: f64) -> f64 {
        (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn log_density_standard_normal() {
        let g = unit(0.0);
        assert!((g.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((g.log_density(&[10.0]).unwrap() + 50.918_938_533_204_67).abs() < 1e-12);
    }

    #[test]
    fn log_density_two_components_matches_direct_sum() {
        let direct = (0.5 * pdf(0.0, 0.0, 1.0) + 0.5 * pdf(0.0, 10.0, 1.0)).ln();
        assert!((direct - -1.612_085_713_764_618).abs() < 1e-12);
        assert!((two_far().log_density(&[0.0]).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn log_density_far_tail_stays_finite() {
        let v = two_far().log_density(&[1e4]).unwrap();
        assert!(v.is_finite() && v < -1e6);
    }

    #[test]
    fn log_density_rejects_wrong_dim() {
        assert!(matches!(unit(0.0).log_density(&[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn collision_values() {
        let self_overlap = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
        let c = unit(0.0).collision_matrix();
        assert_eq!(c.size(), 1);
        assert!((c.entry(0, 0) - 0.282_094_791_773_878_14).abs() < 1e-12);

        let dup = GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![0.0]], vec![vec![1.0], vec![1.0]])
            .unwrap()
            .collision_matrix();
        for row in dup.to_dense() {
            for v in row {
                assert!((v - self_overlap).abs() < 1e-12);
            }
        }

        let far = two_far().collision_matrix();
        let oracle = pdf(0.0, 10.0, 2.0);
        assert!((oracle - 3.917_716_632_754_334e-12).abs() < 1e-24);
        assert!((far.entry(0, 1) - oracle).abs() / oracle < 1e-12);
        assert_eq!(far.log_entry(0, 1), far.log_entry(1, 0));
    }

    #[test]
    fn collision_diagonal_closed_form() {
        let g = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 3.0]],
            vec![vec![0.3, 1.7, 2.2], vec![0.9, 0.1, 1.0]],
        )
        .unwrap();
        let c = g.collision_matrix();
        for i in 0..2 {
            let expected: f64 =
                g.component_scales(i).iter().map(|s| 1.0 / (2.0 * s * std::f64::consts::PI.sqrt())).product();
            assert!((c.entry(i, i) - expected).abs() / expected < 1e-12);
        }
    }

    #[test]
    fn renyi_values() {
        let half_ln_4pi = 0.5 * (4.0 * std::f64::consts::PI).ln();
        assert!((unit(0.0).renyi2_entropy() - 1.265_512_123_484_645_4).abs() < 1e-9);
        assert!((unit(0.0).renyi2_entropy() - half_ln_4pi).abs() < 1e-12);
        let split =
            GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![0.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        assert!((split.renyi2_entropy() - half_ln_4pi).abs() < 1e-12);
        // direct oracle: -ln(0.25 * (2 * self + 2 * cross))
        let oracle = -(0.25 * (2.0 * pdf(0.0, 0.0, 2.0) + 2.0 * pdf(0.0, 10.0, 2.0))).ln();
        assert!((oracle - 1.958_659_304_030_702_8).abs() < 1e-12);
        assert!((two_far().renyi2_entropy() - oracle).abs() < 1e-12);
    }

    #[test]
    fn renyi_does_not_underflow_for_tiny_scales() {
        let g = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![0.0; 64], vec![1e3; 64]],
            vec![vec![1e-4; 64], vec![1e-4; 64]],
        )
        .unwrap();
        let h = g.renyi2_entropy();
        let single = 32.0 * (4.0 * std::f64::consts::PI).ln() + 64.0 * (1e-4f64).ln();
        assert!((h - (single + 2f64.ln())).abs() < 1e-9, "{h}");
    }

    #[test]
    fn mean_examples() {
        let g = GaussianMixture::new(vec![0.3, 0.7], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        assert!((g.mean()[0] - 0.7).abs() < 1e-15);
        assert_eq!(unit(3.25).mean(), vec![3.25]);
    }

    #[test]
    fn construction_applies_floor_and_validates() {
        let g = GaussianMixture::new(vec![1.0], vec![vec![5.0]], vec![vec![0.0]]).unwrap();
        assert_eq!(g.component_scales(0), &[DEFAULT_SCALE_FLOOR]);
        assert!(GaussianMixture::new(vec![0.5], vec![vec![0.0]], vec![vec![1.0]]).is_err());
        assert!(GaussianMixture::new(vec![1.2, -0.2], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![f64::NAN]], vec![vec![1.0]]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![f64::INFINITY]]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![0.0, 1.0]], vec![vec![1.0], vec![1.0, 1.0]])
            .is_err());
    }

    #[test]
    fn degenerate_component_samples_at_mean() {
        let g = GaussianMixture::new(vec![1.0], vec![vec![5.0]], vec![vec![0.0]]).unwrap();
        for s in g.sample(3, 1000) {
            assert!((s[0] - 5.0).abs() <= 6.0 * DEFAULT_SCALE_FLOOR);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = two_far();
        assert_eq!(g.sample(42, 100), g.sample(42, 100));
        assert_ne!(g.sample(42, 100), g.sample(43, 100));
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let g =
            GaussianMixture::new(vec![0.2, 0.8], vec![vec![-100.0], vec![100.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        let n = 100_000;
        let first = g.sample(7, n).iter().filter(|s| s[0] < 0.0).count() as f64 / n as f64;
        // binomial sd is 0.00126, so 0.01 is ~8 sd
        assert!((first - 0.2).abs() < 0.01, "{first}");
    }

    #[test]
    fn serde_uses_nested_form() {
        let g = two_far();
        let json = serde_json::to_string(&g).unwrap();
        assert!(json.contains("\"means\":[[0.0],[10.0]]"));
        let back: GaussianMixture = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert!(
            serde_json::from_str::<GaussianMixture>(r#"{"weights":[0.5],"means":[[0.0]],"scales":[[1.0]]}"#).is_err()
        );
    }

    fn arb_mixture() -> impl Strategy<Value = GaussianMixture> {
        (1usize..6, 1usize..5).prop_flat_map(|(k, d)| {
            (
                prop::collection::vec(0.05f64..1.0, k),
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), k),
                prop::collection::vec(prop::collection::vec(0.2f64..3.0, d), k),
            )
                .prop_map(|(raw, means, scales)| {
                    let total: f64 = raw.iter().sum();
                    let w = raw.iter().map(|r| r / total).collect();
                    GaussianMixture::new(w, means, scales).unwrap()
                })
        })
    }

    fn parts(g: &GaussianMixture) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let p = MixtureParts::from(g.clone());
        (p.weights, p.means, p.scales)
    }

    proptest! {
        #[test]
        fn permutation_invariance(g in arb_mixture(), rot in 0usize..5, z in prop::collection::vec(-5.0f64..5.0, 4)) {
            let (mut w, mut m, mut s) = parts(&g);
            let r = rot % w.len();
            w.rotate_left(r);
            m.rotate_left(r);
            s.rotate_left(r);
            let p = GaussianMixture::new(w, m, s).unwrap();
            let z = &z[..g.dim()];
            prop_assert!((p.log_density(z).unwrap() - g.log_density(z).unwrap()).abs() < 1e-10);
            prop_assert!((p.renyi2_entropy() - g.renyi2_entropy()).abs() < 1e-10);
            for (a, b) in p.mean().iter().zip(g.mean()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn translation_invariance(g in arb_mixture(), c in prop::collection::vec(-20.0f64..20.0, 4)) {
            let (w, m, s) = parts(&g);
            let c = &c[..g.dim()];
            let shifted: Vec<Vec<f64>> = m.iter().map(|mu| mu.iter().zip(c).map(|(a, b)| a + b).collect()).collect();
            let t = GaussianMixture::new(w, shifted, s).unwrap();
            prop_assert!((t.renyi2_entropy() - g.renyi2_entropy()).abs() < 1e-9);
            for ((a, b), ci) in t.mean().iter().zip(g.mean()).zip(c) {
                prop_assert!((a - (b + ci)).abs() < 1e-9);
            }
        }

        #[test]
        fn scale_covariance(g in arb_mixture(), a in 0.1f64..10.0) {
            let (w, m, s) = parts(&g);
            let scale = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> { v.into_iter().map(|r| r.into_iter().map(|x| x * a).collect()).collect() };
            let t = GaussianMixture::new(w, scale(m), scale(s)).unwrap();
            let expected = g.renyi2_entropy() + g.dim() as f64 * a.ln();
            prop_assert!((t.renyi2_entropy() - expected).abs() < 1e-8);
        }

        #[test]
        fn duplicate_split_invariance(g in arb_mixture(), pick in 0usize..5, z in prop::collection::vec(-5.0f64..5.0, 4)) {
            let (mut w, mut m, mut s) = parts(&g);
            let k = pick % w.len();
            w[k] /= 2.0;
            w.push(w[k]);
            m.push(m[k].clone());
            s.push(s[k].clone());
            let t = GaussianMixture::new(w, m, s).unwrap();
            let z = &z[..g.dim()];
            prop_assert!((t.log_density(z).unwrap() - g.log_density(z).unwrap()).abs() < 1e-10);
            prop_assert!((t.renyi2_entropy() - g.renyi2_entropy()).abs() < 1e-10);
            for (a, b) in t.mean().iter().zip(g.mean()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn single_component_is_exact_quadratic(mu in -3.0f64..3.0, sd in 0.1f64..4.0, z in -10.0f64..10.0) {
            let g = GaussianMixture::new(vec![1.0], vec![vec![mu]], vec![vec![sd]]).unwrap();
            let expected = -0.5 * LN_2PI - sd.ln() - 0.5 * ((z - mu) / sd).powi(2);
            prop_assert!((g.log_density(&[z]).unwrap() - expected).abs() < 1e-12);
        }

        #[test]
        fn collision_matrix_symmetric_positive(g in arb_mixture()) {
            let c = g.collision_matrix();
            for i in 0..c.size() {
                for j in 0..c.size() {
                    let (a, b) = (c.log_entry(i, j), c.log_entry(j, i));
                    prop_assert!(a.is_finite());
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }
}
