use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ssd_core::mdn::Example;
use ssd_core::{MdnConfig, MdnModel};

struct Case {
    model: MdnModel,
    hs: Vec<Vec<f64>>,
    targets: Vec<Vec<Vec<f64>>>,
}

impl Case {
    fn batch(&self) -> Vec<Example<'_>> {
        self.hs.iter().zip(&self.targets).map(|(h, t)| Example { h, targets: t }).collect()
    }

    /// Mean NLL composed from forward + log_density, independent of the fused backprop path.
    fn composed_loss(&self, model: &MdnModel) -> f64 {
        let n = self.hs.len() as f64;
        self.hs.iter().zip(&self.targets).map(|(h, t)| model.nll_loss(h, t).unwrap()).sum::<f64>() / n
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_case(seed: u64, config: MdnConfig) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MdnModel::new(config.clone()).unwrap();
    // move away from the near-symmetric initialization so every head is exercised
    let params: Vec<f64> = model.params().iter().map(|p| p + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    model.set_params(params).unwrap();
    let batch = rng.random_range(1..5);
    let hs = (0..batch).map(|_| normal(&mut rng, config.input_dim, 1.0)).collect();
    let targets = (0..batch)
        .map(|_| {
            let s = rng.random_range(1..5);
            (0..s).map(|_| normal(&mut rng, config.target_dim, 1.5)).collect()
        })
        .collect();
    Case { model, hs, targets }
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> MdnConfig {
    MdnConfig {
        input_dim: rng.random_range(1..7),
        target_dim: rng.random_range(1..5),
        components: rng.random_range(1..5),
        hidden_width: rng.random_range(2..12),
        depth: rng.random_range(1..4),
        seed,
        ..MdnConfig::new(1, 1)
    }
}

fn max_relative_error(case: &Case) -> f64 {
    let (_, grad) = case.model.loss_and_gradient(&case.batch()).unwrap();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let base = case.model.params().to_vec();
    let mut probe = case.model.clone();
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        probe.set_params(p.clone()).unwrap();
        let up = case.composed_loss(&probe);
        p[i] = base[i] - step;
        probe.set_params(p).unwrap();
        let down = case.composed_loss(&probe);
        let fd = (up - down) / (2.0 * step);
        // rounding noise of the central difference is ~1e-9 here, so tiny
        // gradients are compared absolutely (1e-8 = 1e-4 x the 1e-4 floor)
        let denom = grad[i].abs().max(fd.abs()).max(1e-4);
        let err = (grad[i] - fd).abs() / denom;
        worst = worst.max(err);
    }
    worst
}

#[test]
fn reference_configuration_matches_finite_differences() {
    let config = MdnConfig {
        input_dim: 4,
        target_dim: 2,
        components: 3,
        hidden_width: 8,
        depth: 2,
        seed: 3,
        ..MdnConfig::new(4, 2)
    };
    let case = random_case(100, config);
    let err = max_relative_error(&case);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn random_configurations_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..24 {
        let config = random_config(&mut rng, i);
        let case = random_case(1000 + i, config.clone());
        let err = max_relative_error(&case);
        assert!(err < 1e-4, "config {config:?}: max relative error {err:e}");
    }
}

#[test]
fn directional_derivative_vanishes_at_line_minimum() {
    let config = MdnConfig {
        input_dim: 3,
        target_dim: 2,
        components: 2,
        hidden_width: 6,
        depth: 1,
        seed: 9,
        ..MdnConfig::new(3, 2)
    };
    let case = random_case(7, config);
    let base = case.model.params().to_vec();
    let (_, g) = case.model.loss_and_gradient(&case.batch()).unwrap();
    let mut probe = case.model.clone();
    let mut along = |t: f64| -> f64 {
        probe.set_params(base.iter().zip(&g).map(|(p, d)| p - t * d).collect()).unwrap();
        case.composed_loss(&probe)
    };
    // bracket the first minimum along the descent direction, then golden-section search
    let (mut lo, mut hi) = (0.0, 1e-3);
    while along(2.0 * hi) < along(hi) {
        hi *= 2.0;
    }
    hi *= 2.0;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if along(a) < along(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let t = 0.5 * (lo + hi);
    let mut at_min = case.model.clone();
    at_min.set_params(base.iter().zip(&g).map(|(p, d)| p - t * d).collect()).unwrap();
    let (_, g_min) = at_min.loss_and_gradient(&case.batch()).unwrap();
    let directional: f64 = g_min.iter().zip(&g).map(|(a, b)| a * b).sum();
    let scale: f64 = g.iter().map(|v| v * v).sum();
    assert!(directional.abs() <= 1e-6 * scale, "{directional:e} vs {scale:e}");
}
