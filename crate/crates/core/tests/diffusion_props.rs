//! Diffusion algebra against closed forms.

use mavqa_core::diffusion::{enhance_from, forward_step, make_schedule, marginal_sample, reverse_step, NoisePredictor, NoiseSchedule};
use mavqa_core::feature::make_rng;
use ndarray::{Array2, ArrayView2};

struct ZeroNoise;

impl NoisePredictor for ZeroNoise {
    fn predict_batch(&self, x: ArrayView2<f64>, _: &[usize]) -> Array2<f64> {
        Array2::zeros(x.raw_dim())
    }
}

/// Predicts a fixed noise vector regardless of input.
struct Fixed(Vec<f64>);

impl NoisePredictor for Fixed {
    fn predict_batch(&self, x: ArrayView2<f64>, _: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn(x.raw_dim(), |(_, j)| self.0[j])
    }
}

fn default_schedule() -> NoiseSchedule {
    make_schedule(10, 1e-4, 0.2).unwrap()
}

#[test]
fn x0_recovered_from_true_noise_at_every_step() {
    let s = default_schedule();
    let mut rng = make_rng(5);
    for t in 1..=10 {
        let f0 = rng.normal_vec(6);
        let eps = rng.normal_vec(6);
        let ft = marginal_sample(&f0, t, &eps, &s).unwrap();
        let ab = s.alpha_bar(t);
        for k in 0..6 {
            let back = (ft[k] - (1.0 - ab).sqrt() * eps[k]) / ab.sqrt();
            assert!((back - f0[k]).abs() < 1e-12, "t={t}");
        }
    }
}

#[test]
fn reverse_mean_with_true_noise_matches_posterior_mean() {
    // With ε̂ = ε, the ε-parameterized mean equals the closed-form posterior
    // mean of q(f_{t-1} | f_t, f_0).
    let s = default_schedule();
    let mut rng = make_rng(8);
    for t in 2..=10 {
        let f0 = rng.normal_vec(4);
        let eps = rng.normal_vec(4);
        let ft = marginal_sample(&f0, t, &eps, &s).unwrap();
        let mu = reverse_step(&ft, t, &Fixed(eps.clone()), &s, None).unwrap();
        let (ab, ab_prev, b, a) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t), s.alpha(t));
        for k in 0..4 {
            let post = ab_prev.sqrt() * b / (1.0 - ab) * f0[k] + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * ft[k];
            assert!((mu[k] - post).abs() < 1e-12, "t={t} {} {}", mu[k], post);
        }
    }
}

#[test]
fn zero_noise_enhance_is_a_rescale() {
    let s = default_schedule();
    let f = Array2::from_shape_vec((2, 3), vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
    let out = enhance_from(f.view(), 10, &ZeroNoise, &s, None).unwrap();
    let k = 1.0 / s.alpha_bar(10).sqrt();
    for (o, i) in out.iter().zip(f.iter()) {
        assert!((o - i * k).abs() < 1e-12);
    }
}

#[test]
fn forward_chain_matches_marginal_moments() {
    let s = default_schedule();
    let n = 100_000;
    let f0 = [1.5];
    for t in [1usize, 3, 10] {
        let mut rng = make_rng(100 + t as u64);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = f0.to_vec();
            for step in 1..=t {
                x = forward_step(&x, step, &[rng.normal()], &s).unwrap();
            }
            sum += x[0];
            sq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let ab = s.alpha_bar(t);
        let (m0, v0) = (ab.sqrt() * f0[0], 1.0 - ab);
        let se_mean = (v0 / n as f64).sqrt();
        let se_var = v0 * (2.0 / n as f64).sqrt();
        assert!((mean - m0).abs() < 3.0 * se_mean, "t={t} mean {mean} vs {m0}");
        assert!((var - v0).abs() < 3.0 * se_var, "t={t} var {var} vs {v0}");
    }
}

#[test]
fn stochastic_reverse_step_adds_beta_variance() {
    let s = default_schedule();
    let mut rng = make_rng(3);
    let n = 100_000;
    let t = 6;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let x = reverse_step(&[0.7], t, &ZeroNoise, &s, Some(&mut rng)).unwrap()[0];
        sum += x;
        sq += x * x;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let m0 = 0.7 / s.alpha(t).sqrt();
    let v0 = s.beta(t);
    assert!((mean - m0).abs() < 3.0 * (v0 / n as f64).sqrt());
    assert!((var - v0).abs() < 3.0 * v0 * (2.0 / n as f64).sqrt());
}
