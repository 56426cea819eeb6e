//! Feature-space denoising diffusion over concatenated audio-visual vectors.
//!
//! Step indices are 1-based (`t ∈ 1..=T`) throughout; schedule vectors are
//! stored 0-based so `beta(t)` reads `beta[t - 1]`.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{check_len, Error, Result};
use crate::feature::{unflatten_visual, Dims, FeatureVec, Rng, VisualFeatureMap};
use crate::nn::{Mlp, MlpCache};

/// Width of the sinusoidal time embedding fed to the denoiser.
pub const TIME_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear `β` schedule from `beta_start` to `beta_end` over `T` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Arbitrary schedule. Accepts the closed interval `[0, 1]` so the
    /// zero-noise and pure-noise limits can be evaluated exactly.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidArgument("beta must lie in [0, 1]".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `β_t / √(1 − ᾱ_t)`, taken as 0 in the `β_t → 0` limit.
    fn eps_coef(&self, t: usize) -> f64 {
        let b = self.beta(t);
        if b == 0.0 {
            0.0
        } else {
            b / (1.0 - self.alpha_bar(t)).sqrt()
        }
    }
}

/// Audio segment `[0, c)` followed by the flattened visual map `[c, c + whc)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedFeature(Vec<f64>);

impl CombinedFeature {
    pub fn new(values: Vec<f64>, dims: &Dims) -> Result<Self> {
        check_len(dims.combined_len(), values.len(), "combined feature")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("combined feature"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn row(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((1, self.0.len()), &self.0).unwrap()
    }
}

pub fn concat_av(audio: &FeatureVec, visual: &VisualFeatureMap, dims: &Dims) -> Result<CombinedFeature> {
    check_len(dims.c, audio.len(), "concat audio")?;
    check_len(dims.visual_len(), visual.as_flat().len(), "concat visual")?;
    let mut v = Vec::with_capacity(dims.combined_len());
    v.extend_from_slice(audio.as_slice());
    v.extend_from_slice(visual.as_flat());
    CombinedFeature::new(v, dims)
}

pub fn split_av(f: &CombinedFeature, dims: &Dims) -> Result<(FeatureVec, VisualFeatureMap)> {
    check_len(dims.combined_len(), f.len(), "split combined feature")?;
    let (a, v) = f.0.split_at(dims.c);
    Ok((
        FeatureVec::new(a.to_vec())?,
        unflatten_visual(v.to_vec(), dims.w, dims.h, dims.c)?,
    ))
}

/// One forward noising step: `√(1−β_t)·f_{t−1} + √β_t·ε`.
pub fn forward_step(f_prev: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_len(f_prev.len(), eps.len(), "forward_step noise")?;
    let b = sched.beta(t);
    let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(f_prev.iter().zip(eps).map(|(f, e)| keep * f + add * e).collect())
}

/// Closed-form marginal `√ᾱ_t·f0 + √(1−ᾱ_t)·ε`.
pub fn marginal_sample(f0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_len(f0.len(), eps.len(), "marginal_sample noise")?;
    let ab = sched.alpha_bar(t);
    let (keep, add) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(f0.iter().zip(eps).map(|(f, e)| keep * f + add * e).collect())
}

/// Sinusoidal embedding of a step index; first half sines, second half cosines.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Anything that predicts the injected noise from a batch of noisy states.
pub trait NoisePredictor {
    /// `x` is `n×d`; `steps[i]` is the step index of row `i`.
    fn predict_batch(&self, x: ArrayView2<f64>, steps: &[usize]) -> Array2<f64>;
}

/// MLP denoiser: `[state ‖ time embedding] → hidden → hidden → state`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    pub mlp: Mlp,
    dim: usize,
}

impl EpsNet {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::init(&[dim + TIME_EMBED_DIM, hidden, hidden, dim], rng),
            dim,
        }
    }

    pub fn from_mlp(mlp: Mlp, dim: usize) -> Result<Self> {
        let first = mlp.layers.first().ok_or_else(|| Error::InvalidArgument("empty mlp".into()))?;
        check_len(dim + TIME_EMBED_DIM, first.inputs(), "eps-net input width")?;
        check_len(dim, mlp.layers.last().unwrap().outputs(), "eps-net output width")?;
        Ok(Self { mlp, dim })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mlp: self.mlp.zeros_like(),
            dim: self.dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.mlp.layers[0].outputs()
    }

    /// Zeroes the output layer so the prediction is identically zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.mlp.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    fn input(&self, x: ArrayView2<f64>, steps: &[usize]) -> Array2<f64> {
        let n = x.nrows();
        let mut inp = Array2::zeros((n, self.dim + TIME_EMBED_DIM));
        inp.slice_mut(s![.., ..self.dim]).assign(&x);
        let mut last = (usize::MAX, Vec::new());
        for (i, &t) in steps.iter().enumerate() {
            if last.0 != t {
                last = (t, time_embedding(t, TIME_EMBED_DIM));
            }
            for (j, e) in last.1.iter().enumerate() {
                inp[[i, self.dim + j]] = *e;
            }
        }
        inp
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>, steps: &[usize]) -> (Array2<f64>, MlpCache) {
        self.mlp.forward_cached(self.input(x, steps))
    }

    /// Backprop through one cached call; returns `dL/dx` for the state columns.
    pub(crate) fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>, grad: &mut EpsNet) -> Array2<f64> {
        let g = self.mlp.backward(cache, grad_out, &mut grad.mlp);
        g.slice(s![.., ..self.dim]).to_owned()
    }
}

impl NoisePredictor for EpsNet {
    fn predict_batch(&self, x: ArrayView2<f64>, steps: &[usize]) -> Array2<f64> {
        self.mlp.forward(self.input(x, steps).view())
    }
}

/// `ε̂_θ(f_t, t)` for a single state.
pub fn predict_noise(net: &impl NoisePredictor, f_t: &[f64], t: usize) -> Vec<f64> {
    let x = ArrayView2::from_shape((1, f_t.len()), f_t).unwrap();
    net.predict_batch(x, &[t]).into_raw_vec_and_offset().0
}

/// One ancestral step with fixed variance `β_t·I`:
/// `(f_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·z`, with `z = 0` at `t = 1` or when
/// `rng` is `None`.
pub fn reverse_step(
    f_t: &[f64],
    t: usize,
    net: &impl NoisePredictor,
    sched: &NoiseSchedule,
    rng: Option<&mut Rng>,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    let x = ArrayView2::from_shape((1, f_t.len()), f_t).unwrap();
    let out = reverse_rows(x, t, net, sched, rng);
    Ok(out.into_raw_vec_and_offset().0)
}

fn reverse_rows(
    x: ArrayView2<f64>,
    t: usize,
    net: &impl NoisePredictor,
    sched: &NoiseSchedule,
    rng: Option<&mut Rng>,
) -> Array2<f64> {
    let eps_hat = net.predict_batch(x, &vec![t; x.nrows()]);
    let coef = sched.eps_coef(t);
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let mut out = (&x - &(eps_hat * coef)) * inv_sqrt_alpha;
    if let Some(rng) = rng {
        if t > 1 {
            let sigma = sched.beta(t).sqrt();
            out.mapv_inplace(|v| v + sigma * rng.normal());
        }
    }
    out
}

/// Runs the reverse chain from `entry_t` down to 1, treating `f_in` as the
/// state at `entry_t`. With `rng = None` the chain is deterministic.
pub fn enhance_from(
    f_in: ArrayView2<f64>,
    entry_t: usize,
    net: &impl NoisePredictor,
    sched: &NoiseSchedule,
    mut rng: Option<&mut Rng>,
) -> Result<Array2<f64>> {
    sched.check_t(entry_t)?;
    let mut x = f_in.to_owned();
    for t in (1..=entry_t).rev() {
        x = reverse_rows(x.view(), t, net, sched, rng.as_deref_mut());
    }
    Ok(x)
}

/// Full-chain enhancement of a single combined feature (entry at `t = T`).
pub fn enhance(
    f_in: &CombinedFeature,
    net: &impl NoisePredictor,
    sched: &NoiseSchedule,
    rng: Option<&mut Rng>,
) -> Result<Vec<f64>> {
    let out = enhance_from(f_in.row(), sched.steps(), net, sched, rng)?;
    Ok(out.into_raw_vec_and_offset().0)
}

/// Saved per-step activations of a deterministic batched reverse chain.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    /// `(t, cache)` in execution order, `t = entry_t` first.
    steps: Vec<(usize, MlpCache)>,
}

/// Deterministic reverse chain on a batch, keeping what backward needs.
pub fn enhance_traced(net: &EpsNet, sched: &NoiseSchedule, entry_t: usize, f_in: Array2<f64>) -> Result<(Array2<f64>, ChainTrace)> {
    sched.check_t(entry_t)?;
    check_len(net.dim(), f_in.ncols(), "enhance width")?;
    let n = f_in.nrows();
    let mut x = f_in;
    let mut steps = Vec::with_capacity(entry_t);
    for t in (1..=entry_t).rev() {
        let (eps_hat, cache) = net.forward_cached(x.view(), &vec![t; n]);
        let coef = sched.eps_coef(t);
        let inv = 1.0 / sched.alpha(t).sqrt();
        x.zip_mut_with(&eps_hat, |xv, &e| *xv = (*xv - coef * e) * inv);
        steps.push((t, cache));
    }
    Ok((x, ChainTrace { steps }))
}

/// Backprop through [`enhance_traced`]; accumulates into `grad` and
/// returns `dL/d(f_in)`.
pub fn enhance_backward(net: &EpsNet, sched: &NoiseSchedule, trace: &ChainTrace, grad_out: &Array2<f64>, grad: &mut EpsNet) -> Array2<f64> {
    let mut g = grad_out.clone();
    for (t, cache) in trace.steps.iter().rev() {
        let inv = 1.0 / sched.alpha(*t).sqrt();
        let coef = sched.eps_coef(*t);
        // x_{t-1} = inv·x_t − inv·coef·ε̂(x_t)
        let g_eps = &g * (-inv * coef);
        let g_from_net = net.backward(cache, &g_eps, grad);
        g *= inv;
        g += &g_from_net;
    }
    g
}

/// Noise draws for one batched evaluation of the noise-prediction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AveDraw {
    pub steps: Vec<usize>,
    pub eps: Array2<f64>,
}

impl AveDraw {
    /// Draws `t ~ U{1..T}` then `ε ~ N(0, I)` per row, row by row.
    pub fn sample(rows: usize, dim: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Self {
        let mut steps = Vec::with_capacity(rows);
        let mut eps = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            steps.push(1 + rng.below(sched.steps()));
            eps.extend(rng.normal_vec(dim));
        }
        Self {
            steps,
            eps: Array2::from_shape_vec((rows, dim), eps).unwrap(),
        }
    }
}

fn noisy_states(f0: &ArrayView2<f64>, draw: &AveDraw, sched: &NoiseSchedule) -> Array2<f64> {
    let mut x = f0.to_owned();
    for ((mut row, e), &t) in x.rows_mut().into_iter().zip(draw.eps.rows()).zip(&draw.steps) {
        let ab = sched.alpha_bar(t);
        let (keep, add) = (ab.sqrt(), (1.0 - ab).sqrt());
        row.zip_mut_with(&e, |v, &ev| *v = keep * *v + add * ev);
    }
    x
}

/// Batch-mean of `‖ε̂(f_t, t) − ε‖²` for pre-drawn `(t, ε)`.
pub fn ave_loss_with(net: &impl NoisePredictor, f0: ArrayView2<f64>, draw: &AveDraw, sched: &NoiseSchedule) -> f64 {
    let x = noisy_states(&f0, draw, sched);
    let pred = net.predict_batch(x.view(), &draw.steps);
    let sq: f64 = pred.iter().zip(draw.eps.iter()).map(|(p, e)| (p - e) * (p - e)).sum();
    sq / f0.nrows() as f64
}

/// [`ave_loss_with`] plus parameter gradients accumulated into `grad`.
pub fn ave_loss_grad(net: &EpsNet, f0: ArrayView2<f64>, draw: &AveDraw, sched: &NoiseSchedule, weight: f64, grad: &mut EpsNet) -> f64 {
    let n = f0.nrows() as f64;
    let x = noisy_states(&f0, draw, sched);
    let (pred, cache) = net.forward_cached(x.view(), &draw.steps);
    let diff = &pred - &draw.eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let g = diff * (2.0 * weight / n);
    net.mlp.backward(&cache, &g, &mut grad.mlp);
    loss
}

/// Single-sample noise-prediction loss with fresh `(t, ε)` drawn from `rng`.
pub fn ave_loss(net: &impl NoisePredictor, f0: &CombinedFeature, sched: &NoiseSchedule, rng: &mut Rng) -> f64 {
    let draw = AveDraw::sample(1, f0.len(), sched, rng);
    ave_loss_with(net, f0.row(), &draw, sched)
}
