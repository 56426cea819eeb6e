//! Dense building blocks with hand-written backward passes.
//!
//! All batched operations take row-major `n×d` matrices with one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::feature::Rng;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Given `y = softmax(x)` row-wise and `dL/dy`, returns `dL/dx`.
pub fn softmax_rows_backward(y: &Array2<f64>, grad_y: &Array2<f64>) -> Array2<f64> {
    let mut gx = Array2::zeros(y.raw_dim());
    for ((yr, gr), mut out) in y.rows().into_iter().zip(grad_y.rows()).zip(gx.rows_mut()) {
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Affine map `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Weights N(0, 1/fan_in), zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.normal() * std).collect();
        Self {
            weight: Array2::from_shape_vec((inputs, outputs), data).unwrap(),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, grad_y: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(grad_y);
        grad.bias += &grad_y.sum_axis(Axis(0));
        grad_y.dot(&self.weight.t())
    }

    /// Parameter gradients only; skips the input gradient.
    pub fn backward_params(&self, x: ArrayView2<f64>, grad_y: &Array2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(grad_y);
        grad.bias += &grad_y.sum_axis(Axis(0));
    }
}

/// Multi-layer perceptron with SiLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of every hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(silu);
            h = layer.forward(h.view());
        }
        h
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            inputs.push(h);
            if i == last {
                return (z, MlpCache { inputs, pre });
            }
            h = z.mapv(silu);
            pre.push(z);
        }
        unreachable!("mlp has at least one layer")
    }

    /// Backpropagates `grad_out`, accumulating into `grad`; returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let gx = self.layers[i].backward(cache.inputs[i].view(), &g, &mut grad.layers[i]);
            if i == 0 {
                return gx;
            }
            let z = &cache.pre[i - 1];
            g = gx;
            g.zip_mut_with(z, |gv, &zv| *gv *= silu_grad(zv));
        }
        unreachable!("mlp has at least one layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::make_rng;
    use ndarray::array;

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_backward_matches_differences() {
        let x = array![[0.3, -1.2, 0.7, 0.1]];
        let g = array![[0.5, -0.25, 1.0, 2.0]];
        let y = softmax_rows(&x);
        let gx = softmax_rows_backward(&y, &g);
        let f = |x: &Array2<f64>| (softmax_rows(x) * &g).sum();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let mut xm = x.clone();
            xm[[0, j]] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - gx[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn silu_grad_matches_differences() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn mlp_backward_matches_differences() {
        let mut rng = make_rng(9);
        let mlp = Mlp::init(&[3, 5, 4, 2], &mut rng);
        let x = Array2::from_shape_vec((2, 3), rng.normal_vec(6)).unwrap();
        let g = Array2::from_shape_vec((2, 2), rng.normal_vec(4)).unwrap();
        let (y, cache) = mlp.forward_cached(x.clone());
        assert_eq!(y, mlp.forward(x.view()));
        let mut grad = mlp.zeros_like();
        let gx = mlp.backward(&cache, &g, &mut grad);
        let f = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()) * &g).sum();
        let h = 1e-6;
        for idx in [(0, 0), (1, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (f(&mlp, &xp) - f(&mlp, &xm)) / (2.0 * h);
            assert!((num - gx[idx]).abs() < 1e-7);
        }
        for l in 0..3 {
            let mut mp = mlp.clone();
            mp.layers[l].weight[[0, 1]] += h;
            let mut mm = mlp.clone();
            mm.layers[l].weight[[0, 1]] -= h;
            let num = (f(&mp, &x) - f(&mm, &x)) / (2.0 * h);
            assert!((num - grad.layers[l].weight[[0, 1]]).abs() < 1e-7);
        }
    }
}
