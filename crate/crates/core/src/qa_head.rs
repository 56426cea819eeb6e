//! Small fusion classifier standing in for an AVQA backbone, plus the
//! cross-entropy and total-loss composition.

use ndarray::{Array2, ArrayView2};

use crate::error::{check_len, Error, Result};
use crate::feature::{Dims, FeatureVec, Rng, VisualFeatureMap};
use crate::nn::{log_sum_exp, silu, silu_grad, softmax_rows, Linear};

/// Default fusion width.
pub const DEFAULT_HIDDEN: usize = 64;

/// Per-modality projections summed into a shared hidden space, one hidden
/// layer, then `K` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct QaHead {
    pub audio: Linear,
    pub visual: Linear,
    pub text: Linear,
    pub hidden: Linear,
    pub output: Linear,
}

/// Activations saved for [`QaHead::backward`].
#[derive(Debug, Clone)]
pub struct QaCache {
    audio: Array2<f64>,
    visual: Array2<f64>,
    text: Array2<f64>,
    fused: Array2<f64>,
    h1: Array2<f64>,
    z1: Array2<f64>,
    h2: Array2<f64>,
}

/// Gradients with respect to the three input feature matrices.
#[derive(Debug, Clone)]
pub struct QaInputGrads {
    pub audio: Array2<f64>,
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
}

impl QaHead {
    pub fn init(dims: &Dims, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            audio: Linear::init(dims.c, hidden, rng),
            visual: Linear::init(dims.visual_len(), hidden, rng),
            text: Linear::init(dims.c, hidden, rng),
            hidden: Linear::init(hidden, hidden, rng),
            output: Linear::init(hidden, dims.k, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.inputs(), l.outputs());
        Self {
            audio: z(&self.audio),
            visual: z(&self.visual),
            text: z(&self.text),
            hidden: z(&self.hidden),
            output: z(&self.output),
        }
    }

    pub fn classes(&self) -> usize {
        self.output.outputs()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.outputs()
    }

    fn fuse(&self, a: ArrayView2<f64>, v: ArrayView2<f64>, t: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.audio.forward(a);
        z += &self.visual.forward(v);
        z += &self.text.forward(t);
        z
    }

    /// Batched logits, one row per sample.
    pub fn forward(&self, a: ArrayView2<f64>, v: ArrayView2<f64>, t: ArrayView2<f64>) -> Array2<f64> {
        let h1 = self.fuse(a, v, t).mapv(silu);
        let h2 = self.hidden.forward(h1.view()).mapv(silu);
        self.output.forward(h2.view())
    }

    pub fn forward_cached(&self, a: Array2<f64>, v: Array2<f64>, t: Array2<f64>) -> (Array2<f64>, QaCache) {
        let fused = self.fuse(a.view(), v.view(), t.view());
        let h1 = fused.mapv(silu);
        let z1 = self.hidden.forward(h1.view());
        let h2 = z1.mapv(silu);
        let logits = self.output.forward(h2.view());
        let cache = QaCache {
            audio: a,
            visual: v,
            text: t,
            fused,
            h1,
            z1,
            h2,
        };
        (logits, cache)
    }

    pub fn backward(&self, cache: &QaCache, grad_logits: &Array2<f64>, grad: &mut QaHead) -> QaInputGrads {
        let mut g = self.output.backward(cache.h2.view(), grad_logits, &mut grad.output);
        g.zip_mut_with(&cache.z1, |gv, &z| *gv *= silu_grad(z));
        let mut g = self.hidden.backward(cache.h1.view(), &g, &mut grad.hidden);
        g.zip_mut_with(&cache.fused, |gv, &z| *gv *= silu_grad(z));
        QaInputGrads {
            audio: self.audio.backward(cache.audio.view(), &g, &mut grad.audio),
            visual: self.visual.backward(cache.visual.view(), &g, &mut grad.visual),
            text: self.text.backward(cache.text.view(), &g, &mut grad.text),
        }
    }
}

fn row_view(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).unwrap()
}

/// Logits for a single `(audio, visual, text)` triple.
pub fn predict(params: &QaHead, audio: &FeatureVec, visual: &VisualFeatureMap, text: &FeatureVec) -> Result<Vec<f64>> {
    check_len(params.audio.inputs(), audio.len(), "qa audio")?;
    check_len(params.visual.inputs(), visual.as_flat().len(), "qa visual")?;
    check_len(params.text.inputs(), text.len(), "qa text")?;
    let logits = params.forward(row_view(audio.as_slice()), row_view(visual.as_flat()), row_view(text.as_slice()));
    Ok(logits.into_raw_vec_and_offset().0)
}

/// `−log softmax(logits)[label]`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Batch-mean cross-entropy and its gradient with respect to the logits,
/// scaled by `weight`.
pub fn ce_batch(logits: &Array2<f64>, labels: &[usize], weight: f64) -> Result<(f64, Array2<f64>)> {
    check_len(logits.nrows(), labels.len(), "ce batch")?;
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        loss += ce_loss(row.as_slice().expect("contiguous logits"), y)?;
    }
    let mut g = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    g *= weight / n;
    Ok((loss / n, g))
}

/// One `(audio, visual, text)` feature triple for a whole batch.
#[derive(Debug, Clone, Copy)]
pub struct TripleView<'a> {
    pub audio: ArrayView2<'a, f64>,
    pub visual: ArrayView2<'a, f64>,
    pub text: ArrayView2<'a, f64>,
}

/// `CE(f^a, f^v, f^t) + CE(f̂^{a_p}, f̂^v, f^t) + CE(f̂^a, f̂^{v_p}, f^t)`,
/// each term averaged over the batch.
pub fn avqa_loss(params: &QaHead, labels: &[usize], triples: &[TripleView<'_>]) -> Result<f64> {
    if triples.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "avqa loss needs exactly three feature triples, got {}",
            triples.len()
        )));
    }
    let mut total = 0.0;
    for tr in triples {
        for m in [&tr.audio, &tr.visual, &tr.text] {
            check_len(labels.len(), m.nrows(), "avqa triple batch")?;
        }
        let logits = params.forward(tr.audio, tr.visual, tr.text);
        total += ce_batch(&logits, labels, 1.0)?.0;
    }
    Ok(total)
}

/// Loss terms of one training step and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_avqa: f64,
    pub l_rmmr: f64,
    pub l_ave: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `L_avqa + λ1·L_rmmr + λ2·L_ave`.
pub fn total_loss(l_avqa: f64, l_rmmr: f64, l_ave: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_avqa", l_avqa),
        ("l_rmmr", l_rmmr),
        ("l_ave", l_ave),
        ("lambda1", lambda1),
        ("lambda2", lambda2),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged { term: name, value: v });
        }
    }
    Ok(LossBreakdown {
        l_avqa,
        l_rmmr,
        l_ave,
        total: l_avqa + lambda1 * l_rmmr + lambda2 * l_ave,
        lambda1,
        lambda2,
    })
}
