//! Relation-aware missing-modality recall.
//!
//! Three slot banks (`G_v`, `G_a`, `G_t`) with `L` rows each. A surviving
//! modality and the text are each addressed against their own bank, the two
//! addressing vectors are fused with `softmax(a ∘ b)`, and the fused weights
//! aggregate the rows of the missing modality's bank.
//!
//! Scores are scaled by `1/√c` on every path, including the visual one where the
//! dot product runs over `w·h·c` entries.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_len, Error, Result};
use crate::feature::{Dims, FeatureVec, Rng, VisualFeatureMap};
use crate::nn::{softmax, softmax_rows, softmax_rows_backward};

/// Learnable slot generators shared by both missing directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotBank {
    /// `L × w·h·c`
    pub gv: Array2<f64>,
    /// `L × c`
    pub ga: Array2<f64>,
    /// `L × c`
    pub gt: Array2<f64>,
    dims: Dims,
}

impl SlotBank {
    /// Entries drawn i.i.d. N(0, 1/c).
    pub fn init(slots: usize, dims: Dims, rng: &mut Rng) -> Result<Self> {
        if slots == 0 {
            return Err(Error::InvalidArgument("slot count must be positive".into()));
        }
        let std = 1.0 / (dims.c as f64).sqrt();
        let mut draw = |cols: usize| {
            let data = (0..slots * cols).map(|_| rng.normal() * std).collect();
            Array2::from_shape_vec((slots, cols), data).unwrap()
        };
        let gv = draw(dims.visual_len());
        let ga = draw(dims.c);
        let gt = draw(dims.c);
        Ok(Self { gv, ga, gt, dims })
    }

    pub fn from_parts(gv: Array2<f64>, ga: Array2<f64>, gt: Array2<f64>, dims: Dims) -> Result<Self> {
        let slots = gv.nrows();
        if slots == 0 {
            return Err(Error::InvalidArgument("slot count must be positive".into()));
        }
        check_len(slots, ga.nrows(), "G_a slot count")?;
        check_len(slots, gt.nrows(), "G_t slot count")?;
        check_len(dims.visual_len(), gv.ncols(), "G_v width")?;
        check_len(dims.c, ga.ncols(), "G_a width")?;
        check_len(dims.c, gt.ncols(), "G_t width")?;
        if [&gv, &ga, &gt].iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("slot bank"));
        }
        Ok(Self { gv, ga, gt, dims })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gv: Array2::zeros(self.gv.raw_dim()),
            ga: Array2::zeros(self.ga.raw_dim()),
            gt: Array2::zeros(self.gt.raw_dim()),
            dims: self.dims,
        }
    }

    pub fn slots(&self) -> usize {
        self.ga.nrows()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    fn bank(&self, m: Modality) -> &Array2<f64> {
        match m {
            Modality::Audio => &self.ga,
            Modality::Visual => &self.gv,
        }
    }

    fn bank_mut(&mut self, m: Modality) -> &mut Array2<f64> {
        match m {
            Modality::Audio => &mut self.ga,
            Modality::Visual => &mut self.gv,
        }
    }

    pub fn generate_pseudo_audio(&self, visual: &VisualFeatureMap, text: &FeatureVec) -> Result<FeatureVec> {
        generate_pseudo_audio(visual, text, self)
    }

    pub fn generate_pseudo_visual(&self, audio: &FeatureVec, text: &FeatureVec) -> Result<VisualFeatureMap> {
        generate_pseudo_visual(audio, text, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Modality {
    Audio,
    Visual,
}

/// Which modality is being recalled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recall {
    /// Audio missing: address with visual + text, aggregate `G_a`.
    Audio,
    /// Visual missing: address with audio + text, aggregate `G_v`.
    Visual,
}

impl Recall {
    fn source(self) -> Modality {
        match self {
            Recall::Audio => Modality::Visual,
            Recall::Visual => Modality::Audio,
        }
    }

    fn target(self) -> Modality {
        match self {
            Recall::Audio => Modality::Audio,
            Recall::Visual => Modality::Visual,
        }
    }
}

/// Non-negative weights over `L` slots summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AddressingVec(Vec<f64>);

impl AddressingVec {
    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty addressing vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("addressing weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("addressing weights sum to {sum}")));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `softmax_j(feature · bank_j / √c)`.
pub fn address(feature: &[f64], bank: ArrayView2<f64>, scale_dim: usize) -> Result<AddressingVec> {
    check_len(bank.ncols(), feature.len(), "addressing feature")?;
    if scale_dim == 0 {
        return Err(Error::InvalidArgument("scale dimension must be positive".into()));
    }
    let scale = 1.0 / (scale_dim as f64).sqrt();
    let scores: Vec<f64> = bank
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(feature).map(|(g, f)| g * f).sum::<f64>() * scale)
        .collect();
    Ok(AddressingVec(softmax(&scores)))
}

/// `softmax(a1 ∘ a2)`.
pub fn combine_addressing(a1: &AddressingVec, a2: &AddressingVec) -> Result<AddressingVec> {
    check_len(a1.len(), a2.len(), "combine_addressing")?;
    let prod: Vec<f64> = a1.0.iter().zip(&a2.0).map(|(x, y)| x * y).collect();
    Ok(AddressingVec(softmax(&prod)))
}

fn aggregate(weights: &AddressingVec, bank: &Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; bank.ncols()];
    for (w, row) in weights.0.iter().zip(bank.rows()) {
        for (o, g) in out.iter_mut().zip(row.iter()) {
            *o += w * g;
        }
    }
    out
}

/// Pseudo audio `Σ_j a^{vt}_j · G_a[j]` from the visual map and the text.
pub fn generate_pseudo_audio(visual: &VisualFeatureMap, text: &FeatureVec, bank: &SlotBank) -> Result<FeatureVec> {
    let c = bank.dims.c;
    let av = address(visual.as_flat(), bank.gv.view(), c)?;
    let at = address(text.as_slice(), bank.gt.view(), c)?;
    let avt = combine_addressing(&av, &at)?;
    FeatureVec::new(aggregate(&avt, &bank.ga))
}

/// Pseudo visual `Σ_j a^{at}_j · G_v[j]`, reshaped to `w×h×c`.
pub fn generate_pseudo_visual(audio: &FeatureVec, text: &FeatureVec, bank: &SlotBank) -> Result<VisualFeatureMap> {
    let d = bank.dims;
    let aa = address(audio.as_slice(), bank.ga.view(), d.c)?;
    let at = address(text.as_slice(), bank.gt.view(), d.c)?;
    let aat = combine_addressing(&aa, &at)?;
    crate::feature::unflatten_visual(aggregate(&aat, &bank.gv), d.w, d.h, d.c)
}

/// Batched recall intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RecallCache {
    pub direction: Recall,
    source: Array2<f64>,
    text: Array2<f64>,
    addr_source: Array2<f64>,
    addr_text: Array2<f64>,
    combined: Array2<f64>,
    /// `n × d_target` pseudo features.
    pub output: Array2<f64>,
}

impl RecallCache {
    pub fn combined(&self) -> &Array2<f64> {
        &self.combined
    }
}

fn address_rows(features: &Array2<f64>, bank: &Array2<f64>, scale: f64) -> Array2<f64> {
    let scores = features.dot(&bank.t()) * scale;
    softmax_rows(&scores)
}

/// Batched recall: one sample per row of `source` (surviving modality) and `text`.
pub fn recall_forward(bank: &SlotBank, direction: Recall, source: Array2<f64>, text: Array2<f64>) -> Result<RecallCache> {
    let src_bank = bank.bank(direction.source());
    check_len(src_bank.ncols(), source.ncols(), "recall source width")?;
    check_len(bank.gt.ncols(), text.ncols(), "recall text width")?;
    check_len(source.nrows(), text.nrows(), "recall batch")?;
    let scale = 1.0 / (bank.dims.c as f64).sqrt();
    let addr_source = address_rows(&source, src_bank, scale);
    let addr_text = address_rows(&text, &bank.gt, scale);
    let combined = softmax_rows(&(&addr_source * &addr_text));
    let output = combined.dot(bank.bank(direction.target()));
    Ok(RecallCache {
        direction,
        source,
        text,
        addr_source,
        addr_text,
        combined,
        output,
    })
}

/// Input gradients returned by [`recall_backward`].
#[derive(Debug, Clone)]
pub struct RecallInputGrads {
    pub source: Array2<f64>,
    pub text: Array2<f64>,
}

/// Backpropagates `dL/d(output)` through aggregation, fusion and addressing.
/// Bank gradients are accumulated into `grad`.
pub fn recall_backward(bank: &SlotBank, cache: &RecallCache, grad_output: &Array2<f64>, grad: &mut SlotBank) -> Result<RecallInputGrads> {
    check_len(cache.output.nrows(), grad_output.nrows(), "recall upstream batch")?;
    check_len(cache.output.ncols(), grad_output.ncols(), "recall upstream width")?;
    let scale = 1.0 / (bank.dims.c as f64).sqrt();
    let target = cache.direction.target();
    let source = cache.direction.source();

    let g_combined = grad_output.dot(&bank.bank(target).t());
    *grad.bank_mut(target) += &cache.combined.t().dot(grad_output);

    let g_prod = softmax_rows_backward(&cache.combined, &g_combined);
    let g_addr_source = &g_prod * &cache.addr_text;
    let g_addr_text = &g_prod * &cache.addr_source;

    let g_scores_source = softmax_rows_backward(&cache.addr_source, &g_addr_source) * scale;
    let g_scores_text = softmax_rows_backward(&cache.addr_text, &g_addr_text) * scale;

    *grad.bank_mut(source) += &g_scores_source.t().dot(&cache.source);
    grad.gt += &g_scores_text.t().dot(&cache.text);

    Ok(RecallInputGrads {
        source: g_scores_source.dot(bank.bank(source)),
        text: g_scores_text.dot(&bank.gt),
    })
}

/// Per-batch recall losses `L_a`, `L_v` and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmmrLoss {
    pub audio: f64,
    pub visual: f64,
}

impl RmmrLoss {
    pub fn total(&self) -> f64 {
        self.audio + self.visual
    }
}

/// `(1/N) Σ_i ‖real_i − pseudo_i‖²` over matching rows.
pub fn recall_mse(real: &Array2<f64>, pseudo: &Array2<f64>) -> Result<f64> {
    check_len(real.nrows(), pseudo.nrows(), "recall loss batch")?;
    check_len(real.ncols(), pseudo.ncols(), "recall loss width")?;
    if real.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sq: f64 = real.iter().zip(pseudo.iter()).map(|(r, p)| (r - p) * (r - p)).sum();
    Ok(sq / real.nrows() as f64)
}

/// Gradient of [`recall_mse`] with respect to `pseudo`.
pub fn recall_mse_grad(real: &Array2<f64>, pseudo: &Array2<f64>) -> Array2<f64> {
    (pseudo - real) * (2.0 / real.nrows() as f64)
}

/// `L_rmmr = L_a + L_v` over a batch.
pub fn rmmr_loss(
    real_a: &[FeatureVec],
    pseudo_a: &[FeatureVec],
    real_v: &[VisualFeatureMap],
    pseudo_v: &[VisualFeatureMap],
) -> Result<f64> {
    let n = real_a.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for len in [pseudo_a.len(), real_v.len(), pseudo_v.len()] {
        check_len(n, len, "rmmr batch size")?;
    }
    let stack_a = |xs: &[FeatureVec]| crate::feature::stack_rows(xs.iter().map(|x| x.as_slice()));
    let stack_v = |xs: &[VisualFeatureMap]| crate::feature::stack_rows(xs.iter().map(|x| x.as_flat()));
    let loss = RmmrLoss {
        audio: recall_mse(&stack_a(real_a), &stack_a(pseudo_a))?,
        visual: recall_mse(&stack_v(real_v), &stack_v(pseudo_v))?,
    };
    Ok(loss.total())
}

/// Column-wise mean, used for the mean-feature recall baseline.
pub fn column_mean(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature::{make_rng, unflatten_visual};
    use ndarray::array;

    fn small_dims() -> Dims {
        Dims::new(2, 1, 1, 3).unwrap()
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let bank = array![[0.3, -0.2], [0.3, -0.2], [0.3, -0.2], [0.3, -0.2]];
        let a = address(&[1.5, 2.0], bank.view(), 2).unwrap();
        for w in a.weights() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn address_worked_example() {
        let bank = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let a = address(&[1.0, 0.0], bank.view(), 2).unwrap();
        let expected = [0.40113, 0.19774, 0.40113];
        for (w, e) in a.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-4, "{w} vs {e}");
        }
    }

    #[test]
    fn address_shift_invariance_with_equal_row_sums() {
        let bank = array![[1.0, 2.0, 0.0], [0.5, 0.5, 2.0], [3.0, -1.0, 1.0]];
        let f = [0.2, -0.7, 1.1];
        let shifted: Vec<f64> = f.iter().map(|x| x + 0.9).collect();
        let a = address(&f, bank.view(), 3).unwrap();
        let b = address(&shifted, bank.view(), 3).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn address_rejects_mismatch() {
        let bank = array![[1.0, 0.0]];
        assert!(address(&[1.0, 2.0, 3.0], bank.view(), 2).is_err());
        assert!(address(&[1.0, 2.0], bank.view(), 0).is_err());
    }

    #[test]
    fn combine_examples() {
        let half = AddressingVec::new(vec![0.5, 0.5]).unwrap();
        let out = combine_addressing(&half, &half).unwrap();
        assert!((out.weights()[0] - 0.5).abs() < 1e-15);

        let hot = AddressingVec::new(vec![1.0, 0.0]).unwrap();
        let out = combine_addressing(&hot, &half).unwrap();
        assert!((out.weights()[0] - 0.62246).abs() < 1e-4);
        assert!((out.weights()[1] - 0.37754).abs() < 1e-4);

        let u5 = AddressingVec::new(vec![0.2; 5]).unwrap();
        let u5b = AddressingVec::new(vec![0.2; 5]).unwrap();
        for w in combine_addressing(&u5, &u5b).unwrap().weights() {
            assert!((w - 0.2).abs() < 1e-15);
        }
        assert!(combine_addressing(&half, &u5).is_err());
    }

    #[test]
    fn pseudo_audio_midpoint() {
        // Identical G_v and G_t rows force uniform addressing.
        let dims = small_dims();
        let bank = SlotBank::from_parts(
            array![[0.5, 0.5], [0.5, 0.5]],
            array![[1.0, 1.0], [3.0, 3.0]],
            array![[0.1, 0.2], [0.1, 0.2]],
            dims,
        )
        .unwrap();
        let v = unflatten_visual(vec![0.4, -0.3], 1, 1, 2).unwrap();
        let t = FeatureVec::new(vec![1.0, 2.0]).unwrap();
        let out = generate_pseudo_audio(&v, &t, &bank).unwrap();
        assert!((out.as_slice()[0] - 2.0).abs() < 1e-12);
        assert!((out.as_slice()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_visual_constant_bank() {
        let dims = small_dims();
        let mut rng = make_rng(5);
        let mut bank = SlotBank::init(4, dims, &mut rng).unwrap();
        for mut row in bank.gv.rows_mut() {
            row.assign(&array![0.7, -1.3]);
        }
        let a = FeatureVec::new(rng.normal_vec(2)).unwrap();
        let t = FeatureVec::new(rng.normal_vec(2)).unwrap();
        let out = generate_pseudo_visual(&a, &t, &bank).unwrap();
        assert!((out.as_flat()[0] - 0.7).abs() < 1e-12);
        assert!((out.as_flat()[1] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn one_hot_combined_addressing_returns_slot_row() {
        // softmax(a ∘ b) never produces an exact one-hot, so drive the
        // aggregation step directly.
        let ga = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let hot = AddressingVec::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(aggregate(&hot, &ga), vec![3.0, 4.0]);
        let dims = Dims::new(2, 1, 1, 2).unwrap();
        let gv = array![[9.0, 8.0], [7.0, 6.0], [5.0, 4.0]];
        let out = aggregate(&hot, &gv);
        let map = unflatten_visual(out, dims.w, dims.h, dims.c).unwrap();
        assert_eq!(map.as_flat(), &[7.0, 6.0]);
    }

    #[test]
    fn rmmr_examples() {
        let ra = vec![FeatureVec::new(vec![1.0, 0.0]).unwrap()];
        let pa = vec![FeatureVec::new(vec![0.0, 0.0]).unwrap()];
        let rv = vec![unflatten_visual(vec![0.3, 0.1], 1, 1, 2).unwrap()];
        assert_eq!(rmmr_loss(&ra, &pa, &rv, &rv).unwrap(), 1.0);
        assert_eq!(rmmr_loss(&ra, &ra, &rv, &rv).unwrap(), 0.0);
        assert!(rmmr_loss(&ra, &[], &rv, &rv).is_err());
    }

    #[test]
    fn single_slot_bank_has_no_addressing_gradient() {
        let dims = small_dims();
        let mut rng = make_rng(1);
        let bank = SlotBank::init(1, dims, &mut rng).unwrap();
        let src = Array2::from_shape_vec((2, 2), rng.normal_vec(4)).unwrap();
        let text = Array2::from_shape_vec((2, 2), rng.normal_vec(4)).unwrap();
        let cache = recall_forward(&bank, Recall::Audio, src, text).unwrap();
        let g = Array2::from_shape_vec((2, 2), rng.normal_vec(4)).unwrap();
        let mut grad = bank.zeros_like();
        let gi = recall_backward(&bank, &cache, &g, &mut grad).unwrap();
        assert!(grad.gv.iter().all(|v| v.abs() < 1e-15));
        assert!(grad.gt.iter().all(|v| v.abs() < 1e-15));
        assert!(gi.source.iter().all(|v| v.abs() < 1e-15));
        // Aggregation gradient: weight 1 on the only slot.
        let col_sum = g.sum_axis(Axis(0));
        for (a, b) in grad.ga.row(0).iter().zip(col_sum.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let dims = small_dims();
        let mut rng = make_rng(2);
        let bank = SlotBank::init(3, dims, &mut rng).unwrap();
        let src = Array2::from_shape_vec((1, 2), rng.normal_vec(2)).unwrap();
        let text = Array2::from_shape_vec((1, 2), rng.normal_vec(2)).unwrap();
        let cache = recall_forward(&bank, Recall::Visual, src, text).unwrap();
        let mut grad = bank.zeros_like();
        let gi = recall_backward(&bank, &cache, &Array2::zeros((1, 2)), &mut grad).unwrap();
        assert!(grad.gv.iter().chain(grad.ga.iter()).chain(grad.gt.iter()).all(|v| *v == 0.0));
        assert!(gi.source.iter().chain(gi.text.iter()).all(|v| *v == 0.0));
    }
}
