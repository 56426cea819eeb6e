//! Joint optimization of the slot bank, the denoiser and the QA head.
//!
//! One training step on complete data:
//!
//! 1. cross-entropy on the real `(a, v, t)` triple;
//! 2. recall pseudo audio from `(v, t)` and pseudo visual from `(a, t)`;
//! 3. run the deterministic reverse chain on `[a_p ‖ v]` and `[a ‖ v_p]`,
//!    split, and classify both enhanced triples;
//! 4. add the recall loss and the noise-prediction loss on `[a ‖ v]`;
//! 5. backprop everything and take one Adam step.
//!
//! Ablation arms drop step 2 (zero-fill instead of recall) and/or step 3
//! (substitutes go to the head unenhanced). With neither component only the
//! real-triple term is trained.

use ndarray::{concatenate, s, Array2, Axis};

use crate::adam::{AdamConfig, AdamState};
use crate::diffusion::{ave_loss_grad, ave_loss_with, enhance_backward, enhance_from, enhance_traced, make_schedule, AveDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::feature::{stack_rows, Batch, Dims, Rng, TrimodalSample};
use crate::model::{Group, ModelShape, Models};
use crate::qa_head::{ce_batch, total_loss, LossBreakdown};
use crate::rmm::{recall_backward, recall_forward, recall_mse, recall_mse_grad, Recall};
use crate::world::{apply_missing, Scenario};
use crate::par;

/// Which of the two missing-modality components an arm uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    /// Zero-fill for the missing modality.
    Neither,
    /// Recalled pseudo feature fed directly to the head.
    RmmOnly,
    /// Zero-fill, then diffusion enhancement.
    AvrOnly,
    /// Recalled pseudo feature, then diffusion enhancement.
    Both,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Neither, Arm::RmmOnly, Arm::AvrOnly, Arm::Both];

    pub fn uses_rmm(self) -> bool {
        matches!(self, Arm::RmmOnly | Arm::Both)
    }

    pub fn uses_avr(self) -> bool {
        matches!(self, Arm::AvrOnly | Arm::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Neither => "neither",
            Arm::RmmOnly => "rmm",
            Arm::AvrOnly => "avr",
            Arm::Both => "rmm+avr",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neither" | "zero-fill" => Ok(Arm::Neither),
            "rmm" => Ok(Arm::RmmOnly),
            "avr" => Ok(Arm::AvrOnly),
            "rmm+avr" | "both" => Ok(Arm::Both),
            _ => Err(Error::Config(format!("unknown arm '{s}'"))),
        }
    }
}

/// Relative weight of the three cross-entropy terms. Each term is scaled
/// by `3 × fraction`, so the uniform default is the plain sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioMix {
    pub audio_missing: f64,
    pub visual_missing: f64,
    pub complete: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self {
            audio_missing: 1.0 / 3.0,
            visual_missing: 1.0 / 3.0,
            complete: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub scenario_mix: ScenarioMix,
    pub shape: ModelShape,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse-chain entry step for enhancement; defaults to `timesteps`.
    pub enhance_entry_t: usize,
    pub arm: Arm,
    /// Stop gradients of the enhanced-feature CE terms at the chain input.
    pub detach_enhanced: bool,
    /// Keep the slot bank and the denoiser fixed.
    pub freeze_generators: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 5,
            lr: 1e-4,
            lambda1: 1.0,
            lambda2: 1.0,
            seed: 0,
            scenario_mix: ScenarioMix::default(),
            shape: ModelShape::default(),
            timesteps: 10,
            beta_start: 1e-4,
            beta_end: 0.2,
            enhance_entry_t: 10,
            arm: Arm::Both,
            detach_enhanced: false,
            freeze_generators: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambdas must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        let m = self.scenario_mix;
        if [m.audio_missing, m.visual_missing, m.complete].iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config("scenario fractions must be >= 0".into()));
        }
        if (m.audio_missing + m.visual_missing + m.complete - 1.0).abs() > 1e-9 {
            return Err(Error::Config("scenario fractions must sum to 1".into()));
        }
        if self.shape.slots == 0 || self.shape.eps_hidden == 0 || self.shape.head_hidden == 0 {
            return Err(Error::Config("slots and hidden widths must be positive".into()));
        }
        if self.enhance_entry_t == 0 || self.enhance_entry_t > self.timesteps {
            return Err(Error::Config(format!(
                "enhance_entry_t must be in 1..={}",
                self.timesteps
            )));
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    fn term_weights(&self) -> [f64; 3] {
        let m = self.scenario_mix;
        [3.0 * m.complete, 3.0 * m.audio_missing, 3.0 * m.visual_missing]
    }
}

/// Batched feature matrices for one step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub audio: Array2<f64>,
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
    pub labels: Vec<usize>,
}

impl StepInputs {
    pub fn from_batch(batch: &Batch<'_>) -> Self {
        Self {
            audio: batch.audio_matrix(),
            visual: batch.visual_matrix(),
            text: batch.text_matrix(),
            labels: batch.labels(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn combined(audio: &Array2<f64>, visual: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[audio.view(), visual.view()]).expect("matching rows")
}

/// Total loss and, when `with_grad`, gradients for every parameter.
/// `draw` supplies the noise for the denoising term and is required when the
/// arm uses diffusion.
pub fn loss_and_grad(
    models: &Models,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    x: &StepInputs,
    draw: Option<&AveDraw>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Models>)> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let c = models.dims().c;
    let arm = cfg.arm;
    let weights = cfg.term_weights();
    let mut grad = with_grad.then(|| models.zeros_like());

    // Real triple.
    let (logits, head_real) = models.head.forward_cached(x.audio.clone(), x.visual.clone(), x.text.clone());
    let (ce_real, g_real) = ce_batch(&logits, &x.labels, weights[0])?;
    if let Some(g) = grad.as_mut() {
        models.head.backward(&head_real, &g_real, &mut g.head);
    }
    let mut l_avqa = weights[0] * ce_real;

    let (mut l_rmmr, mut l_ave) = (0.0, 0.0);
    if arm == Arm::Neither {
        let br = total_loss(l_avqa, l_rmmr, l_ave, cfg.lambda1, cfg.lambda2)?;
        return Ok((br, grad));
    }

    // Substitutes for the missing modality.
    let recall = if arm.uses_rmm() {
        let ra = recall_forward(&models.bank, Recall::Audio, x.visual.clone(), x.text.clone())?;
        let rv = recall_forward(&models.bank, Recall::Visual, x.audio.clone(), x.text.clone())?;
        let la = recall_mse(&x.audio, &ra.output)?;
        let lv = recall_mse(&x.visual, &rv.output)?;
        l_rmmr = la + lv;
        Some((ra, rv))
    } else {
        None
    };
    let (sub_a, sub_v) = match &recall {
        Some((ra, rv)) => (ra.output.clone(), rv.output.clone()),
        None => (Array2::zeros(x.audio.raw_dim()), Array2::zeros(x.visual.raw_dim())),
    };

    // Triples fed to the head for the two missing directions.
    let (trip_a, trip_v, chain) = if arm.uses_avr() {
        let input = concatenate(Axis(0), &[combined(&sub_a, &x.visual).view(), combined(&x.audio, &sub_v).view()]).unwrap();
        let (out, trace) = enhance_traced(&models.net, sched, cfg.enhance_entry_t, input)?;
        let top = out.slice(s![..n, ..]);
        let bottom = out.slice(s![n.., ..]);
        let ta = (top.slice(s![.., ..c]).to_owned(), top.slice(s![.., c..]).to_owned());
        let tv = (bottom.slice(s![.., ..c]).to_owned(), bottom.slice(s![.., c..]).to_owned());
        (ta, tv, Some(trace))
    } else {
        ((sub_a.clone(), x.visual.clone()), (x.audio.clone(), sub_v.clone()), None)
    };

    let (logits_a, head_a) = models.head.forward_cached(trip_a.0, trip_a.1, x.text.clone());
    let (ce_a, g_la) = ce_batch(&logits_a, &x.labels, weights[1])?;
    let (logits_v, head_v) = models.head.forward_cached(trip_v.0, trip_v.1, x.text.clone());
    let (ce_v, g_lv) = ce_batch(&logits_v, &x.labels, weights[2])?;
    l_avqa += weights[1] * ce_a + weights[2] * ce_v;

    if arm.uses_avr() {
        let draw = draw.ok_or_else(|| Error::InvalidArgument("diffusion arm needs a noise draw".into()))?;
        let f0 = combined(&x.audio, &x.visual);
        l_ave = match grad.as_mut() {
            Some(g) => ave_loss_grad(&models.net, f0.view(), draw, sched, cfg.lambda2, &mut g.net),
            None => ave_loss_with(&models.net, f0.view(), draw, sched),
        };
    }

    if let Some(g) = grad.as_mut() {
        let gi_a = models.head.backward(&head_a, &g_la, &mut g.head);
        let gi_v = models.head.backward(&head_v, &g_lv, &mut g.head);

        // Upstream gradients on the substitutes.
        let (mut g_sub_a, mut g_sub_v) = if cfg.detach_enhanced && arm.uses_avr() {
            (Array2::zeros(sub_a.raw_dim()), Array2::zeros(sub_v.raw_dim()))
        } else if let Some(trace) = &chain {
            let g_out = concatenate(
                Axis(0),
                &[combined(&gi_a.audio, &gi_a.visual).view(), combined(&gi_v.audio, &gi_v.visual).view()],
            )
            .unwrap();
            let g_in = enhance_backward(&models.net, sched, trace, &g_out, &mut g.net);
            (g_in.slice(s![..n, ..c]).to_owned(), g_in.slice(s![n.., c..]).to_owned())
        } else {
            (gi_a.audio, gi_v.visual)
        };

        if let Some((ra, rv)) = &recall {
            g_sub_a.scaled_add(cfg.lambda1, &recall_mse_grad(&x.audio, &ra.output));
            g_sub_v.scaled_add(cfg.lambda1, &recall_mse_grad(&x.visual, &rv.output));
            recall_backward(&models.bank, ra, &g_sub_a, &mut g.bank)?;
            recall_backward(&models.bank, rv, &g_sub_v, &mut g.bank)?;
        }
    }

    let br = total_loss(l_avqa, l_rmmr, l_ave, cfg.lambda1, cfg.lambda2)?;
    Ok((br, grad))
}

fn check_finite(br: &LossBreakdown) -> Result<()> {
    for (term, value) in [("l_avqa", br.l_avqa), ("l_rmmr", br.l_rmmr), ("l_ave", br.l_ave), ("total", br.total)] {
        if !value.is_finite() {
            return Err(Error::Diverged { term, value });
        }
    }
    Ok(())
}

/// Which parameter groups an arm updates.
pub fn active_groups(cfg: &TrainConfig) -> [bool; 3] {
    let gen = !cfg.freeze_generators;
    [gen && cfg.arm.uses_rmm(), gen && cfg.arm.uses_avr(), true]
}

fn group_index(g: Group) -> usize {
    match g {
        Group::SlotBank => 0,
        Group::EpsNet => 1,
        Group::QaHead => 2,
    }
}

/// One optimizer step on a complete-modality batch.
pub fn train_step(
    models: &mut Models,
    adam: &mut AdamState,
    x: &StepInputs,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let draw = cfg
        .arm
        .uses_avr()
        .then(|| AveDraw::sample(x.len(), models.dims().combined_len(), sched, rng));
    let (br, grad) = loss_and_grad(models, cfg, sched, x, draw.as_ref(), true)?;
    check_finite(&br)?;
    let grad = grad.expect("gradients requested");
    let active_by_group = active_groups(cfg);
    let active: Vec<bool> = models.groups().iter().map(|g| active_by_group[group_index(*g)]).collect();
    let grads = grad.tensors();
    let grad_slices: Vec<&[f64]> = grads.iter().map(|t| t.data).collect();
    adam.step(models.tensors_mut(), &grad_slices, &active)?;
    Ok(br)
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_avqa: f64,
    pub l_rmmr: f64,
    pub l_ave: f64,
    pub total: f64,
}

/// Training state: parameters, optimizer moments and the data-order stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub adam: AdamState,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    sched: NoiseSchedule,
}

impl Trainer {
    pub fn new(config: TrainConfig, dims: Dims) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut init = rng.fork();
        let models = Models::init(dims, config.shape, &mut init)?;
        Self::from_parts(config, models, None, rng, 0)
    }

    pub fn from_parts(config: TrainConfig, models: Models, adam: Option<AdamState>, rng: Rng, epoch: usize) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = models.tensors().iter().map(|t| t.data.len()).collect();
        let adam = match adam {
            Some(a) => a,
            None => AdamState::new(config.adam(), &sizes),
        };
        let sched = config.schedule()?;
        Ok(Self {
            config,
            models,
            adam,
            rng,
            epoch,
            sched,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// One pass over `train` in a freshly shuffled order.
    pub fn run_epoch(&mut self, train: &[TrimodalSample]) -> Result<EpochLosses> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training split".into()));
        }
        let dims = self.models.dims();
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = self.rng.below(i + 1);
            order.swap(i, j);
        }
        let (mut sums, mut steps) = ([0.0; 4], 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = Batch::new(chunk.iter().map(|&i| &train[i]).collect(), &dims)?;
            let x = StepInputs::from_batch(&batch);
            let br = train_step(&mut self.models, &mut self.adam, &x, &self.config, &self.sched, &mut self.rng)?;
            for (s, v) in sums.iter_mut().zip([br.l_avqa, br.l_rmmr, br.l_ave, br.total]) {
                *s += v;
            }
            steps += 1;
        }
        self.epoch += 1;
        let k = steps as f64;
        Ok(EpochLosses {
            epoch: self.epoch,
            l_avqa: sums[0] / k,
            l_rmmr: sums[1] / k,
            l_ave: sums[2] / k,
            total: sums[3] / k,
        })
    }

    /// Runs epochs until `config.epochs` have completed.
    pub fn fit(&mut self, train: &[TrimodalSample], mut on_epoch: impl FnMut(&Trainer, &EpochLosses) -> Result<()>) -> Result<Vec<EpochLosses>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            let e = self.run_epoch(train)?;
            on_epoch(self, &e)?;
            out.push(e);
        }
        Ok(out)
    }
}

/// Accuracy and recall quality on one split under one missing scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub count: usize,
    pub missing: usize,
    pub accuracy: f64,
    /// Accuracy per answer class; NaN for classes absent from the split.
    pub per_class: Vec<f64>,
    /// Batch-mean squared L2 error of the arm's audio substitute.
    pub pseudo_mse_a: f64,
    /// Same for the visual substitute.
    pub pseudo_mse_v: f64,
}

const EVAL_CHUNK: usize = 64;

struct ChunkResult {
    correct: Vec<bool>,
    sq_a: f64,
    sq_v: f64,
}

/// Features handed to the head for each row of a chunk, given its mask.
fn imputed_inputs(
    models: &Models,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    x: &StepInputs,
    masks: &[crate::feature::ModalityMask],
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> {
    let c = models.dims().c;
    let (sub_a, sub_v) = if cfg.arm.uses_rmm() {
        (
            recall_forward(&models.bank, Recall::Audio, x.visual.clone(), x.text.clone())?.output,
            recall_forward(&models.bank, Recall::Visual, x.audio.clone(), x.text.clone())?.output,
        )
    } else {
        (Array2::zeros(x.audio.raw_dim()), Array2::zeros(x.visual.raw_dim()))
    };
    let mut audio = x.audio.clone();
    let mut visual = x.visual.clone();
    let missing: Vec<usize> = (0..masks.len())
        .filter(|&i| !masks[i].audio_present() || !masks[i].visual_present())
        .collect();
    if missing.is_empty() {
        return Ok((audio, visual, sub_a, sub_v));
    }
    let rows: Vec<Vec<f64>> = missing
        .iter()
        .map(|&i| {
            let (a, v) = if masks[i].audio_present() {
                (x.audio.row(i), sub_v.row(i))
            } else {
                (sub_a.row(i), x.visual.row(i))
            };
            a.iter().chain(v.iter()).copied().collect()
        })
        .collect();
    let filled = stack_rows(rows.iter().map(|r| r.as_slice()));
    let done = if cfg.arm.uses_avr() {
        enhance_from(filled.view(), cfg.enhance_entry_t, &models.net, sched, None)?
    } else {
        filled
    };
    for (k, &i) in missing.iter().enumerate() {
        audio.row_mut(i).assign(&done.slice(s![k, ..c]));
        visual.row_mut(i).assign(&done.slice(s![k, c..]));
    }
    Ok((audio, visual, sub_a, sub_v))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Masks `samples` per `scenario`/`ratio`, imputes per the arm, and scores
/// the head. Enhancement runs the deterministic chain.
pub fn evaluate(
    models: &Models,
    cfg: &TrainConfig,
    samples: &[TrimodalSample],
    scenario: Scenario,
    ratio: f64,
    rng: &mut Rng,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let sched = cfg.schedule()?;
    let dims = models.dims();
    let masked = samples
        .iter()
        .map(|s| apply_missing(s, scenario, ratio, rng))
        .collect::<Result<Vec<_>>>()?;
    let results = par::map_chunks(&masked, EVAL_CHUNK, |chunk| -> Result<ChunkResult> {
        let batch = Batch::new(chunk.iter().collect(), &dims)?;
        let x = StepInputs::from_batch(&batch);
        let masks: Vec<_> = chunk.iter().map(|s| s.mask).collect();
        let (a, v, sub_a, sub_v) = imputed_inputs(models, cfg, &sched, &x, &masks)?;
        let logits = models.head.forward(a.view(), v.view(), x.text.view());
        let correct = logits
            .rows()
            .into_iter()
            .zip(&x.labels)
            .map(|(r, &y)| argmax(r) == y)
            .collect();
        let sq = |real: &Array2<f64>, sub: &Array2<f64>| recall_mse(real, sub).map(|m| m * real.nrows() as f64);
        Ok(ChunkResult {
            correct,
            sq_a: sq(&x.audio, &sub_a)?,
            sq_v: sq(&x.visual, &sub_v)?,
        })
    });
    let mut correct = Vec::with_capacity(samples.len());
    let (mut sq_a, mut sq_v) = (0.0, 0.0);
    for r in results {
        let r = r?;
        correct.extend(r.correct);
        sq_a += r.sq_a;
        sq_v += r.sq_v;
    }
    let n = samples.len();
    let mut per_hit = vec![0usize; dims.k];
    let mut per_count = vec![0usize; dims.k];
    for (s, ok) in samples.iter().zip(&correct) {
        per_count[s.label] += 1;
        per_hit[s.label] += *ok as usize;
    }
    Ok(EvalMetrics {
        count: n,
        missing: masked.iter().filter(|s| s.mask != crate::feature::ModalityMask::COMPLETE).count(),
        accuracy: correct.iter().filter(|c| **c).count() as f64 / n as f64,
        per_class: per_hit
            .iter()
            .zip(&per_count)
            .map(|(&h, &c)| if c == 0 { f64::NAN } else { h as f64 / c as f64 })
            .collect(),
        pseudo_mse_a: sq_a / n as f64,
        pseudo_mse_v: sq_v / n as f64,
    })
}

/// Recall error of predicting every sample with the training-split mean.
pub fn mean_predictor_mse(train: &[TrimodalSample], eval: &[TrimodalSample], dims: &Dims) -> Result<(f64, f64)> {
    let tr = Batch::new(train.iter().collect(), dims)?;
    let ev = Batch::new(eval.iter().collect(), dims)?;
    let mean_a = crate::rmm::column_mean(&tr.audio_matrix());
    let mean_v = crate::rmm::column_mean(&tr.visual_matrix());
    let n = eval.len();
    let pa = stack_rows(std::iter::repeat_n(mean_a.as_slice(), n));
    let pv = stack_rows(std::iter::repeat_n(mean_v.as_slice(), n));
    Ok((recall_mse(&ev.audio_matrix(), &pa)?, recall_mse(&ev.visual_matrix(), &pv)?))
}

/// Worst finite-difference disagreement within one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: Group,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. A central difference with step
/// `1e-5` on an O(10) loss carries about `2e-16 · 10 / 1e-5 = 2e-10` of
/// rounding error, so entries much smaller than this cannot be resolved to
/// a relative `1e-6`; they are held to an absolute `1e-9` instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central differences of the total loss against the analytic gradient for
/// every parameter, reported per group.
pub fn grad_check(models: &Models, cfg: &TrainConfig, x: &StepInputs, draw: Option<&AveDraw>) -> Result<GradCheckReport> {
    let sched = cfg.schedule()?;
    let (_, grad) = loss_and_grad(models, cfg, &sched, x, draw, true)?;
    let grad = grad.expect("gradients requested");
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.data.to_vec()).collect();
    let groups = models.groups();
    let h = GRAD_CHECK_STEP;
    let loss_at = |m: &Models| -> Result<f64> { Ok(loss_and_grad(m, cfg, &sched, x, draw, false)?.0.total) };

    let mut stats: Vec<GroupCheck> = Group::ALL
        .iter()
        .map(|&group| GroupCheck {
            group,
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            analytic_norm: 0.0,
            numeric_norm: 0.0,
        })
        .collect();
    let mut probe = models.clone();
    for (ti, an) in analytic.iter().enumerate() {
        let gi = group_index(groups[ti]);
        for (k, &a) in an.iter().enumerate() {
            let orig = probe.tensors_mut()[ti][k];
            probe.tensors_mut()[ti][k] = orig + h;
            let up = loss_at(&probe)?;
            probe.tensors_mut()[ti][k] = orig - h;
            let down = loss_at(&probe)?;
            probe.tensors_mut()[ti][k] = orig;
            let num = (up - down) / (2.0 * h);
            let st = &mut stats[gi];
            st.checked += 1;
            st.max_rel_err = st.max_rel_err.max(relative_error(a, num));
            st.max_abs_err = st.max_abs_err.max((a - num).abs());
            st.analytic_norm += a * a;
            st.numeric_norm += num * num;
        }
    }
    for st in stats.iter_mut() {
        st.analytic_norm = st.analytic_norm.sqrt();
        st.numeric_norm = st.numeric_norm.sqrt();
    }
    Ok(GradCheckReport { step: h, groups: stats })
}

/// Small random model, batch and noise draw suitable for [`grad_check`]:
/// `L = 3`, `c = 2`, `w = h = 1`, three classes, narrow hidden layers.
pub fn grad_check_probe(seed: u64) -> Result<(Models, TrainConfig, StepInputs, AveDraw)> {
    let dims = Dims::new(2, 1, 1, 3)?;
    let cfg = TrainConfig {
        seed,
        shape: ModelShape {
            slots: 3,
            eps_hidden: 8,
            head_hidden: 6,
        },
        timesteps: 4,
        beta_start: 1e-2,
        beta_end: 0.2,
        enhance_entry_t: 4,
        ..TrainConfig::default()
    };
    let mut rng = Rng::new(seed);
    let models = Models::init(dims, cfg.shape, &mut rng)?;
    let n = 2;
    let mat = |rng: &mut Rng, cols: usize| Array2::from_shape_vec((n, cols), rng.normal_vec(n * cols)).unwrap();
    let x = StepInputs {
        audio: mat(&mut rng, dims.c),
        visual: mat(&mut rng, dims.visual_len()),
        text: mat(&mut rng, dims.c),
        labels: (0..n).map(|_| rng.below(dims.k)).collect(),
    };
    let draw = AveDraw::sample(n, dims.combined_len(), &cfg.schedule()?, &mut rng);
    Ok((models, cfg, x, draw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_total_is_recomputable() {
        let (models, cfg, x, draw) = grad_check_probe(1).unwrap();
        let sched = cfg.schedule().unwrap();
        let (br, _) = loss_and_grad(&models, &cfg, &sched, &x, Some(&draw), false).unwrap();
        assert_eq!(br.total, br.l_avqa + br.lambda1 * br.l_rmmr + br.lambda2 * br.l_ave);
        assert!(br.l_avqa > 0.0 && br.l_rmmr > 0.0 && br.l_ave > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lambda1: -1.0, ..TrainConfig::default() },
            TrainConfig {
                scenario_mix: ScenarioMix { audio_missing: 0.5, visual_missing: 0.5, complete: 0.5 },
                ..TrainConfig::default()
            },
            TrainConfig { enhance_entry_t: 11, ..TrainConfig::default() },
            TrainConfig { beta_end: 1.0, ..TrainConfig::default() },
        ];
        for b in bad {
            assert!(b.validate().is_err(), "{b:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-9) - 1e-9).abs() < 1e-15);
        assert!(relative_error(1e-12, 2e-12) < 1e-4);
    }

    #[test]
    fn arm_parsing() {
        for arm in Arm::ALL {
            assert_eq!(arm.as_str().parse::<Arm>().unwrap(), arm);
        }
    }
}
