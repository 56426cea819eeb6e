//! Shared feature types, the deterministic random stream, and the
//! visual flatten/unflatten primitives.

use ndarray::Array2;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};

/// Feature-space dimensions shared by every model component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Channel dimension of audio/text features and of each visual cell.
    pub c: usize,
    pub w: usize,
    pub h: usize,
    /// Number of answer classes.
    pub k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            c: 16,
            w: 4,
            h: 4,
            k: 8,
        }
    }
}

impl Dims {
    pub fn new(c: usize, w: usize, h: usize, k: usize) -> Result<Self> {
        if c == 0 || w == 0 || h == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "dimensions must be positive (c={c}, w={w}, h={h}, k={k})"
            )));
        }
        Ok(Self { c, w, h, k })
    }

    /// Length of a flattened visual map, `w·h·c`.
    pub fn visual_len(&self) -> usize {
        self.w * self.h * self.c
    }

    /// Length of the concatenated audio-visual vector, `c + w·h·c`.
    pub fn combined_len(&self) -> usize {
        self.c + self.visual_len()
    }
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// One modality embedding of length `c` (audio or text).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec(Vec<f64>);

impl FeatureVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty feature vector".into()));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A `w×h×c` visual feature map stored row-major (w outermost, c innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureMap {
    w: usize,
    h: usize,
    c: usize,
    values: Vec<f64>,
}

impl VisualFeatureMap {
    /// Builds a map from nested `[w][h][c]` data.
    pub fn from_nested(cells: &[Vec<Vec<f64>>]) -> Result<Self> {
        let w = cells.len();
        let h = cells.first().map_or(0, |r| r.len());
        let c = cells.first().and_then(|r| r.first()).map_or(0, |v| v.len());
        if w == 0 || h == 0 || c == 0 {
            return Err(Error::InvalidArgument("empty visual map".into()));
        }
        let mut values = Vec::with_capacity(w * h * c);
        for row in cells {
            check_len(h, row.len(), "visual map rows")?;
            for cell in row {
                check_len(c, cell.len(), "visual map channels")?;
                values.extend_from_slice(cell);
            }
        }
        unflatten_visual(values, w, h, c)
    }

    pub fn zeros(w: usize, h: usize, c: usize) -> Self {
        Self {
            w,
            h,
            c,
            values: vec![0.0; w * h * c],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.w, self.h, self.c)
    }

    pub fn get(&self, iw: usize, ih: usize, ic: usize) -> f64 {
        self.values[iw * self.h * self.c + ih * self.c + ic]
    }

    /// Row-major view of the map; identical to [`flatten_visual`] without a copy.
    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }
}

/// Flattens `v` so that index `(iw, ih, ic)` lands at `iw·h·c + ih·c + ic`.
pub fn flatten_visual(v: &VisualFeatureMap) -> Vec<f64> {
    v.values.clone()
}

/// Inverse of [`flatten_visual`].
pub fn unflatten_visual(x: Vec<f64>, w: usize, h: usize, c: usize) -> Result<VisualFeatureMap> {
    if w == 0 || h == 0 || c == 0 {
        return Err(Error::InvalidArgument("visual dims must be positive".into()));
    }
    check_len(w * h * c, x.len(), "unflatten_visual")?;
    if !all_finite(&x) {
        return Err(Error::NonFinite("visual feature map"));
    }
    Ok(VisualFeatureMap { w, h, c, values: x })
}

/// Which of audio/visual is available. Text is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityMask {
    audio_present: bool,
    visual_present: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::COMPLETE
    }
}

impl ModalityMask {
    pub const COMPLETE: Self = Self {
        audio_present: true,
        visual_present: true,
    };
    pub const AUDIO_MISSING: Self = Self {
        audio_present: false,
        visual_present: true,
    };
    pub const VISUAL_MISSING: Self = Self {
        audio_present: true,
        visual_present: false,
    };

    pub fn new(audio_present: bool, visual_present: bool) -> Result<Self> {
        if !audio_present && !visual_present {
            return Err(Error::InvalidArgument(
                "at most one of audio/visual may be missing".into(),
            ));
        }
        Ok(Self {
            audio_present,
            visual_present,
        })
    }

    pub fn audio_present(&self) -> bool {
        self.audio_present
    }

    pub fn visual_present(&self) -> bool {
        self.visual_present
    }

    pub fn to_byte(self) -> u8 {
        (self.audio_present as u8) | ((self.visual_present as u8) << 1)
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        if b > 3 {
            return Err(Error::Format(format!("bad mask byte {b}")));
        }
        Self::new(b & 1 != 0, b & 2 != 0).map_err(|_| Error::Format(format!("bad mask byte {b}")))
    }
}

/// One question-answer record of the synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimodalSample {
    pub audio: FeatureVec,
    pub visual: VisualFeatureMap,
    pub text: FeatureVec,
    pub label: usize,
    pub mask: ModalityMask,
}

impl TrimodalSample {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        check_len(dims.c, self.audio.len(), "sample audio")?;
        check_len(dims.c, self.text.len(), "sample text")?;
        if self.visual.shape() != (dims.w, dims.h, dims.c) {
            return Err(Error::DimensionMismatch {
                expected: dims.visual_len(),
                got: self.visual.as_flat().len(),
                context: "sample visual shape",
            });
        }
        if self.label >= dims.k {
            return Err(Error::LabelOutOfRange {
                label: self.label,
                classes: dims.k,
            });
        }
        Ok(())
    }
}

/// A non-empty, shape-consistent list of samples.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    samples: Vec<&'a TrimodalSample>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<&'a TrimodalSample>, dims: &Dims) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("batch must be non-empty".into()));
        }
        for s in &samples {
            s.validate(dims)?;
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[&'a TrimodalSample] {
        &self.samples
    }

    pub fn audio_matrix(&self) -> Array2<f64> {
        stack_rows(self.samples.iter().map(|s| s.audio.as_slice()))
    }

    pub fn visual_matrix(&self) -> Array2<f64> {
        stack_rows(self.samples.iter().map(|s| s.visual.as_flat()))
    }

    pub fn text_matrix(&self) -> Array2<f64> {
        stack_rows(self.samples.iter().map(|s| s.text.as_slice()))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Stacks equal-length rows into an `n×d` matrix.
pub fn stack_rows<'r>(rows: impl IntoIterator<Item = &'r [f64]>) -> Array2<f64> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut d = 0;
    for r in rows {
        d = r.len();
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, d), data).expect("rows must share a length")
}

/// Serializable position of an [`Rng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Seeded random stream. Equal seeds and equal call sequences give
/// bit-identical draws.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

pub fn make_rng(seed: u64) -> Rng {
    Rng::new(seed)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }

    /// Child stream seeded from the next draw of this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }
}
