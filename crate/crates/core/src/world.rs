//! Synthetic trimodal world: audio, visual and text features rendered from a
//! shared latent scene, with the answer a fixed function of the scene.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::feature::{unflatten_visual, Dims, FeatureVec, ModalityMask, Rng, TrimodalSample};
use crate::par;

pub const DATASET_MAGIC: &[u8; 4] = b"TMW1";

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    /// Latent scene dimension.
    pub m: usize,
    pub dims: Dims,
    pub noise_std: f64,
    /// Rank of the subspace of `z` visible to audio and visual.
    pub cross_modal_rank: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            m: 8,
            dims: Dims::default(),
            noise_std: 0.05,
            cross_modal_rank: 8,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        Dims::new(self.dims.c, self.dims.w, self.dims.h, self.dims.k)?;
        if self.m < 2 {
            return Err(Error::Config("latent dimension m must be at least 2".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if self.cross_modal_rank == 0 || self.cross_modal_rank > self.m {
            return Err(Error::Config(format!(
                "cross_modal_rank must be in 1..={}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Latent scene and its answer.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLatent {
    pub z: Vec<f64>,
    pub label: usize,
}

/// The fixed random maps of a world, derived from the config seed.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    label_map: Array2<f64>,
    audio_map: Array2<f64>,
    visual_map: Array2<f64>,
    text_map: Array2<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Array2::from_shape_vec((rows, cols), data).unwrap()
}

/// Rows orthonormalized by modified Gram-Schmidt; needs `rows <= cols`.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let mut m = gaussian(rows, cols, 1.0, rng);
    for i in 0..rows {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// Leading coordinates of `z` that the question text depends on.
fn text_block(m: usize) -> usize {
    m / 2
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let WorldConfig { m, dims, cross_modal_rank: r, .. } = config;
        let mut rng = Rng::new(config.seed ^ 0x05ee_d0f3_a11d);
        // Orthonormal label directions make every class equally likely when K <= m.
        let label_map = if dims.k <= m {
            orthonormal_rows(dims.k, m, &mut rng)
        } else {
            let mut g = gaussian(dims.k, m, 1.0, &mut rng);
            for mut row in g.rows_mut() {
                let n = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / n);
            }
            g
        };
        let shared = orthonormal_rows(r, m, &mut rng);
        let rank_std = 1.0 / (r as f64).sqrt();
        let audio_map = gaussian(dims.c, r, rank_std, &mut rng).dot(&shared);
        let visual_map = gaussian(dims.visual_len(), r, rank_std, &mut rng).dot(&shared);
        let tb = text_block(m);
        let text_map = gaussian(dims.c, tb, 1.0 / (tb as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            label_map,
            audio_map,
            visual_map,
            text_map,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn label_of(&self, z: &[f64]) -> usize {
        let scores = self.label_map.dot(&Array1::from(z.to_vec()));
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn gen_scene(&self, rng: &mut Rng) -> SceneLatent {
        let z = rng.normal_vec(self.config.m);
        let label = self.label_of(&z);
        SceneLatent { z, label }
    }

    fn render(&self, map: &Array2<f64>, z: &[f64], rng: &mut Rng) -> Vec<f64> {
        let z = Array1::from(z.to_vec());
        let noise = self.config.noise_std;
        map.dot(&z)
            .iter()
            .map(|v| {
                let clean = v.tanh();
                if noise > 0.0 {
                    clean + noise * rng.normal()
                } else {
                    clean
                }
            })
            .collect()
    }

    /// `(tanh(A·z), tanh(V·z), tanh(Q·z[..m/2]))` plus i.i.d. noise.
    pub fn render_modalities(&self, scene: &SceneLatent, rng: &mut Rng) -> Result<(FeatureVec, crate::feature::VisualFeatureMap, FeatureVec)> {
        let d = self.config.dims;
        let audio = self.render(&self.audio_map, &scene.z, rng);
        let visual = self.render(&self.visual_map, &scene.z, rng);
        let text = self.render(&self.text_map, &scene.z[..text_block(self.config.m)], rng);
        Ok((
            FeatureVec::new(audio)?,
            unflatten_visual(visual, d.w, d.h, d.c)?,
            FeatureVec::new(text)?,
        ))
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<TrimodalSample> {
        let scene = self.gen_scene(rng);
        let (audio, visual, text) = self.render_modalities(&scene, rng)?;
        Ok(TrimodalSample {
            audio,
            visual,
            text,
            label: scene.label,
            mask: ModalityMask::COMPLETE,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

/// Generated samples, stored train, then val, then test.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub dims: Dims,
    pub seed: u64,
    pub samples: Vec<TrimodalSample>,
}

/// 70/10/20 split sizes.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

pub const MIN_DATASET: usize = 10;

/// `n` samples with a 70/10/20 train/val/test split, deterministic in the seed.
pub fn make_dataset(n: usize, config: &WorldConfig) -> Result<Dataset> {
    if n < MIN_DATASET {
        return Err(Error::InvalidArgument(format!(
            "dataset needs at least {MIN_DATASET} samples, got {n}"
        )));
    }
    let world = World::new(config.clone())?;
    let mut rng = Rng::new(config.seed);
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let samples = par::map(&seeds, |&s| world.sample(&mut Rng::new(s)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        m: config.m,
        dims: config.dims,
        seed: config.seed,
        samples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TrimodalSample] {
        let (tr, va, _) = split_sizes(self.samples.len());
        match split {
            Split::Train => &self.samples[..tr],
            Split::Val => &self.samples[tr..tr + va],
            Split::Test => &self.samples[tr + va..],
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let seed = u32::try_from(self.seed)
            .map_err(|_| Error::InvalidArgument("dataset seed must fit in 32 bits for serialization".into()))?;
        w.write_all(DATASET_MAGIC)?;
        let header = [
            self.m,
            self.dims.c,
            self.dims.w,
            self.dims.h,
            self.dims.k,
            self.samples.len(),
        ];
        for v in header {
            let v = u32::try_from(v).map_err(|_| Error::InvalidArgument("header value exceeds u32".into()))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&seed.to_le_bytes())?;
        let mut buf = Vec::new();
        for s in &self.samples {
            buf.clear();
            for v in s.audio.as_slice().iter().chain(s.visual.as_flat()).chain(s.text.as_slice()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(s.label as u32).to_le_bytes());
            buf.push(s.mask.to_byte());
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "dataset magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a TMW1 dataset".into()));
        }
        let mut header = [0u32; 7];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "dataset header")?;
            *h = u32::from_le_bytes(b);
        }
        let [m, c, w, h, k, count, seed] = header.map(|v| v as usize);
        let dims = Dims::new(c, w, h, k).map_err(|e| Error::Format(e.to_string()))?;
        let row = dims.c * 2 + dims.visual_len();
        let mut samples = Vec::with_capacity(count);
        let mut buf = vec![0u8; row * 8 + 5];
        for _ in 0..count {
            read_exact(&mut r, &mut buf, "dataset sample")?;
            let vals: Vec<f64> = buf[..row * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let label = u32::from_le_bytes(buf[row * 8..row * 8 + 4].try_into().unwrap()) as usize;
            let mask = ModalityMask::from_byte(buf[row * 8 + 4])?;
            let (audio, rest) = vals.split_at(dims.c);
            let (visual, text) = rest.split_at(dims.visual_len());
            let sample = TrimodalSample {
                audio: FeatureVec::new(audio.to_vec())?,
                visual: unflatten_visual(visual.to_vec(), w, h, c)?,
                text: FeatureVec::new(text.to_vec())?,
                label,
                mask,
            };
            sample.validate(&dims).map_err(|e| Error::Format(e.to_string()))?;
            samples.push(sample);
        }
        Ok(Self {
            m,
            dims,
            seed: seed as u64,
            samples,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

/// Which modality an evaluation scenario removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    AudioMissing,
    VisualMissing,
    Complete,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::AudioMissing => "audio-missing",
            Scenario::VisualMissing => "visual-missing",
            Scenario::Complete => "none",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio-missing" => Ok(Scenario::AudioMissing),
            "visual-missing" => Ok(Scenario::VisualMissing),
            "none" | "complete" => Ok(Scenario::Complete),
            _ => Err(Error::InvalidArgument(format!("unknown scenario '{s}'"))),
        }
    }
}

/// With probability `ratio`, clears the scenario's mask bit. One uniform draw
/// is consumed per call regardless of `ratio`.
pub fn apply_missing(sample: &TrimodalSample, scenario: Scenario, ratio: f64, rng: &mut Rng) -> Result<TrimodalSample> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("missing ratio {ratio} outside [0, 1]")));
    }
    let u = rng.uniform();
    let mut out = sample.clone();
    if u < ratio {
        out.mask = match scenario {
            Scenario::AudioMissing => ModalityMask::AUDIO_MISSING,
            Scenario::VisualMissing => ModalityMask::VISUAL_MISSING,
            Scenario::Complete => sample.mask,
        };
    }
    Ok(out)
}
