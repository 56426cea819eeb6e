//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MAVQ1`, `u32` version, `u32` section
//! count, then sections. Each section is a `u32` name length, the name, a
//! kind byte, and either a tensor (`u32` rows, `u32` cols, `f64` values) or
//! UTF-8 text (`u64` length, bytes). The whole file is parsed before any
//! state is built, so a bad file never yields a partial checkpoint.

use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature::{Rng, RngState};
use crate::model::Models;
use crate::train::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MAVQ1";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub models: Models,
    pub adam: AdamState,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug)]
enum Body {
    Tensor { rows: usize, cols: usize, data: Vec<f64> },
    Text(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn name(&mut self, name: &str, kind: u8) {
        self.0.extend((name.len() as u32).to_le_bytes());
        self.0.extend(name.as_bytes());
        self.0.push(kind);
    }

    fn tensor(&mut self, name: &str, shape: [usize; 2], data: &[f64]) {
        self.name(name, KIND_TENSOR);
        self.0.extend((shape[0] as u32).to_le_bytes());
        self.0.extend((shape[1] as u32).to_le_bytes());
        for v in data {
            self.0.extend(v.to_le_bytes());
        }
    }

    fn text(&mut self, name: &str, text: &str) {
        self.name(name, KIND_TEXT);
        self.0.extend((text.len() as u64).to_le_bytes());
        self.0.extend(text.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Format("odd-length hex".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Format("bad hex".into())))
        .collect()
}

fn meta_get<'m>(meta: &'m [(String, String)], key: &str) -> Result<&'m str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("checkpoint meta lacks '{key}'")))
}

fn meta_num<T: std::str::FromStr>(meta: &[(String, String)], key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint meta '{key}' is malformed")))
}

impl Checkpoint {
    /// Snapshot of a trainer. `config.train` is replaced by the trainer's own.
    pub fn from_trainer(trainer: &Trainer, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.train = trainer.config.clone();
        Self {
            config,
            models: trainer.models.clone(),
            adam: trainer.adam.clone(),
            rng: trainer.rng.state(),
            epoch: trainer.epoch,
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::from_parts(self.config.train, self.models, Some(self.adam), Rng::from_state(self.rng), self.epoch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.adam.config;
        let meta = format!(
            "epoch = {}\nadam_step = {}\nadam_lr = {:?}\nadam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\nrng_key = {}\nrng_stream = {}\nrng_word_pos = {}\n",
            self.epoch,
            self.adam.step,
            a.lr,
            a.beta1,
            a.beta2,
            a.eps,
            hex(&self.rng.key),
            self.rng.stream,
            self.rng.word_pos,
        );
        let tensors = self.models.tensors();
        let mut w = Writer(Vec::new());
        w.0.extend(CHECKPOINT_MAGIC);
        w.0.extend(CHECKPOINT_VERSION.to_le_bytes());
        w.0.extend((2 + 3 * tensors.len() as u32).to_le_bytes());
        w.text("meta", &meta);
        w.text("config", &self.config.to_text());
        for t in &tensors {
            w.tensor(&format!("param.{}", t.full_name()), t.shape, t.data);
        }
        for (i, t) in tensors.iter().enumerate() {
            w.tensor(&format!("adam.m.{}", t.full_name()), t.shape, &self.adam.m[i]);
            w.tensor(&format!("adam.v.{}", t.full_name()), t.shape, &self.adam.v[i]);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(5, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("section count")? as usize;
        let mut sections: Vec<(String, Body)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32("section name")? as usize;
            let name = std::str::from_utf8(r.take(len, "section name")?)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?
                .to_string();
            let body = match r.take(1, "section kind")?[0] {
                KIND_TENSOR => {
                    let rows = r.u32("tensor shape")? as usize;
                    let cols = r.u32("tensor shape")? as usize;
                    let n = rows
                        .checked_mul(cols)
                        .and_then(|n| n.checked_mul(8))
                        .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
                    let raw = r.take(n, "tensor data")?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Body::Tensor { rows, cols, data }
                }
                KIND_TEXT => {
                    let len = r.u64("text length")? as usize;
                    let raw = r.take(len, "text section")?;
                    Body::Text(
                        std::str::from_utf8(raw)
                            .map_err(|_| Error::Format(format!("section {name} is not UTF-8")))?
                            .to_string(),
                    )
                }
                k => return Err(Error::Format(format!("unknown section kind {k}"))),
            };
            sections.push((name, body));
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }

        let text = |name: &str| -> Result<&str> {
            match sections.iter().find(|(n, _)| n == name) {
                Some((_, Body::Text(t))) => Ok(t.as_str()),
                _ => Err(Error::Format(format!("missing text section '{name}'"))),
            }
        };
        let meta = crate::config::parse_pairs(text("meta")?)?;
        let config = RunConfig::from_text(text("config")?)?;
        let key: [u8; 32] = unhex(meta_get(&meta, "rng_key")?)?
            .try_into()
            .map_err(|_| Error::Format("rng key must be 32 bytes".into()))?;
        let rng = RngState {
            key,
            stream: meta_num(&meta, "rng_stream")?,
            word_pos: meta_num(&meta, "rng_word_pos")?,
        };
        let adam_config = AdamConfig {
            lr: meta_num(&meta, "adam_lr")?,
            beta1: meta_num(&meta, "adam_beta1")?,
            beta2: meta_num(&meta, "adam_beta2")?,
            eps: meta_num(&meta, "adam_eps")?,
        };

        // Shapes come from the config; values from the sections.
        let mut models = Models::init(config.world.dims, config.train.shape, &mut Rng::new(0))?;
        let expected: Vec<(String, [usize; 2])> = models.tensors().iter().map(|t| (t.full_name(), t.shape)).collect();
        let tensor = |name: &str, shape: [usize; 2]| -> Result<&Vec<f64>> {
            match sections.iter().find(|(n, _)| n == name) {
                Some((_, Body::Tensor { rows, cols, data })) if [*rows, *cols] == shape => Ok(data),
                Some((_, Body::Tensor { rows, cols, .. })) => Err(Error::Format(format!(
                    "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                    shape[0], shape[1]
                ))),
                _ => Err(Error::Format(format!("missing tensor section '{name}'"))),
            }
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for ((name, shape), dst) in expected.iter().zip(models.tensors_mut()) {
            dst.copy_from_slice(tensor(&format!("param.{name}"), *shape)?);
            m.push(tensor(&format!("adam.m.{name}"), *shape)?.clone());
            v.push(tensor(&format!("adam.v.{name}"), *shape)?.clone());
        }
        if sections.len() != 2 + 3 * expected.len() {
            return Err(Error::Format("unexpected extra sections".into()));
        }
        Ok(Self {
            config,
            models,
            adam: AdamState {
                config: adam_config,
                m,
                v,
                step: meta_num(&meta, "adam_step")?,
            },
            rng,
            epoch: meta_num(&meta, "epoch")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
