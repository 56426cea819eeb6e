//! The three jointly trained parameter sets and a flat view over their tensors.

use crate::diffusion::EpsNet;
use crate::error::Result;
use crate::feature::{Dims, Rng};
use crate::nn::Linear;
use crate::qa_head::QaHead;
use crate::rmm::SlotBank;

/// Parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    SlotBank,
    EpsNet,
    QaHead,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::SlotBank, Group::EpsNet, Group::QaHead];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::SlotBank => "slot_bank",
            Group::EpsNet => "eps_net",
            Group::QaHead => "qa_head",
        }
    }
}

/// Architecture sizes that are not implied by [`Dims`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub slots: usize,
    pub eps_hidden: usize,
    pub head_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            slots: 75,
            eps_hidden: 256,
            head_hidden: crate::qa_head::DEFAULT_HIDDEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub bank: SlotBank,
    pub net: EpsNet,
    pub head: QaHead,
}

/// Read-only view of one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub index: Option<usize>,
    pub group: Group,
    pub shape: [usize; 2],
    pub data: &'a [f64],
}

impl TensorRef<'_> {
    pub fn full_name(&self) -> String {
        match self.index {
            Some(i) => format!("{}.{i}", self.name),
            None => self.name.to_string(),
        }
    }
}

fn linear_refs<'a>(out: &mut Vec<TensorRef<'a>>, group: Group, wname: &'static str, bname: &'static str, idx: Option<usize>, l: &'a Linear) {
    out.push(TensorRef {
        name: wname,
        index: idx,
        group,
        shape: [l.weight.nrows(), l.weight.ncols()],
        data: l.weight.as_slice().expect("standard layout"),
    });
    out.push(TensorRef {
        name: bname,
        index: idx,
        group,
        shape: [1, l.bias.len()],
        data: l.bias.as_slice().expect("standard layout"),
    });
}

fn linear_muts<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
    out.push(l.weight.as_slice_mut().expect("standard layout"));
    out.push(l.bias.as_slice_mut().expect("standard layout"));
}

impl Models {
    pub fn init(dims: Dims, shape: ModelShape, rng: &mut Rng) -> Result<Self> {
        let bank = SlotBank::init(shape.slots, dims, rng)?;
        let net = EpsNet::init(dims.combined_len(), shape.eps_hidden, rng);
        let head = QaHead::init(&dims, shape.head_hidden, rng);
        Ok(Self { bank, net, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bank: self.bank.zeros_like(),
            net: self.net.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.bank.dims()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            slots: self.bank.slots(),
            eps_hidden: self.net.hidden(),
            head_hidden: self.head.hidden_width(),
        }
    }

    /// Every tensor in a fixed order shared with [`Models::tensors_mut`].
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (name, m) in [("bank.gv", &self.bank.gv), ("bank.ga", &self.bank.ga), ("bank.gt", &self.bank.gt)] {
            out.push(TensorRef {
                name,
                index: None,
                group: Group::SlotBank,
                shape: [m.nrows(), m.ncols()],
                data: m.as_slice().expect("standard layout"),
            });
        }
        for (i, l) in self.net.mlp.layers.iter().enumerate() {
            linear_refs(&mut out, Group::EpsNet, "net.w", "net.b", Some(i), l);
        }
        let h = &self.head;
        linear_refs(&mut out, Group::QaHead, "head.audio.w", "head.audio.b", None, &h.audio);
        linear_refs(&mut out, Group::QaHead, "head.visual.w", "head.visual.b", None, &h.visual);
        linear_refs(&mut out, Group::QaHead, "head.text.w", "head.text.b", None, &h.text);
        linear_refs(&mut out, Group::QaHead, "head.hidden.w", "head.hidden.b", None, &h.hidden);
        linear_refs(&mut out, Group::QaHead, "head.output.w", "head.output.b", None, &h.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for m in [&mut self.bank.gv, &mut self.bank.ga, &mut self.bank.gt] {
            out.push(m.as_slice_mut().expect("standard layout"));
        }
        for l in self.net.mlp.layers.iter_mut() {
            linear_muts(&mut out, l);
        }
        let h = &mut self.head;
        for l in [&mut h.audio, &mut h.visual, &mut h.text, &mut h.hidden, &mut h.output] {
            linear_muts(&mut out, l);
        }
        out
    }

    pub fn groups(&self) -> Vec<Group> {
        self.tensors().iter().map(|t| t.group).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Adds `other` scaled by `k` in place.
    pub fn scaled_add(&mut self, k: f64, other: &Models) {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += k * v;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
