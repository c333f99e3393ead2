//! The three trainable architectures: the UNet point detector with
//! probability-map and count heads, and the Network-I / Network-II patch
//! classifiers, each buildable at paper scale and at a reduced desk scale.

mod rcnn;
mod unet;

pub use rcnn::{RcnnNetConfig, RcnnVariant};
pub use unet::{UNetConfig, UnetOutput};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{BnRunning, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<E: Scalar> {
    pub name: String,
    pub tensor: Tensor<E>,
}

/// Named trainable parameters in deterministic creation order (checkpoint
/// stability depends on this order).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Scalar> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> usize {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, tensor });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<E> {
        &self.entries[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<E> {
        &mut self.entries[idx].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// Architecture descriptor, serialized as a plain-text key-value block so a
/// checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    Unet(UNetConfig),
    Rcnn(RcnnNetConfig),
}

impl Arch {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Arch::Unet(_) => "unet",
            Arch::Rcnn(c) => match c.variant {
                RcnnVariant::Network1 => "network1",
                RcnnVariant::Network2 => "network2",
            },
        }
    }

    pub fn to_descriptor(&self) -> String {
        match self {
            Arch::Unet(c) => c.to_descriptor(),
            Arch::Rcnn(c) => c.to_descriptor(),
        }
    }

    pub fn from_descriptor(text: &str) -> Result<Arch> {
        let mut kind = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("kind=") {
                kind = Some(v.to_string());
            }
        }
        match kind.as_deref() {
            Some("unet") => Ok(Arch::Unet(UNetConfig::from_descriptor(text)?)),
            Some("network1") | Some("network2") => {
                Ok(Arch::Rcnn(RcnnNetConfig::from_descriptor(text)?))
            }
            Some(other) => Err(Error::format(format!("unknown architecture kind {other}"))),
            None => Err(Error::format("descriptor missing kind=")),
        }
    }
}

/// Conv + batchnorm block wiring: parameter indices plus the batch-norm
/// buffer index.
#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    pub w: usize,
    pub b: usize,
    pub gamma: usize,
    pub beta: usize,
    pub bn: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Layout {
    Unet(unet::UnetLayout),
    Rcnn(rcnn::RcnnLayout),
}

/// A parameterized forward function with named parameters, batch-norm
/// running statistics, and a train/eval mode switch.
#[derive(Clone)]
pub struct Model<E: Scalar> {
    pub arch: Arch,
    pub(crate) store: ParamStore<E>,
    pub(crate) bn: Vec<BnRunning<E>>,
    pub(crate) bn_names: Vec<String>,
    pub(crate) layout: Layout,
    mode: Mode,
}

/// Tape leaves for every parameter of a model, in store order.
pub struct Binding<E: Scalar> {
    pub vars: Vec<Var<E>>,
}

impl<E: Scalar> Binding<E> {
    pub fn var(&self, idx: usize) -> &Var<E> {
        &self.vars[idx]
    }
}

/// He-style fan-in-scaled uniform initializer.
pub(crate) fn he_uniform<E: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<E> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

pub(crate) struct Builder<E: Scalar> {
    pub store: ParamStore<E>,
    pub bn: Vec<BnRunning<E>>,
    pub bn_names: Vec<String>,
    pub rng: ChaCha8Rng,
}

impl<E: Scalar> Builder<E> {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            bn: Vec::new(),
            bn_names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// 3x3 (or any) conv parameters: He weights, zero bias.
    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> (usize, usize) {
        let w = he_uniform(&mut self.rng, &[out_ch, in_ch, kh, kw], in_ch * kh * kw);
        let wi = self.store.add(format!("{prefix}.weight"), w);
        let bi = self
            .store
            .add(format!("{prefix}.bias"), Tensor::zeros(&[out_ch]));
        (wi, bi)
    }

    /// Batch-norm parameters: gamma 1, beta 0, fresh running stats.
    pub fn bn(&mut self, prefix: &str, channels: usize) -> (usize, usize, usize) {
        let gi = self
            .store
            .add(format!("{prefix}.gamma"), Tensor::full(&[channels], E::one()));
        let bi = self
            .store
            .add(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.bn.push(BnRunning::new(channels));
        self.bn_names.push(prefix.to_string());
        (gi, bi, self.bn.len() - 1)
    }

    pub fn conv_bn(&mut self, prefix: &str, out_ch: usize, in_ch: usize) -> ConvBn {
        let (w, b) = self.conv(&format!("{prefix}.conv"), out_ch, in_ch, 3, 3);
        let (gamma, beta, bn) = self.bn(&format!("{prefix}.bn"), out_ch);
        ConvBn {
            w,
            b,
            gamma,
            beta,
            bn,
        }
    }

    /// Fully-connected parameters: He weights, zero bias.
    pub fn fc(&mut self, prefix: &str, f_in: usize, f_out: usize) -> (usize, usize) {
        let w = he_uniform(&mut self.rng, &[f_in, f_out], f_in);
        let wi = self.store.add(format!("{prefix}.weight"), w);
        let bi = self
            .store
            .add(format!("{prefix}.bias"), Tensor::zeros(&[f_out]));
        (wi, bi)
    }
}

impl<E: Scalar> Model<E> {
    /// Build the UNet point detector.
    pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<Self> {
        unet::build(config, seed)
    }

    /// Build Network-I or Network-II.
    pub fn build_rcnn_net(config: &RcnnNetConfig, seed: u64) -> Result<Self> {
        rcnn::build(config, seed)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub(crate) fn new_with(arch: Arch, b: Builder<E>, layout: Layout) -> Self {
        Model {
            arch,
            store: b.store,
            bn: b.bn,
            bn_names: b.bn_names,
            layout,
            mode: Mode::Train,
        }
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    pub fn bn_buffers(&self) -> impl Iterator<Item = (&str, &BnRunning<E>)> {
        self.bn_names
            .iter()
            .map(|s| s.as_str())
            .zip(self.bn.iter())
    }

    pub fn bn_buffer_mut(&mut self, name: &str) -> Option<&mut BnRunning<E>> {
        let idx = self.bn_names.iter().position(|n| n == name)?;
        Some(&mut self.bn[idx])
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Create tape leaves for every parameter, in store order.
    pub fn bind(&self, tape: &Tape<E>, for_training: bool) -> Binding<E> {
        Binding {
            vars: self
                .store
                .entries
                .iter()
                .map(|e| tape.leaf(e.tensor.clone(), for_training))
                .collect(),
        }
    }

    /// UNet forward pass; errors when the model is a patch classifier.
    pub fn unet_forward(
        &mut self,
        tape: &Tape<E>,
        binding: &Binding<E>,
        images: &Tensor<E>,
    ) -> Result<UnetOutput<E>> {
        unet::forward(self, tape, binding, images)
    }

    /// Classifier forward pass returning logits [N, class_count]; errors
    /// when the model is a UNet.
    pub fn classifier_forward(
        &mut self,
        tape: &Tape<E>,
        binding: &Binding<E>,
        patches: &Tensor<E>,
    ) -> Result<Var<E>> {
        rcnn::forward(self, tape, binding, patches)
    }

    /// Class probabilities [N, class_count] on a private tape (no grads).
    pub fn classify_patches(&mut self, patches: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::new();
        let binding = self.bind(&tape, false);
        let logits = self.classifier_forward(&tape, &binding, patches)?;
        Ok(logits.softmax_logits()?.value())
    }
}

#[cfg(test)]
mod tests;
