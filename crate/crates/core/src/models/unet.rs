//! UNet point detector: a contraction path down to a 1x1 bottleneck, a
//! mirrored expansion path with skip concatenations, a 1x1-conv sigmoid head
//! emitting the probability map, and a scalar count-regression head fed by
//! the bottleneck vector and the pooled probability map.

use super::{Arch, Binding, Builder, ConvBn, Layout, Mode, Model, BN_EPS, BN_MOMENTUM};
use crate::diff::{ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::softplus_count;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// UNet shape configuration. `contraction_channels` is the paper-scale base
/// list; the first `log2(input_size)` entries are used, scaled by
/// `width_scale`. Expansion channels default to mirroring the contraction
/// list (which reproduces the published expansion widths and appends the
/// extra stages needed to return to full resolution).
#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Square input edge; must be a power of two (paper scale 256, desk 64).
    pub input_size: usize,
    pub contraction_channels: Vec<usize>,
    /// Explicit per-stage expansion widths (already scaled); empty = mirror rule.
    pub expansion_channels: Vec<usize>,
    /// Width multiplier as a rational (numerator, denominator).
    pub width_scale: (u32, u32),
}

pub const PAPER_CONTRACTION: [usize; 8] = [64, 128, 256, 512, 512, 512, 512, 512];

impl UNetConfig {
    pub fn paper() -> Self {
        UNetConfig {
            input_size: 256,
            contraction_channels: PAPER_CONTRACTION.to_vec(),
            expansion_channels: Vec::new(),
            width_scale: (1, 1),
        }
    }

    /// Desk scale: 64-pixel inputs at 1/8 width.
    pub fn desk() -> Self {
        UNetConfig {
            input_size: 64,
            contraction_channels: PAPER_CONTRACTION.to_vec(),
            expansion_channels: Vec::new(),
            width_scale: (1, 8),
        }
    }

    pub fn stages(&self) -> Result<usize> {
        let s = self.input_size;
        if s < 4 || !s.is_power_of_two() {
            return Err(Error::invalid(format!(
                "unet input size must be a power of two >= 4, got {s}"
            )));
        }
        Ok(s.trailing_zeros() as usize)
    }

    fn scale(&self, c: usize) -> usize {
        let (num, den) = self.width_scale;
        ((c as u64 * num as u64 + den as u64 / 2) / den as u64).max(1) as usize
    }

    /// Scaled per-stage contraction widths C_1..C_n.
    pub fn scaled_contraction(&self) -> Result<Vec<usize>> {
        let n = self.stages()?;
        if self.contraction_channels.len() < n {
            return Err(Error::invalid(format!(
                "contraction channel list has {} entries, input size {} needs {}",
                self.contraction_channels.len(),
                self.input_size,
                n
            )));
        }
        if self.width_scale.0 == 0 || self.width_scale.1 == 0 {
            return Err(Error::invalid("width scale must be a positive rational"));
        }
        Ok(self.contraction_channels[..n]
            .iter()
            .map(|&c| self.scale(c))
            .collect())
    }

    /// Scaled per-stage expansion widths E_1..E_n: explicit if given, else
    /// the mirror rule E_j = C_{max(n-j, 1)}.
    pub fn scaled_expansion(&self) -> Result<Vec<usize>> {
        let n = self.stages()?;
        if !self.expansion_channels.is_empty() {
            if self.expansion_channels.len() != n {
                return Err(Error::invalid(format!(
                    "expansion channel list has {} entries, input size {} needs {}",
                    self.expansion_channels.len(),
                    self.input_size,
                    n
                )));
            }
            return Ok(self.expansion_channels.clone());
        }
        let c = self.scaled_contraction()?;
        Ok((1..=n).map(|j| c[n.saturating_sub(j).max(1) - 1]).collect())
    }

    /// Per-stage (resolution, channels) plan, plus the channel count entering
    /// the final 1x1 conv. Useful for shape assertions without building.
    pub fn plan(&self) -> Result<UnetPlan> {
        let n = self.stages()?;
        let c = self.scaled_contraction()?;
        let e = self.scaled_expansion()?;
        let mut enc = Vec::new();
        for (i, &ci) in c.iter().enumerate() {
            enc.push((self.input_size >> i, ci));
        }
        let mut dec = Vec::new();
        let mut carry = c[n - 1];
        for j in 1..=n {
            let res = 1usize << j;
            let skip = c[n - j];
            dec.push(DecStage {
                resolution: res,
                conv_in: carry,
                conv_out: e[j - 1],
                after_concat: e[j - 1] + skip,
            });
            carry = e[j - 1] + skip;
        }
        Ok(UnetPlan {
            stages: n,
            bottleneck_channels: c[n - 1],
            enc,
            dec,
            final_channels: carry,
        })
    }

    pub fn to_descriptor(&self) -> String {
        let chans: Vec<String> = self.contraction_channels.iter().map(|c| c.to_string()).collect();
        let mut s = format!(
            "kind=unet\ninput-size={}\nwidth-scale={}/{}\ncontraction-channels={}\n",
            self.input_size,
            self.width_scale.0,
            self.width_scale.1,
            chans.join(",")
        );
        if !self.expansion_channels.is_empty() {
            let e: Vec<String> = self.expansion_channels.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("expansion-channels={}\n", e.join(",")));
        }
        s
    }

    pub fn from_descriptor(text: &str) -> Result<UNetConfig> {
        let mut cfg = UNetConfig::paper();
        cfg.expansion_channels = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad descriptor line: {line}")))?;
            match k {
                "kind" => {}
                "input-size" => {
                    cfg.input_size = v
                        .parse()
                        .map_err(|_| Error::format(format!("bad input-size {v}")))?
                }
                "width-scale" => {
                    let (n, d) = v
                        .split_once('/')
                        .ok_or_else(|| Error::format(format!("bad width-scale {v}")))?;
                    cfg.width_scale = (
                        n.parse().map_err(|_| Error::format("bad width-scale"))?,
                        d.parse().map_err(|_| Error::format("bad width-scale"))?,
                    );
                }
                "contraction-channels" => {
                    cfg.contraction_channels = parse_channel_list(v)?;
                }
                "expansion-channels" => {
                    cfg.expansion_channels = parse_channel_list(v)?;
                }
                other => return Err(Error::format(format!("unknown descriptor key {other}"))),
            }
        }
        Ok(cfg)
    }
}

pub(crate) fn parse_channel_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::format(format!("bad channel value {p}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecStage {
    pub resolution: usize,
    pub conv_in: usize,
    pub conv_out: usize,
    pub after_concat: usize,
}

#[derive(Clone, Debug)]
pub struct UnetPlan {
    pub stages: usize,
    pub bottleneck_channels: usize,
    /// (resolution, channels) of each pre-pool contraction feature map.
    pub enc: Vec<(usize, usize)>,
    pub dec: Vec<DecStage>,
    /// Channel count entering the final 1x1 conv.
    pub final_channels: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct UnetLayout {
    pub enc: Vec<ConvBn>,
    pub dec: Vec<ConvBn>,
    pub head_w: usize,
    pub head_b: usize,
    pub count_w: usize,
    pub count_b: usize,
}

pub(crate) fn build<E: Scalar>(config: &UNetConfig, seed: u64) -> Result<Model<E>> {
    let plan = config.plan()?;
    let n = plan.stages;
    let mut b = Builder::<E>::new(seed);

    let mut enc = Vec::with_capacity(n);
    let mut in_ch = 3usize;
    for (i, &(_res, ch)) in plan.enc.iter().enumerate() {
        enc.push(b.conv_bn(&format!("enc{}", i + 1), ch, in_ch));
        in_ch = ch;
    }
    let mut dec = Vec::with_capacity(n);
    for (j, stage) in plan.dec.iter().enumerate() {
        dec.push(b.conv_bn(&format!("dec{}", j + 1), stage.conv_out, stage.conv_in));
    }
    let (head_w, head_b) = b.conv("head.conv", 1, plan.final_channels, 1, 1);
    let (count_w, count_b) = b.fc("count.fc", plan.bottleneck_channels + 2, 1);

    let layout = UnetLayout {
        enc,
        dec,
        head_w,
        head_b,
        count_w,
        count_b,
    };
    Ok(Model::new_with(Arch::Unet(config.clone()), b, Layout::Unet(layout)))
}

impl<E: Scalar> Model<E> {
    pub(crate) fn unet_layout(&self) -> Result<&UnetLayout> {
        match &self.layout {
            Layout::Unet(l) => Ok(l),
            _ => Err(Error::invalid(format!(
                "model is a {}, not a unet",
                self.arch.kind_name()
            ))),
        }
    }
}

/// Output of a UNet forward pass.
pub struct UnetOutput<E: Scalar> {
    /// Post-sigmoid probability map [N,1,S,S].
    pub probmap: Var<E>,
    /// Raw count-regression signal [N].
    pub count_signal: Var<E>,
    /// SoftPlus-rectified count estimates, one per image.
    pub count_estimates: Vec<f64>,
}

pub(crate) fn forward<E: Scalar>(
    model: &mut Model<E>,
    tape: &Tape<E>,
    binding: &Binding<E>,
    images: &Tensor<E>,
) -> Result<UnetOutput<E>> {
    let config = match &model.arch {
        Arch::Unet(c) => c.clone(),
        _ => {
            return Err(Error::invalid(format!(
                "model is a {}, not a unet",
                model.arch.kind_name()
            )))
        }
    };
    let plan = config.plan()?;
    let s = config.input_size;
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(Error::shape(format!(
            "unet expects images [N,3,{s},{s}], got {:?}",
            shape
        )));
    }
    for &v in images.data() {
        let v = v.to_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("image value {v} outside [0,1]")));
        }
    }
    let train = model.mode() == Mode::Train;
    let layout = model.unet_layout()?.clone();
    let n_stages = plan.stages;

    let mut cur = tape.constant(images.clone());
    let mut skips: Vec<Var<E>> = Vec::with_capacity(n_stages);
    for blk in &layout.enc {
        cur = cur.conv2d(binding.var(blk.w), 1, 1)?.add_bias(binding.var(blk.b))?;
        cur = cur.batchnorm2d(
            binding.var(blk.gamma),
            binding.var(blk.beta),
            &mut model.bn[blk.bn],
            train,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        cur = cur.relu();
        skips.push(cur.clone());
        cur = cur.maxpool2()?;
    }
    let bottleneck = cur.clone(); // [N, C_n, 1, 1]

    for (j, blk) in layout.dec.iter().enumerate() {
        cur = cur.upsample_nearest(2)?;
        cur = cur.conv2d(binding.var(blk.w), 1, 1)?.add_bias(binding.var(blk.b))?;
        cur = cur.batchnorm2d(
            binding.var(blk.gamma),
            binding.var(blk.beta),
            &mut model.bn[blk.bn],
            train,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        cur = cur.relu();
        cur = cur.concat_channels(&skips[n_stages - 1 - j])?;
    }

    let probmap = cur
        .conv2d(binding.var(layout.head_w), 1, 0)?
        .add_bias(binding.var(layout.head_b))?
        .sigmoid();

    // Count head: bottleneck vector plus pooled probability map (sum and
    // global average) through one fully-connected layer.
    let batch = shape[0];
    let bottleneck_flat = bottleneck.reshape(&[batch, plan.bottleneck_channels])?;
    let pm_sum = probmap.reduce(ReduceKind::Sum, &[1, 2, 3])?.reshape(&[batch, 1])?;
    let pm_avg = probmap.reduce(ReduceKind::Mean, &[1, 2, 3])?.reshape(&[batch, 1])?;
    let feat = bottleneck_flat
        .concat_channels(&pm_sum)?
        .concat_channels(&pm_avg)?;
    let count_signal = feat
        .linear(binding.var(layout.count_w), binding.var(layout.count_b))?
        .reshape(&[batch])?;
    let count_estimates = count_signal
        .value()
        .to_f64_vec()
        .into_iter()
        .map(softplus_count)
        .collect();

    Ok(UnetOutput {
        probmap,
        count_signal,
        count_estimates,
    })
}
