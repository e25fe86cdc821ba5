//! Network definition: parameters, encoder blocks, log-variance head and
//! the transformation decoder.

use rand::Rng;

use super::ModelError;
use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::tensor::{Scalar, Tensor};
use crate::transforms::TARGET_DIM;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Channel layout of the network. `widths[0..2]` are the encoder blocks,
/// `widths[2..4]` the decoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            in_channels: 3,
            widths: [64, 96, 96, 96],
        }
    }
}

impl Architecture {
    /// `C×h×w` of the representation for an `H×W` input (two stride-2 stages).
    pub fn latent_shape(&self, height: usize, width: usize) -> [usize; 3] {
        let down = |s: usize| (s - 1) / 2 + 1;
        [self.widths[1], down(down(height)), down(down(width))]
    }

    /// Length of the concatenated pooled decoder features.
    pub fn feature_dim(&self) -> usize {
        2 * self.widths[3]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(ModelError::Config(format!("zero channel count in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weights; subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    out_ch: usize,
    stride: usize,
    pad: usize,
    relu: bool,
}

/// Graph handles for an encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub mean: Var,
    pub logvar: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub arch: Architecture,
    pub params: Vec<Param<T>>,
    pub bn_names: Vec<String>,
    pub bn_stats: Vec<RunningStats<T>>,
    encoder: Vec<ConvLayer>,
    head: ConvLayer,
    decoder: Vec<ConvLayer>,
    dense_w: usize,
    dense_b: usize,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: He-normal weights, unit BN scale, zero shifts and biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut m = Model {
            arch,
            params: Vec::new(),
            bn_names: Vec::new(),
            bn_stats: Vec::new(),
            encoder: Vec::new(),
            head: ConvLayer {
                weight: 0,
                gamma: 0,
                beta: 0,
                bn: 0,
                out_ch: 0,
                stride: 1,
                pad: 0,
                relu: false,
            },
            decoder: Vec::new(),
            dense_w: 0,
            dense_b: 0,
        };
        let w = arch.widths;
        let mut enc = Vec::new();
        m.push_block(&mut enc, "enc.b1", arch.in_channels, w[0], 2, rng);
        m.push_block(&mut enc, "enc.b2", w[0], w[1], 2, rng);
        m.encoder = enc;
        m.head = m.push_conv("enc.logvar", w[1], w[1], 1, 1, 0, false, rng);
        let mut dec = Vec::new();
        m.push_block(&mut dec, "dec.b3", w[1], w[2], 1, rng);
        m.push_block(&mut dec, "dec.b4", w[2], w[3], 1, rng);
        m.decoder = dec;
        let fan_in = arch.feature_dim();
        m.dense_w = m.push_param(
            "dec.head.w",
            ParamKind::Weight,
            Tensor::randn([fan_in, 2 * TARGET_DIM], (2.0 / fan_in as f64).sqrt(), rng),
        );
        m.dense_b = m.push_param("dec.head.b", ParamKind::Bias, Tensor::zeros([2 * TARGET_DIM]));
        Ok(m)
    }

    fn push_param(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn push_conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
        rng: &mut R,
    ) -> ConvLayer {
        let fan_in = in_ch * kernel * kernel;
        let weight = self.push_param(
            &format!("{name}.w"),
            ParamKind::Weight,
            Tensor::randn([out_ch, in_ch, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng),
        );
        let gamma = self.push_param(&format!("{name}.bn.gamma"), ParamKind::Norm, Tensor::ones([out_ch]));
        let beta = self.push_param(&format!("{name}.bn.beta"), ParamKind::Norm, Tensor::zeros([out_ch]));
        self.bn_names.push(format!("{name}.bn"));
        self.bn_stats.push(RunningStats::new(out_ch));
        ConvLayer {
            weight,
            gamma,
            beta,
            bn: self.bn_stats.len() - 1,
            out_ch,
            stride,
            pad,
            relu,
        }
    }

    /// 3×3 conv (given stride) followed by two 1×1 convs, each with BN and ReLU.
    fn push_block<R: Rng + ?Sized>(
        &mut self,
        out: &mut Vec<ConvLayer>,
        name: &str,
        in_ch: usize,
        width: usize,
        stride: usize,
        rng: &mut R,
    ) {
        out.push(self.push_conv(&format!("{name}.c0"), in_ch, width, 3, stride, 1, true, rng));
        out.push(self.push_conv(&format!("{name}.c1"), width, width, 1, 1, 0, true, rng));
        out.push(self.push_conv(&format!("{name}.c2"), width, width, 1, 1, 0, true, rng));
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Registers every parameter as a differentiable leaf, in storage order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Registers every parameter as a constant (frozen evaluation).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    fn conv(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        bn: &mut [RunningStats<T>],
        layer: &ConvLayer,
        x: Var,
        mode: BnMode,
    ) -> Result<Var, ModelError> {
        let zero_bias = g.constant(Tensor::zeros([layer.out_ch]));
        let y = g.conv2d(x, p[layer.weight], zero_bias, layer.stride, layer.pad)?;
        let y = g.batch_norm2d(y, p[layer.gamma], p[layer.beta], mode, &mut bn[layer.bn])?;
        Ok(if layer.relu { g.relu(y) } else { y })
    }

    /// Mean map from the two encoder blocks and, when requested, the clamped
    /// log-variance map from the 1×1 head on the same features.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        bn: &mut [RunningStats<T>],
        images: Var,
        mode: BnMode,
        with_logvar: bool,
    ) -> Result<Encoded, ModelError> {
        let mut x = images;
        for layer in &self.encoder {
            x = self.conv(g, p, bn, layer, x, mode)?;
        }
        let logvar = if with_logvar {
            let h = self.conv(g, p, bn, &self.head, x, mode)?;
            Some(g.clamp(h, T::from_f64_lossy(LOGVAR_MIN), T::from_f64_lossy(LOGVAR_MAX)))
        } else {
            None
        };
        Ok(Encoded { mean: x, logvar })
    }

    /// Shared blocks 3–4 and global pooling on each representation, then
    /// the dense head on `[pool(z), pool(z̃)]`. Returns `(d, logvar)`, each N×8.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        bn: &mut [RunningStats<T>],
        z: Var,
        z_tilde: Var,
        mode: BnMode,
    ) -> Result<(Var, Var), ModelError> {
        let n = g.shape(z)[0];
        let mut x = g.concat_rows(z, z_tilde)?;
        for layer in &self.decoder {
            x = self.conv(g, p, bn, layer, x, mode)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let pz = g.slice_rows(pooled, 0, n)?;
        let pzt = g.slice_rows(pooled, n, n)?;
        let feat = g.concat(pz, pzt)?;
        let out = g.dense(feat, p[self.dense_w], p[self.dense_b])?;
        let d = g.slice_cols(out, 0, TARGET_DIM)?;
        let lv = g.slice_cols(out, TARGET_DIM, TARGET_DIM)?;
        let lv = g.clamp(lv, T::from_f64_lossy(LOGVAR_MIN), T::from_f64_lossy(LOGVAR_MAX));
        Ok((d, lv))
    }

    /// Frozen eval-mode encoder pass on a batch: `(mean, logvar)` tensors.
    pub fn encode_frozen(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let mut stats = self.bn_stats.clone();
        let x = g.constant(images.clone());
        let enc = self.encode(&mut g, &p, &mut stats, x, BnMode::Eval, true)?;
        let lv = enc.logvar.expect("requested");
        Ok((g.value(enc.mean).clone(), g.value(lv).clone()))
    }

    /// Converts all parameters and statistics to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            bn_names: self.bn_names.clone(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            encoder: self.encoder.clone(),
            head: self.head,
            decoder: self.decoder.clone(),
            dense_w: self.dense_w,
            dense_b: self.dense_b,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
            && self
                .bn_stats
                .iter()
                .all(|s| s.mean.iter().chain(&s.var).all(|v| v.is_finite()))
    }
}
