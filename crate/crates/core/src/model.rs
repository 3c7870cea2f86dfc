//! Layer weights, model snapshots and the toy convolutional classifier.
//!
//! A model is a stack of `valid`-padded, stride-1 convolutions (ReLU after
//! each), a global average pool, then one or more dense layers with ReLU
//! between them and raw logits at the end.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{gaussian_sample, streams, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LayerKind {
    Conv,
    Dense,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
        }
    }
}

/// One weight-bearing layer. Conv weights are `[out, in, k, k]`, dense
/// weights `[out, in]`; the bias is `[out]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerWeights {
    pub name: String,
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerWeights {
    pub fn new(name: impl Into<String>, kind: LayerKind, weights: Tensor, bias: Tensor) -> Result<Self> {
        let layer = Self {
            name: name.into(),
            kind,
            weights,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        match self.kind {
            LayerKind::Conv => {
                if s.len() != 4 {
                    return Err(Error::Shape(format!(
                        "conv layer `{}` weights must be rank 4, got {s:?}",
                        self.name
                    )));
                }
                if s[2] != s[3] {
                    return Err(Error::Shape(format!(
                        "conv layer `{}` kernel {}x{} is not square",
                        self.name, s[2], s[3]
                    )));
                }
            }
            LayerKind::Dense => {
                if s.len() != 2 {
                    return Err(Error::Shape(format!(
                        "dense layer `{}` weights must be rank 2, got {s:?}",
                        self.name
                    )));
                }
            }
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::Shape(format!(
                "layer `{}` bias shape {:?} does not match {} outputs",
                self.name,
                self.bias.shape(),
                s[0]
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv => Some(self.weights.shape()[2]),
            LayerKind::Dense => None,
        }
    }

    /// The weights of out-filter `j` (the `N_i x K x K` block for a conv).
    pub fn filter(&self, j: usize) -> &[f64] {
        self.weights.row(j)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// An ordered set of layers plus training metadata; the unit exchanged
/// between workers and written to disk.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSnapshot {
    pub layers: Vec<LayerWeights>,
    pub epoch: usize,
    pub worker_id: usize,
    pub tag: String,
}

impl ModelSnapshot {
    pub fn new(layers: Vec<LayerWeights>) -> Result<Self> {
        let m = Self {
            layers,
            epoch: 0,
            worker_id: 0,
            tag: String::new(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks per-layer shapes, unique names, layer ordering (convs before
    /// dense layers, at least one dense layer) and channel compatibility.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("model has no layers".into()));
        }
        let mut names = BTreeSet::new();
        let mut seen_dense = false;
        let mut prev_out: Option<usize> = None;
        for layer in &self.layers {
            layer.validate()?;
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Validation(format!("duplicate layer name `{}`", layer.name)));
            }
            match layer.kind {
                LayerKind::Conv if seen_dense => {
                    return Err(Error::Validation(format!(
                        "conv layer `{}` follows a dense layer",
                        layer.name
                    )))
                }
                LayerKind::Dense => seen_dense = true,
                LayerKind::Conv => {}
            }
            if let Some(p) = prev_out {
                if layer.in_channels() != p {
                    return Err(Error::Validation(format!(
                        "layer `{}` expects {} inputs but the previous layer has {p} outputs",
                        layer.name,
                        layer.in_channels()
                    )));
                }
            }
            prev_out = Some(layer.out_channels());
        }
        if !seen_dense {
            return Err(Error::Validation("model has no dense output layer".into()));
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerWeights> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv)
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerWeights::parameter_count).sum()
    }

    /// Largest elementwise difference over all weights and biases.
    pub fn max_abs_diff(&self, other: &ModelSnapshot) -> Result<f64> {
        check_compatible(self, other)?;
        let mut m = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            m = m.max(a.weights.max_abs_diff(&b.weights)?);
            m = m.max(a.bias.max_abs_diff(&b.bias)?);
        }
        Ok(m)
    }

    /// Bitwise equality of all parameters (metadata ignored).
    pub fn weights_bit_eq(&self, other: &ModelSnapshot) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.weights.bit_eq(&b.weights) && a.bias.bit_eq(&b.bias)
            })
    }
}

/// Two snapshots are architecture-compatible when layer count, names, kinds
/// and every shape agree. The error names the first mismatching layer.
pub fn check_compatible(a: &ModelSnapshot, b: &ModelSnapshot) -> Result<()> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::Graft(format!(
            "layer count differs: {} vs {}",
            a.layers.len(),
            b.layers.len()
        )));
    }
    for (i, (x, y)) in a.layers.iter().zip(&b.layers).enumerate() {
        if x.name != y.name || x.kind != y.kind || x.weights.shape() != y.weights.shape() || x.bias.shape() != y.bias.shape() {
            return Err(Error::Graft(format!(
                "layer {i} mismatch: `{}` {} {:?} vs `{}` {} {:?}",
                x.name,
                x.kind.as_str(),
                x.weights.shape(),
                y.name,
                y.kind.as_str(),
                y.weights.shape()
            )));
        }
    }
    Ok(())
}

pub fn architecture_compatible(a: &ModelSnapshot, b: &ModelSnapshot) -> bool {
    check_compatible(a, b).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Architecture description for [`build_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ArchSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvSpec>,
    pub class_count: usize,
}

impl Default for ArchSpec {
    /// conv 3x3x16 -> conv 3x3x32 -> global average pool -> dense, on 8x8x1 input
    /// with three classes.
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            conv: vec![
                ConvSpec {
                    out_channels: 16,
                    kernel: 3,
                },
                ConvSpec {
                    out_channels: 32,
                    kernel: 3,
                },
            ],
            class_count: 3,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv.len() < 2 {
            return Err(Error::config("arch.conv", "at least two conv layers are required"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("arch.input_channels", "must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("arch.class_count", "must be at least 2"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (i, c) in self.conv.iter().enumerate() {
            if c.out_channels == 0 {
                return Err(Error::config(format!("arch.conv[{i}].out_channels"), "must be positive"));
            }
            if c.kernel == 0 || c.kernel > h || c.kernel > w {
                return Err(Error::config(
                    format!("arch.conv[{i}].kernel"),
                    format!("kernel {} does not fit a {h}x{w} feature map", c.kernel),
                ));
            }
            h -= c.kernel - 1;
            w -= c.kernel - 1;
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_height, self.input_width]
    }

    /// Short human-readable description, e.g. `1x8x8 conv16k3 conv32k3 gap dense3`.
    pub fn describe(&self) -> String {
        let mut s = format!("{}x{}x{}", self.input_channels, self.input_height, self.input_width);
        for c in &self.conv {
            s.push_str(&format!(" conv{}k{}", c.out_channels, c.kernel));
        }
        s.push_str(&format!(" gap dense{}", self.class_count));
        s
    }
}

/// Builds a freshly initialised model. Weights are `N(0, 2 / fan_in)`, biases
/// zero; the draw order is layer by layer from one seeded stream.
pub fn build_model(arch: &ArchSpec, init_seed: u64) -> Result<ModelSnapshot> {
    arch.validate()?;
    let mut rng = Rng::with_stream(init_seed, streams::INIT);
    let mut layers = Vec::with_capacity(arch.conv.len() + 1);
    let mut in_ch = arch.input_channels;
    for (i, c) in arch.conv.iter().enumerate() {
        let fan_in = (in_ch * c.kernel * c.kernel) as f64;
        let weights = gaussian_sample(
            &mut rng,
            0.0,
            libm::sqrt(2.0 / fan_in),
            &[c.out_channels, in_ch, c.kernel, c.kernel],
        )?;
        let bias = Tensor::zeros(&[c.out_channels])?;
        layers.push(LayerWeights::new(format!("conv{}", i + 1), LayerKind::Conv, weights, bias)?);
        in_ch = c.out_channels;
    }
    let weights = gaussian_sample(&mut rng, 0.0, libm::sqrt(2.0 / in_ch as f64), &[arch.class_count, in_ch])?;
    let bias = Tensor::zeros(&[arch.class_count])?;
    layers.push(LayerWeights::new("fc", LayerKind::Dense, weights, bias)?);
    ModelSnapshot::new(layers)
}

/// Activations of one sample, kept for back-propagation.
pub(crate) struct Trace {
    /// Input to each conv layer, then the output of the last conv (post-ReLU).
    pub conv_acts: Vec<Vec<f64>>,
    /// `(channels, height, width)` of each entry in `conv_acts`.
    pub conv_dims: Vec<(usize, usize, usize)>,
    /// Input to each dense layer (the first is the pooled feature vector).
    pub dense_inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

fn conv_forward(input: &[f64], (c, h, w): (usize, usize, usize), layer: &LayerWeights) -> (Vec<f64>, (usize, usize, usize)) {
    let o = layer.out_channels();
    let k = layer.kernel().unwrap_or(1);
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let wt = layer.weights.data();
    let bias = layer.bias.data();
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(bias[oc]);
        for ic in 0..c {
            let inp = &input[ic * h * w..(ic + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = wt[((oc * c + ic) * k + ki) * k + kj];
                    for y in 0..oh {
                        let src = &inp[(y + ki) * w + kj..(y + ki) * w + kj + ow];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    (out, (o, oh, ow))
}

fn dense_forward(input: &[f64], layer: &LayerWeights) -> Vec<f64> {
    let n_in = layer.in_channels();
    let wt = layer.weights.data();
    layer
        .bias
        .data()
        .iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &wt[o * n_in..(o + 1) * n_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

pub(crate) fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub(crate) fn forward_sample(model: &ModelSnapshot, sample: &[f64], dims: (usize, usize, usize)) -> Trace {
    let mut conv_acts = vec![sample.to_vec()];
    let mut conv_dims = vec![dims];
    let mut dense_inputs: Vec<Vec<f64>> = Vec::new();
    let mut cur_dims = dims;
    let mut logits = Vec::new();
    let n_layers = model.layers.len();
    for (li, layer) in model.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Conv => {
                let (mut out, d) = conv_forward(conv_acts.last().unwrap(), cur_dims, layer);
                relu(&mut out);
                conv_acts.push(out);
                conv_dims.push(d);
                cur_dims = d;
            }
            LayerKind::Dense => {
                if dense_inputs.is_empty() {
                    let (c, h, w) = cur_dims;
                    let act = conv_acts.last().unwrap();
                    let hw = (h * w) as f64;
                    let pooled = (0..c).map(|ch| act[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / hw).collect();
                    dense_inputs.push(pooled);
                }
                let mut z = dense_forward(dense_inputs.last().unwrap(), layer);
                if li + 1 == n_layers {
                    logits = z;
                } else {
                    relu(&mut z);
                    dense_inputs.push(z);
                }
            }
        }
    }
    Trace {
        conv_acts,
        conv_dims,
        dense_inputs,
        logits,
    }
}

/// Checks that `batch` is `[n, c, h, w]` with `c` matching the model and that
/// every conv kernel fits; returns `(n, (c, h, w))`.
pub(crate) fn check_batch(model: &ModelSnapshot, batch: &Tensor) -> Result<(usize, (usize, usize, usize))> {
    model.validate()?;
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("batch must be [n, c, h, w], got {s:?}")));
    }
    if s[1] != model.input_channels() {
        return Err(Error::Shape(format!(
            "batch has {} channels, model expects {}",
            s[1],
            model.input_channels()
        )));
    }
    let (mut h, mut w) = (s[2], s[3]);
    for l in model.conv_layers() {
        let k = l.kernel().unwrap_or(1);
        if k > h || k > w {
            return Err(Error::Shape(format!(
                "layer `{}` kernel {k} does not fit a {h}x{w} feature map",
                l.name
            )));
        }
        h -= k - 1;
        w -= k - 1;
    }
    Ok((s[0], (s[1], s[2], s[3])))
}

/// Logits `[n, classes]` for a batch `[n, c, h, w]`.
pub fn forward(model: &ModelSnapshot, batch: &Tensor) -> Result<Tensor> {
    let (n, dims) = check_batch(model, batch)?;
    let classes = model.class_count();
    let mut out = Vec::with_capacity(n * classes);
    for i in 0..n {
        out.extend(forward_sample(model, batch.row(i), dims).logits);
    }
    Tensor::new(vec![n, classes], out).map_err(|_| Error::NonFinite("logits".into()))
}
