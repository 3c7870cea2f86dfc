//! SGD training of the toy classifier: learning-rate schedules, hand-written
//! back-propagation, one-epoch updates, and a finite-difference gradient check.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::model::{build_model, check_batch, forward_sample, ArchSpec, LayerKind, ModelSnapshot};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum LrSchedule {
    /// Multiply by `gamma` at each epoch listed in `milestones`.
    Step { gamma: f64, milestones: Vec<usize> },
    /// Cosine annealing from the initial rate to `min_lr` over the run.
    Cosine { min_lr: f64 },
}

/// Per-worker training hyperparameters. Workers are diversified through
/// `data_seed` (sample order) and `initial_lr`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainHyperparams {
    pub initial_lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            initial_lr: 0.05,
            schedule: LrSchedule::Cosine { min_lr: 0.0 },
            batch_size: 16,
            data_seed: 0,
            init_seed: 0,
            epochs: 40,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::config("initial_lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        match &self.schedule {
            LrSchedule::Step { gamma, .. } if !(*gamma > 0.0) => {
                Err(Error::config("schedule.gamma", "must be positive"))
            }
            LrSchedule::Cosine { min_lr } if !(*min_lr >= 0.0 && *min_lr < self.initial_lr) => {
                Err(Error::config("schedule.min_lr", "must lie in [0, initial_lr)"))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            LrSchedule::Step { gamma, milestones } => {
                let drops = milestones.iter().filter(|&&m| epoch >= m).count();
                let mut lr = self.initial_lr;
                for _ in 0..drops {
                    lr *= gamma;
                }
                lr
            }
            LrSchedule::Cosine { min_lr } => {
                if epoch == 0 {
                    return self.initial_lr;
                }
                let t = (epoch.min(self.epochs) as f64) / self.epochs as f64;
                min_lr + 0.5 * (self.initial_lr - min_lr) * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
        }
    }

    /// Sample order for one epoch, a pure function of `(data_seed, epoch)`.
    pub fn batch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        Rng::with_stream(self.data_seed, streams::DATA + epoch as u64).permutation(n)
    }
}

/// Gradients of the mean cross-entropy, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub layers: Vec<(Tensor, Tensor)>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + libm::log(logits.iter().map(|z| libm::exp(z - m)).sum::<f64>());
    logits.iter().map(|z| z - lse).collect()
}

fn zero_grads(model: &ModelSnapshot) -> Vec<(Vec<f64>, Vec<f64>)> {
    model
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect()
}

/// Mean cross-entropy loss over a batch.
pub fn loss(model: &ModelSnapshot, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, dims) = check_labels(model, batch, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        let trace = forward_sample(model, batch.row(i), dims);
        total -= log_softmax(&trace.logits)[labels[i]];
    }
    Ok(total / n as f64)
}

fn check_labels(model: &ModelSnapshot, batch: &Tensor, labels: &[usize]) -> Result<(usize, (usize, usize, usize))> {
    let (n, dims) = check_batch(model, batch)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
    }
    let classes = model.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!("label {bad} outside 0..{classes}")));
    }
    Ok((n, dims))
}

/// Analytic gradients of the mean cross-entropy by back-propagation. The
/// ReLU derivative at zero is taken as zero.
pub fn gradients(model: &ModelSnapshot, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
    let (n, dims) = check_labels(model, batch, labels)?;
    let mut grads = zero_grads(model);
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for i in 0..n {
        total -= backprop_sample(model, batch.row(i), dims, labels[i], scale, &mut grads);
    }
    let layers = model
        .layers
        .iter()
        .zip(grads)
        .map(|(l, (gw, gb))| {
            (
                Tensor::from_parts_unchecked(l.weights.shape().to_vec(), gw),
                Tensor::from_parts_unchecked(l.bias.shape().to_vec(), gb),
            )
        })
        .collect();
    Ok(Gradients {
        loss: total * scale,
        layers,
    })
}

/// Accumulates `scale * dLoss/dParam` for one sample; returns its log-likelihood.
fn backprop_sample(
    model: &ModelSnapshot,
    sample: &[f64],
    dims: (usize, usize, usize),
    label: usize,
    scale: f64,
    grads: &mut [(Vec<f64>, Vec<f64>)],
) -> f64 {
    let trace = forward_sample(model, sample, dims);
    let logp = log_softmax(&trace.logits);
    let mut delta: Vec<f64> = logp.iter().map(|lp| scale * libm::exp(*lp)).collect();
    delta[label] -= scale;

    let n_conv = model.layers.iter().take_while(|l| l.kind == LayerKind::Conv).count();

    // Dense layers, last to first.
    for li in (n_conv..model.layers.len()).rev() {
        let layer = &model.layers[li];
        let input = &trace.dense_inputs[li - n_conv];
        let n_in = layer.in_channels();
        let (gw, gb) = &mut grads[li];
        let wt = layer.weights.data();
        let mut dx = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            gb[o] += d;
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            let wrow = &wt[o * n_in..(o + 1) * n_in];
            for k in 0..n_in {
                grow[k] += d * input[k];
                dx[k] += d * wrow[k];
            }
        }
        if li > n_conv {
            // Hidden dense input went through a ReLU.
            for (g, x) in dx.iter_mut().zip(input) {
                if *x <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = dx;
    }

    if n_conv == 0 {
        return logp[label];
    }

    // Global average pool.
    let (c, h, w) = trace.conv_dims[n_conv];
    let hw = h * w;
    let mut dact = vec![0.0; c * hw];
    for ch in 0..c {
        let g = delta[ch] / hw as f64;
        dact[ch * hw..(ch + 1) * hw].fill(g);
    }

    for li in (0..n_conv).rev() {
        let layer = &model.layers[li];
        let out = &trace.conv_acts[li + 1];
        for (g, a) in dact.iter_mut().zip(out) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let input = &trace.conv_acts[li];
        let (ic, ih, iw) = trace.conv_dims[li];
        let (oc, oh, ow) = trace.conv_dims[li + 1];
        let k = layer.kernel().unwrap_or(1);
        let wt = layer.weights.data();
        let need_dx = li > 0;
        let mut dx = if need_dx { vec![0.0; ic * ih * iw] } else { Vec::new() };
        let (gw, gb) = &mut grads[li];
        for o in 0..oc {
            let dplane = &dact[o * oh * ow..(o + 1) * oh * ow];
            gb[o] += dplane.iter().sum::<f64>();
            for i in 0..ic {
                let inp = &input[i * ih * iw..(i + 1) * ih * iw];
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((o * ic + i) * k + ki) * k + kj;
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let src = &inp[(y + ki) * iw + kj..(y + ki) * iw + kj + ow];
                            let d = &dplane[y * ow..(y + 1) * ow];
                            acc += src.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[widx] += acc;
                        if need_dx {
                            let wv = wt[widx];
                            let dxp = &mut dx[i * ih * iw..(i + 1) * ih * iw];
                            for y in 0..oh {
                                let dst = &mut dxp[(y + ki) * iw + kj..(y + ki) * iw + kj + ow];
                                let d = &dplane[y * ow..(y + 1) * ow];
                                for (t, g) in dst.iter_mut().zip(d) {
                                    *t += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dact = dx;
    }
    logp[label]
}

/// SGD momentum buffers, one `(weights, bias)` pair per layer. Empty until
/// the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`, for weights and biases.
    pub fn step(&mut self, model: &mut ModelSnapshot, grads: &Gradients, lr: f64, momentum: f64, weight_decay: f64) {
        if self.velocity.is_empty() {
            self.velocity = zero_grads(model);
        }
        for ((layer, (gw, gb)), (vw, vb)) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity) {
            update(layer.weights.data_mut(), gw.data(), vw, lr, momentum, weight_decay);
            update(layer.bias.data_mut(), gb.data(), vb, lr, momentum, weight_decay);
        }
    }
}

fn update(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel) {
        *v = momentum * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub model: ModelSnapshot,
    /// Mean cross-entropy over every sample seen in the epoch.
    pub loss: f64,
    pub lr: f64,
}

/// Runs one epoch of minibatch SGD. Sample order is the permutation given by
/// `(hp.data_seed, epoch_index)`; the final partial batch is kept.
pub fn train_epoch(
    model: &ModelSnapshot,
    data: &Dataset,
    hp: &TrainHyperparams,
    epoch_index: usize,
    state: &mut SgdState,
) -> Result<EpochOutcome> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let order = hp.batch_order(data.len(), epoch_index);
    let lr = hp.lr_at(epoch_index);
    let mut model = model.clone();
    let mut total = 0.0;
    for chunk in order.chunks(hp.batch_size) {
        let (x, y) = data.batch(chunk)?;
        let g = gradients(&model, &x, &y)?;
        if !g.loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch_index,
                loss: g.loss,
            });
        }
        total += g.loss * chunk.len() as f64;
        state.step(&mut model, &g, lr, hp.momentum, hp.weight_decay);
    }
    let loss = total / data.len() as f64;
    let finite = model
        .layers
        .iter()
        .all(|l| l.weights.data().iter().chain(l.bias.data()).all(|v| v.is_finite()));
    if !loss.is_finite() || !finite {
        return Err(Error::Divergence {
            epoch: epoch_index,
            loss,
        });
    }
    model.epoch += 1;
    Ok(EpochOutcome { model, loss, lr })
}

/// Fraction of samples whose arg-max logit equals the label (lowest index
/// wins ties).
pub fn accuracy(model: &ModelSnapshot, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let dims = data.image_dims();
    check_batch(model, &data.batch(&[0])?.0)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let logits = forward_sample(model, data.image(i), dims).logits;
        let mut best = 0;
        for (c, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = c;
            }
        }
        if best == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Builds a model from `hp.init_seed` and trains it for `hp.epochs` epochs.
/// Returns the final snapshot and per-epoch losses.
pub fn train_baseline(arch: &ArchSpec, hp: &TrainHyperparams, data: &Dataset) -> Result<(ModelSnapshot, Vec<f64>)> {
    let mut model = build_model(arch, hp.init_seed)?;
    let mut state = SgdState::new();
    let mut losses = Vec::with_capacity(hp.epochs);
    for e in 0..hp.epochs {
        let out = train_epoch(&model, data, hp, e, &mut state)?;
        losses.push(out.loss);
        model = out.model;
    }
    Ok((model, losses))
}

fn param_mut(model: &mut ModelSnapshot, layer: usize, bias: bool, index: usize) -> &mut f64 {
    let l = &mut model.layers[layer];
    if bias {
        &mut l.bias.data_mut()[index]
    } else {
        &mut l.weights.data_mut()[index]
    }
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradCheck {
    pub name: String,
    pub kind: LayerKind,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub layers: Vec<LayerGradCheck>,
    pub max_rel_error: f64,
}

/// Compares back-propagated gradients with central finite differences
/// (step [`GRAD_CHECK_STEP`]) on every parameter. The relative error is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(model: &ModelSnapshot, batch: &Tensor, labels: &[usize]) -> Result<GradCheckReport> {
    if model.parameter_count() > 10_000 {
        return Err(Error::Validation(format!(
            "grad_check is limited to 10^4 parameters, model has {}",
            model.parameter_count()
        )));
    }
    let analytic = gradients(model, batch, labels)?;
    let mut probe = model.clone();
    let mut layers = Vec::new();
    for (li, (gw, gb)) in analytic.layers.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (is_bias, grad) in [(false, gw), (true, gb)] {
            for p in 0..grad.len() {
                let orig = *param_mut(&mut probe, li, is_bias, p);
                *param_mut(&mut probe, li, is_bias, p) = orig + GRAD_CHECK_STEP;
                let up = loss(&probe, batch, labels)?;
                *param_mut(&mut probe, li, is_bias, p) = orig - GRAD_CHECK_STEP;
                let down = loss(&probe, batch, labels)?;
                *param_mut(&mut probe, li, is_bias, p) = orig;
                let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
                let a = grad.data()[p];
                let denom = libm::fabs(a).max(libm::fabs(numeric)).max(GRAD_CHECK_FLOOR);
                worst = worst.max(libm::fabs(a - numeric) / denom);
                checked += 1;
            }
        }
        let l = &model.layers[li];
        layers.push(LayerGradCheck {
            name: l.name.clone(),
            kind: l.kind,
            checked,
            max_rel_error: worst,
        });
    }
    let max_rel_error = layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { layers, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::{LayerWeights, ModelSnapshot};
    use crate::rng::gaussian_sample;

    fn small_hp() -> TrainHyperparams {
        TrainHyperparams {
            epochs: 3,
            ..TrainHyperparams::default()
        }
    }

    #[test]
    fn zero_lr_step_is_a_no_op() {
        // initial_lr must be positive, so exercise the update rule directly.
        let data = make_synthetic(3, 10, 8, 8, 0).unwrap();
        let model = build_model(&ArchSpec::default(), 1).unwrap();
        let (x, y) = data.batch(&[0, 1, 2, 3]).unwrap();
        let g = gradients(&model, &x, &y).unwrap();
        let mut stepped = model.clone();
        SgdState::new().step(&mut stepped, &g, 0.0, 0.0, 0.0);
        assert!(stepped.weights_bit_eq(&model));
    }

    #[test]
    fn epochs_are_deterministic() {
        let data = make_synthetic(3, 10, 8, 8, 0).unwrap();
        let model = build_model(&ArchSpec::default(), 1).unwrap();
        let hp = small_hp();
        let a = train_epoch(&model, &data, &hp, 0, &mut SgdState::new()).unwrap();
        let b = train_epoch(&model, &data, &hp, 0, &mut SgdState::new()).unwrap();
        assert!(a.model.weights_bit_eq(&b.model));
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.model.epoch, 1);
        assert!(!a.model.weights_bit_eq(&model));
    }

    #[test]
    fn schedules() {
        let hp = TrainHyperparams {
            initial_lr: 0.1,
            epochs: 10,
            ..TrainHyperparams::default()
        };
        assert_eq!(hp.lr_at(0), 0.1);
        let lrs: Vec<f64> = (0..10).map(|e| hp.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[9] > 0.0);

        let step = TrainHyperparams {
            initial_lr: 0.1,
            schedule: LrSchedule::Step {
                gamma: 0.5,
                milestones: vec![3, 6],
            },
            ..hp.clone()
        };
        assert_eq!(step.lr_at(0), 0.1);
        assert_eq!(step.lr_at(2), 0.1);
        assert_eq!(step.lr_at(3), 0.1 * 0.5);
        assert_eq!(step.lr_at(5), 0.1 * 0.5);
        assert_eq!(step.lr_at(6), 0.1 * 0.5 * 0.5);
    }

    #[test]
    fn distinct_seeds_and_rates_diversify() {
        let a = TrainHyperparams {
            data_seed: 1,
            initial_lr: 0.05,
            ..TrainHyperparams::default()
        };
        let b = TrainHyperparams {
            data_seed: 2,
            initial_lr: 0.04,
            ..TrainHyperparams::default()
        };
        for e in 0..a.epochs {
            assert_ne!(a.batch_order(300, e), b.batch_order(300, e));
            assert_ne!(a.lr_at(e), b.lr_at(e));
        }
    }

    #[test]
    fn hyperparameter_validation_names_keys() {
        let bad = TrainHyperparams {
            batch_size: 0,
            ..TrainHyperparams::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "batch_size"));
    }

    fn tiny_model(seed: u64) -> ModelSnapshot {
        let mut rng = Rng::new(seed);
        let mut g = |s: &[usize], sd: f64| gaussian_sample(&mut rng, 0.0, sd, s).unwrap();
        ModelSnapshot::new(vec![
            LayerWeights::new("conv1", LayerKind::Conv, g(&[3, 1, 3, 3], 0.5), g(&[3], 0.1)).unwrap(),
            LayerWeights::new("conv2", LayerKind::Conv, g(&[4, 3, 2, 2], 0.5), g(&[4], 0.1)).unwrap(),
            LayerWeights::new("fc", LayerKind::Dense, g(&[3, 4], 0.5), g(&[3], 0.1)).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn grad_check_conv_model() {
        let model = tiny_model(11);
        let batch = gaussian_sample(&mut Rng::new(12), 0.0, 1.0, &[4, 1, 6, 6]).unwrap();
        let report = grad_check(&model, &batch, &[0, 1, 2, 1]).unwrap();
        for l in &report.layers {
            assert!(l.max_rel_error < 1e-4, "{}: {}", l.name, l.max_rel_error);
        }
    }

    #[test]
    fn grad_check_dense_only() {
        let mut rng = Rng::new(5);
        let model = ModelSnapshot::new(vec![LayerWeights::new(
            "fc",
            LayerKind::Dense,
            gaussian_sample(&mut rng, 0.0, 1.0, &[3, 2]).unwrap(),
            gaussian_sample(&mut rng, 0.0, 1.0, &[3]).unwrap(),
        )
        .unwrap()])
        .unwrap();
        let batch = gaussian_sample(&mut rng, 0.0, 1.0, &[5, 2, 3, 3]).unwrap();
        let report = grad_check(&model, &batch, &[0, 1, 2, 0, 1]).unwrap();
        assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn zero_input_kills_first_conv_weight_gradient() {
        let model = tiny_model(3);
        let batch = Tensor::zeros(&[2, 1, 6, 6]).unwrap();
        let g = gradients(&model, &batch, &[0, 2]).unwrap();
        assert!(g.layers[0].0.data().iter().all(|&v| v == 0.0));
    }
}
