//! Multi-network training schedule: K workers train one epoch each, then the
//! grafting step runs once over the frozen snapshot vector.
//!
//! This module holds the pure pieces and a single-threaded executor. The std
//! companion crate runs the same schedule with one thread per worker.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::criteria::{layer_entropy, BinningConfig};
use crate::data::Dataset;
use crate::diagnostics::{invalid_ratio, network_information, ThresholdRatio, DEFAULT_THRESHOLDS};
use crate::grafting::{graft_external_pair, graft_internal, graft_noise, AlphaDecision, GraftConfig, ScionSource};
use crate::model::{build_model, check_compatible, ArchSpec, ModelSnapshot};
use crate::rng::{streams, Rng};
use crate::train::{accuracy, train_epoch, SgdState, TrainHyperparams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Topology {
    /// Worker k receives from worker (k - 1) mod K.
    #[default]
    Ring,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    /// One entry per network; the network count is `workers.len()`.
    pub workers: Vec<TrainHyperparams>,
    pub graft: GraftConfig,
    pub grafting_enabled: bool,
    pub binning: BinningConfig,
    /// Grafting fires after every `graft_period`-th epoch.
    pub graft_period: usize,
    pub total_epochs: usize,
    pub topology: Topology,
}

impl ExperimentConfig {
    /// `k` networks sharing `base`, diversified by seed and learning rate:
    /// worker i gets init and data seeds offset by i, and initial rates spread
    /// evenly over `initial_lr * [0.9, 1.1]` (a single worker keeps `initial_lr`).
    pub fn with_workers(arch: ArchSpec, base: &TrainHyperparams, k: usize, graft: GraftConfig) -> Self {
        let workers = (0..k)
            .map(|i| {
                let mut hp = base.clone();
                hp.init_seed = base.init_seed.wrapping_add(i as u64);
                hp.data_seed = base.data_seed.wrapping_add(i as u64);
                if k > 1 {
                    hp.initial_lr = base.initial_lr * (0.9 + 0.2 * i as f64 / (k - 1) as f64);
                }
                hp
            })
            .collect();
        Self {
            arch,
            workers,
            graft,
            grafting_enabled: k > 1,
            binning: BinningConfig::default(),
            graft_period: 1,
            total_epochs: base.epochs,
            topology: Topology::Ring,
        }
    }

    pub fn network_count(&self) -> usize {
        self.workers.len()
    }

    /// Checks every invariant and returns advisory warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.arch.validate()?;
        self.binning.validate()?;
        self.graft.validate()?;
        let k = self.workers.len();
        if k == 0 {
            return Err(Error::config("workers", "at least one worker is required"));
        }
        if self.graft_period == 0 {
            return Err(Error::config("graft_period", "must be at least 1"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs", "must be at least 1"));
        }
        for (i, hp) in self.workers.iter().enumerate() {
            hp.validate().map_err(|e| match e {
                Error::Config { key, message } => Error::Config {
                    key: format!("workers[{i}].{key}"),
                    message,
                },
                other => other,
            })?;
            if hp.epochs != self.total_epochs {
                return Err(Error::config(
                    format!("workers[{i}].epochs"),
                    format!("must equal total_epochs ({})", self.total_epochs),
                ));
            }
        }
        if self.grafting_enabled && self.graft.source == ScionSource::External && k < 2 {
            return Err(Error::config("graft.source", "external scions need at least two workers"));
        }
        let mut warnings = Vec::new();
        if k >= 2 {
            let same_seed = self.workers.iter().all(|w| w.data_seed == self.workers[0].data_seed);
            let same_lr = self.workers.iter().all(|w| w.initial_lr == self.workers[0].initial_lr);
            if same_seed && same_lr {
                warnings.push(String::from(
                    "all workers share data_seed and initial_lr; grafted networks will lack diversity",
                ));
            }
        }
        Ok(warnings)
    }

    /// Whether grafting runs after the epoch with 0-based index `epoch`.
    pub fn grafts_after(&self, epoch: usize) -> bool {
        self.grafting_enabled && (epoch + 1) % self.graft_period == 0
    }
}

pub fn peer_of(k: usize, count: usize) -> usize {
    (k + count - 1) % count
}

/// Output of one grafting step: new snapshots and per-worker alpha decisions
/// (empty for non-external sources).
#[derive(Debug, Clone, PartialEq)]
pub struct GraftOutcome {
    pub models: Vec<ModelSnapshot>,
    pub alphas: Vec<Vec<AlphaDecision>>,
}

/// Grafts worker `k` from the frozen `pre` vector. `epoch` is the number of
/// completed epochs and sets the noise scale.
pub fn graft_worker(
    pre: &[ModelSnapshot],
    k: usize,
    cfg: &ExperimentConfig,
    epoch: usize,
) -> Result<(ModelSnapshot, Vec<AlphaDecision>)> {
    let me = &pre[k];
    match cfg.graft.source {
        ScionSource::External => {
            let peer = &pre[peer_of(k, pre.len())];
            graft_external_pair(me, peer, &cfg.graft, &cfg.binning)
        }
        ScionSource::Internal => Ok((graft_internal(me, &cfg.graft, &cfg.binning)?, Vec::new())),
        ScionSource::Noise => {
            let mut rng = Rng::with_stream(cfg.workers[k].init_seed, streams::NOISE + epoch as u64);
            Ok((graft_noise(me, epoch, &cfg.graft, &cfg.binning, &mut rng)?, Vec::new()))
        }
    }
}

pub fn graft_step(pre: &[ModelSnapshot], cfg: &ExperimentConfig, epoch: usize) -> Result<GraftOutcome> {
    let order: Vec<usize> = (0..pre.len()).collect();
    graft_step_ordered(pre, cfg, epoch, &order)
}

/// [`graft_step`] visiting workers in `order`. The result does not depend on
/// the order.
pub fn graft_step_ordered(
    pre: &[ModelSnapshot],
    cfg: &ExperimentConfig,
    epoch: usize,
    order: &[usize],
) -> Result<GraftOutcome> {
    if pre.len() != cfg.network_count() {
        return Err(Error::Graft(format!(
            "expected {} snapshots, got {}",
            cfg.network_count(),
            pre.len()
        )));
    }
    let mut seen = alloc::vec![false; pre.len()];
    for &k in order {
        if k >= pre.len() || core::mem::replace(&mut seen[k], true) {
            return Err(Error::Graft("processing order is not a permutation".into()));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Graft("processing order is not a permutation".into()));
    }
    for other in &pre[1..] {
        check_compatible(&pre[0], other)?;
    }
    let mut slots: Vec<Option<(ModelSnapshot, Vec<AlphaDecision>)>> = alloc::vec![None; pre.len()];
    for &k in order {
        slots[k] = Some(graft_worker(pre, k, cfg, epoch)?);
    }
    let (models, alphas) = slots.into_iter().map(|s| s.expect("every slot filled")).unzip();
    Ok(GraftOutcome { models, alphas })
}

/// One network's training state.
#[derive(Debug, Clone)]
pub struct Worker {
    pub id: usize,
    pub hp: TrainHyperparams,
    pub model: ModelSnapshot,
    sgd: SgdState,
}

impl Worker {
    pub fn new(id: usize, arch: &ArchSpec, hp: TrainHyperparams) -> Result<Self> {
        let mut model = build_model(arch, hp.init_seed)?;
        model.worker_id = id;
        Ok(Self {
            id,
            hp,
            model,
            sgd: SgdState::new(),
        })
    }

    /// Trains epoch `epoch`; returns `(loss, lr)`. Failures carry the worker id.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<(f64, f64)> {
        let out = train_epoch(&self.model, data, &self.hp, epoch, &mut self.sgd).map_err(|e| Error::Worker {
            worker: self.id,
            epoch,
            source: alloc::boxed::Box::new(e),
        })?;
        self.model = out.model;
        Ok((out.loss, out.lr))
    }

    /// Replaces the weights with a grafted snapshot. Momentum buffers are kept.
    pub fn install(&mut self, grafted: ModelSnapshot) {
        self.model = grafted;
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerEntropy {
    pub name: String,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorkerRecord {
    pub worker: usize,
    pub loss: f64,
    pub lr: f64,
    /// Measured after the epoch's grafting step.
    pub test_accuracy: f64,
    pub layer_entropies: Vec<LayerEntropy>,
    pub network_information: f64,
    pub invalid_ratio: Vec<ThresholdRatio>,
    pub alphas: Vec<AlphaDecision>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub grafted: bool,
    pub workers: Vec<WorkerRecord>,
}

pub fn observe(
    worker: usize,
    model: &ModelSnapshot,
    test: &Dataset,
    bins: &BinningConfig,
    loss: f64,
    lr: f64,
    alphas: Vec<AlphaDecision>,
) -> Result<WorkerRecord> {
    let layer_entropies = model
        .layers
        .iter()
        .map(|l| {
            Ok(LayerEntropy {
                name: l.name.clone(),
                entropy: layer_entropy(l, bins)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WorkerRecord {
        worker,
        loss,
        lr,
        test_accuracy: accuracy(model, test)?,
        network_information: network_information(model, bins)?,
        invalid_ratio: invalid_ratio(model, &DEFAULT_THRESHOLDS)?,
        layer_entropies,
        alphas,
    })
}

/// Checks both datasets against the architecture.
pub fn check_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    let [c, h, w] = cfg.arch.input_shape();
    for (name, d) in [("training", train), ("test", test)] {
        if d.image_dims() != (c, h, w) {
            return Err(Error::Validation(format!(
                "{name} images are {:?}, architecture expects {:?}",
                d.image_dims(),
                (c, h, w)
            )));
        }
        if d.class_count != cfg.arch.class_count {
            return Err(Error::Validation(format!(
                "{name} set has {} classes, architecture expects {}",
                d.class_count, cfg.arch.class_count
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub models: Vec<ModelSnapshot>,
    pub history: Vec<EpochRecord>,
}

/// Runs the whole schedule on the calling thread.
pub fn run_sequential(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    check_data(cfg, train, test)?;
    let mut workers = cfg
        .workers
        .iter()
        .enumerate()
        .map(|(i, hp)| Worker::new(i, &cfg.arch, hp.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut history = Vec::with_capacity(cfg.total_epochs);
    for e in 0..cfg.total_epochs {
        let mut stats = Vec::with_capacity(workers.len());
        for w in &mut workers {
            stats.push(w.train_epoch(train, e)?);
        }
        let grafted = cfg.grafts_after(e);
        let mut alphas = alloc::vec![Vec::new(); workers.len()];
        if grafted {
            let pre: Vec<ModelSnapshot> = workers.iter().map(|w| w.model.clone()).collect();
            let out = graft_step(&pre, cfg, e + 1)?;
            for (w, m) in workers.iter_mut().zip(out.models) {
                w.install(m);
            }
            alphas = out.alphas;
        }
        let records = workers
            .iter()
            .zip(stats)
            .zip(alphas)
            .map(|((w, (loss, lr)), a)| observe(w.id, &w.model, test, &cfg.binning, loss, lr, a))
            .collect::<Result<Vec<_>>>()?;
        history.push(EpochRecord {
            epoch: e + 1,
            grafted,
            workers: records,
        });
    }
    Ok(RunOutput {
        models: workers.into_iter().map(|w| w.model).collect(),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::ConvSpec;
    use crate::tensor::linear_blend;
    use crate::train::train_baseline;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            input_channels: 1,
            input_height: 6,
            input_width: 6,
            conv: alloc::vec![ConvSpec { out_channels: 4, kernel: 3 }, ConvSpec { out_channels: 6, kernel: 2 }],
            class_count: 3,
        }
    }

    fn small_hp(epochs: usize) -> TrainHyperparams {
        TrainHyperparams {
            epochs,
            batch_size: 8,
            ..TrainHyperparams::default()
        }
    }

    fn data() -> (Dataset, Dataset) {
        (make_synthetic(3, 8, 6, 6, 1).unwrap(), make_synthetic(3, 4, 6, 6, 2).unwrap())
    }

    #[test]
    fn single_worker_without_grafting_is_the_baseline() {
        let (train, test) = data();
        let mut cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(3), 1, GraftConfig::default());
        cfg.grafting_enabled = false;
        let run = run_sequential(&cfg, &train, &test).unwrap();
        let (base, losses) = train_baseline(&cfg.arch, &cfg.workers[0], &train).unwrap();
        assert_eq!(run.models[0], base);
        let recorded: Vec<f64> = run.history.iter().map(|r| r.workers[0].loss).collect();
        assert_eq!(recorded, losses);
    }

    #[test]
    fn two_workers_agree_after_every_graft() {
        let (train, test) = data();
        let cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(2), 2, GraftConfig::default());
        let run = run_sequential(&cfg, &train, &test).unwrap();
        assert_eq!(run.history.len(), 2);
        assert!(run.history.iter().all(|r| r.grafted));
        assert!(run.models[0].max_abs_diff(&run.models[1]).unwrap() <= 1e-12);
    }

    #[test]
    fn ring_update_matches_hand_composed_blend() {
        let cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(1), 3, GraftConfig::default());
        let pre: Vec<ModelSnapshot> = (0..3).map(|s| build_model(&cfg.arch, 10 + s).unwrap()).collect();
        let out = graft_step(&pre, &cfg, 1).unwrap();
        for (i, layer) in out.models[2].layers.iter().enumerate() {
            let alpha = out.alphas[2][i].alpha;
            let expect = linear_blend(&pre[2].layers[i].weights, &pre[1].layers[i].weights, alpha).unwrap();
            assert!(layer.weights.bit_eq(&expect));
        }
        assert_eq!(peer_of(0, 3), 2);
    }

    #[test]
    fn identical_snapshots_are_a_fixed_point() {
        let cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(1), 4, GraftConfig::default());
        let m = build_model(&cfg.arch, 3).unwrap();
        let pre = alloc::vec![m.clone(); 4];
        let out = graft_step(&pre, &cfg, 1).unwrap();
        assert!(out.models.iter().all(|x| x.weights_bit_eq(&m)));
        assert!(out.alphas.iter().flatten().all(|a| a.alpha == 0.5));
    }

    #[test]
    fn processing_order_is_irrelevant() {
        for source in [ScionSource::External, ScionSource::Internal, ScionSource::Noise] {
            let graft = GraftConfig {
                source,
                ..GraftConfig::default()
            };
            let cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(1), 4, graft);
            let pre: Vec<ModelSnapshot> = (0..4).map(|s| build_model(&cfg.arch, s).unwrap()).collect();
            let a = graft_step_ordered(&pre, &cfg, 3, &[0, 1, 2, 3]).unwrap();
            let b = graft_step_ordered(&pre, &cfg, 3, &[3, 2, 1, 0]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn validation_rules() {
        let hp = small_hp(2);
        let single = ExperimentConfig {
            grafting_enabled: true,
            ..ExperimentConfig::with_workers(small_arch(), &hp, 1, GraftConfig::default())
        };
        match single.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "graft.source"),
            other => panic!("{other:?}"),
        }

        let mut same = ExperimentConfig::with_workers(small_arch(), &hp, 2, GraftConfig::default());
        same.workers[1] = same.workers[0].clone();
        assert_eq!(same.validate().unwrap().len(), 1);

        let mut bad = ExperimentConfig::with_workers(small_arch(), &hp, 2, GraftConfig::default());
        bad.workers[1].epochs = 5;
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "workers[1].epochs"),
            other => panic!("{other:?}"),
        }
        bad.workers[1].epochs = 2;
        bad.workers[1].batch_size = 0;
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "workers[1].batch_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn graft_period_controls_schedule() {
        let (train, test) = data();
        let mut cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(4), 2, GraftConfig::default());
        cfg.graft_period = 2;
        let run = run_sequential(&cfg, &train, &test).unwrap();
        let flags: Vec<bool> = run.history.iter().map(|r| r.grafted).collect();
        assert_eq!(flags, [false, true, false, true]);
        assert!(run.history[0].workers[0].alphas.is_empty());
        assert_eq!(run.history[1].workers[0].alphas.len(), 3);
    }

    #[test]
    fn divergence_names_the_worker() {
        let (train, test) = data();
        let mut cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(3), 2, GraftConfig::default());
        cfg.workers[1].initial_lr = 1e6;
        cfg.workers[1].momentum = 0.0;
        match run_sequential(&cfg, &train, &test) {
            Err(Error::Worker { worker, .. }) => assert_eq!(worker, 1),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let cfg = ExperimentConfig::with_workers(small_arch(), &small_hp(1), 2, GraftConfig::default());
        let wrong = make_synthetic(3, 4, 8, 8, 1).unwrap();
        assert!(matches!(run_sequential(&cfg, &wrong, &wrong), Err(Error::Validation(_))));
    }
}
