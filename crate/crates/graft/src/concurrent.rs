//! Threaded executor: one thread per worker, message passing through the
//! coordinating thread, and an epoch barrier around every grafting step.
//!
//! Per epoch each worker trains, publishes its snapshot and blocks until the
//! coordinator has run the grafting step over all published snapshots. It
//! then installs its grafted replacement, evaluates, and reports. Results are
//! identical to [`graft_core::coordinator::run_sequential`].

use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use graft_core::coordinator::{
    check_data, graft_step, observe, EpochRecord, ExperimentConfig, RunOutput, Worker, WorkerRecord,
};
use graft_core::data::Dataset;
use graft_core::grafting::AlphaDecision;
use graft_core::model::ModelSnapshot;

use crate::error::{Error, Result};

enum Up {
    Trained {
        worker: usize,
        epoch: usize,
        model: ModelSnapshot,
    },
    Observed {
        worker: usize,
        epoch: usize,
        record: WorkerRecord,
    },
    Failed(graft_core::Error),
}

enum Down {
    Install(ModelSnapshot, Vec<AlphaDecision>),
    Keep,
}

pub fn run_concurrent(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    check_data(cfg, train, test)?;
    let workers = cfg
        .workers
        .iter()
        .enumerate()
        .map(|(i, hp)| Worker::new(i, &cfg.arch, hp.clone()))
        .collect::<graft_core::Result<Vec<_>>>()?;
    thread::scope(|s| {
        let (up_tx, up_rx) = channel();
        let mut downs = Vec::with_capacity(workers.len());
        for w in workers {
            let (tx, rx) = channel();
            downs.push(tx);
            let up = up_tx.clone();
            s.spawn(move || worker_loop(w, cfg, train, test, rx, up));
        }
        drop(up_tx);
        // Returning drops `downs`, which stops any worker still running.
        coordinate(cfg, &up_rx, &downs)
    })
}

fn worker_loop(
    mut w: Worker,
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    rx: Receiver<Down>,
    tx: Sender<Up>,
) {
    for epoch in 0..cfg.total_epochs {
        let (loss, lr) = match w.train_epoch(train, epoch) {
            Ok(v) => v,
            Err(e) => {
                let _ = tx.send(Up::Failed(e));
                return;
            }
        };
        let published = Up::Trained {
            worker: w.id,
            epoch,
            model: w.model.clone(),
        };
        if tx.send(published).is_err() {
            return;
        }
        let alphas = match rx.recv() {
            Ok(Down::Install(model, alphas)) => {
                w.install(model);
                alphas
            }
            Ok(Down::Keep) => Vec::new(),
            Err(_) => return,
        };
        let msg = match observe(w.id, &w.model, test, &cfg.binning, loss, lr, alphas) {
            Ok(record) => Up::Observed {
                worker: w.id,
                epoch,
                record,
            },
            Err(e) => Up::Failed(graft_core::Error::Worker {
                worker: w.id,
                epoch,
                source: Box::new(e),
            }),
        };
        if tx.send(msg).is_err() {
            return;
        }
    }
}

/// Next message matching `wanted`, looking in `stash` first. Messages for a
/// later phase are stashed; a failure from any worker ends the run.
fn next(rx: &Receiver<Up>, stash: &mut Vec<Up>, wanted: impl Fn(&Up) -> bool) -> Result<Up> {
    if let Some(i) = stash.iter().position(&wanted) {
        return Ok(stash.remove(i));
    }
    loop {
        match rx.recv().map_err(|_| Error::WorkerLost)? {
            Up::Failed(e) => return Err(e.into()),
            m if wanted(&m) => return Ok(m),
            m => stash.push(m),
        }
    }
}

fn coordinate(cfg: &ExperimentConfig, rx: &Receiver<Up>, downs: &[Sender<Down>]) -> Result<RunOutput> {
    let k = downs.len();
    let mut stash = Vec::new();
    let mut models = Vec::new();
    let mut history = Vec::with_capacity(cfg.total_epochs);
    for e in 0..cfg.total_epochs {
        let mut pre: Vec<Option<ModelSnapshot>> = vec![None; k];
        for _ in 0..k {
            match next(rx, &mut stash, |m| matches!(m, Up::Trained { epoch, .. } if *epoch == e))? {
                Up::Trained { worker, model, .. } => pre[worker] = Some(model),
                _ => unreachable!("filtered to Trained"),
            }
        }
        let pre: Vec<ModelSnapshot> = pre.into_iter().map(|m| m.expect("one snapshot per worker")).collect();
        let grafted = cfg.grafts_after(e);
        if grafted {
            let out = graft_step(&pre, cfg, e + 1)?;
            for (tx, (m, a)) in downs.iter().zip(out.models.iter().cloned().zip(out.alphas)) {
                tx.send(Down::Install(m, a)).map_err(|_| Error::WorkerLost)?;
            }
            models = out.models;
        } else {
            for tx in downs {
                tx.send(Down::Keep).map_err(|_| Error::WorkerLost)?;
            }
            models = pre;
        }
        let mut records: Vec<Option<WorkerRecord>> = vec![None; k];
        for _ in 0..k {
            match next(rx, &mut stash, |m| matches!(m, Up::Observed { epoch, .. } if *epoch == e))? {
                Up::Observed { worker, record, .. } => records[worker] = Some(record),
                _ => unreachable!("filtered to Observed"),
            }
        }
        history.push(EpochRecord {
            epoch: e + 1,
            grafted,
            workers: records.into_iter().map(|r| r.expect("one record per worker")).collect(),
        });
    }
    Ok(RunOutput { models, history })
}
