//! Per-epoch history files written by `train` and aggregated by `report`.
//!
//! * `history.csv`: one row per (epoch, worker).
//! * `layer_entropy.csv`: one row per (epoch, worker, layer).
//! * `alphas.json`: every adaptive-weighting decision.

use std::fs;
use std::io::Write;
use std::path::Path;

use graft_core::coordinator::{peer_of, EpochRecord};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTORY_CSV: &str = "history.csv";
pub const LAYER_ENTROPY_CSV: &str = "layer_entropy.csv";
pub const ALPHAS_JSON: &str = "alphas.json";

fn ratio_column(threshold: f64) -> String {
    format!("invalid_ratio_{threshold:e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    let thresholds: Vec<f64> = history
        .first()
        .and_then(|r| r.workers.first())
        .map(|w| w.invalid_ratio.iter().map(|t| t.threshold).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = [
        "epoch",
        "worker",
        "grafted",
        "loss",
        "lr",
        "test_accuracy",
        "network_information",
    ]
    .map(String::from)
    .to_vec();
    header.extend(thresholds.iter().map(|&t| ratio_column(t)));
    w.write_record(&header)?;
    for rec in history {
        for wr in &rec.workers {
            let mut row = vec![
                rec.epoch.to_string(),
                wr.worker.to_string(),
                rec.grafted.to_string(),
                wr.loss.to_string(),
                wr.lr.to_string(),
                wr.test_accuracy.to_string(),
                wr.network_information.to_string(),
            ];
            row.extend(wr.invalid_ratio.iter().map(|t| t.ratio.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(Error::io(path.as_ref()))
}

pub fn write_layer_entropy_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["epoch", "worker", "layer", "entropy"])?;
    for rec in history {
        for wr in &rec.workers {
            for le in &wr.layer_entropies {
                w.write_record([
                    rec.epoch.to_string(),
                    wr.worker.to_string(),
                    le.name.clone(),
                    le.entropy.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(Error::io(path.as_ref()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEntry {
    pub epoch: usize,
    pub worker: usize,
    pub peer: usize,
    pub layer: String,
    pub h_self: f64,
    pub h_peer: f64,
    pub alpha: f64,
}

pub fn alpha_log(history: &[EpochRecord]) -> Vec<AlphaEntry> {
    let mut out = Vec::new();
    for rec in history {
        let k = rec.workers.len();
        for wr in &rec.workers {
            out.extend(wr.alphas.iter().map(|a| AlphaEntry {
                epoch: rec.epoch,
                worker: wr.worker,
                peer: peer_of(wr.worker, k),
                layer: a.layer_name.clone(),
                h_self: a.h_self,
                h_peer: a.h_peer,
                alpha: a.alpha,
            }));
        }
    }
    out
}

pub fn write_alpha_log(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(&alpha_log(history))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

/// Writes all three history files into `dir`.
pub fn write_history(dir: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let dir = dir.as_ref();
    write_history_csv(dir.join(HISTORY_CSV), history)?;
    write_layer_entropy_csv(dir.join(LAYER_ENTROPY_CSV), history)?;
    write_alpha_log(dir.join(ALPHAS_JSON), history)
}

/// Reads `history.csv` from `dir` and writes one row per epoch to `out`:
/// worker count, mean loss, mean/min/max test accuracy, mean network
/// information and the mean of every invalid-ratio column.
pub fn aggregate(dir: impl AsRef<Path>, out: impl Write) -> Result<()> {
    let path = dir.as_ref().join(HISTORY_CSV);
    let mut r = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.clone(), source },
        other => Error::Format(format!("{other:?}")),
    })?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))
    };
    let (epoch_c, loss_c, acc_c, info_c) = (col("epoch")?, col("loss")?, col("test_accuracy")?, col("network_information")?);
    let ratio_cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("invalid_ratio_")).collect();

    struct Acc {
        epoch: usize,
        n: usize,
        loss: f64,
        acc: Vec<f64>,
        info: f64,
        ratios: Vec<f64>,
    }
    let mut rows: Vec<Acc> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: bad number `{}`", path.display(), &rec[i])))
        };
        let epoch = num(epoch_c)? as usize;
        if rows.last().map(|a| a.epoch) != Some(epoch) {
            rows.push(Acc {
                epoch,
                n: 0,
                loss: 0.0,
                acc: Vec::new(),
                info: 0.0,
                ratios: vec![0.0; ratio_cols.len()],
            });
        }
        let a = rows.last_mut().expect("row pushed");
        a.n += 1;
        a.loss += num(loss_c)?;
        a.acc.push(num(acc_c)?);
        a.info += num(info_c)?;
        for (slot, &c) in a.ratios.iter_mut().zip(&ratio_cols) {
            *slot += num(c)?;
        }
    }

    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = [
        "epoch",
        "workers",
        "mean_loss",
        "mean_test_accuracy",
        "min_test_accuracy",
        "max_test_accuracy",
        "mean_network_information",
    ]
    .map(String::from)
    .to_vec();
    head.extend(ratio_cols.iter().map(|&c| format!("mean_{}", &header[c])));
    w.write_record(&head)?;
    for a in rows {
        let n = a.n as f64;
        let min = a.acc.iter().copied().fold(f64::INFINITY, f64::min);
        let max = a.acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut row = vec![
            a.epoch.to_string(),
            a.n.to_string(),
            (a.loss / n).to_string(),
            (a.acc.iter().sum::<f64>() / n).to_string(),
            min.to_string(),
            max.to_string(),
            (a.info / n).to_string(),
        ];
        row.extend(a.ratios.iter().map(|s| (s / n).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use graft_core::coordinator::{LayerEntropy, WorkerRecord};
    use graft_core::diagnostics::ThresholdRatio;
    use graft_core::grafting::AlphaDecision;

    fn record(epoch: usize, accs: &[f64]) -> EpochRecord {
        EpochRecord {
            epoch,
            grafted: true,
            workers: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| WorkerRecord {
                    worker: i,
                    loss: 1.0 + i as f64,
                    lr: 0.1,
                    test_accuracy: a,
                    layer_entropies: vec![LayerEntropy {
                        name: "conv1".into(),
                        entropy: 2.0,
                    }],
                    network_information: 4.0,
                    invalid_ratio: vec![ThresholdRatio {
                        threshold: 1e-3,
                        ratio: 0.25 * i as f64,
                    }],
                    alphas: vec![AlphaDecision {
                        layer_name: "conv1".into(),
                        h_self: 1.0,
                        h_peer: 1.0,
                        alpha: 0.5,
                    }],
                })
                .collect(),
        }
    }

    #[test]
    fn files_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let history = vec![record(1, &[0.5, 0.7]), record(2, &[0.8, 0.6])];
        write_history(dir.path(), &history).unwrap();

        let csv_text = fs::read_to_string(dir.path().join(HISTORY_CSV)).unwrap();
        assert!(csv_text.starts_with(
            "epoch,worker,grafted,loss,lr,test_accuracy,network_information,invalid_ratio_1e-3\n"
        ));
        assert_eq!(csv_text.lines().count(), 5);

        let alphas: Vec<AlphaEntry> =
            serde_json::from_str(&fs::read_to_string(dir.path().join(ALPHAS_JSON)).unwrap()).unwrap();
        assert_eq!(alphas.len(), 4);
        assert_eq!(alphas[0].peer, 1);

        let mut out = Vec::new();
        aggregate(dir.path(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,workers,mean_loss,mean_test_accuracy,min_test_accuracy,max_test_accuracy,mean_network_information,mean_invalid_ratio_1e-3");
        assert_eq!(lines[1], "1,2,1.5,0.6,0.5,0.7,4,0.125");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn missing_history_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(aggregate(dir.path(), Vec::new()).unwrap_err().category(), "io");
    }
}
