//! CIFAR-10 binary format: records of one label byte followed by a 32x32
//! image as three 1024-byte planes (R, G, B).

use std::fs;
use std::path::PathBuf;

use graft_core::data::Dataset;
use graft_core::Tensor;

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
const RECORD: usize = 1 + PIXELS;
const MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Reads and concatenates batch files, normalizing each channel. `limit`
/// caps the total number of records.
pub fn read_cifar10(files: &[PathBuf], limit: Option<usize>) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    'files: for path in files {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of the {RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(RECORD) {
            if limit.is_some_and(|l| labels.len() >= l) {
                break 'files;
            }
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format(format!("{}: label {label} out of range", path.display())));
            }
            labels.push(label);
            for (c, plane) in rec[1..].chunks_exact(SIDE * SIDE).enumerate() {
                data.extend(plane.iter().map(|&p| (p as f64 / 255.0 - MEAN[c]) / STD[c]));
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Format("no CIFAR-10 records read".into()));
    }
    let images = Tensor::new(vec![n, 3, SIDE, SIDE], data)?;
    Ok(Dataset::new(images, labels, 10)?)
}
