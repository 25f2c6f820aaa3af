//! Analysis instruments: per-layer feature sensitivity, per-class gradient
//! dependence, the analytic propagation-flow cost model and the measured
//! counters that check it.

mod cost;
mod fs;
mod gd;

use std::path::Path;

use serde::Serialize;

pub use cost::{block_costs, measure_step, predict_cost, BlockCosts, CostCounters, CostPrediction};
pub use fs::{feature_sensitivity, FsProfile};
pub use gd::{feature_gradient_rebuilt, gradient_dependence_rebuilt, vision_top, GdHistogram, GdProbe, GdRecord};

use crate::encoders::Side;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct FsRow {
    side: Side,
    layer: usize,
    fs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CostRow {
    pub config: String,
    pub predicted: f64,
    pub measured: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// `side,layer,fs`, layers 1-based.
pub fn write_fs_csv(path: &Path, profile: &FsProfile) -> Result<()> {
    let rows = Side::BOTH.into_iter().flat_map(|side| {
        profile
            .side(side)
            .iter()
            .enumerate()
            .map(move |(i, &fs)| FsRow { side, layer: i + 1, fs })
    });
    write_rows(path, rows)
}

/// `sample,class,gd`.
pub fn write_gd_csv(path: &Path, records: &[GdRecord]) -> Result<()> {
    write_rows(path, records)
}

/// `config,predicted,measured`.
pub fn write_cost_csv(path: &Path, rows: &[CostRow]) -> Result<()> {
    write_rows(path, rows)
}
