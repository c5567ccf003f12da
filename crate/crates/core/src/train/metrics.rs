use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a metrics CSV. Loss columns hold epoch means; for the
/// unlabeled mode the primary loss is the triplet loss and the adversarial
/// column is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub style_top1: f64,
    pub category_top1: f64,
    pub loss_style: f64,
    pub loss_style_primary: f64,
    pub loss_style_adversarial: f64,
    pub loss_category: f64,
    pub loss_category_primary: f64,
    pub loss_category_adversarial: f64,
    pub alpha_style: f64,
    pub alpha_category: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{other:?}")),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
