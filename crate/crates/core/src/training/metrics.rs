use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "episode",
    "eval_return",
    "win_rate",
    "mean_r_am",
    "mean_r_int",
    "loss_g",
    "grad_check_resid",
    "epsilon",
    "seed",
];

/// One evaluation checkpoint. Quantities that do not apply to a run (or had
/// no samples since the previous row) are NaN. For Spread, `win_rate` holds
/// the final landmark occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub eval_return: f64,
    pub win_rate: f64,
    pub mean_r_am: f64,
    pub mean_r_int: f64,
    pub loss_g: f64,
    pub grad_check_resid: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// Appends rows to a CSV file, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Into::into)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_nan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            step: 10,
            episode: 2,
            eval_return: 1.5,
            win_rate: 0.25,
            mean_r_am: f64::NAN,
            mean_r_int: -0.5,
            loss_g: 0.1,
            grad_check_resid: 1e-9,
            epsilon: 0.9,
            seed: 3,
        };
        let mut w = MetricsWriter::create(&path).unwrap();
        w.write(&row).unwrap();
        w.write(&MetricsRow { step: 20, ..row }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].mean_r_am.is_nan());
        assert_eq!(back[1].step, 20);
        assert_eq!(back[0].grad_check_resid, 1e-9);
    }
}
