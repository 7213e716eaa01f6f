use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, RunConfig};
use crate::autodiff::NamedTensor;
use crate::dist::{self, KumaParams, StretchBounds};
use crate::error::{Error, Result};
use crate::sparsity::LagrangianState;

/// One row of the metrics CSV, written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean training objective over the interval, multiplier terms included.
    pub train_loss: f64,
    pub task_loss: f64,
    /// Mean expected nonzero rate on training batches over the interval.
    pub rate_l0: Option<f64>,
    /// Mean expected transitions per adjacent pair over the interval.
    pub rate_fused: Option<f64>,
    pub lambda_0: Option<f64>,
    pub lambda_1: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub precision: f64,
    pub selected_rate: f64,
    pub expected_rate: f64,
    pub transitions: f64,
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(MetricsWriter {
            inner: csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner
            .flush()
            .map_err(|e| Error::io("flushing metrics", e))
    }
}

/// Config, multipliers and parameters in one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub lagrangian: LagrangianState,
    pub params: BTreeMap<String, NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Model, lagr: &LagrangianState, step: usize) -> Result<Self> {
        if let Some((_, name, _)) = model.store.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(Error::InvalidParam(format!("{name} contains non-finite values")));
        }
        Ok(Checkpoint {
            config: model.config.clone(),
            step,
            lagrangian: lagr.clone(),
            params: model.store.to_named(),
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// One line of the rationale dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DumpRecord {
    Text {
        tokens: Vec<usize>,
        gates: Vec<f64>,
        gold_rationale: Vec<u8>,
        prediction: usize,
        label: usize,
    },
    Match {
        premise: Vec<usize>,
        hypothesis: Vec<usize>,
        attention: Vec<Vec<f64>>,
        gold_alignment: Vec<(usize, usize)>,
        prediction: usize,
        label: usize,
    },
}

/// A density row (`pdf`, `cdf` of the stretched variable at `x`) or a
/// point-mass row (`mass` at `x` = 0 or 1).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistRow {
    pub kind: &'static str,
    pub x: f64,
    pub pdf: Option<f64>,
    pub cdf: Option<f64>,
    pub mass: Option<f64>,
}

/// `grid - 1` interior density rows over `(l, r)`, the closing row `cdf = 1`
/// at `x = r`, then the masses at 0 and 1.
pub fn dist_table(p: KumaParams, s: StretchBounds, grid: usize) -> Result<Vec<DistRow>> {
    p.validate()?;
    s.validate()?;
    if grid < 2 {
        return Err(Error::InvalidParam(format!("grid must be at least 2, got {grid}")));
    }
    let mut rows = Vec::with_capacity(grid + 2);
    for i in 1..grid {
        let x = s.l + s.width() * i as f64 / grid as f64;
        rows.push(DistRow {
            kind: "density",
            x,
            pdf: Some(dist::stretched_pdf(x, p, s)?),
            cdf: Some(dist::stretched_cdf(x, p, s)?),
            mass: None,
        });
    }
    rows.push(DistRow {
        kind: "density",
        x: s.r,
        pdf: None,
        cdf: Some(1.0),
        mass: None,
    });
    for (x, mass) in [(0.0, dist::prob_zero(p, s)?), (1.0, dist::prob_one(p, s)?)] {
        rows.push(DistRow {
            kind: "mass",
            x,
            pdf: None,
            cdf: None,
            mass: Some(mass),
        });
    }
    Ok(rows)
}

pub fn write_dist_csv<W: Write>(out: W, rows: &[DistRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("writing distribution table", e))
}
