//! Latent rationale models: extractor, gated classifier, recurrent cells and
//! the HardKuma attention matcher.

mod attention;
mod cells;
mod classifier;
mod extractor;

pub use attention::{AttentionMatcher, AttentionOutput, BagModel, MatchBatch};
pub use cells::{BiEncoder, BiStates, Cell, CellKind, CellState};
pub use classifier::{elbo_loss, Classifier};
pub use extractor::{Extractor, ExtractorOutput};

use rand::RngCore;

use crate::autodiff::ParamId;
use crate::dist::{self, GateMean, StretchBounds};
use crate::error::{Error, Result};

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Same-length sequences laid out time-major: row `t * size + e` holds
/// position `t` of example `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    len: usize,
    size: usize,
    ids: Vec<usize>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&[usize]], labels: &[usize]) -> Result<Self> {
        if seqs.is_empty() || seqs.len() != labels.len() {
            return Err(Error::InvalidParam(format!(
                "batch of {} sequences with {} labels",
                seqs.len(),
                labels.len()
            )));
        }
        let len = seqs[0].len();
        if len == 0 {
            return Err(Error::InvalidParam("empty sequence".into()));
        }
        if let Some(s) = seqs.iter().find(|s| s.len() != len) {
            return Err(Error::InvalidParam(format!(
                "batch mixes lengths {len} and {}",
                s.len()
            )));
        }
        let size = seqs.len();
        let mut ids = vec![0; len * size];
        for (e, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[t * size + e] = id;
            }
        }
        Ok(Batch {
            len,
            size,
            ids,
            labels: labels.to_vec(),
        })
    }

    pub fn single(seq: &[usize], label: usize) -> Result<Self> {
        Batch::new(&[seq], &[label])
    }

    /// Sequence length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of examples.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Regroups a time-major column of per-position values by example.
    pub fn per_example(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.size)
            .map(|e| (0..self.len).map(|t| values[t * self.size + e]).collect())
            .collect()
    }
}

/// Where gate values come from in a forward pass.
pub enum GateMode<'a> {
    /// One reparameterized draw per position.
    Sample(&'a mut dyn RngCore),
    /// Most likely configuration of each gate; not differentiable.
    Deterministic(GateMean),
    /// Externally supplied gate values, time-major.
    Fixed(&'a [f64]),
}

pub(crate) fn draw_uniforms(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| dist::uniform_open(rng)).collect()
}

pub(crate) fn deterministic_gates(
    a: &[f64],
    b: &[f64],
    s: StretchBounds,
    mean: GateMean,
) -> Result<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(&a, &b)| dist::deterministic_gate(dist::KumaParams::new(a, b)?, s, mean))
        .collect()
}

/// Softplus inverse of 1: shape heads start near `a = b = 1`.
pub const SHAPE_BIAS: f64 = 0.541_324_854_612_918_1;
