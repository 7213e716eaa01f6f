//! HardKuma attention over premise/hypothesis token pairs, and a gate-free
//! bag-of-embeddings baseline for the same task.

use rand::Rng;

use super::{deterministic_gates, draw_uniforms, GateMode, Linear, SHAPE_BIAS};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::dist::{self, StretchBounds};
use crate::error::{Error, Result};

/// Premise/hypothesis pairs with fixed side lengths `m` and `n`, stored
/// example-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchBatch {
    m: usize,
    n: usize,
    premise: Vec<usize>,
    hypothesis: Vec<usize>,
    labels: Vec<usize>,
}

impl MatchBatch {
    pub fn new(premises: &[&[usize]], hypotheses: &[&[usize]], labels: &[usize]) -> Result<Self> {
        if premises.is_empty() || premises.len() != hypotheses.len() || premises.len() != labels.len()
        {
            return Err(Error::InvalidParam(format!(
                "match batch with {} premises, {} hypotheses, {} labels",
                premises.len(),
                hypotheses.len(),
                labels.len()
            )));
        }
        let (m, n) = (premises[0].len(), hypotheses[0].len());
        if m == 0 || n == 0 {
            return Err(Error::InvalidParam("attention needs nonempty premise and hypothesis".into()));
        }
        if premises.iter().any(|p| p.len() != m) || hypotheses.iter().any(|h| h.len() != n) {
            return Err(Error::InvalidParam("match batch mixes side lengths".into()));
        }
        Ok(MatchBatch {
            m,
            n,
            premise: premises.concat(),
            hypothesis: hypotheses.concat(),
            labels: labels.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn sides(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn premise(&self) -> &[usize] {
        &self.premise
    }

    pub fn hypothesis(&self) -> &[usize] {
        &self.hypothesis
    }

    /// Cell `(e, i, j)` sits at row `(e * m + i) * n + j`.
    fn cell_ids(&self) -> (Vec<usize>, Vec<usize>) {
        let cells = self.size() * self.m * self.n;
        let mut p = Vec::with_capacity(cells);
        let mut h = Vec::with_capacity(cells);
        for e in 0..self.size() {
            for i in 0..self.m {
                for j in 0..self.n {
                    p.push(self.premise[e * self.m + i]);
                    h.push(self.hypothesis[e * self.n + j]);
                }
            }
        }
        (p, h)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionMatcher {
    pub vocab: usize,
    pub embedding: ParamId,
    /// Bilinear pair score `p^T M h`.
    pub bilinear: ParamId,
    pub head_a: Linear,
    pub head_b: Linear,
    pub compare: Linear,
    pub output: Linear,
    pub stretch: StretchBounds,
}

/// Cell columns are `[size * m * n, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub a: Var,
    pub b: Var,
    pub probs_zero: Var,
    pub gates: Var,
    pub logits: Var,
}

impl AttentionMatcher {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        classes: usize,
        embed_dim: usize,
        hidden: usize,
        stretch: StretchBounds,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (embed_dim as f64).sqrt();
        AttentionMatcher {
            vocab,
            embedding: store.add_uniform("attention.embedding", &[vocab, embed_dim], 1.0, rng),
            bilinear: store.add_uniform("attention.bilinear", &[embed_dim, embed_dim], s, rng),
            head_a: Linear::with_bias(store, "attention.head_a", 1, 1, SHAPE_BIAS, rng),
            head_b: Linear::with_bias(store, "attention.head_b", 1, 1, SHAPE_BIAS, rng),
            compare: Linear::new(store, "attention.compare", 2 * embed_dim, hidden, rng),
            output: Linear::new(store, "attention.output", hidden, classes, rng),
            stretch,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &MatchBatch,
        mode: GateMode<'_>,
    ) -> Result<AttentionOutput> {
        let (pid, hid) = batch.cell_ids();
        if let Some(&bad) = pid.iter().chain(&hid).find(|&&id| id >= self.vocab) {
            return Err(Error::domain(
                "attention",
                format!("token id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let rows = pid.len();
        let table = g.param(store, self.embedding);
        let p = g.embedding(table, &pid)?;
        let h = g.embedding(table, &hid)?;
        let m = g.param(store, self.bilinear);
        let pm = g.matmul(p, m)?;
        let prod = g.mul(pm, h)?;
        let score = g.sum_axis(prod, 1)?;
        let pa = self.head_a.forward(g, store, score)?;
        let pb = self.head_b.forward(g, store, score)?;
        let a = g.softplus(pa)?;
        let b = g.softplus(pb)?;
        let probs_zero = dist::prob_zero_node(g, a, b, self.stretch)?;
        let gates = match mode {
            GateMode::Sample(rng) => {
                let u = draw_uniforms(rng, rows);
                dist::sample_node(g, &u, a, b, self.stretch)?.h
            }
            GateMode::Deterministic(mean) => {
                let z = deterministic_gates(g.value(a).data(), g.value(b).data(), self.stretch, mean)?;
                g.constant(Tensor::column(z))
            }
            GateMode::Fixed(z) => {
                if z.len() != rows {
                    return Err(Error::shape("attention gates", &[&[z.len()], &[rows]]));
                }
                g.constant(Tensor::column(z.to_vec()))
            }
        };
        let pair = g.concat(&[p, h], 1)?;
        let cmp = self.compare.forward(g, store, pair)?;
        let cmp = g.tanh(cmp)?;
        let width = g.shape(cmp)[1];
        let zx = g.expand(gates, &[rows, width])?;
        let weighted = g.mul(cmp, zx)?;
        let (sm, sn) = batch.sides();
        let cube = g.reshape(weighted, &[batch.size(), sm * sn, width])?;
        let agg = g.sum_axis(cube, 1)?;
        let agg = g.reshape(agg, &[batch.size(), width])?;
        let logits = self.output.forward(g, store, agg)?;
        Ok(AttentionOutput {
            a,
            b,
            probs_zero,
            gates,
            logits,
        })
    }

    /// The `m x n` attention matrix of example `e`, row-major.
    pub fn matrix(g: &Graph, out: &AttentionOutput, batch: &MatchBatch, e: usize) -> Vec<Vec<f64>> {
        let (m, n) = batch.sides();
        let z = g.value(out.gates).data();
        (0..m)
            .map(|i| z[(e * m + i) * n..(e * m + i + 1) * n].to_vec())
            .collect()
    }
}

/// Mean premise and hypothesis embeddings through a one-layer tanh network.
#[derive(Clone, Debug)]
pub struct BagModel {
    pub vocab: usize,
    pub embedding: ParamId,
    pub hidden: Linear,
    pub output: Linear,
}

impl BagModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        classes: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BagModel {
            vocab,
            embedding: store.add_uniform("bag.embedding", &[vocab, embed_dim], 1.0, rng),
            hidden: Linear::new(store, "bag.hidden", 2 * embed_dim, hidden, rng),
            output: Linear::new(store, "bag.output", hidden, classes, rng),
        }
    }

    fn side_mean(&self, g: &mut Graph, table: Var, ids: &[usize], size: usize, len: usize) -> Result<Var> {
        let e = g.embedding(table, ids)?;
        let d = g.shape(e)[1];
        let cube = g.reshape(e, &[size, len, d])?;
        let s = g.sum_axis(cube, 1)?;
        let s = g.reshape(s, &[size, d])?;
        g.affine(s, 1.0 / len as f64, 0.0)
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, batch: &MatchBatch) -> Result<Var> {
        if let Some(&bad) = batch.premise().iter().chain(batch.hypothesis()).find(|&&id| id >= self.vocab) {
            return Err(Error::domain(
                "bag",
                format!("token id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let (m, n) = batch.sides();
        let table = g.param(store, self.embedding);
        let p = self.side_mean(g, table, batch.premise(), batch.size(), m)?;
        let h = self.side_mean(g, table, batch.hypothesis(), batch.size(), n)?;
        let x = g.concat(&[p, h], 1)?;
        let hid = self.hidden.forward(g, store, x)?;
        let hid = g.tanh(hid)?;
        self.output.forward(g, store, hid)
    }
}
