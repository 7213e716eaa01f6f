//! Classifier over gated embeddings `z_i * e_i`.

use rand::Rng;

use super::cells::{BiEncoder, CellKind};
use super::{Batch, Linear};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Classifier {
    pub vocab: usize,
    pub classes: usize,
    pub embedding: ParamId,
    pub encoder: BiEncoder,
    pub output: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        classes: usize,
        embed_dim: usize,
        hidden: usize,
        cell: CellKind,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add_uniform("classifier.embedding", &[vocab, embed_dim], 1.0, rng);
        let encoder = BiEncoder::new(store, "classifier.encoder", cell, embed_dim, hidden, rng);
        let output = Linear::new(store, "classifier.output", 2 * hidden, classes, rng);
        Classifier {
            vocab,
            classes,
            embedding,
            encoder,
            output,
        }
    }

    /// Class logits `[size, classes]`. `gates` is a time-major `[len * size, 1]`
    /// column; `None` runs the ungated classifier.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        gates: Option<Var>,
    ) -> Result<Var> {
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= self.vocab) {
            return Err(Error::domain(
                "classifier",
                format!("token id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let rows = batch.ids().len();
        let table = g.param(store, self.embedding);
        let mut emb = g.embedding(table, batch.ids())?;
        if let Some(z) = gates {
            if g.shape(z) != [rows, 1] {
                return Err(Error::shape("classify_gated", &[g.shape(z), &[rows, 1]]));
            }
            let dim = g.shape(emb)[1];
            let zx = g.expand(z, &[rows, dim])?;
            emb = g.mul(emb, zx)?;
        }
        let size = batch.size();
        let xs = (0..batch.len())
            .map(|t| g.slice(emb, 0, t * size, size))
            .collect::<Result<Vec<_>>>()?;
        let st = self.encoder.run(g, store, &xs)?;
        let last = *st.fwd.last().expect("nonempty batch");
        let first = st.bwd[0];
        let both = g.concat(&[last, first], 1)?;
        self.output.forward(g, store, both)
    }

    /// Class distribution `[size, classes]`.
    pub fn classify_gated(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        gates: Option<Var>,
    ) -> Result<Var> {
        let logits = self.logits(g, store, batch, gates)?;
        g.softmax(logits)
    }
}

/// One-sample estimate of `-E[log P(y | x, z)]`, computed from logits so a
/// zero probability at the gold class cannot produce an infinite loss.
pub fn elbo_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}
