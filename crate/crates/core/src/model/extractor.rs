//! Extractor: maps tokens to per-position HardKuma shapes and gates.

use rand::Rng;

use super::cells::{BiEncoder, Cell, CellKind};
use super::{deterministic_gates, draw_uniforms, Batch, GateMode, Linear, SHAPE_BIAS};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::dist::{self, StretchBounds};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Extractor {
    pub vocab: usize,
    pub embedding: ParamId,
    pub encoder: BiEncoder,
    pub head_a: Linear,
    pub head_b: Linear,
    /// Recurrence over `[h_i; z_i]` that conditions later shapes on earlier
    /// gates. `None` for the independent extractor.
    pub dependency: Option<Cell>,
    pub stretch: StretchBounds,
}

/// All columns are `[len * size, 1]`, time-major.
#[derive(Clone, Copy, Debug)]
pub struct ExtractorOutput {
    pub a: Var,
    pub b: Var,
    /// `P(Z_i = 0)`; conditional on the gate prefix for the dependent model.
    pub probs_zero: Var,
    pub gates: Var,
}

impl Extractor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        cell: CellKind,
        dependency_hidden: Option<usize>,
        stretch: StretchBounds,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add_uniform("extractor.embedding", &[vocab, embed_dim], 1.0, rng);
        let encoder = BiEncoder::new(store, "extractor.encoder", cell, embed_dim, hidden, rng);
        let head_in = 2 * hidden + dependency_hidden.unwrap_or(0);
        let head_a = Linear::with_bias(store, "extractor.head_a", head_in, 1, SHAPE_BIAS, rng);
        let head_b = Linear::with_bias(store, "extractor.head_b", head_in, 1, SHAPE_BIAS, rng);
        let dependency = dependency_hidden.map(|dh| {
            Cell::new(store, "extractor.dependency", CellKind::Simple, 2 * hidden + 1, dh, rng)
        });
        Extractor {
            vocab,
            embedding,
            encoder,
            head_a,
            head_b,
            dependency,
            stretch,
        }
    }

    pub fn is_dependent(&self) -> bool {
        self.dependency.is_some()
    }

    fn states(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Vec<Var>> {
        if let Some(&bad) = batch.ids().iter().find(|&&id| id >= self.vocab) {
            return Err(Error::domain(
                "extractor",
                format!("token id {bad} outside vocabulary of {}", self.vocab),
            ));
        }
        let table = g.param(store, self.embedding);
        let emb = g.embedding(table, batch.ids())?;
        let size = batch.size();
        let xs = (0..batch.len())
            .map(|t| g.slice(emb, 0, t * size, size))
            .collect::<Result<Vec<_>>>()?;
        let st = self.encoder.run(g, store, &xs)?;
        st.fwd
            .iter()
            .zip(&st.bwd)
            .map(|(&f, &b)| g.concat(&[f, b], 1))
            .collect()
    }

    fn shapes(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<(Var, Var)> {
        let pa = self.head_a.forward(g, store, input)?;
        let pb = self.head_b.forward(g, store, input)?;
        Ok((g.softplus(pa)?, g.softplus(pb)?))
    }

    fn gates(
        &self,
        g: &mut Graph,
        a: Var,
        b: Var,
        mode: &mut GateMode<'_>,
        offset: usize,
    ) -> Result<Var> {
        let n = g.value(a).numel();
        match mode {
            GateMode::Sample(rng) => {
                let u = draw_uniforms(&mut **rng, n);
                Ok(dist::sample_node(g, &u, a, b, self.stretch)?.h)
            }
            GateMode::Deterministic(mean) => {
                let z = deterministic_gates(g.value(a).data(), g.value(b).data(), self.stretch, *mean)?;
                Ok(g.constant(Tensor::column(z)))
            }
            GateMode::Fixed(z) => {
                if offset + n > z.len() {
                    return Err(Error::shape("extractor gates", &[&[z.len()], &[offset + n]]));
                }
                Ok(g.constant(Tensor::column(z[offset..offset + n].to_vec())))
            }
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        mut mode: GateMode<'_>,
    ) -> Result<ExtractorOutput> {
        if let GateMode::Fixed(z) = mode {
            if z.len() != batch.ids().len() {
                return Err(Error::shape("extractor gates", &[&[z.len()], &[batch.ids().len()]]));
            }
        }
        let hs = self.states(g, store, batch)?;
        match &self.dependency {
            None => {
                let all = g.concat(&hs, 0)?;
                let (a, b) = self.shapes(g, store, all)?;
                let probs_zero = dist::prob_zero_node(g, a, b, self.stretch)?;
                let gates = self.gates(g, a, b, &mut mode, 0)?;
                Ok(ExtractorOutput {
                    a,
                    b,
                    probs_zero,
                    gates,
                })
            }
            Some(cell) => {
                let size = batch.size();
                let mut state = cell.zero_state(g, size);
                let (mut av, mut bv, mut pv, mut zv) = (vec![], vec![], vec![], vec![]);
                for (t, &h) in hs.iter().enumerate() {
                    let input = g.concat(&[h, state.output()], 1)?;
                    let (a, b) = self.shapes(g, store, input)?;
                    let p0 = dist::prob_zero_node(g, a, b, self.stretch)?;
                    let z = self.gates(g, a, b, &mut mode, t * size)?;
                    let step_in = g.concat(&[h, z], 1)?;
                    state = cell.step(g, store, step_in, &state)?;
                    av.push(a);
                    bv.push(b);
                    pv.push(p0);
                    zv.push(z);
                }
                Ok(ExtractorOutput {
                    a: g.concat(&av, 0)?,
                    b: g.concat(&bv, 0)?,
                    probs_zero: g.concat(&pv, 0)?,
                    gates: g.concat(&zv, 0)?,
                })
            }
        }
    }
}
