//! Recurrent cells: a plain tanh recurrence, an LSTM-style cell and the
//! bigram RCNN cell whose two cell states pick up non-consecutive features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellKind {
    #[default]
    Simple,
    Lstm,
    Rcnn,
}

#[derive(Clone, Debug)]
enum Weights {
    /// `h' = tanh(x W + h U + b)`
    Simple { w: ParamId, u: ParamId, b: ParamId },
    /// Gates packed as `[input, forget, candidate, output]` along columns.
    Lstm { w: ParamId, u: ParamId, b: ParamId },
    Rcnn {
        w_gate: ParamId,
        u_gate: ParamId,
        b_gate: ParamId,
        w1: ParamId,
        w2: ParamId,
        b: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Cell {
    kind: CellKind,
    input: usize,
    hidden: usize,
    weights: Weights,
}

/// Recurrent state; the last entry is always the output `h`.
#[derive(Clone, Debug)]
pub struct CellState {
    parts: Vec<Var>,
}

impl CellState {
    pub fn output(&self) -> Var {
        *self.parts.last().expect("cell state is never empty")
    }

    pub fn parts(&self) -> &[Var] {
        &self.parts
    }

    pub fn from_parts(parts: Vec<Var>) -> Self {
        CellState { parts }
    }
}

impl Cell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let sx = 1.0 / (input as f64).sqrt();
        let sh = 1.0 / (hidden as f64).sqrt();
        let weights = match kind {
            CellKind::Simple => Weights::Simple {
                w: store.add_uniform(format!("{prefix}.w"), &[input, hidden], sx, rng),
                u: store.add_uniform(format!("{prefix}.u"), &[hidden, hidden], sh, rng),
                b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, hidden])),
            },
            CellKind::Lstm => Weights::Lstm {
                w: store.add_uniform(format!("{prefix}.w"), &[input, 4 * hidden], sx, rng),
                u: store.add_uniform(format!("{prefix}.u"), &[hidden, 4 * hidden], sh, rng),
                b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 4 * hidden])),
            },
            CellKind::Rcnn => Weights::Rcnn {
                w_gate: store.add_uniform(format!("{prefix}.w_gate"), &[input, hidden], sx, rng),
                u_gate: store.add_uniform(format!("{prefix}.u_gate"), &[hidden, hidden], sh, rng),
                b_gate: store.add(format!("{prefix}.b_gate"), Tensor::zeros(&[1, hidden])),
                w1: store.add_uniform(format!("{prefix}.w1"), &[input, hidden], sx, rng),
                w2: store.add_uniform(format!("{prefix}.w2"), &[input, hidden], sx, rng),
                b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, hidden])),
            },
        };
        Cell {
            kind,
            input,
            hidden,
            weights,
        }
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    /// Parameters of this cell in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.weights {
            Weights::Simple { w, u, b } | Weights::Lstm { w, u, b } => vec![*w, *u, *b],
            Weights::Rcnn {
                w_gate,
                u_gate,
                b_gate,
                w1,
                w2,
                b,
            } => vec![*w_gate, *u_gate, *b_gate, *w1, *w2, *b],
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> CellState {
        let parts = match self.kind {
            CellKind::Simple => 1,
            CellKind::Lstm => 2,
            CellKind::Rcnn => 3,
        };
        let parts = (0..parts)
            .map(|_| g.constant(Tensor::zeros(&[batch, self.hidden])))
            .collect();
        CellState { parts }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        state: &CellState,
    ) -> Result<CellState> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.input {
            return Err(Error::shape("cell", &[xs, &[self.input]]));
        }
        let rows = xs[0];
        match &self.weights {
            Weights::Simple { w, u, b } => {
                let h = state.parts[0];
                let pre = affine_pair(g, store, x, *w, h, *u, *b, rows)?;
                Ok(CellState {
                    parts: vec![g.tanh(pre)?],
                })
            }
            Weights::Lstm { w, u, b } => {
                let (c, h) = (state.parts[0], state.parts[1]);
                let pre = affine_pair(g, store, x, *w, h, *u, *b, rows)?;
                let hd = self.hidden;
                let i = g.slice(pre, 1, 0, hd)?;
                let f = g.slice(pre, 1, hd, hd)?;
                let cand = g.slice(pre, 1, 2 * hd, hd)?;
                let o = g.slice(pre, 1, 3 * hd, hd)?;
                let (i, f, o) = (g.sigmoid(i)?, g.sigmoid(f)?, g.sigmoid(o)?);
                let cand = g.tanh(cand)?;
                let keep = g.mul(f, c)?;
                let write = g.mul(i, cand)?;
                let c_new = g.add(keep, write)?;
                let c_act = g.tanh(c_new)?;
                let h_new = g.mul(o, c_act)?;
                Ok(CellState {
                    parts: vec![c_new, h_new],
                })
            }
            Weights::Rcnn {
                w_gate,
                u_gate,
                b_gate,
                w1,
                w2,
                b,
            } => {
                let (c1, c2, h) = (state.parts[0], state.parts[1], state.parts[2]);
                let gate_pre = affine_pair(g, store, x, *w_gate, h, *u_gate, *b_gate, rows)?;
                let gate = g.sigmoid(gate_pre)?;
                let open = g.one_minus(gate)?;
                let w1v = g.param(store, *w1);
                let w2v = g.param(store, *w2);
                let xw1 = g.matmul(x, w1v)?;
                let xw2 = g.matmul(x, w2v)?;
                let c1_keep = g.mul(gate, c1)?;
                let c1_write = g.mul(open, xw1)?;
                let c1_new = g.add(c1_keep, c1_write)?;
                let c2_keep = g.mul(gate, c2)?;
                let c2_in = g.add(c1, xw2)?;
                let c2_write = g.mul(open, c2_in)?;
                let c2_new = g.add(c2_keep, c2_write)?;
                let bias = bias_rows(g, store, *b, rows)?;
                let pre = g.add(c2_new, bias)?;
                let h_new = g.tanh(pre)?;
                Ok(CellState {
                    parts: vec![c1_new, c2_new, h_new],
                })
            }
        }
    }
}

pub(crate) fn bias_rows(g: &mut Graph, store: &ParamStore, b: ParamId, rows: usize) -> Result<Var> {
    let bv = g.param(store, b);
    let cols = g.shape(bv)[1];
    g.expand(bv, &[rows, cols])
}

#[allow(clippy::too_many_arguments)]
fn affine_pair(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: ParamId,
    h: Var,
    u: ParamId,
    b: ParamId,
    rows: usize,
) -> Result<Var> {
    let wv = g.param(store, w);
    let uv = g.param(store, u);
    let xw = g.matmul(x, wv)?;
    let hu = g.matmul(h, uv)?;
    let s = g.add(xw, hu)?;
    let bias = bias_rows(g, store, b, rows)?;
    g.add(s, bias)
}

/// Forward and backward cells over the same input sequence.
#[derive(Clone, Debug)]
pub struct BiEncoder {
    pub fwd: Cell,
    pub bwd: Cell,
}

/// Per-position states of a bidirectional pass.
pub struct BiStates {
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
}

impl BiEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        BiEncoder {
            fwd: Cell::new(store, &format!("{prefix}.fwd"), kind, input, hidden, rng),
            bwd: Cell::new(store, &format!("{prefix}.bwd"), kind, input, hidden, rng),
        }
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<BiStates> {
        let rows = g.shape(xs[0])[0];
        let mut fwd = Vec::with_capacity(xs.len());
        let mut st = self.fwd.zero_state(g, rows);
        for &x in xs {
            st = self.fwd.step(g, store, x, &st)?;
            fwd.push(st.output());
        }
        let mut bwd = vec![fwd[0]; xs.len()];
        let mut st = self.bwd.zero_state(g, rows);
        for (t, &x) in xs.iter().enumerate().rev() {
            st = self.bwd.step(g, store, x, &st)?;
            bwd[t] = st.output();
        }
        Ok(BiStates { fwd, bwd })
    }
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (input as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{prefix}.w"), &[input, output], s, rng),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, output])),
        }
    }

    /// Bias initialized to a constant, used for the softplus shape heads.
    pub fn with_bias<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        let s = 1.0 / (input as f64).sqrt();
        Linear {
            w: store.add_uniform(format!("{prefix}.w"), &[input, output], s, rng),
            b: store.add(format!("{prefix}.b"), Tensor::filled(&[1, output], bias)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let wv = g.param(store, self.w);
        let xw = g.matmul(x, wv)?;
        let bias = bias_rows(g, store, self.b, rows)?;
        g.add(xw, bias)
    }
}
