//! Expected-sparsity penalties and the Lagrangian rate controller.
//!
//! All penalties take `P(Z_i = 0)` values (graph nodes) and assume the gates
//! are independent given the input, except [`expected_l0_dependent`], which
//! sums conditional probabilities computed along one sampled prefix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// `sum_i (1 - P(Z_i = 0))`.
pub fn expected_l0(g: &mut Graph, probs_zero: Var) -> Result<Var> {
    if g.value(probs_zero).numel() == 0 {
        return Err(Error::InvalidParam("expected_l0 of an empty sequence".into()));
    }
    let nonzero = g.one_minus(probs_zero)?;
    g.sum(nonzero)
}

/// Expected L0 divided by the number of positions.
pub fn expected_l0_rate(g: &mut Graph, probs_zero: Var) -> Result<Var> {
    if g.value(probs_zero).numel() == 0 {
        return Err(Error::InvalidParam("expected_l0 of an empty sequence".into()));
    }
    let nonzero = g.one_minus(probs_zero)?;
    g.mean(nonzero)
}

/// Expected number of zero/nonzero changes between neighbouring gates of a
/// single sequence laid out along axis 0.
pub fn expected_fused_lasso(g: &mut Graph, probs_zero: Var) -> Result<Var> {
    fused_lasso_strided(g, probs_zero, 1)
}

/// Fused lasso over a time-major batch: rows `t * stride + e` and
/// `(t + 1) * stride + e` are neighbours for every example `e`.
pub fn fused_lasso_strided(g: &mut Graph, probs_zero: Var, stride: usize) -> Result<Var> {
    let rows = g.shape(probs_zero).first().copied().unwrap_or(1);
    if stride == 0 || rows < 2 * stride {
        return Err(Error::InvalidParam(format!(
            "fused lasso needs at least two positions, got {} rows with stride {stride}",
            rows
        )));
    }
    let left = g.slice(probs_zero, 0, 0, rows - stride)?;
    let right = g.slice(probs_zero, 0, stride, rows - stride)?;
    let left_nz = g.one_minus(left)?;
    let right_nz = g.one_minus(right)?;
    let off_on = g.mul(left, right_nz)?;
    let on_off = g.mul(left_nz, right)?;
    let both = g.add(off_on, on_off)?;
    g.sum(both)
}

/// Single-prefix estimate of the expected L0 under prefix-dependent gates:
/// `sum_i (1 - P(Z_i = 0 | z_<i))` for the conditional probabilities of one
/// sampled prefix.
pub fn expected_l0_dependent(g: &mut Graph, step_probs_zero: &[Var]) -> Result<Var> {
    if step_probs_zero.is_empty() {
        return Err(Error::InvalidParam("expected_l0 of an empty sequence".into()));
    }
    let all = g.concat(step_probs_zero, 0)?;
    expected_l0(g, all)
}

/// Plain-value expected L0.
pub fn expected_l0_value(probs_zero: &[f64]) -> f64 {
    probs_zero.iter().map(|p| 1.0 - p).sum()
}

/// Plain-value expected fused lasso.
pub fn expected_fused_lasso_value(probs_zero: &[f64]) -> f64 {
    probs_zero
        .windows(2)
        .map(|w| w[0] * (1.0 - w[1]) + (1.0 - w[0]) * w[1])
        .sum()
}

/// Whether a target is an equality or an upper bound on its penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    #[default]
    Equality,
    /// Multipliers are clipped at zero after each ascent step.
    AtMost,
}

/// Multipliers, targets and the smoothed constraint for the saddle objective
/// `loss + lambda^T (R - targets)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: Vec<f64>,
    pub targets: Vec<f64>,
    pub lambda_lr: f64,
    pub beta: f64,
    pub constraint_ma: Vec<f64>,
    #[serde(default)]
    pub mode: ConstraintMode,
}

impl LagrangianState {
    pub fn new(targets: Vec<f64>, lambda_lr: f64, beta: f64) -> Result<Self> {
        if !(lambda_lr > 0.0) {
            return Err(Error::Config(format!("lambda_lr must be positive, got {lambda_lr}")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
        }
        let n = targets.len();
        Ok(LagrangianState {
            lambda: vec![0.0; n],
            targets,
            lambda_lr,
            beta,
            constraint_ma: vec![0.0; n],
            mode: ConstraintMode::Equality,
        })
    }

    pub fn with_mode(mut self, mode: ConstraintMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// One ascent step on the multipliers from observed penalty values.
    pub fn step(&mut self, observed: &[f64]) -> Result<()> {
        if observed.len() != self.targets.len()
            || self.lambda.len() != self.targets.len()
            || self.constraint_ma.len() != self.targets.len()
        {
            return Err(Error::InvalidParam(format!(
                "lagrangian step: {} observations for {} targets",
                observed.len(),
                self.targets.len()
            )));
        }
        for j in 0..self.targets.len() {
            let gap = observed[j] - self.targets[j];
            self.constraint_ma[j] = self.beta * self.constraint_ma[j] + (1.0 - self.beta) * gap;
            self.lambda[j] += self.lambda_lr * self.constraint_ma[j];
            if self.mode == ConstraintMode::AtMost {
                self.lambda[j] = self.lambda[j].max(0.0);
            }
        }
        Ok(())
    }
}

/// `task + sum_j lambda_j (R_j - r_j)` with the multipliers held constant.
pub fn total_loss(
    g: &mut Graph,
    task_loss: Var,
    penalties: &[Var],
    state: &LagrangianState,
) -> Result<Var> {
    if penalties.len() != state.len() {
        return Err(Error::InvalidParam(format!(
            "{} penalties for {} multipliers",
            penalties.len(),
            state.len()
        )));
    }
    let mut total = task_loss;
    for ((&r, &lambda), &target) in penalties.iter().zip(&state.lambda).zip(&state.targets) {
        let term = g.affine(r, lambda, -lambda * target)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    const P0_HALF: f64 = 0.156_599_226_105_888;

    fn eval(f: impl FnOnce(&mut Graph, Var) -> Result<Var>, p: Vec<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::column(p));
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    }

    #[test]
    fn expected_l0_cases() {
        let v = eval(expected_l0, vec![P0_HALF, P0_HALF]).unwrap();
        assert!((v - 1.686_801_547_788_224).abs() < 1e-12);
        assert_eq!(eval(expected_l0, vec![1.0; 5]).unwrap(), 0.0);
        assert_eq!(eval(expected_l0, vec![0.0; 5]).unwrap(), 5.0);
        assert!(eval(expected_l0, vec![]).is_err());
        let rate = eval(expected_l0_rate, vec![0.0, 1.0, 0.5, 0.5]).unwrap();
        assert_eq!(rate, 0.5);
    }

    #[test]
    fn fused_lasso_cases() {
        let v = eval(expected_fused_lasso, vec![P0_HALF, P0_HALF]).unwrap();
        assert!((v - 2.0 * P0_HALF * (1.0 - P0_HALF)).abs() < 1e-15);
        assert!((v - 0.264_151_816_977_850).abs() < 1e-12);
        assert_eq!(eval(expected_fused_lasso, vec![0.0; 6]).unwrap(), 0.0);
        assert_eq!(eval(expected_fused_lasso, vec![1.0; 6]).unwrap(), 0.0);
        let alt: Vec<f64> = (0..7).map(|i| (i % 2) as f64).collect();
        assert_eq!(eval(expected_fused_lasso, alt).unwrap(), 6.0);
        assert!(eval(expected_fused_lasso, vec![0.5]).is_err());
    }

    #[test]
    fn strided_fused_lasso_matches_per_example_sum() {
        // two examples, three steps, time-major
        let ex0 = [0.1, 0.7, 0.3];
        let ex1 = [0.9, 0.2, 0.4];
        let tm = vec![ex0[0], ex1[0], ex0[1], ex1[1], ex0[2], ex1[2]];
        let v = eval(|g, p| fused_lasso_strided(g, p, 2), tm).unwrap();
        let oracle = expected_fused_lasso_value(&ex0) + expected_fused_lasso_value(&ex1);
        assert!((v - oracle).abs() < 1e-15);
    }

    #[test]
    fn dependent_reduces_to_independent() {
        let mut g = Graph::new();
        let ps = [0.2, 0.5, 0.9];
        let steps: Vec<Var> = ps.iter().map(|&p| g.constant(Tensor::column(vec![p]))).collect();
        let dep = expected_l0_dependent(&mut g, &steps).unwrap();
        assert!((g.value(dep).item() - expected_l0_value(&ps)).abs() < 1e-15);
    }

    #[test]
    fn lagrangian_step_arithmetic() {
        let mut st = LagrangianState::new(vec![0.3], 1.0, 0.0).unwrap();
        st.step(&[0.5]).unwrap();
        assert!((st.lambda[0] - 0.2).abs() < 1e-15);
        let mut sat = LagrangianState::new(vec![0.3], 0.01, 0.99).unwrap();
        sat.step(&[0.3]).unwrap();
        assert_eq!(sat.lambda, vec![0.0]);
        assert!(sat.step(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn at_most_mode_clips_negative_multipliers() {
        let mut st = LagrangianState::new(vec![0.5], 1.0, 0.0)
            .unwrap()
            .with_mode(ConstraintMode::AtMost);
        st.step(&[0.2]).unwrap();
        assert_eq!(st.lambda[0], 0.0);
        let mut eq = LagrangianState::new(vec![0.5], 1.0, 0.0).unwrap();
        eq.step(&[0.2]).unwrap();
        assert!(eq.lambda[0] < 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let task = g.scalar(1.0);
        let r = g.scalar(0.4);
        let mut st = LagrangianState::new(vec![0.3], 0.01, 0.9).unwrap();
        let t0 = total_loss(&mut g, task, &[r], &st).unwrap();
        assert_eq!(g.value(t0).item(), 1.0);
        st.lambda[0] = 1.0;
        let t1 = total_loss(&mut g, task, &[r], &st).unwrap();
        assert!((g.value(t1).item() - 1.1).abs() < 1e-15);
    }
}
