//! Kumaraswamy, stretched Kumaraswamy and rectified (HardKuma) distributions.
//!
//! Scalar functions return plain values; the `*_node` functions record the
//! same quantities on an autodiff [`Graph`] with analytic partials with
//! respect to the shape parameters.
//!
//! A HardKuma sample is produced from a uniform draw `u` in three steps:
//! `k = F_K^{-1}(u; a, b)`, `t = l + (r - l) k`, `h = min(1, max(0, t))`.
//! Mass of the stretched variable below 0 and above 1 collapses onto exact
//! zeros and ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Uniform draws are taken from `(EPS, 1 - EPS)`; the same bound clamps `k`
/// on the differentiable sampling path.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KumaParams {
    pub a: f64,
    pub b: f64,
}

impl KumaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let p = KumaParams { a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "Kumaraswamy shapes must be positive and finite, got a={}, b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// Support `(l, r)` of the stretched variable, `l < 0 < 1 < r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StretchBounds {
    pub l: f64,
    pub r: f64,
}

impl Default for StretchBounds {
    fn default() -> Self {
        StretchBounds { l: -0.1, r: 1.1 }
    }
}

impl StretchBounds {
    pub fn new(l: f64, r: f64) -> Result<Self> {
        let s = StretchBounds { l, r };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l < 0.0 && self.r > 1.0 && self.l.is_finite() && self.r.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "stretch bounds need l < 0 < 1 < r, got l={}, r={}",
                self.l, self.r
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.r - self.l
    }

    /// Position of `h = 0` on the unit Kumaraswamy scale.
    pub fn zero_point(&self) -> f64 {
        -self.l / self.width()
    }

    /// Position of `h = 1` on the unit Kumaraswamy scale.
    pub fn one_point(&self) -> f64 {
        (1.0 - self.l) / self.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardKumaSample {
    pub u: f64,
    pub k: f64,
    pub t: f64,
    pub h: f64,
}

/// How the continuous branch of [`deterministic_gate`] is turned into a gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMean {
    /// Stretch the Kumaraswamy mean to `(l, r)` and rectify.
    #[default]
    Stretched,
    /// Use the Kumaraswamy mean as is.
    Raw,
}

fn check_unit(op: &'static str, x: f64, closed: bool) -> Result<()> {
    let ok = if closed {
        (0.0..=1.0).contains(&x)
    } else {
        x > 0.0 && x < 1.0
    };
    if ok {
        Ok(())
    } else {
        let interval = if closed { "[0, 1]" } else { "(0, 1)" };
        Err(Error::domain(op, format!("{x} outside {interval}")))
    }
}

pub fn kuma_pdf(k: f64, p: KumaParams) -> Result<f64> {
    p.validate()?;
    check_unit("kuma_pdf", k, false)?;
    Ok(pdf_unchecked(k, p))
}

fn pdf_unchecked(k: f64, p: KumaParams) -> f64 {
    let ln_k = k.ln();
    let ka = (p.a * ln_k).exp();
    let ln_pdf = p.a.ln() + p.b.ln() + (p.a - 1.0) * ln_k + (p.b - 1.0) * (-ka).ln_1p();
    ln_pdf.exp()
}

/// `1 - (1 - k^a)^b`.
pub fn kuma_cdf(k: f64, p: KumaParams) -> Result<f64> {
    p.validate()?;
    check_unit("kuma_cdf", k, true)?;
    Ok(cdf_parts(k, p).0)
}

/// cdf with its partials in `(a, b)`.
fn cdf_parts(x: f64, p: KumaParams) -> (f64, f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let ln_x = x.ln();
    let xa = (p.a * ln_x).exp();
    // v = 1 - x^a, kept accurate for x^a close to 0
    let v = (-(p.a * ln_x).exp_m1()).max(f64::MIN_POSITIVE);
    // ln(1 - x^a) through ln_1p while x^a is small, else v rounds to 1
    let ln_v = if xa < 0.5 { (-xa).ln_1p() } else { v.ln() };
    let survival = (p.b * ln_v).exp();
    let cdf = -(p.b * ln_v).exp_m1();
    let d_a = survival * p.b * xa * ln_x / v;
    let d_b = -survival * ln_v;
    (cdf, d_a, d_b)
}

/// `(1 - (1 - u)^(1/b))^(1/a)` on the open interval.
pub fn kuma_icdf(u: f64, p: KumaParams) -> Result<f64> {
    p.validate()?;
    check_unit("kuma_icdf", u, false)?;
    Ok(icdf_parts(u, p).0)
}

/// Inverse cdf with partials in `(a, b)`; unclamped.
fn icdf_parts(u: f64, p: KumaParams) -> (f64, f64, f64) {
    let ln_1mu = (-u).ln_1p();
    let w_exp = ln_1mu / p.b;
    let w = w_exp.exp();
    let q = -w_exp.exp_m1();
    if q <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let ln_q = q.ln();
    let k = (ln_q / p.a).exp();
    let d_a = -k * ln_q / (p.a * p.a);
    let d_b = k * w * ln_1mu / (p.a * q * p.b * p.b);
    (k, d_a, d_b)
}

/// Inverse cdf with `k` clamped to `[EPS, 1 - EPS]`; clamped outputs have zero
/// partials. Because `l < 0` and `r > 1`, the clamp never changes the
/// rectified gate.
fn icdf_clamped(u: f64, p: KumaParams) -> (f64, f64, f64) {
    let (k, d_a, d_b) = icdf_parts(u, p);
    if k < EPS {
        (EPS, 0.0, 0.0)
    } else if k > 1.0 - EPS {
        (1.0 - EPS, 0.0, 0.0)
    } else {
        (k, d_a, d_b)
    }
}

pub fn stretched_cdf(t: f64, p: KumaParams, s: StretchBounds) -> Result<f64> {
    s.validate()?;
    if !(s.l..=s.r).contains(&t) {
        return Err(Error::domain(
            "stretched_cdf",
            format!("{t} outside [{}, {}]", s.l, s.r),
        ));
    }
    kuma_cdf(((t - s.l) / s.width()).clamp(0.0, 1.0), p)
}

/// Density of the stretched variable on the open interval `(l, r)`.
pub fn stretched_pdf(t: f64, p: KumaParams, s: StretchBounds) -> Result<f64> {
    s.validate()?;
    let k = (t - s.l) / s.width();
    Ok(kuma_pdf(k, p)? / s.width())
}

/// `P(H = 0) = F_K(-l / (r - l))`.
pub fn prob_zero(p: KumaParams, s: StretchBounds) -> Result<f64> {
    p.validate()?;
    s.validate()?;
    Ok(cdf_parts(s.zero_point(), p).0)
}

/// `P(H = 1) = 1 - F_K((1 - l) / (r - l))`.
pub fn prob_one(p: KumaParams, s: StretchBounds) -> Result<f64> {
    p.validate()?;
    s.validate()?;
    let x = s.one_point();
    if x >= 1.0 {
        return Ok(0.0);
    }
    // survival directly; 1 - cdf cancels when it is tiny
    let v = -(p.a * x.ln()).exp_m1();
    Ok((p.b * v.ln()).exp())
}

/// `P(0 < H < 1)`.
pub fn prob_continuous(p: KumaParams, s: StretchBounds) -> Result<f64> {
    Ok(1.0 - prob_zero(p, s)? - prob_one(p, s)?)
}

/// Log of the mixed measure: log point mass at 0 and 1, log density inside.
pub fn hardkuma_log_density(h: f64, p: KumaParams, s: StretchBounds) -> Result<f64> {
    check_unit("hardkuma_log_density", h, true)?;
    if h == 0.0 {
        Ok(prob_zero(p, s)?.ln())
    } else if h == 1.0 {
        Ok(prob_one(p, s)?.ln())
    } else {
        Ok(stretched_pdf(h, p, s)?.ln())
    }
}

/// Reparameterized sample from a uniform draw `u` in `(0, 1)`.
pub fn sample(u: f64, p: KumaParams, s: StretchBounds) -> Result<HardKumaSample> {
    p.validate()?;
    s.validate()?;
    check_unit("sample", u, false)?;
    let (k, _, _) = icdf_clamped(u, p);
    let t = s.l + s.width() * k;
    let h = t.clamp(0.0, 1.0);
    Ok(HardKumaSample { u, k, t, h })
}

/// Uniform draw on `(EPS, 1 - EPS)`.
pub fn uniform_open<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    EPS + (1.0 - 2.0 * EPS) * rng.gen::<f64>()
}

/// Lanczos approximation (g = 7, 9 terms) with reflection below 0.5.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `E[K] = b * Gamma(1 + 1/a) * Gamma(b) / Gamma(1 + 1/a + b)`.
pub fn kuma_mean(p: KumaParams) -> Result<f64> {
    p.validate()?;
    let s = 1.0 + 1.0 / p.a;
    Ok((p.b.ln() + ln_gamma(s) + ln_gamma(p.b) - ln_gamma(s + p.b)).exp())
}

/// Most likely configuration of a HardKuma gate: 0, 1, or (when the
/// continuous interval is most probable) the gate derived from the
/// Kumaraswamy mean. Ties resolve in the order 0, 1, continuous.
pub fn deterministic_gate(p: KumaParams, s: StretchBounds, mean: GateMean) -> Result<f64> {
    let p0 = prob_zero(p, s)?;
    let p1 = prob_one(p, s)?;
    match most_likely_branch(p0, p1, 1.0 - p0 - p1) {
        GateBranch::Zero => Ok(0.0),
        GateBranch::One => Ok(1.0),
        GateBranch::Continuous => {
            let m = kuma_mean(p)?;
            Ok(match mean {
                GateMean::Stretched => (s.l + s.width() * m).clamp(0.0, 1.0),
                GateMean::Raw => m,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateBranch {
    Zero,
    One,
    Continuous,
}

/// Argmax over the three configurations with ties broken as 0, 1, continuous.
pub fn most_likely_branch(p0: f64, p1: f64, pc: f64) -> GateBranch {
    if p0 >= p1 && p0 >= pc {
        GateBranch::Zero
    } else if p1 >= pc {
        GateBranch::One
    } else {
        GateBranch::Continuous
    }
}

fn shapes_of(g: &Graph, a: Var, b: Var) -> Result<Vec<KumaParams>> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::shape("kuma", &[ta.shape(), tb.shape()]));
    }
    ta.data()
        .iter()
        .zip(tb.data())
        .map(|(&a, &b)| KumaParams::new(a, b))
        .collect()
}

/// Elementwise `F_K(x; a, b)` at a fixed point `x`, differentiable in `a, b`.
pub fn kuma_cdf_node(g: &mut Graph, x: f64, a: Var, b: Var) -> Result<Var> {
    check_unit("kuma_cdf", x, true)?;
    let params = shapes_of(g, a, b)?;
    let n = params.len();
    let (mut v, mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for p in params {
        let (f, fa, fb) = cdf_parts(x, p);
        v.push(f);
        da.push(fa);
        db.push(fb);
    }
    g.mapped("kuma_cdf", &[a, b], v, vec![da, db])
}

/// `P(H = 0)` per element as a graph node.
pub fn prob_zero_node(g: &mut Graph, a: Var, b: Var, s: StretchBounds) -> Result<Var> {
    s.validate()?;
    kuma_cdf_node(g, s.zero_point(), a, b)
}

/// `P(H = 1)` per element as a graph node.
pub fn prob_one_node(g: &mut Graph, a: Var, b: Var, s: StretchBounds) -> Result<Var> {
    s.validate()?;
    let f = kuma_cdf_node(g, s.one_point(), a, b)?;
    g.one_minus(f)
}

/// Elementwise clamped inverse cdf for fixed uniforms `u`.
pub fn kuma_icdf_node(g: &mut Graph, u: &[f64], a: Var, b: Var) -> Result<Var> {
    let params = shapes_of(g, a, b)?;
    if params.len() != u.len() {
        return Err(Error::shape("kuma_icdf", &[g.shape(a), &[u.len()]]));
    }
    let n = u.len();
    let (mut v, mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&ui, p) in u.iter().zip(params) {
        check_unit("kuma_icdf", ui, false)?;
        let (k, ka, kb) = icdf_clamped(ui, p);
        v.push(k);
        da.push(ka);
        db.push(kb);
    }
    g.mapped("kuma_icdf", &[a, b], v, vec![da, db])
}

/// Graph nodes of a reparameterized HardKuma draw.
#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    pub k: Var,
    pub t: Var,
    pub h: Var,
}

pub fn sample_node(
    g: &mut Graph,
    u: &[f64],
    a: Var,
    b: Var,
    s: StretchBounds,
) -> Result<GateNodes> {
    s.validate()?;
    let k = kuma_icdf_node(g, u, a, b)?;
    let t = g.affine(k, s.width(), s.l)?;
    let h = g.hard_sigmoid(t)?;
    Ok(GateNodes { k, t, h })
}
