//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed. Run with `--nocapture` to see the lines.

mod common;

use std::time::Instant;

use hardkuma::autodiff::{Graph, ParamStore, Tensor};
use hardkuma::corpus::{Layout, Split};
use hardkuma::dist::{self, KumaParams, StretchBounds};
use hardkuma::model::{Batch, CellKind, Extractor, GateMode};
use hardkuma::optim::OptimizerKind;
use hardkuma::sparsity;
use hardkuma::train::{self, Data, GatePolicy, MetricsRow, ModelKind, RunConfig};

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String, secs: f64) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {n}: {detail} [{secs:.1}s]");
        self.lines.push((n, pass, detail));
    }
}

const GRID: [f64; 5] = [0.3, 0.5, 1.0, 2.0, 5.0];

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * i as f64);
    }
    acc * h / 3.0
}

fn distribution_oracle(rep: &mut Report) {
    let t0 = Instant::now();
    let s = StretchBounds::default();
    let n = 1_000_000usize;
    let mut rng = common::rng(2024);
    let (mut worst_rt, mut worst_mass, mut worst_z) = (0.0f64, 0.0f64, 0.0f64);
    let mut fig2 = String::new();
    for &a in &GRID {
        for &b in &GRID {
            let p = KumaParams { a, b };
            for i in 1..1000 {
                let u = i as f64 / 1000.0;
                let back = dist::kuma_cdf(dist::kuma_icdf(u, p).unwrap(), p).unwrap();
                worst_rt = worst_rt.max((back - u).abs());
            }
            let pdf = |t: f64| dist::stretched_pdf(t, p, s).unwrap();
            let cont = simpson(pdf, 0.0, 1.0, 20_000);
            let (p0, p1) = (dist::prob_zero(p, s).unwrap(), dist::prob_one(p, s).unwrap());
            worst_mass = worst_mass.max((cont + p0 + p1 - 1.0).abs());
            let mean = p1 + simpson(|t| t * pdf(t), 0.0, 1.0, 20_000);

            let (mut zeros, mut ones, mut sum, mut sum_sq) = (0usize, 0usize, 0.0, 0.0);
            for _ in 0..n {
                let h = dist::sample(dist::uniform_open(&mut rng), p, s).unwrap().h;
                if h == 0.0 {
                    zeros += 1;
                } else if h == 1.0 {
                    ones += 1;
                }
                sum += h;
                sum_sq += h * h;
            }
            let nf = n as f64;
            let (f0, f1, m) = (zeros as f64 / nf, ones as f64 / nf, sum / nf);
            let se0 = (p0 * (1.0 - p0) / nf).sqrt();
            let se1 = (p1 * (1.0 - p1) / nf).sqrt();
            let sem = ((sum_sq / nf - m * m) / nf).sqrt();
            for z in [(f0 - p0) / se0, (f1 - p1) / se1, (m - mean) / sem] {
                worst_z = worst_z.max(z.abs());
            }
            if a == 0.5 && b == 0.5 {
                fig2 = format!(
                    "a=b=0.5: P0 {p0:.6} (MC {f0:.6}, quoted 0.156603), P1 {p1:.6} (MC {f1:.6}, quoted 0.206333)"
                );
            }
        }
    }
    let pass = worst_rt < 1e-9 && worst_mass < 1e-6 && worst_z <= 3.0;
    rep.record(
        1,
        pass,
        format!(
            "icdf round trip max {worst_rt:.2e}; mass defect max {worst_mass:.2e}; MC max |z| {worst_z:.2}; {fig2}"
        ),
        t0.elapsed().as_secs_f64(),
    );
}

fn gradient_suite(rep: &mut Report) {
    let t0 = Instant::now();
    let ops = common::op_suite();
    let (worst_name, worst_op) = ops
        .iter()
        .fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let (path, draws) = common::sample_path_error();
    let rcnn = common::rcnn_unroll_error();
    let e2e_ind = common::end_to_end_error(false);
    let e2e_dep = common::end_to_end_error(true);
    let pass = worst_op < 1e-4 && path < 1e-4 && rcnn < 1e-4 && e2e_ind < 1e-3 && e2e_dep < 1e-3;
    rep.record(
        2,
        pass,
        format!(
            "{} ops, worst {worst_name} {worst_op:.1e}; sample path {path:.1e} over {draws} draws; \
             RCNN unroll {rcnn:.1e}; end-to-end {e2e_ind:.1e} (independent) {e2e_dep:.1e} (dependent)",
            ops.len()
        ),
        t0.elapsed().as_secs_f64(),
    );
}

/// Largest |z| of 10^6-sample counts against the analytic penalties.
fn independent_penalties() -> f64 {
    use rand::Rng;
    let s = StretchBounds::default();
    let mut rng = common::rng(77);
    let n = 1_000_000usize;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let len = rng.gen_range(2..=8);
        let params: Vec<KumaParams> = (0..len)
            .map(|_| KumaParams { a: rng.gen_range(0.2..5.0), b: rng.gen_range(0.2..5.0) })
            .collect();
        let mut g = Graph::new();
        let a = g.constant(Tensor::column(params.iter().map(|p| p.a).collect()));
        let b = g.constant(Tensor::column(params.iter().map(|p| p.b).collect()));
        let p0 = dist::prob_zero_node(&mut g, a, b, s).unwrap();
        let l0 = sparsity::expected_l0(&mut g, p0).unwrap();
        let fused = sparsity::expected_fused_lasso(&mut g, p0).unwrap();
        let (l0, fused) = (g.value(l0).item(), g.value(fused).item());

        let (mut s_l0, mut q_l0, mut s_f, mut q_f) = (0.0, 0.0, 0.0, 0.0);
        let mut nz = vec![false; len];
        for _ in 0..n {
            for (i, p) in params.iter().enumerate() {
                nz[i] = dist::sample(dist::uniform_open(&mut rng), *p, s).unwrap().h != 0.0;
            }
            let c = nz.iter().filter(|&&v| v).count() as f64;
            let t = nz.windows(2).filter(|w| w[0] != w[1]).count() as f64;
            s_l0 += c;
            q_l0 += c * c;
            s_f += t;
            q_f += t * t;
        }
        let nf = n as f64;
        for (sum, sq, exact) in [(s_l0, q_l0, l0), (s_f, q_f, fused)] {
            let m = sum / nf;
            let se = ((sq / nf - m * m) / nf).sqrt();
            worst = worst.max((m - exact).abs() / se);
        }
    }
    worst
}

/// Single-prefix estimator of the dependent extractor against nested
/// quadrature over the uniforms of the first two gates, n = 3.
fn dependent_penalty() -> (f64, f64, f64, f64) {
    let s = StretchBounds::default();
    let mut rng = common::rng(31);
    let mut store = ParamStore::new();
    let ex = Extractor::new(&mut store, 10, 4, 3, CellKind::Simple, Some(3), s, &mut rng);
    // sharpen the dependence of each gate on the previous ones
    for (id, name) in store.iter().map(|(id, n, _)| (id, n.to_string())).collect::<Vec<_>>() {
        let scale = if name.starts_with("extractor.dependency") {
            4.0
        } else if name.starts_with("extractor.head") {
            3.0
        } else {
            1.0
        };
        for v in store.get_mut(id).data_mut() {
            *v *= scale;
        }
    }
    let seq = [3usize, 7, 1];

    let samples = 10_000usize;
    let rows: Vec<&[usize]> = vec![&seq[..]; samples];
    let batch = Batch::new(&rows, &vec![0; samples]).unwrap();
    let mut g = Graph::new();
    let out = ex.forward(&mut g, &store, &batch, GateMode::Sample(&mut rng)).unwrap();
    let p0 = g.value(out.probs_zero).data();
    let est: Vec<f64> = (0..samples)
        .map(|e| (0..3).map(|t| 1.0 - p0[t * samples + e]).sum())
        .collect();
    let mean = est.iter().sum::<f64>() / samples as f64;
    let var = est.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (samples - 1) as f64;
    let se = (var / samples as f64).sqrt();

    let grid = 400usize;
    let mid = |i: usize| (i as f64 + 0.5) / grid as f64;
    let run = |z: &[f64], size: usize| {
        let rows: Vec<&[usize]> = vec![&seq[..]; size];
        let batch = Batch::new(&rows, &vec![0; size]).unwrap();
        let mut g = Graph::new();
        let out = ex.forward(&mut g, &store, &batch, GateMode::Fixed(z)).unwrap();
        (
            g.value(out.probs_zero).data().to_vec(),
            g.value(out.a).data().to_vec(),
            g.value(out.b).data().to_vec(),
        )
    };
    let (p_first, a_first, b_first) = run(&[0.0; 3], 1);
    let first = KumaParams { a: a_first[0], b: b_first[0] };
    let z1: Vec<f64> = (0..grid).map(|i| dist::sample(mid(i), first, s).unwrap().h).collect();
    let mut z = vec![0.0; 3 * grid];
    z[..grid].copy_from_slice(&z1);
    let (p_second, a2, b2) = run(&z, grid);
    let size = grid * grid;
    let mut z = vec![0.0; 3 * size];
    for i in 0..grid {
        let second = KumaParams { a: a2[grid + i], b: b2[grid + i] };
        for j in 0..grid {
            let e = i * grid + j;
            z[e] = z1[i];
            z[size + e] = dist::sample(mid(j), second, s).unwrap().h;
        }
    }
    let (p_third, _, _) = run(&z, size);
    let e1 = 1.0 - p_first[0];
    let e2 = (0..grid).map(|i| 1.0 - p_second[grid + i]).sum::<f64>() / grid as f64;
    let e3 = (0..size).map(|e| 1.0 - p_third[2 * size + e]).sum::<f64>() / size as f64;
    let spread = {
        let col = &p_second[grid..2 * grid];
        col.iter().cloned().fold(f64::MIN, f64::max) - col.iter().cloned().fold(f64::MAX, f64::min)
    };
    (mean, se, e1 + e2 + e3, spread)
}

fn penalty_oracle(rep: &mut Report) {
    let t0 = Instant::now();
    let worst = independent_penalties();
    let (est, se, oracle, spread) = dependent_penalty();
    let z = (est - oracle).abs() / se;
    let pass = worst <= 3.0 && z <= 3.0;
    rep.record(
        3,
        pass,
        format!(
            "20 vectors, max |z| {worst:.2}; dependent n=3: estimator {est:.5} ± {se:.5}, \
             nested oracle {oracle:.5}, |z| {z:.2} (P0 of gate 2 spans {spread:.3} across prefixes)"
        ),
        t0.elapsed().as_secs_f64(),
    );
}

/// Shared optimizer and controller settings for the training criteria.
fn base() -> RunConfig {
    RunConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.005,
        lr_final: Some(1e-5),
        lambda_lr: 0.01,
        beta: 0.5,
        epochs: 20,
        ..RunConfig::default()
    }
}

struct Run {
    csv: Vec<u8>,
    last: MetricsRow,
    outcome: train::TrainOutcome,
    data: Data,
}

fn run(cfg: RunConfig, dir: &std::path::Path, name: &str) -> Run {
    let path = dir.join(format!("{name}.csv"));
    let cfg = RunConfig {
        metrics: Some(path.clone()),
        ..cfg
    };
    let data = Data::load(&cfg).unwrap();
    let outcome = train::train(&cfg, &data).unwrap();
    Run {
        csv: std::fs::read(&path).unwrap(),
        last: outcome.rows.last().unwrap().clone(),
        outcome,
        data,
    }
}

/// Configurations of criteria 4-7, keyed by name.
fn training_configs() -> Vec<(&'static str, RunConfig)> {
    let targets = [("rate-0.1", 0.1), ("rate-0.2", 0.2), ("rate-0.3", 0.3), ("rate-0.5", 0.5)];
    let mut v: Vec<(&'static str, RunConfig)> = targets
        .iter()
        .map(|&(n, t)| (n, RunConfig { target_l0: Some(t), ..base() }))
        .collect();
    v.push(("open", RunConfig { gates: GatePolicy::Open, ..base() }));
    let mut contiguous = base();
    contiguous.corpus.layout = Layout::Contiguous;
    contiguous.epochs = 10;
    v.push(("contiguous-l0", contiguous.clone()));
    v.push(("contiguous-fused", RunConfig { target_fused: Some(0.05), ..contiguous }));
    v.push(("attention", RunConfig { model: ModelKind::Attention, target_l0: Some(0.1), epochs: 10, ..base() }));
    v.push(("bag", RunConfig { model: ModelKind::Bag, epochs: 10, ..base() }));
    v
}

fn training_criteria(rep: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = std::collections::BTreeMap::new();
    let mut started = Vec::new();
    for (name, cfg) in training_configs() {
        let t = Instant::now();
        runs.insert(name, run(cfg, dir.path(), name));
        started.push((name, t.elapsed()));
    }
    let secs = |names: &[&str]| -> f64 {
        started.iter().filter(|(n, _)| names.contains(n)).map(|(_, d)| d.as_secs_f64()).sum()
    };

    // 4
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, target) in [("rate-0.1", 0.1), ("rate-0.2", 0.2), ("rate-0.3", 0.3), ("rate-0.5", 0.5)] {
        let got = runs[name].last.selected_rate;
        let ok = (got - target).abs() <= 0.02;
        pass &= ok;
        parts.push(format!("{target}->{got:.4}{}", if ok { "" } else { " (out of band)" }));
    }
    let names = ["rate-0.1", "rate-0.2", "rate-0.3", "rate-0.5"];
    rep.record(4, pass, format!("validation selected rate {}", parts.join(", ")), secs(&names));

    // 5
    let r = &runs["rate-0.2"];
    let open = runs["open"].last.val_accuracy;
    let (train_m, _) = train::evaluate(&r.outcome.model, &r.data, Split::Train, false).unwrap();
    let pass = r.last.precision >= 0.90 && r.last.val_accuracy >= open - 0.02;
    rep.record(
        5,
        pass,
        format!(
            "target 0.2: precision {:.4}, accuracy {:.4} vs open baseline {open:.4} (train-split precision {:.4}, reported only)",
            r.last.precision, r.last.val_accuracy, train_m.precision
        ),
        secs(&["open"]),
    );

    // 6
    let (l0, fused) = (&runs["contiguous-l0"].last, &runs["contiguous-fused"].last);
    rep.record(
        6,
        fused.transitions < l0.transitions,
        format!(
            "mean transitions per example {:.4} with fused target vs {:.4} L0 only (selected {:.4} vs {:.4})",
            fused.transitions, l0.transitions, fused.selected_rate, l0.selected_rate
        ),
        secs(&["contiguous-l0", "contiguous-fused"]),
    );

    // 7
    let (att, bag) = (&runs["attention"].last, &runs["bag"].last);
    let pass = (att.selected_rate - 0.10).abs() <= 0.03 && att.val_accuracy > bag.val_accuracy;
    rep.record(
        7,
        pass,
        format!(
            "nonzero attention rate {:.4}, accuracy {:.4} vs bag baseline {:.4}",
            att.selected_rate, att.val_accuracy, bag.val_accuracy
        ),
        secs(&["attention", "bag"]),
    );

    // 8
    let t8 = Instant::now();
    let again = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    for (name, cfg) in training_configs() {
        if run(cfg, again.path(), name).csv != runs[name].csv {
            differing.push(name);
        }
    }
    rep.record(
        8,
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} repeated runs wrote byte-identical metrics CSVs", runs.len())
        } else {
            format!("metrics differ for {differing:?}")
        },
        t8.elapsed().as_secs_f64(),
    );
}

#[test]
fn acceptance() {
    let mut rep = Report { lines: Vec::new() };
    distribution_oracle(&mut rep);
    gradient_suite(&mut rep);
    penalty_oracle(&mut rep);
    training_criteria(&mut rep);
    let failed: Vec<_> = rep.lines.iter().filter(|(_, p, _)| !p).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        rep.lines.len() - failed.len(),
        rep.lines.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
