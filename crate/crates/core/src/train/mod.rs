//! Training with alternating Lagrangian updates, deterministic evaluation,
//! checkpoints and metrics.

mod config;
mod io;

pub use config::{GatePolicy, ModelKind, RunConfig};
pub use io::{
    dist_table, load_checkpoint, save_checkpoint, write_dist_csv, Checkpoint, DistRow, DumpRecord,
    MetricsRow, MetricsWriter,
};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::{self, Corpora, Example, MatchCorpora, MatchExample, Split};
use crate::error::{Error, Result};
use crate::model::{AttentionMatcher, BagModel, Batch, Classifier, Extractor, GateMode, MatchBatch};
use crate::optim::{clip_grad_norm, Optimizer};
use crate::sparsity::{self, LagrangianState};

/// A loaded or generated corpus.
pub enum Data {
    Text(Corpora),
    Match(MatchCorpora),
}

impl Data {
    /// Reads `data_dir` when set, otherwise generates from the config's spec.
    pub fn load(cfg: &RunConfig) -> Result<Data> {
        let data = match (&cfg.data_dir, cfg.model.is_matching()) {
            (Some(dir), false) => Data::Text(Corpora {
                train: corpus::read_jsonl(&dir.join("train.jsonl"))?,
                valid: corpus::read_jsonl(&dir.join("valid.jsonl"))?,
                test: corpus::read_jsonl(&dir.join("test.jsonl"))?,
            }),
            (Some(dir), true) => Data::Match(MatchCorpora {
                train: corpus::read_jsonl(&dir.join("train.jsonl"))?,
                valid: corpus::read_jsonl(&dir.join("valid.jsonl"))?,
                test: corpus::read_jsonl(&dir.join("test.jsonl"))?,
            }),
            (None, false) => Data::Text(cfg.corpus.generate()?),
            (None, true) => Data::Match(cfg.matching.generate()?),
        };
        data.check(cfg)?;
        Ok(data)
    }

    pub fn len(&self, split: Split) -> usize {
        match self {
            Data::Text(c) => c.split(split).len(),
            Data::Match(c) => c.split(split).len(),
        }
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    fn check(&self, cfg: &RunConfig) -> Result<()> {
        let (vocab, classes) = (cfg.vocab_size(), cfg.num_classes());
        let bad = |split: Split, i: usize, what: String| {
            Err(Error::Config(format!("{} example {i}: {what}", split.name())))
        };
        for split in Split::ALL {
            match self {
                Data::Text(c) => {
                    if cfg.model.is_matching() {
                        return Err(Error::Config("matching model given a text corpus".into()));
                    }
                    for (i, ex) in c.split(split).iter().enumerate() {
                        if ex.tokens.is_empty() || ex.tokens.len() > cfg.max_len {
                            return bad(split, i, format!("length {} outside 1..={}", ex.tokens.len(), cfg.max_len));
                        }
                        if ex.rationale_mask.len() != ex.tokens.len() {
                            return bad(split, i, "rationale_mask length differs from tokens".into());
                        }
                        if let Some(t) = ex.tokens.iter().find(|&&t| t >= vocab) {
                            return bad(split, i, format!("token {t} outside vocabulary of {vocab}"));
                        }
                        if ex.label >= classes {
                            return bad(split, i, format!("label {} outside {classes} classes", ex.label));
                        }
                    }
                }
                Data::Match(c) => {
                    if !cfg.model.is_matching() {
                        return Err(Error::Config("sequence model given a matching corpus".into()));
                    }
                    let (m, n) = (cfg.matching.premise_len, cfg.matching.hypothesis_len);
                    for (i, ex) in c.split(split).iter().enumerate() {
                        if ex.premise.len() != m || ex.hypothesis.len() != n {
                            return bad(split, i, format!("sides must have lengths {m} and {n}"));
                        }
                        if let Some(t) = ex.premise.iter().chain(&ex.hypothesis).find(|&&t| t >= vocab) {
                            return bad(split, i, format!("token {t} outside vocabulary of {vocab}"));
                        }
                        if ex.label >= classes {
                            return bad(split, i, format!("label {} outside {classes} classes", ex.label));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub enum Network {
    Rationale {
        extractor: Option<Extractor>,
        classifier: Classifier,
    },
    Attention(AttentionMatcher),
    Bag(BagModel),
}

pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    /// Fresh parameters drawn from the config seed.
    pub fn new(cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (vocab, classes) = (cfg.vocab_size(), cfg.num_classes());
        let net = match cfg.model {
            ModelKind::Independent | ModelKind::Dependent => {
                let extractor = (cfg.gates == GatePolicy::Learned).then(|| {
                    let dep = (cfg.model == ModelKind::Dependent).then_some(cfg.dependency_hidden);
                    Extractor::new(
                        &mut store,
                        vocab,
                        cfg.embed_dim,
                        cfg.hidden,
                        cfg.cell,
                        dep,
                        cfg.stretch,
                        &mut rng,
                    )
                });
                let classifier =
                    Classifier::new(&mut store, vocab, classes, cfg.embed_dim, cfg.hidden, cfg.cell, &mut rng);
                Network::Rationale {
                    extractor,
                    classifier,
                }
            }
            ModelKind::Attention => Network::Attention(AttentionMatcher::new(
                &mut store,
                vocab,
                classes,
                cfg.embed_dim,
                cfg.hidden,
                cfg.stretch,
                &mut rng,
            )),
            ModelKind::Bag => {
                Network::Bag(BagModel::new(&mut store, vocab, classes, cfg.embed_dim, cfg.hidden, &mut rng))
            }
        };
        Ok(Model {
            config: cfg.clone(),
            store,
            net,
        })
    }

    /// Model for `cfg` with parameters from a checkpoint; every name or shape
    /// mismatch is reported.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Model> {
        let mut model = Model::new(cfg)?;
        model.store.load_named(&ckpt.params)?;
        Ok(model)
    }
}

enum BatchRef {
    Text(Batch),
    Match(MatchBatch),
}

impl BatchRef {
    fn build(data: &Data, split: Split, idx: &[usize]) -> Result<BatchRef> {
        match data {
            Data::Text(c) => {
                let exs = c.split(split);
                let seqs: Vec<&[usize]> = idx.iter().map(|&i| exs[i].tokens.as_slice()).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| exs[i].label).collect();
                Ok(BatchRef::Text(Batch::new(&seqs, &labels)?))
            }
            Data::Match(c) => {
                let exs = c.split(split);
                let p: Vec<&[usize]> = idx.iter().map(|&i| exs[i].premise.as_slice()).collect();
                let h: Vec<&[usize]> = idx.iter().map(|&i| exs[i].hypothesis.as_slice()).collect();
                let labels: Vec<usize> = idx.iter().map(|&i| exs[i].label).collect();
                Ok(BatchRef::Match(MatchBatch::new(&p, &h, &labels)?))
            }
        }
    }

    fn labels(&self) -> &[usize] {
        match self {
            BatchRef::Text(b) => b.labels(),
            BatchRef::Match(b) => b.labels(),
        }
    }
}

struct Forward {
    task: Var,
    penalties: Vec<Var>,
    logits: Var,
    gates: Option<Var>,
    probs_zero: Option<Var>,
}

fn forward(model: &Model, g: &mut Graph, batch: &BatchRef, mode: GateMode<'_>) -> Result<Forward> {
    let cfg = &model.config;
    let store = &model.store;
    let (logits, gates, probs_zero, stride) = match (&model.net, batch) {
        (Network::Rationale { extractor, classifier }, BatchRef::Text(b)) => match extractor {
            Some(ex) => {
                let out = ex.forward(g, store, b, mode)?;
                let logits = classifier.logits(g, store, b, Some(out.gates))?;
                (logits, Some(out.gates), Some(out.probs_zero), b.size())
            }
            None => (classifier.logits(g, store, b, None)?, None, None, b.size()),
        },
        (Network::Attention(att), BatchRef::Match(b)) => {
            let out = att.forward(g, store, b, mode)?;
            (out.logits, Some(out.gates), Some(out.probs_zero), 0)
        }
        (Network::Bag(bag), BatchRef::Match(b)) => (bag.logits(g, store, b)?, None, None, 0),
        _ => return Err(Error::Config("model and corpus kinds differ".into())),
    };
    let task = crate::model::elbo_loss(g, logits, batch.labels())?;
    let mut penalties = Vec::new();
    if let Some(p0) = probs_zero {
        if cfg.target_l0.is_some() {
            penalties.push(sparsity::expected_l0_rate(g, p0)?);
        }
        if cfg.target_fused.is_some() {
            let rows = g.shape(p0)[0];
            let pairs = rows.saturating_sub(stride);
            let fused = if pairs == 0 {
                g.scalar(0.0)
            } else {
                let s = sparsity::fused_lasso_strided(g, p0, stride)?;
                g.affine(s, 1.0 / pairs as f64, 0.0)?
            };
            penalties.push(fused);
        }
    }
    Ok(Forward {
        task,
        penalties,
        logits,
        gates,
        probs_zero,
    })
}

fn lengths(data: &Data, split: Split) -> Vec<usize> {
    match data {
        Data::Text(c) => c.split(split).iter().map(|e| e.tokens.len()).collect(),
        Data::Match(c) => vec![1; c.split(split).len()],
    }
}

/// Same-length batches. With an rng, examples within a length and the batch
/// order are shuffled.
fn bucket(lengths: &[usize], size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &n) in lengths.iter().enumerate() {
        by_len.entry(n).or_default().push(i);
    }
    let mut batches = Vec::new();
    match rng {
        Some(rng) => {
            for idx in by_len.values_mut() {
                idx.shuffle(rng);
                batches.extend(idx.chunks(size).map(|c| c.to_vec()));
            }
            batches.shuffle(rng);
        }
        None => {
            for idx in by_len.values() {
                batches.extend(idx.chunks(size).map(|c| c.to_vec()));
            }
        }
    }
    batches
}

/// Deterministic-gate metrics on one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub examples: usize,
    /// Mean task loss.
    pub loss: f64,
    pub accuracy: f64,
    /// Selected positions inside the gold rationale over all selected
    /// positions, pooled over the split.
    pub precision: f64,
    /// Mean over examples of the share of nonzero gates.
    pub selected_rate: f64,
    /// Mean over examples of the expected share of nonzero gates.
    pub expected_rate: f64,
    /// Mean number of selected/unselected changes per example.
    pub transitions: f64,
    pub gates_per_example: f64,
}

const EVAL_BATCH: usize = 256;

pub fn evaluate(model: &Model, data: &Data, split: Split, dump: bool) -> Result<(EvalMetrics, Vec<DumpRecord>)> {
    let n = data.len(split);
    let mut records: Vec<Option<DumpRecord>> = if dump { vec![None; n] } else { vec![] };
    let mut m = EvalMetrics {
        examples: n,
        ..Default::default()
    };
    if n == 0 {
        m.precision = 1.0;
        return Ok((m, vec![]));
    }
    let (mut sel_total, mut hit_total) = (0usize, 0usize);
    let mean = model.config.gate_mean;
    for idx in bucket(&lengths(data, split), EVAL_BATCH, None) {
        let batch = BatchRef::build(data, split, &idx)?;
        let mut g = Graph::new();
        let fw = forward(model, &mut g, &batch, GateMode::Deterministic(mean))?;
        m.loss += g.value(fw.task).item() * idx.len() as f64;
        let logits = g.value(fw.logits);
        let classes = logits.cols();
        let preds: Vec<usize> = logits
            .data()
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        let gates = fw.gates.map(|z| g.value(z).data().to_vec());
        let p0 = fw.probs_zero.map(|p| g.value(p).data().to_vec());
        match (&batch, data) {
            (BatchRef::Text(b), Data::Text(c)) => {
                let len = b.len();
                let per_gate = gates.map(|z| b.per_example(&z));
                let per_p0 = p0.map(|p| b.per_example(&p));
                for (k, &i) in idx.iter().enumerate() {
                    let ex: &Example = &c.split(split)[i];
                    let z = per_gate.as_ref().map_or_else(|| vec![1.0; len], |z| z[k].clone());
                    let (sel, hit) = corpus::selection_counts(&z, &ex.rationale_mask)?;
                    sel_total += sel;
                    hit_total += hit;
                    m.selected_rate += sel as f64 / len as f64;
                    m.expected_rate += per_p0
                        .as_ref()
                        .map_or(1.0, |p| p[k].iter().map(|p| 1.0 - p).sum::<f64>() / len as f64);
                    m.transitions += corpus::transitions(&z) as f64;
                    m.gates_per_example += sel as f64;
                    if preds[k] == ex.label {
                        m.accuracy += 1.0;
                    }
                    if dump {
                        records[i] = Some(DumpRecord::Text {
                            tokens: ex.tokens.clone(),
                            gates: z,
                            gold_rationale: ex.rationale_mask.clone(),
                            prediction: preds[k],
                            label: ex.label,
                        });
                    }
                }
            }
            (BatchRef::Match(b), Data::Match(c)) => {
                let (sm, sn) = b.sides();
                let cells = sm * sn;
                for (k, &i) in idx.iter().enumerate() {
                    let ex: &MatchExample = &c.split(split)[i];
                    let z = gates
                        .as_ref()
                        .map_or_else(|| vec![1.0; cells], |z| z[k * cells..(k + 1) * cells].to_vec());
                    let mut gold = vec![0u8; cells];
                    for &(pi, hj) in &ex.alignment {
                        gold[pi * sn + hj] = 1;
                    }
                    let (sel, hit) = corpus::selection_counts(&z, &gold)?;
                    sel_total += sel;
                    hit_total += hit;
                    m.selected_rate += sel as f64 / cells as f64;
                    m.expected_rate += p0.as_ref().map_or(1.0, |p| {
                        p[k * cells..(k + 1) * cells].iter().map(|p| 1.0 - p).sum::<f64>() / cells as f64
                    });
                    m.gates_per_example += sel as f64;
                    if preds[k] == ex.label {
                        m.accuracy += 1.0;
                    }
                    if dump {
                        records[i] = Some(DumpRecord::Match {
                            premise: ex.premise.clone(),
                            hypothesis: ex.hypothesis.clone(),
                            attention: z.chunks(sn).map(|r| r.to_vec()).collect(),
                            gold_alignment: ex.alignment.clone(),
                            prediction: preds[k],
                            label: ex.label,
                        });
                    }
                }
            }
            _ => unreachable!("batch kind follows the data kind"),
        }
    }
    let nf = n as f64;
    m.loss /= nf;
    m.accuracy /= nf;
    m.selected_rate /= nf;
    m.expected_rate /= nf;
    m.transitions /= nf;
    m.gates_per_example /= nf;
    m.precision = if sel_total == 0 {
        1.0
    } else {
        hit_total as f64 / sel_total as f64
    };
    Ok((m, records.into_iter().flatten().collect()))
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    /// Parameters after the last step.
    pub model: Model,
    pub lagrangian: LagrangianState,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
}

#[derive(Default)]
struct Interval {
    steps: usize,
    total: f64,
    task: f64,
    rates: Vec<f64>,
}

/// Trains from scratch. Writes metrics rows and the best checkpoint as it
/// goes when the config names those paths.
pub fn train(cfg: &RunConfig, data: &Data) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg)?;
    data.check(cfg)?;
    if data.is_empty(Split::Train) {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut lagr = LagrangianState::new(cfg.targets(), cfg.lambda_lr, cfg.beta)?.with_mode(cfg.constraint_mode);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.store);
    let mut metrics = match &cfg.metrics {
        Some(p) => Some(MetricsWriter::create(p)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let lens = lengths(data, Split::Train);
    let per_epoch = bucket(&lens, cfg.batch_size, None).len();
    let total_steps = (per_epoch * cfg.epochs).max(1);
    let mut rows = Vec::new();
    let mut step = 0;
    let mut best = (0, f64::INFINITY);
    let mut acc = Interval::default();
    for epoch in 0..cfg.epochs {
        for idx in bucket(&lens, cfg.batch_size, Some(&mut rng)) {
            step += 1;
            if let Some(end) = cfg.lr_final {
                let frac = (step - 1) as f64 / total_steps as f64;
                opt.set_lr(cfg.lr + (end - cfg.lr) * frac);
            }
            let batch = BatchRef::build(data, Split::Train, &idx)?;
            let mut g = Graph::new();
            let guard = |e: Error| match e {
                Error::NonFinite { op } => Error::Divergence {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let fw = forward(&model, &mut g, &batch, GateMode::Sample(&mut rng)).map_err(guard)?;
            let total = sparsity::total_loss(&mut g, fw.task, &fw.penalties, &lagr).map_err(guard)?;
            let loss = g.value(total).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss is {loss}"),
                });
            }
            let mut grads = g.backward(total, model.store.len()).map_err(guard)?.into_params();
            let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("gradient norm is {norm}"),
                });
            }
            opt.step(&mut model.store, &grads);
            let observed: Vec<f64> = fw.penalties.iter().map(|&p| g.value(p).item()).collect();
            lagr.step(&observed)?;
            acc.steps += 1;
            acc.total += loss;
            acc.task += g.value(fw.task).item();
            acc.rates.resize(observed.len(), 0.0);
            for (r, o) in acc.rates.iter_mut().zip(&observed) {
                *r += o;
            }
            if step % cfg.eval_every == 0 {
                log_interval(&model, data, &lagr, step, epoch, &mut acc, &mut rows, &mut metrics, &mut best)?;
            }
        }
        if epoch + 1 == cfg.epochs && acc.steps > 0 {
            log_interval(&model, data, &lagr, step, epoch, &mut acc, &mut rows, &mut metrics, &mut best)?;
        }
    }
    Ok(TrainOutcome {
        rows,
        model,
        lagrangian: lagr,
        steps: step,
        best_step: best.0,
        best_val_loss: best.1,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_interval(
    model: &Model,
    data: &Data,
    lagr: &LagrangianState,
    step: usize,
    epoch: usize,
    acc: &mut Interval,
    rows: &mut Vec<MetricsRow>,
    metrics: &mut Option<MetricsWriter>,
    best: &mut (usize, f64),
) -> Result<()> {
    let (val, _) = evaluate(model, data, Split::Valid, false)?;
    let k = acc.steps.max(1) as f64;
    let cfg = &model.config;
    let rate = |j: usize| acc.rates.get(j).map(|r| r / k);
    let fused_slot = usize::from(cfg.target_l0.is_some());
    let row = MetricsRow {
        step,
        epoch: epoch + 1,
        train_loss: acc.total / k,
        task_loss: acc.task / k,
        rate_l0: cfg.target_l0.and_then(|_| rate(0)),
        rate_fused: cfg.target_fused.and_then(|_| rate(fused_slot)),
        lambda_0: lagr.lambda.first().copied(),
        lambda_1: lagr.lambda.get(1).copied(),
        val_loss: val.loss,
        val_accuracy: val.accuracy,
        precision: val.precision,
        selected_rate: val.selected_rate,
        expected_rate: val.expected_rate,
        transitions: val.transitions,
    };
    if let Some(w) = metrics.as_mut() {
        w.write(&row)?;
    }
    rows.push(row);
    *acc = Interval::default();
    if val.loss < best.1 {
        *best = (step, val.loss);
        if let Some(path) = &cfg.checkpoint {
            save_checkpoint(path, &Checkpoint::capture(model, lagr, step)?)?;
        }
    }
    Ok(())
}

/// Runs `evaluate` and writes the rationale dump when a path is given.
pub fn evaluate_to(model: &Model, data: &Data, split: Split, dump: Option<&Path>) -> Result<EvalMetrics> {
    let (m, records) = evaluate(model, data, split, dump.is_some())?;
    if let Some(p) = dump {
        corpus::write_jsonl(p, &records)?;
    }
    Ok(m)
}
