use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, MatchSpec};
use crate::dist::{GateMean, StretchBounds};
use crate::error::{Error, Result};
use crate::model::CellKind;
use crate::optim::OptimizerKind;
use crate::sparsity::ConstraintMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Gates drawn independently given the encoder states.
    #[default]
    Independent,
    /// Gate shapes conditioned on the earlier gates.
    Dependent,
    /// HardKuma attention on the toy matching task.
    Attention,
    /// Gate-free bag-of-embeddings on the toy matching task.
    Bag,
}

impl ModelKind {
    pub fn is_matching(self) -> bool {
        matches!(self, ModelKind::Attention | ModelKind::Bag)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatePolicy {
    #[default]
    Learned,
    /// No extractor; every token reaches the classifier.
    Open,
}

/// Everything needed to reproduce a run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub gates: GatePolicy,
    pub cell: CellKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dependency_hidden: usize,
    pub stretch: StretchBounds,
    pub gate_mean: GateMean,
    /// Target share of nonzero gates.
    pub target_l0: Option<f64>,
    /// Target expected transitions per adjacent pair.
    pub target_fused: Option<f64>,
    pub constraint_mode: ConstraintMode,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// When set, the learning rate decays linearly from `lr` to this value
    /// over the run.
    pub lr_final: Option<f64>,
    pub lambda_lr: f64,
    pub beta: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub max_len: usize,
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub matching: MatchSpec,
    /// Directory with `train.jsonl`, `valid.jsonl`, `test.jsonl`. Without it
    /// the corpus is generated in memory from `corpus` / `matching`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Independent,
            gates: GatePolicy::Learned,
            cell: CellKind::Simple,
            embed_dim: 16,
            hidden: 16,
            dependency_hidden: 8,
            stretch: StretchBounds::default(),
            gate_mean: GateMean::Stretched,
            target_l0: Some(0.2),
            target_fused: None,
            constraint_mode: ConstraintMode::Equality,
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            lr_final: None,
            lambda_lr: 0.01,
            beta: 0.99,
            clip_norm: 5.0,
            batch_size: 32,
            epochs: 5,
            eval_every: 200,
            max_len: 64,
            seed: 1,
            corpus: CorpusSpec::default(),
            matching: MatchSpec::default(),
            data_dir: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lr", self.lr), ("lambda_lr", self.lambda_lr), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(v) = self.lr_final {
            if !(v >= 0.0 && v <= self.lr) {
                return bad(format!("lr_final must lie in [0, lr], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        // a target of exactly 1 is allowed: it asks for every gate open
        if let Some(t) = self.target_l0 {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("target_l0 must lie in (0, 1], got {t}"));
            }
        }
        if let Some(t) = self.target_fused {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("target_fused must lie in (0, 1), got {t}"));
            }
            if self.model.is_matching() {
                return bad("target_fused applies to sequence models only".into());
            }
        }
        if self.embed_dim == 0 || self.hidden == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("embed_dim, hidden, batch_size and eval_every must be positive".into());
        }
        if self.model == ModelKind::Dependent && self.dependency_hidden == 0 {
            return bad("dependency_hidden must be positive for the dependent model".into());
        }
        if self.max_len == 0 || self.max_len > 64 {
            return bad(format!("max_len must lie in 1..=64, got {}", self.max_len));
        }
        self.stretch
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.model.is_matching() {
            self.matching.validate()?;
        } else {
            self.corpus.validate()?;
            if self.corpus.max_len > self.max_len {
                return bad(format!(
                    "corpus max_len {} exceeds the length cap {}",
                    self.corpus.max_len, self.max_len
                ));
            }
        }
        Ok(())
    }

    /// Targets in the order the penalties are built: L0 first, then fused.
    pub fn targets(&self) -> Vec<f64> {
        let learned = match self.model {
            ModelKind::Bag => false,
            ModelKind::Attention => true,
            _ => self.gates == GatePolicy::Learned,
        };
        if !learned {
            return vec![];
        }
        self.target_l0.into_iter().chain(self.target_fused).collect()
    }

    pub fn vocab_size(&self) -> usize {
        if self.model.is_matching() {
            self.matching.vocab_size()
        } else {
            self.corpus.vocab_size
        }
    }

    pub fn num_classes(&self) -> usize {
        if self.model.is_matching() {
            self.matching.num_classes
        } else {
            self.corpus.num_classes
        }
    }
}
