//! Synthetic planted-rationale corpora and the toy matching corpus.
//!
//! The vocabulary is split into per-class signal sets followed by a shared
//! neutral set. Every example gets a label and `ceil(rho * len)` signal tokens
//! of that class; the remaining positions are neutral. All randomness comes
//! from a ChaCha stream keyed by `(seed, split, index)`, so any example can be
//! regenerated on its own.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub rationale_mask: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Signal positions drawn uniformly without replacement.
    #[default]
    Scattered,
    /// Signal tokens planted as one contiguous block at a uniform offset.
    Contiguous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Valid => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

fn keyed_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.key() << 48) | index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub signal_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Planted signal rate.
    pub rho: f64,
    /// Extra tokens of other classes' signal sets placed at unmasked
    /// positions, per example.
    pub distractors: usize,
    pub layout: Layout,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 512,
            num_classes: 4,
            signal_per_class: 8,
            min_len: 10,
            max_len: 30,
            rho: 0.2,
            distractors: 0,
            layout: Layout::Scattered,
            train_size: 10_000,
            valid_size: 2_000,
            test_size: 2_000,
            seed: 1,
        }
    }
}

pub struct Corpora {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpora {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

impl CorpusSpec {
    pub fn num_signal(&self) -> usize {
        self.num_classes * self.signal_per_class
    }

    pub fn num_neutral(&self) -> usize {
        self.vocab_size.saturating_sub(self.num_signal())
    }

    /// Planted positions for a sequence of length `len`.
    pub fn signal_count(&self, len: usize) -> usize {
        // guard against products like 0.2 * 15 landing a hair above an integer
        ((self.rho * len as f64) - 1e-9).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.signal_per_class == 0 {
            return bad("signal_per_class must be positive".into());
        }
        if self.num_neutral() == 0 {
            return bad(format!(
                "vocab_size {} leaves no neutral tokens after {} signal tokens",
                self.vocab_size,
                self.num_signal()
            ));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.rho * (self.min_len as f64) < 1.0 {
            return bad(format!(
                "rho * min_len = {} < 1: short sequences would carry no signal",
                self.rho * self.min_len as f64
            ));
        }
        let free = self.min_len - self.signal_count(self.min_len);
        if self.distractors > free {
            return bad(format!(
                "{} distractors do not fit in {free} free positions",
                self.distractors
            ));
        }
        Ok(())
    }

    /// Token id of the `k`-th signal token of class `c`.
    pub fn signal_token(&self, c: usize, k: usize) -> usize {
        c * self.signal_per_class + k
    }

    /// Class owning a signal token, or `None` for neutral tokens.
    pub fn class_of(&self, token: usize) -> Option<usize> {
        (token < self.num_signal()).then(|| token / self.signal_per_class)
    }

    pub fn example(&self, split: Split, index: usize) -> Example {
        let mut rng = keyed_rng(self.seed, split, index);
        let len = rng.gen_range(self.min_len..=self.max_len);
        let label = rng.gen_range(0..self.num_classes);
        let k = self.signal_count(len);
        let mut mask = vec![0u8; len];
        match self.layout {
            Layout::Scattered => {
                for p in rand::seq::index::sample(&mut rng, len, k) {
                    mask[p] = 1;
                }
            }
            Layout::Contiguous => {
                let start = rng.gen_range(0..=len - k);
                mask[start..start + k].fill(1);
            }
        }
        let nn = self.num_neutral();
        let mut tokens: Vec<usize> = mask
            .iter()
            .map(|&m| {
                if m == 1 {
                    self.signal_token(label, rng.gen_range(0..self.signal_per_class))
                } else {
                    self.num_signal() + rng.gen_range(0..nn)
                }
            })
            .collect();
        if self.distractors > 0 {
            let free: Vec<usize> = (0..len).filter(|&i| mask[i] == 0).collect();
            for &p in free.choose_multiple(&mut rng, self.distractors) {
                let other = (label + rng.gen_range(1..self.num_classes)) % self.num_classes;
                tokens[p] = self.signal_token(other, rng.gen_range(0..self.signal_per_class));
            }
        }
        Example {
            tokens,
            label,
            rationale_mask: mask,
        }
    }

    pub fn generate(&self) -> Result<Corpora> {
        self.validate()?;
        let gen = |split: Split, n: usize| (0..n).map(|i| self.example(split, i)).collect();
        Ok(Corpora {
            train: gen(Split::Train, self.train_size),
            valid: gen(Split::Valid, self.valid_size),
            test: gen(Split::Test, self.test_size),
        })
    }

    /// `{"w0017": 17, ...}`.
    pub fn vocabulary(&self) -> BTreeMap<String, usize> {
        (0..self.vocab_size).map(|i| (format!("w{i:04}"), i)).collect()
    }
}

/// Label predicted by a majority vote over the classes of masked tokens.
pub fn majority_vote(spec: &CorpusSpec, ex: &Example) -> Option<usize> {
    let mut counts = vec![0usize; spec.num_classes];
    for (&t, &m) in ex.tokens.iter().zip(&ex.rationale_mask) {
        if m == 1 {
            counts[spec.class_of(t)?] += 1;
        }
    }
    let best = counts.iter().copied().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
}

/// `(precision, selected_rate)` of the nonzero gates against a gold mask.
/// Precision is 1.0 when nothing is selected.
pub fn precision_and_rate(gates: &[f64], mask: &[u8]) -> Result<(f64, f64)> {
    let (sel, hit) = selection_counts(gates, mask)?;
    let precision = if sel == 0 { 1.0 } else { hit as f64 / sel as f64 };
    Ok((precision, sel as f64 / gates.len().max(1) as f64))
}

/// `(selected, selected inside the mask)`.
pub fn selection_counts(gates: &[f64], mask: &[u8]) -> Result<(usize, usize)> {
    if gates.len() != mask.len() {
        return Err(Error::InvalidParam(format!(
            "{} gates for a mask of length {}",
            gates.len(),
            mask.len()
        )));
    }
    let mut sel = 0;
    let mut hit = 0;
    for (&z, &m) in gates.iter().zip(mask) {
        if z != 0.0 {
            sel += 1;
            if m == 1 {
                hit += 1;
            }
        }
    }
    Ok((sel, hit))
}

/// Number of changes between selected and unselected neighbours.
pub fn transitions(gates: &[f64]) -> usize {
    gates.windows(2).filter(|w| (w[0] != 0.0) != (w[1] != 0.0)).count()
}

/// Premise/hypothesis pair whose label is the class of the tokens the two
/// sides share.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: usize,
    /// `(i, j)` with `premise[i] == hypothesis[j]`.
    pub alignment: Vec<(usize, usize)>,
}

/// Toy matching task. The premise holds `shared` tokens of the label class,
/// `shared` tokens of a second class and neutral filler; the hypothesis
/// repeats the label-class tokens and adds fresh tokens of the second class.
/// Both sides therefore contain the same class counts, and only the aligned
/// pairs identify the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSpec {
    pub num_classes: usize,
    pub tokens_per_class: usize,
    pub neutral_tokens: usize,
    pub premise_len: usize,
    pub hypothesis_len: usize,
    pub shared: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for MatchSpec {
    fn default() -> Self {
        MatchSpec {
            num_classes: 3,
            tokens_per_class: 12,
            neutral_tokens: 12,
            premise_len: 5,
            hypothesis_len: 4,
            shared: 2,
            train_size: 6_000,
            valid_size: 1_000,
            test_size: 1_000,
            seed: 1,
        }
    }
}

pub struct MatchCorpora {
    pub train: Vec<MatchExample>,
    pub valid: Vec<MatchExample>,
    pub test: Vec<MatchExample>,
}

impl MatchCorpora {
    pub fn split(&self, s: Split) -> &[MatchExample] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

impl MatchSpec {
    pub fn vocab_size(&self) -> usize {
        self.num_classes * self.tokens_per_class + self.neutral_tokens
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad("matching needs at least 2 classes".into());
        }
        if self.shared == 0 || 2 * self.shared > self.premise_len {
            return bad(format!(
                "premise of length {} cannot hold 2 x {} class tokens",
                self.premise_len, self.shared
            ));
        }
        if self.hypothesis_len < 2 * self.shared {
            return bad(format!(
                "hypothesis of length {} cannot hold 2 x {} class tokens",
                self.hypothesis_len, self.shared
            ));
        }
        if self.tokens_per_class < 2 * self.shared {
            return bad("tokens_per_class too small for distinct draws".into());
        }
        let filler = (self.premise_len - 2 * self.shared) + (self.hypothesis_len - 2 * self.shared);
        if filler > 0 && self.neutral_tokens < filler {
            return bad("not enough neutral tokens for distinct filler".into());
        }
        Ok(())
    }

    /// Share of premise/hypothesis cells that are aligned.
    pub fn aligned_fraction(&self) -> f64 {
        self.shared as f64 / (self.premise_len * self.hypothesis_len) as f64
    }

    pub fn example(&self, split: Split, index: usize) -> MatchExample {
        let mut rng = keyed_rng(self.seed, split, index);
        let c = rng.gen_range(0..self.num_classes);
        let other = (c + rng.gen_range(1..self.num_classes)) % self.num_classes;
        let class_tokens = |cls: usize, k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            rand::seq::index::sample(rng, self.tokens_per_class, k)
                .into_iter()
                .map(|t| cls * self.tokens_per_class + t)
                .collect()
        };
        let shared = class_tokens(c, self.shared, &mut rng);
        let others = class_tokens(other, 2 * self.shared, &mut rng);
        let base = self.num_classes * self.tokens_per_class;
        let np = self.premise_len - 2 * self.shared;
        let nh = self.hypothesis_len - 2 * self.shared;
        let neutral: Vec<usize> = rand::seq::index::sample(&mut rng, self.neutral_tokens, np + nh)
            .into_iter()
            .map(|t| base + t)
            .collect();
        let mut premise: Vec<usize> = shared
            .iter()
            .chain(&others[..self.shared])
            .chain(&neutral[..np])
            .copied()
            .collect();
        let mut hypothesis: Vec<usize> = shared
            .iter()
            .chain(&others[self.shared..])
            .chain(&neutral[np..])
            .copied()
            .collect();
        premise.shuffle(&mut rng);
        hypothesis.shuffle(&mut rng);
        let mut alignment = Vec::new();
        for (i, p) in premise.iter().enumerate() {
            for (j, h) in hypothesis.iter().enumerate() {
                if p == h {
                    alignment.push((i, j));
                }
            }
        }
        MatchExample {
            premise,
            hypothesis,
            label: c,
            alignment,
        }
    }

    pub fn generate(&self) -> Result<MatchCorpora> {
        self.validate()?;
        let gen = |split: Split, n: usize| (0..n).map(|i| self.example(split, i)).collect();
        Ok(MatchCorpora {
            train: gen(Split::Train, self.train_size),
            valid: gen(Split::Valid, self.valid_size),
            test: gen(Split::Test, self.test_size),
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Blank lines are skipped; any other malformed line fails with its 1-based
/// line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_vocab(path: &Path, vocab: &BTreeMap<String, usize>) -> Result<()> {
    let json = serde_json::to_string_pretty(vocab)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_vocab(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}
