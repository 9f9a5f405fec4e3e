//! Event-pair classifier over contextual sub-token embeddings.
//!
//! An [`EmbeddingProvider`] turns the context into sub-token vectors; each
//! event is max-pooled over the sub-tokens overlapping its span, the two
//! event vectors are concatenated (e1 first) and fed to a linear layer with
//! softmax. Training uses two AdamW groups: the provider's (warmup then
//! linear decay) and the head's (constant).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{build_context, whitespace_tokens, ContextWindow, Corpus, CorpusError, Split, TemporalRelation, TextSpan};
use crate::evaluation::{micro_f1, EvalError};
use crate::inference::Prediction;
use crate::scalar::{argmax, softmax, Scalar};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("{n} sub-tokens exceed the provider limit of {max}")]
    TooLong { n: usize, max: usize },
    #[error("no sub-token overlaps bytes {start}..{end}")]
    NoOverlap { start: usize, end: usize },
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("provider `{0}` is not trainable")]
    NotTrainable(String),
    #[error("provider `{0}` does not support adapter fine-tuning")]
    AdaptersUnsupported(String),
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label `{0}` is not a head class")]
    UnknownClass(TemporalRelation),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EncoderError + '_ {
    move |source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    /// Head only; the provider is never mutated.
    Frozen,
    Full,
    Adapter,
}

impl std::str::FromStr for FineTuneMode {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozen" => Ok(Self::Frozen),
            "full" => Ok(Self::Full),
            "adapter" | "lora" => Ok(Self::Adapter),
            other => Err(EncoderError::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub id: String,
    pub width: usize,
    pub trainable: bool,
    pub supports_adapters: bool,
    pub max_subtokens: usize,
    /// Token that stands in for a masked word, if the provider has one.
    pub mask_token: Option<String>,
    /// Which hidden states the vectors come from.
    pub representation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubtokenEmbeddings<T> {
    pub vectors: Vec<Vec<T>>,
    /// Byte interval of each sub-token in the embedded text.
    pub offsets: Vec<TextSpan>,
}

pub trait EmbeddingProvider<T: Scalar>: Send + Sync {
    fn descriptor(&self) -> ProviderDescriptor;

    fn embed(&self, text: &str) -> Result<SubtokenEmbeddings<T>>;

    /// Hash of the current parameters.
    fn fingerprint(&self) -> String;

    /// Prepares the trainable interface for `mode`. Frozen needs nothing.
    fn begin_training(&mut self, mode: FineTuneMode, _adapter: AdapterConfig, _weight_decay: f64) -> Result<()> {
        match mode {
            FineTuneMode::Frozen => Ok(()),
            FineTuneMode::Full => Err(EncoderError::NotTrainable(self.descriptor().id)),
            FineTuneMode::Adapter => Err(EncoderError::AdaptersUnsupported(self.descriptor().id)),
        }
    }

    /// Accumulates loss gradients with respect to the given sub-token
    /// vectors of `text`.
    fn backward(&mut self, _text: &str, _grads: &[(usize, Vec<T>)]) -> Result<()> {
        Err(EncoderError::NotTrainable(self.descriptor().id))
    }

    /// Applies and clears accumulated gradients.
    fn step(&mut self, _lr: T) -> Result<()> {
        Err(EncoderError::NotTrainable(self.descriptor().id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 32, alpha: 64.0 }
    }
}

// Optimizer and schedule.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW<T> {
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            weight_decay: T::of(weight_decay),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            params[i] -= lr * self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`. `step` counts updates already applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearWarmup {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearWarmup {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            peak,
            warmup_steps: (total_steps as f64 * warmup_fraction).floor() as usize,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

// Stub provider.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub width: usize,
    pub vocab: usize,
    pub seed: u64,
    pub trainable: bool,
    pub supports_adapters: bool,
    pub max_subtokens: usize,
    /// Table entries are uniform in `[-init_scale, init_scale)`.
    pub init_scale: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            width: 64,
            vocab: 4096,
            seed: 0,
            trainable: true,
            supports_adapters: true,
            max_subtokens: 512,
            init_scale: 1.0,
        }
    }
}

pub const STUB_MASK_TOKEN: &str = "<mask>";
const STUB_PIECE_CHARS: usize = 4;

/// Splits each whitespace token into pieces of at most four characters;
/// continuation pieces are keyed with a `##` prefix. The mask token stays
/// whole.
pub fn stub_subtokens(text: &str) -> Vec<(String, TextSpan)> {
    let mut out = Vec::new();
    for (span, tok) in whitespace_tokens(text) {
        if tok == STUB_MASK_TOKEN {
            out.push((tok.to_string(), span));
            continue;
        }
        let bounds: Vec<usize> = tok.char_indices().map(|(i, _)| i).chain([tok.len()]).collect();
        let mut k = 0;
        while k + 1 < bounds.len() {
            let next = (k + STUB_PIECE_CHARS).min(bounds.len() - 1);
            let (start, end) = (bounds[k], bounds[next]);
            let piece = &tok[start..end];
            let key = if k == 0 { piece.to_string() } else { format!("##{piece}") };
            out.push((key, TextSpan::new(span.start + start, span.start + end)));
            k = next;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Adapter<T> {
    rank: usize,
    alpha: f64,
    /// vocab × rank
    a: Vec<T>,
    /// rank × width, zero at start so the adapter begins as a no-op.
    b: Vec<T>,
}

/// Deterministic lookup-table embedder: each sub-token key hashes to a row
/// of a seeded random table. Supports full updates of the table and a
/// low-rank additive adapter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubProvider<T> {
    config: StubConfig,
    table: Vec<T>,
    adapter: Option<Adapter<T>>,
    #[serde(skip)]
    train: Option<StubTrainState<T>>,
}

#[derive(Debug, Clone)]
struct StubTrainState<T> {
    grad_table: Vec<T>,
    grad_a: Vec<T>,
    grad_b: Vec<T>,
    opt_table: AdamW<T>,
    opt_a: AdamW<T>,
    opt_b: AdamW<T>,
}

impl<T: Scalar> StubProvider<T> {
    pub fn new(config: StubConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.init_scale;
        let table = (0..config.vocab * config.width)
            .map(|_| T::of(rng.gen_range(-s..s)))
            .collect();
        Self {
            config,
            table,
            adapter: None,
            train: None,
        }
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    fn row_id(&self, key: &str) -> usize {
        let digest = Sha256::digest(key.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(b) % self.config.vocab as u64) as usize
    }

    fn adapter_scale(a: &Adapter<T>) -> T {
        T::of(a.alpha / a.rank as f64)
    }

    fn vector(&self, id: usize) -> Vec<T> {
        let w = self.config.width;
        let mut v = self.table[id * w..(id + 1) * w].to_vec();
        if let Some(ad) = &self.adapter {
            let scale = Self::adapter_scale(ad);
            for r in 0..ad.rank {
                let coef = ad.a[id * ad.rank + r] * scale;
                for (j, x) in v.iter_mut().enumerate() {
                    *x += coef * ad.b[r * w + j];
                }
            }
        }
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(io_err(path))?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn hash_params<T: Scalar>(h: &mut Sha256, xs: &[T]) {
    for x in xs {
        h.update(x.to_f64_lossy().to_le_bytes());
    }
}

impl<T: Scalar> EmbeddingProvider<T> for StubProvider<T> {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            id: format!("stub-w{}-v{}-s{}", self.config.width, self.config.vocab, self.config.seed),
            width: self.config.width,
            trainable: self.config.trainable,
            supports_adapters: self.config.supports_adapters,
            max_subtokens: self.config.max_subtokens,
            mask_token: Some(STUB_MASK_TOKEN.to_string()),
            representation: "lookup-table".into(),
        }
    }

    fn embed(&self, text: &str) -> Result<SubtokenEmbeddings<T>> {
        let pieces = stub_subtokens(text);
        if pieces.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        if pieces.len() > self.config.max_subtokens {
            return Err(EncoderError::TooLong {
                n: pieces.len(),
                max: self.config.max_subtokens,
            });
        }
        Ok(SubtokenEmbeddings {
            vectors: pieces.iter().map(|(k, _)| self.vector(self.row_id(k))).collect(),
            offsets: pieces.into_iter().map(|(_, s)| s).collect(),
        })
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        hash_params(&mut h, &self.table);
        if let Some(ad) = &self.adapter {
            hash_params(&mut h, &ad.a);
            hash_params(&mut h, &ad.b);
        }
        hex::encode(h.finalize())
    }

    fn begin_training(&mut self, mode: FineTuneMode, adapter: AdapterConfig, weight_decay: f64) -> Result<()> {
        let id = self.descriptor().id;
        match mode {
            FineTuneMode::Frozen => return Ok(()),
            FineTuneMode::Full if !self.config.trainable => return Err(EncoderError::NotTrainable(id)),
            FineTuneMode::Adapter if !self.config.supports_adapters => {
                return Err(EncoderError::AdaptersUnsupported(id))
            }
            FineTuneMode::Adapter => {
                if adapter.rank == 0 {
                    return Err(EncoderError::InvalidConfig("adapter rank must be positive".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xada9_7e55);
                let bound = 1.0 / (adapter.rank as f64).sqrt();
                self.adapter = Some(Adapter {
                    rank: adapter.rank,
                    alpha: adapter.alpha,
                    a: (0..self.config.vocab * adapter.rank)
                        .map(|_| T::of(rng.gen_range(-bound..bound)))
                        .collect(),
                    b: vec![T::zero(); adapter.rank * self.config.width],
                });
            }
            FineTuneMode::Full => {}
        }
        let (na, nb) = self
            .adapter
            .as_ref()
            .map(|a| (a.a.len(), a.b.len()))
            .unwrap_or((0, 0));
        self.train = Some(StubTrainState {
            grad_table: vec![T::zero(); self.table.len()],
            grad_a: vec![T::zero(); na],
            grad_b: vec![T::zero(); nb],
            opt_table: AdamW::new(self.table.len(), weight_decay),
            opt_a: AdamW::new(na, weight_decay),
            opt_b: AdamW::new(nb, weight_decay),
        });
        Ok(())
    }

    fn backward(&mut self, text: &str, grads: &[(usize, Vec<T>)]) -> Result<()> {
        let id = self.descriptor().id;
        let pieces = stub_subtokens(text);
        let w = self.config.width;
        let rows: Vec<usize> = grads.iter().map(|(i, _)| self.row_id(&pieces[*i].0)).collect();
        let state = self.train.as_mut().ok_or(EncoderError::NotTrainable(id))?;
        for ((_, g), &row) in grads.iter().zip(&rows) {
            if g.len() != w {
                return Err(EncoderError::WidthMismatch { expected: w, got: g.len() });
            }
            match &self.adapter {
                Some(ad) => {
                    let scale = Self::adapter_scale(ad);
                    for r in 0..ad.rank {
                        let mut dot = T::zero();
                        for j in 0..w {
                            dot += ad.b[r * w + j] * g[j];
                            state.grad_b[r * w + j] += scale * ad.a[row * ad.rank + r] * g[j];
                        }
                        state.grad_a[row * ad.rank + r] += scale * dot;
                    }
                }
                None => {
                    for j in 0..w {
                        state.grad_table[row * w + j] += g[j];
                    }
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, lr: T) -> Result<()> {
        let id = self.descriptor().id;
        let state = self.train.as_mut().ok_or(EncoderError::NotTrainable(id))?;
        match &mut self.adapter {
            Some(ad) => {
                state.opt_a.step(&mut ad.a, &state.grad_a, lr);
                state.opt_b.step(&mut ad.b, &state.grad_b, lr);
                state.grad_a.iter_mut().for_each(|g| *g = T::zero());
                state.grad_b.iter_mut().for_each(|g| *g = T::zero());
            }
            None => {
                state.opt_table.step(&mut self.table, &state.grad_table, lr);
                state.grad_table.iter_mut().for_each(|g| *g = T::zero());
            }
        }
        Ok(())
    }
}

// Pooling and the head.

#[derive(Debug, Clone, PartialEq)]
pub struct EventEmbedding<T> {
    pub vector: Vec<T>,
    /// Contributing sub-tokens.
    pub subtokens: Range<usize>,
    /// Sub-token that supplied the maximum in each dimension.
    pub sources: Vec<usize>,
}

pub fn embed_context<T: Scalar, P: EmbeddingProvider<T> + ?Sized>(
    provider: &P,
    ctx: &ContextWindow,
) -> Result<SubtokenEmbeddings<T>> {
    if ctx.text.trim().is_empty() {
        return Err(EncoderError::EmptyText);
    }
    provider.embed(&ctx.text)
}

/// Elementwise max over every sub-token whose interval shares at least one
/// byte with `span`.
pub fn pool_event<T: Scalar>(emb: &SubtokenEmbeddings<T>, span: TextSpan) -> Result<EventEmbedding<T>> {
    let hits: Vec<usize> = emb
        .offsets
        .iter()
        .enumerate()
        .filter(|(_, o)| o.intersects(&span))
        .map(|(i, _)| i)
        .collect();
    let (Some(&first), Some(&last)) = (hits.first(), hits.last()) else {
        return Err(EncoderError::NoOverlap {
            start: span.start,
            end: span.end,
        });
    };
    let mut vector = emb.vectors[first].clone();
    let mut sources = vec![first; vector.len()];
    for &i in &hits[1..] {
        for (j, &x) in emb.vectors[i].iter().enumerate() {
            if x > vector[j] {
                vector[j] = x;
                sources[j] = i;
            }
        }
    }
    Ok(EventEmbedding {
        vector,
        subtokens: first..last + 1,
        sources,
    })
}

pub fn pair_embeddings<T: Scalar, P: EmbeddingProvider<T> + ?Sized>(
    provider: &P,
    ctx: &ContextWindow,
) -> Result<(EventEmbedding<T>, EventEmbedding<T>)> {
    let emb = embed_context(provider, ctx)?;
    Ok((pool_event(&emb, ctx.e1_span)?, pool_event(&emb, ctx.e2_span)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    Zero,
    /// Uniform in ±1/sqrt(2d), bias zero.
    Uniform,
}

/// Linear layer over `concat(e1, e2)`. Row `c` of `weights` holds class
/// `c`'s 2d coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead<T> {
    pub classes: Vec<TemporalRelation>,
    pub width: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient<T> {
    pub loss: T,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    /// d loss / d concat(e1, e2).
    pub input: Vec<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(classes: &[TemporalRelation], width: usize, init: HeadInit, seed: u64) -> Self {
        let n = classes.len() * 2 * width;
        let weights = match init {
            HeadInit::Zero => vec![T::zero(); n],
            HeadInit::Uniform => {
                let bound = 1.0 / ((2 * width) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
            }
        };
        Self {
            classes: classes.to_vec(),
            width,
            weights,
            bias: vec![T::zero(); classes.len()],
        }
    }

    pub fn class_index(&self, r: TemporalRelation) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == r)
            .ok_or(EncoderError::UnknownClass(r))
    }

    pub fn logits(&self, e1: &[T], e2: &[T]) -> Result<Vec<T>> {
        for e in [e1, e2] {
            if e.len() != self.width {
                return Err(EncoderError::WidthMismatch {
                    expected: self.width,
                    got: e.len(),
                });
            }
        }
        let d2 = 2 * self.width;
        Ok((0..self.classes.len())
            .map(|c| {
                let row = &self.weights[c * d2..(c + 1) * d2];
                let (w1, w2) = row.split_at(self.width);
                let dot = |w: &[T], x: &[T]| w.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
                self.bias[c] + dot(w1, e1) + dot(w2, e2)
            })
            .collect())
    }

    pub fn forward(&self, e1: &[T], e2: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(e1, e2)?))
    }

    pub fn predict(&self, e1: &[T], e2: &[T]) -> Result<TemporalRelation> {
        let probs = self.forward(e1, e2)?;
        Ok(self.classes[argmax(&probs).expect("head has classes")])
    }

    /// Cross-entropy against class `gold` and its gradients.
    pub fn loss_and_grad(&self, e1: &[T], e2: &[T], gold: usize) -> Result<HeadGradient<T>> {
        let probs = self.forward(e1, e2)?;
        let d2 = 2 * self.width;
        let mut delta = probs.clone();
        delta[gold] -= T::one();
        let x: Vec<T> = e1.iter().chain(e2).copied().collect();
        let mut weights = vec![T::zero(); self.weights.len()];
        let mut input = vec![T::zero(); d2];
        for (c, &dc) in delta.iter().enumerate() {
            for j in 0..d2 {
                weights[c * d2 + j] = dc * x[j];
                input[j] += dc * self.weights[c * d2 + j];
            }
        }
        Ok(HeadGradient {
            loss: -probs[gold].max(T::min_positive_value()).ln(),
            weights,
            bias: delta,
            input,
        })
    }
}

// Training.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub mode: FineTuneMode,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub head_init: HeadInit,
    /// Stop after this many epochs without dev improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 1e-5,
            head_lr: 1e-4,
            warmup_fraction: 0.10,
            batch_size: 8,
            mode: FineTuneMode::Frozen,
            adapter_rank: 32,
            adapter_alpha: 64.0,
            epochs: 20,
            seed: 0,
            weight_decay: 0.01,
            head_init: HeadInit::Uniform,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if !(self.encoder_lr > 0.0 && self.head_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        Ok(())
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.adapter_rank,
            alpha: self.adapter_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: f64,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Head from the best dev epoch.
    pub head: ClassifierHead<T>,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_micro_f1: f64,
}

struct Example<T> {
    text: String,
    gold: usize,
    /// Cached pooled features, frozen mode only.
    features: Option<(Vec<T>, Vec<T>)>,
}

fn examples<T: Scalar, P: EmbeddingProvider<T>>(
    provider: &P,
    head: &ClassifierHead<T>,
    corpus: &Corpus,
    split: Split,
    cache: bool,
) -> Result<(Vec<Example<T>>, Vec<ContextWindow>)> {
    let mut out = Vec::new();
    let mut ctxs = Vec::new();
    for pair in corpus.pairs_in(split) {
        let ctx = build_context(pair, corpus)?;
        let features = if cache {
            let (e1, e2) = pair_embeddings(provider, &ctx)?;
            Some((e1.vector, e2.vector))
        } else {
            None
        };
        out.push(Example {
            text: ctx.text.clone(),
            gold: head.class_index(pair.gold)?,
            features,
        });
        ctxs.push(ctx);
    }
    if out.is_empty() {
        return Err(EncoderError::EmptySplit(split));
    }
    Ok((out, ctxs))
}

fn dev_f1<T: Scalar, P: EmbeddingProvider<T>>(
    provider: &P,
    head: &ClassifierHead<T>,
    dev: &[Example<T>],
    ctxs: &[ContextWindow],
) -> Result<f64> {
    let mut preds = Vec::with_capacity(dev.len());
    for (ex, ctx) in dev.iter().zip(ctxs) {
        let p = match &ex.features {
            Some((e1, e2)) => head.predict(e1, e2)?,
            None => {
                let (e1, e2) = pair_embeddings(provider, ctx)?;
                head.predict(&e1.vector, &e2.vector)?
            }
        };
        preds.push(p);
    }
    let golds: Vec<_> = dev.iter().map(|e| head.classes[e.gold]).collect();
    Ok(micro_f1(&preds, &golds)?)
}

/// Gradient for each contributing sub-token, routed through the max.
fn pooled_grads<T: Scalar>(ev: &EventEmbedding<T>, grad: &[T], acc: &mut BTreeMap<usize, Vec<T>>) {
    for (j, (&src, &g)) in ev.sources.iter().zip(grad).enumerate() {
        acc.entry(src).or_insert_with(|| vec![T::zero(); grad.len()])[j] += g;
    }
}

/// Trains a head (and, outside frozen mode, the provider) on the train
/// split, keeping the state from the epoch with the best dev micro-F1.
pub fn train<T: Scalar, P: EmbeddingProvider<T> + Clone>(
    provider: &mut P,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let desc = provider.descriptor();
    let frozen = cfg.mode == FineTuneMode::Frozen;
    let classes = corpus.scheme().relations();
    if !frozen {
        provider.begin_training(cfg.mode, cfg.adapter(), cfg.weight_decay)?;
    }
    let mut head = ClassifierHead::<T>::new(classes, desc.width, cfg.head_init, cfg.seed);
    let (train_set, train_ctx) = examples(provider, &head, corpus, Split::Train, frozen)?;
    let (dev_set, dev_ctx) = examples(provider, &head, corpus, Split::Dev, frozen)?;

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = LinearWarmup::new(cfg.encoder_lr, cfg.warmup_fraction, cfg.epochs * batches_per_epoch);
    let mut head_opt = AdamW::<T>::new(head.weights.len(), cfg.weight_decay);
    let mut bias_opt = AdamW::<T>::new(head.bias.len(), 0.0);
    let head_lr = T::of(cfg.head_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best: Option<(usize, f64, ClassifierHead<T>, Option<P>)> = None;
    let mut metrics = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = T::one() / T::of_usize(batch.len());
            let mut gw = vec![T::zero(); head.weights.len()];
            let mut gb = vec![T::zero(); head.bias.len()];
            for &i in batch {
                let ex = &train_set[i];
                let (e1, e2, pooled) = match &ex.features {
                    Some((a, b)) => (a.clone(), b.clone(), None),
                    None => {
                        let (a, b) = pair_embeddings(provider, &train_ctx[i])?;
                        (a.vector.clone(), b.vector.clone(), Some((a, b)))
                    }
                };
                let g = head.loss_and_grad(&e1, &e2, ex.gold)?;
                loss_sum += g.loss.to_f64_lossy();
                for (a, b) in gw.iter_mut().zip(&g.weights) {
                    *a += *b * scale;
                }
                for (a, b) in gb.iter_mut().zip(&g.bias) {
                    *a += *b * scale;
                }
                if let Some((p1, p2)) = pooled {
                    let gin: Vec<T> = g.input.iter().map(|&x| x * scale).collect();
                    let mut acc = BTreeMap::new();
                    pooled_grads(&p1, &gin[..desc.width], &mut acc);
                    pooled_grads(&p2, &gin[desc.width..], &mut acc);
                    let grads: Vec<(usize, Vec<T>)> = acc.into_iter().collect();
                    provider.backward(&ex.text, &grads)?;
                }
            }
            head_opt.step(&mut head.weights, &gw, head_lr);
            bias_opt.step(&mut head.bias, &gb, head_lr);
            if !frozen {
                last_lr = schedule.lr(step);
                provider.step(T::of(last_lr))?;
            }
            step += 1;
        }

        let f1 = dev_f1(provider, &head, &dev_set, &dev_ctx)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            dev_micro_f1: f1,
            encoder_lr: last_lr,
            head_lr: cfg.head_lr,
            steps: step,
        });
        if best.as_ref().is_none_or(|b| f1 > b.1) {
            let snapshot = (!frozen).then(|| provider.clone());
            best = Some((epoch, f1, head.clone(), snapshot));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }

    let (best_epoch, best_dev_micro_f1, head, snapshot) = best.expect("at least one epoch ran");
    if let Some(p) = snapshot {
        *provider = p;
    }
    Ok(TrainOutcome {
        head,
        epochs: metrics,
        best_epoch,
        best_dev_micro_f1,
    })
}

/// One prediction per pair of `split`, in corpus order.
pub fn predict_corpus<T: Scalar, P: EmbeddingProvider<T> + ?Sized>(
    provider: &P,
    head: &ClassifierHead<T>,
    corpus: &Corpus,
    split: Split,
) -> Result<Vec<Prediction>> {
    corpus
        .pairs_in(split)
        .map(|pair| {
            let ctx = build_context(pair, corpus)?;
            let (e1, e2) = pair_embeddings(provider, &ctx)?;
            Ok(Prediction {
                pair_id: pair.id.clone(),
                protocol: None,
                set_id: None,
                predicted: head.predict(&e1.vector, &e2.vector)?,
                contradiction: false,
                unparseable: false,
                transcript: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub provider: ProviderDescriptor,
    pub provider_fingerprint: String,
    pub config: TrainConfig,
    pub head: ClassifierHead<f64>,
    pub best_epoch: usize,
    pub best_dev_micro_f1: f64,
}

impl Checkpoint {
    pub fn new<T: Scalar, P: EmbeddingProvider<T> + ?Sized>(
        provider: &P,
        config: &TrainConfig,
        outcome: &TrainOutcome<T>,
    ) -> Self {
        let h = &outcome.head;
        Self {
            version: CHECKPOINT_VERSION,
            provider: provider.descriptor(),
            provider_fingerprint: provider.fingerprint(),
            config: config.clone(),
            head: ClassifierHead {
                classes: h.classes.clone(),
                width: h.width,
                weights: h.weights.iter().map(|x| x.to_f64_lossy()).collect(),
                bias: h.bias.iter().map(|x| x.to_f64_lossy()).collect(),
            },
            best_epoch: outcome.best_epoch,
            best_dev_micro_f1: outcome.best_dev_micro_f1,
        }
    }

    pub fn head<T: Scalar>(&self) -> ClassifierHead<T> {
        ClassifierHead {
            classes: self.head.classes.clone(),
            width: self.head.width,
            weights: self.head.weights.iter().map(|&x| T::of(x)).collect(),
            bias: self.head.bias.iter().map(|&x| T::of(x)).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(EncoderError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let h = &ck.head;
        if h.weights.len() != h.classes.len() * 2 * h.width || h.bias.len() != h.classes.len() {
            return Err(EncoderError::Checkpoint("weight shapes do not match the class list".into()));
        }
        Ok(ck)
    }

    /// Refuses to pair the head with a different provider.
    pub fn check_provider<T: Scalar, P: EmbeddingProvider<T> + ?Sized>(&self, provider: &P) -> Result<()> {
        let fp = provider.fingerprint();
        if fp != self.provider_fingerprint {
            return Err(EncoderError::Checkpoint(format!(
                "provider fingerprint {fp} differs from the trained {}",
                self.provider_fingerprint
            )));
        }
        Ok(())
    }
}

pub fn write_metrics_jsonl(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use TemporalRelation::*;

    fn stub(width: usize) -> StubProvider<f64> {
        StubProvider::new(StubConfig {
            width,
            vocab: 256,
            ..StubConfig::default()
        })
    }

    #[test]
    fn subtokens_split_long_words() {
        let p = stub_subtokens("It accused <mask> them");
        let keys: Vec<&str> = p.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["It", "accu", "##sed", "<mask>", "them"]);
        assert_eq!(p[2].1, TextSpan::new(7, 10));
    }

    #[test]
    fn subtokens_respect_char_boundaries() {
        let p = stub_subtokens("naïveté");
        let joined: String = p.iter().map(|(k, _)| k.trim_start_matches("##")).collect();
        assert_eq!(joined, "naïveté");
    }

    #[test]
    fn embedding_contract() {
        let s = stub(4);
        let a = s.embed("the cat slept").unwrap();
        assert_eq!(a.vectors.len(), 4);
        assert!(a.vectors.iter().all(|v| v.len() == 4));
        assert!(a.offsets.windows(2).all(|w| w[0].end <= w[1].start));
        assert_eq!(a, s.embed("the cat slept").unwrap());
        assert!(matches!(s.embed("   "), Err(EncoderError::EmptyText)));
        let tiny = StubProvider::<f64>::new(StubConfig {
            max_subtokens: 2,
            ..StubConfig::default()
        });
        assert!(matches!(tiny.embed("a b c"), Err(EncoderError::TooLong { n: 3, max: 2 })));
    }

    #[test]
    fn pooling() {
        let emb = SubtokenEmbeddings {
            vectors: vec![vec![1.0, -2.0], vec![0.0, 3.0], vec![9.0, 9.0]],
            offsets: vec![TextSpan::new(0, 4), TextSpan::new(4, 7), TextSpan::new(8, 9)],
        };
        let e = pool_event(&emb, TextSpan::new(0, 7)).unwrap();
        assert_eq!(e.vector, vec![1.0, 3.0]);
        assert_eq!(e.subtokens, 0..2);
        assert_eq!(e.sources, vec![0, 1]);
        assert_eq!(pool_event(&emb, TextSpan::new(8, 9)).unwrap().vector, vec![9.0, 9.0]);
        assert!(matches!(pool_event(&emb, TextSpan::new(7, 8)), Err(EncoderError::NoOverlap { .. })));
    }

    #[test]
    fn head_symmetry_and_bias() {
        let h = ClassifierHead::<f64>::new(&[After, Before, Equal], 2, HeadInit::Zero, 0);
        let p = h.forward(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let mut b = h.clone();
        b.bias = vec![10.0, 0.0, 0.0];
        let p = b.forward(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(p[0] > 0.9999 && p[0] < 1.0);
        assert_eq!(b.predict(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), After);
        assert!(matches!(h.forward(&[1.0], &[1.0, 2.0]), Err(EncoderError::WidthMismatch { .. })));
    }

    #[test]
    fn concat_order_matters() {
        let mut h = ClassifierHead::<f64>::new(&[After, Before], 1, HeadInit::Zero, 0);
        h.weights = vec![1.0, 0.0, 0.0, 1.0];
        let a = h.logits(&[2.0], &[5.0]).unwrap();
        let b = h.logits(&[5.0], &[2.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_head_loss_is_log_classes() {
        let h = ClassifierHead::<f64>::new(&[After, Before, Equal], 3, HeadInit::Zero, 0);
        let g = h.loss_and_grad(&[0.3, -1.0, 2.0], &[1.0, 1.0, 1.0], 1).unwrap();
        assert!((g.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn schedule_peaks_then_decays() {
        let s = LinearWarmup::new(1e-5, 0.10, 100);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 5e-6).abs() < 1e-18);
        assert!((s.lr(10) - 1e-5).abs() < 1e-18);
        assert!(s.lr(9) < s.lr(10) && s.lr(11) < s.lr(10));
        assert!((s.lr(55) - 5e-6).abs() < 1e-18);
        assert_eq!(s.lr(100), 0.0);
        let peak = (0..100).map(|t| s.lr(t)).fold(0.0, f64::max);
        assert_eq!(peak, s.lr(10));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut opt = AdamW::<f64>::new(2, 0.0);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[1.0, -1.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.encoder_lr, c.head_lr, c.warmup_fraction, c.batch_size), (1e-5, 1e-4, 0.10, 8));
        assert_eq!((c.adapter_rank, c.adapter_alpha), (32, 64.0));
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn capability_guards() {
        let mut s = StubProvider::<f64>::new(StubConfig {
            trainable: false,
            supports_adapters: false,
            ..StubConfig::default()
        });
        assert!(matches!(
            s.begin_training(FineTuneMode::Full, AdapterConfig::default(), 0.0),
            Err(EncoderError::NotTrainable(_))
        ));
        assert!(matches!(
            s.begin_training(FineTuneMode::Adapter, AdapterConfig::default(), 0.0),
            Err(EncoderError::AdaptersUnsupported(_))
        ));
    }

    #[test]
    fn adapter_starts_as_identity() {
        let mut s = stub(8);
        let before = s.embed("some words here").unwrap();
        s.begin_training(FineTuneMode::Adapter, AdapterConfig { rank: 4, alpha: 8.0 }, 0.0)
            .unwrap();
        assert_eq!(before, s.embed("some words here").unwrap());
    }
}
