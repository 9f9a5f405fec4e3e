//! KernelShap token attribution and the positional analysis built on it.
//!
//! Features are whitespace tokens. A coalition keeps some tokens and
//! replaces the rest with a baseline; the model maps each masked variant to
//! a scalar (the score of the originally predicted class).

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{whitespace_tokens, ContextWindow, TemporalRelation, TextSpan};
use crate::encoder::{pool_event, ClassifierHead, EmbeddingProvider, EncoderError};
use crate::inference::{generate, parse_label, parse_yesno, GenerationBackend, RetryPolicy};
use crate::prompting::PromptInstance;
use crate::scalar::{argmax, Scalar};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("model has no features")]
    NoFeatures,
    #[error("{n_samples} samples are too few for {m} features (need {min} or exhaustive enumeration)")]
    InsufficientSamples { n_samples: usize, m: usize, min: usize },
    #[error("kernel weight undefined for coalition size {s} of {m}")]
    InvalidSize { m: usize, s: usize },
    #[error("model failed on coalition {coalition}: {message}")]
    Model { coalition: String, message: String },
    #[error("regression system is singular; sample more coalitions")]
    Singular,
    #[error("no positional data")]
    Empty,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T, E = AttributionError> = std::result::Result<T, E>;

/// A deterministic function of a feature coalition.
pub trait CoalitionModel<T> {
    fn n_features(&self) -> usize;

    /// `coalition[i]` is true when feature `i` is kept.
    fn evaluate(&self, coalition: &[bool]) -> Result<T, String>;
}

/// Wraps a closure as a [`CoalitionModel`].
pub struct FnModel<F> {
    m: usize,
    f: F,
}

impl<F> FnModel<F> {
    pub fn new(m: usize, f: F) -> Self {
        Self { m, f }
    }
}

impl<T, F: Fn(&[bool]) -> T> CoalitionModel<T> for FnModel<F> {
    fn n_features(&self) -> usize {
        self.m
    }

    fn evaluate(&self, coalition: &[bool]) -> Result<T, String> {
        Ok((self.f)(coalition))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of size `s` among `m` features.
pub fn kernel_weight<T: Scalar>(m: usize, s: usize) -> Result<T> {
    if s == 0 || s >= m {
        return Err(AttributionError::InvalidSize { m, s });
    }
    Ok(T::of((m - 1) as f64 / (binomial(m, s) * (s * (m - s)) as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult<T> {
    pub phi: Vec<T>,
    /// Model value on the empty coalition.
    pub phi0: T,
    /// Model value on the full coalition.
    pub full_value: T,
    /// Coalitions used in the regression, excluding empty and full.
    pub n_samples: usize,
    pub exhaustive: bool,
}

impl<T: Scalar> AttributionResult<T> {
    /// `|phi0 + Σphi − f(full)|`.
    pub fn additivity_gap(&self) -> T {
        (self.phi0 + self.phi.iter().copied().sum::<T>() - self.full_value).abs()
    }

    pub fn top_k(&self, k: usize) -> Vec<usize> {
        top_k_tokens(&self.phi, k)
    }
}

fn bits(coalition: &[bool]) -> String {
    coalition.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn eval<T, M: CoalitionModel<T> + ?Sized>(model: &M, z: &[bool]) -> Result<T> {
    model.evaluate(z).map_err(|message| AttributionError::Model {
        coalition: bits(z),
        message,
    })
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
fn solve<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Result<Vec<T>> {
    let n = b.len();
    let scale = a
        .iter()
        .flatten()
        .fold(T::zero(), |m, &x| m.max(x.abs()))
        .max(T::min_positive_value());
    let tiny = scale * T::epsilon() * T::of_usize(n.max(1)) * T::of(16.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty range");
        if a[pivot][col].abs() <= tiny {
            return Err(AttributionError::Singular);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// KernelShap with the efficiency constraint enforced exactly.
///
/// Enumerates every proper non-empty coalition when `2^M − 2 ≤ n_samples`;
/// otherwise draws `n_samples` coalitions, sizes proportional to the total
/// kernel mass per size and members uniform within a size.
pub fn kernelshap<T: Scalar, M: CoalitionModel<T> + ?Sized>(
    model: &M,
    n_samples: usize,
    seed: u64,
) -> Result<AttributionResult<T>> {
    let m = model.n_features();
    if m == 0 {
        return Err(AttributionError::NoFeatures);
    }
    let f0 = eval(model, &vec![false; m])?;
    let full = eval(model, &vec![true; m])?;
    let delta = full - f0;
    if m == 1 {
        return Ok(AttributionResult {
            phi: vec![delta],
            phi0: f0,
            full_value: full,
            n_samples: 0,
            exhaustive: true,
        });
    }

    let exhaustive = m < 63 && (1usize << m) - 2 <= n_samples;
    // (coalition, regression weight)
    let mut rows: Vec<(Vec<bool>, T)> = Vec::new();
    if exhaustive {
        for mask in 1..(1usize << m) - 1 {
            let z: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
            let s = z.iter().filter(|&&b| b).count();
            rows.push((z, kernel_weight(m, s)?));
        }
    } else {
        if n_samples < 2 * m {
            return Err(AttributionError::InsufficientSamples {
                n_samples,
                m,
                min: 2 * m,
            });
        }
        let mass: Vec<f64> = (1..m).map(|s| 1.0 / (s * (m - s)) as f64).collect();
        let total: f64 = mass.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_samples {
            let mut u = rng.gen::<f64>() * total;
            let mut s = m - 1;
            for (i, &w) in mass.iter().enumerate() {
                if u < w {
                    s = i + 1;
                    break;
                }
                u -= w;
            }
            let mut z = vec![false; m];
            for i in sample(&mut rng, m, s) {
                z[i] = true;
            }
            rows.push((z, T::one()));
        }
    }

    let mut cache: HashMap<Vec<bool>, T> = HashMap::new();
    let k = m - 1;
    let mut xtwx = vec![vec![T::zero(); k]; k];
    let mut xtwy = vec![T::zero(); k];
    for (z, w) in &rows {
        let fz = match cache.get(z) {
            Some(&v) => v,
            None => {
                let v = eval(model, z)?;
                cache.insert(z.clone(), v);
                v
            }
        };
        // Substitute phi_last = delta − Σ phi_j.
        let zl = if z[k] { T::one() } else { T::zero() };
        let x: Vec<T> = (0..k)
            .map(|j| if z[j] { T::one() } else { T::zero() } - zl)
            .collect();
        let y = fz - f0 - zl * delta;
        for a in 0..k {
            if x[a] == T::zero() {
                continue;
            }
            let wa = *w * x[a];
            xtwy[a] += wa * y;
            for b in 0..k {
                xtwx[a][b] += wa * x[b];
            }
        }
    }
    let mut phi = solve(xtwx, xtwy)?;
    let rest: T = phi.iter().copied().sum();
    phi.push(delta - rest);
    Ok(AttributionResult {
        phi,
        phi0: f0,
        full_value: full,
        n_samples: rows.len(),
        exhaustive,
    })
}

/// Scores closer than this fraction of the largest magnitude rank as ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Indices of the `k` largest scores; ties go to the smaller index.
pub fn top_k_tokens<T: Scalar>(phi: &[T], k: usize) -> Vec<usize> {
    let vals: Vec<f64> = phi.iter().map(|x| x.to_f64_lossy()).collect();
    let scale = vals.iter().filter(|x| x.is_finite()).fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = scale * TIE_TOLERANCE;
    // Insertion sort with a tolerant comparison keeps the order stable and
    // well defined even though "within tol" is not transitive.
    let mut out: Vec<usize> = Vec::with_capacity(vals.len());
    let above = |a: f64, b: f64| a.is_finite() && (b.is_nan() || a > b + tol);
    for i in 0..vals.len() {
        let pos = out.iter().position(|&j| above(vals[i], vals[j])).unwrap_or(out.len());
        out.insert(pos, i);
    }
    out.truncate(k);
    out
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDistribution {
    /// `(index within target + 1) / target length`, for indices in the target.
    pub positions: Vec<f64>,
    pub n_indices: usize,
    /// Indices before the target block.
    pub n_few_shot: usize,
    pub few_shot_fraction: f64,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Maps feature indices of one instance to relative target positions.
/// Indices past the end of the target are ignored.
pub fn relative_positions(indices: &[usize], target_offset: usize, target_length: usize) -> PositionDistribution {
    let target_length = target_length.max(1);
    let positions: Vec<f64> = indices
        .iter()
        .filter(|&&i| i >= target_offset && i < target_offset + target_length)
        .map(|&i| (i - target_offset + 1) as f64 / target_length as f64)
        .collect();
    let n_few_shot = indices.iter().filter(|&&i| i < target_offset).count();
    let s = sorted(&positions);
    PositionDistribution {
        n_indices: indices.len(),
        n_few_shot,
        few_shot_fraction: if indices.is_empty() {
            0.0
        } else {
            n_few_shot as f64 / indices.len() as f64
        },
        median: quantile(&s, 0.5),
        q1: quantile(&s, 0.25),
        q3: quantile(&s, 0.75),
        positions,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub pooled: Vec<f64>,
    pub n_runs: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub few_shot_fraction: f64,
    pub bandwidth: f64,
    /// Gaussian kernel density on 101 evenly spaced points of [0, 1].
    pub density: Vec<(f64, f64)>,
}

const KDE_POINTS: usize = 101;
const KDE_FALLBACK_BANDWIDTH: f64 = 0.01;

fn silverman(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    if sorted.len() < 2 {
        return KDE_FALLBACK_BANDWIDTH;
    }
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile(sorted, 0.75).unwrap_or(0.0) - quantile(sorted, 0.25).unwrap_or(0.0);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        KDE_FALLBACK_BANDWIDTH
    }
}

pub fn position_summary(runs: &[PositionDistribution]) -> Result<PositionSummary> {
    if runs.is_empty() {
        return Err(AttributionError::Empty);
    }
    let pooled: Vec<f64> = runs.iter().flat_map(|r| r.positions.iter().copied()).collect();
    let s = sorted(&pooled);
    let n_indices: usize = runs.iter().map(|r| r.n_indices).sum();
    let n_few: usize = runs.iter().map(|r| r.n_few_shot).sum();
    let h = silverman(&s);
    let norm = 1.0 / (s.len().max(1) as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = (0..KDE_POINTS)
        .map(|i| {
            let x = i as f64 / (KDE_POINTS - 1) as f64;
            let d: f64 = s.iter().map(|&p| (-0.5 * ((x - p) / h).powi(2)).exp()).sum();
            (x, d * norm)
        })
        .collect();
    Ok(PositionSummary {
        n_runs: runs.len(),
        median: quantile(&s, 0.5),
        q1: quantile(&s, 0.25),
        q3: quantile(&s, 0.75),
        few_shot_fraction: if n_indices == 0 {
            0.0
        } else {
            n_few as f64 / n_indices as f64
        },
        bandwidth: h,
        density,
        pooled,
    })
}

/// Violin-plot rows: one line per pooled position.
pub fn violin_csv(corpus: &str, model: &str, protocol: &str, summary: &PositionSummary, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["corpus", "model", "protocol", "position"]).expect("in-memory write");
    for p in &summary.pooled {
        w.write_record([corpus, model, protocol, &p.to_string()]).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8"));
    out
}

pub fn density_csv(corpus: &str, model: &str, protocol: &str, summary: &PositionSummary, comment: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["corpus", "model", "protocol", "position", "density"]).expect("in-memory write");
    for (x, d) in &summary.density {
        w.write_record([corpus, model, protocol, &x.to_string(), &d.to_string()]).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8"));
    out
}

/// One line of the attribution dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub instance_id: String,
    pub tokens: Vec<String>,
    pub target_offset: usize,
    pub target_length: usize,
    pub phi: Vec<f64>,
    pub phi0: f64,
    pub full_value: f64,
    pub n_samples: usize,
    pub exhaustive: bool,
    pub top_k: Vec<usize>,
    pub positions: Vec<f64>,
    pub few_shot_fraction: f64,
}

impl AttributionRecord {
    pub fn new<T: Scalar>(
        instance_id: &str,
        units: &TokenUnits,
        result: &AttributionResult<T>,
        k: usize,
    ) -> (Self, PositionDistribution) {
        let top = result.top_k(k);
        let dist = relative_positions(&top, units.target_offset, units.target_length());
        let rec = Self {
            instance_id: instance_id.to_string(),
            tokens: units.tokens.clone(),
            target_offset: units.target_offset,
            target_length: units.target_length(),
            phi: result.phi.iter().map(|x| x.to_f64_lossy()).collect(),
            phi0: result.phi0.to_f64_lossy(),
            full_value: result.full_value.to_f64_lossy(),
            n_samples: result.n_samples,
            exhaustive: result.exhaustive,
            top_k: top,
            positions: dist.positions.clone(),
            few_shot_fraction: dist.few_shot_fraction,
        };
        (rec, dist)
    }
}

// Feature units over real inputs.

/// Whitespace tokens of a text, split into a few-shot prefix and a target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenUnits {
    pub text: String,
    pub spans: Vec<TextSpan>,
    pub tokens: Vec<String>,
    /// Index of the first target token.
    pub target_offset: usize,
}

impl TokenUnits {
    pub fn from_text(text: &str, target_byte_offset: usize) -> Self {
        let toks = whitespace_tokens(text);
        let target_offset = toks.iter().filter(|(s, _)| s.start < target_byte_offset).count();
        Self {
            text: text.to_string(),
            spans: toks.iter().map(|(s, _)| *s).collect(),
            tokens: toks.iter().map(|(_, t)| t.to_string()).collect(),
            target_offset,
        }
    }

    pub fn from_prompt(prompt: &PromptInstance) -> Self {
        Self::from_text(&prompt.text, prompt.target_offset)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_length(&self) -> usize {
        self.len() - self.target_offset
    }

    /// The text with dropped tokens replaced by `baseline`, and the new
    /// span of every token.
    pub fn mask(&self, coalition: &[bool], baseline: &str) -> (String, Vec<TextSpan>) {
        let mut out = String::with_capacity(self.text.len());
        let mut spans = Vec::with_capacity(self.spans.len());
        let mut last = 0;
        for (span, &keep) in self.spans.iter().zip(coalition) {
            out.push_str(&self.text[last..span.start]);
            let start = out.len();
            out.push_str(if keep { &self.text[span.start..span.end] } else { baseline });
            spans.push(TextSpan::new(start, out.len()));
            last = span.end;
        }
        out.push_str(&self.text[last..]);
        (out, spans)
    }
}

/// Probability the encoder head assigns to its unmasked prediction.
pub struct EncoderModel<'a, T, P: ?Sized> {
    provider: &'a P,
    head: &'a ClassifierHead<T>,
    ctx: &'a ContextWindow,
    units: TokenUnits,
    baseline: String,
    class: usize,
}

impl<'a, T: Scalar, P: EmbeddingProvider<T> + ?Sized> EncoderModel<'a, T, P> {
    pub fn new(provider: &'a P, head: &'a ClassifierHead<T>, ctx: &'a ContextWindow) -> Result<Self> {
        let units = TokenUnits::from_text(&ctx.text, 0);
        let baseline = provider.descriptor().mask_token.unwrap_or_default();
        let mut m = Self {
            provider,
            head,
            ctx,
            units,
            baseline,
            class: 0,
        };
        let probs = m.probs(&vec![true; m.units.len()])?;
        m.class = argmax(&probs).expect("head has classes");
        Ok(m)
    }

    pub fn units(&self) -> &TokenUnits {
        &self.units
    }

    pub fn baseline(&self) -> &str {
        &self.baseline
    }

    pub fn predicted(&self) -> TemporalRelation {
        self.head.classes[self.class]
    }

    fn remap(&self, old: TextSpan, new_spans: &[TextSpan]) -> Option<TextSpan> {
        let hits: Vec<TextSpan> = self
            .units
            .spans
            .iter()
            .zip(new_spans)
            .filter(|(o, n)| o.intersects(&old) && n.end > n.start)
            .map(|(_, n)| *n)
            .collect();
        Some(TextSpan::new(hits.first()?.start, hits.last()?.end))
    }

    fn probs(&self, coalition: &[bool]) -> Result<Vec<T>> {
        let (text, spans) = self.units.mask(coalition, &self.baseline);
        let width = self.head.width;
        // An event whose tokens were all dropped contributes a zero vector.
        let pooled = |span: Option<TextSpan>, emb: Option<&crate::encoder::SubtokenEmbeddings<T>>| -> Result<Vec<T>> {
            match (span, emb) {
                (Some(s), Some(e)) => Ok(pool_event(e, s)?.vector),
                _ => Ok(vec![T::zero(); width]),
            }
        };
        let emb = if text.trim().is_empty() {
            None
        } else {
            Some(self.provider.embed(&text)?)
        };
        let e1 = pooled(self.remap(self.ctx.e1_span, &spans), emb.as_ref())?;
        let e2 = pooled(self.remap(self.ctx.e2_span, &spans), emb.as_ref())?;
        Ok(self.head.forward(&e1, &e2)?)
    }
}

impl<T: Scalar, P: EmbeddingProvider<T> + ?Sized> CoalitionModel<T> for EncoderModel<'_, T, P> {
    fn n_features(&self) -> usize {
        self.units.len()
    }

    fn evaluate(&self, coalition: &[bool]) -> Result<T, String> {
        self.probs(coalition).map(|p| p[self.class]).map_err(|e| e.to_string())
    }
}

/// 1 when the backend's parsed answer on the masked prompt matches its
/// answer on the full prompt, else 0. Dropped tokens are deleted.
pub struct BackendModel<'a> {
    backend: &'a dyn GenerationBackend,
    prompt: &'a PromptInstance,
    units: TokenUnits,
    max_new_tokens: usize,
    retry: RetryPolicy,
    original: String,
}

impl<'a> BackendModel<'a> {
    pub fn new(
        backend: &'a dyn GenerationBackend,
        prompt: &'a PromptInstance,
        max_new_tokens: usize,
        retry: RetryPolicy,
    ) -> Result<Self, String> {
        let mut m = Self {
            backend,
            prompt,
            units: TokenUnits::from_prompt(prompt),
            max_new_tokens,
            retry,
            original: String::new(),
        };
        m.original = m.answer(&prompt.text)?;
        Ok(m)
    }

    pub fn units(&self) -> &TokenUnits {
        &self.units
    }

    pub fn original_answer(&self) -> &str {
        &self.original
    }

    fn answer(&self, text: &str) -> Result<String, String> {
        let p = PromptInstance {
            text: text.to_string(),
            ..self.prompt.clone()
        };
        let g = generate(self.backend, &p, self.max_new_tokens, &self.retry).map_err(|e| e.to_string())?;
        Ok(match self.prompt.question {
            Some(_) => format!("{:?}", parse_yesno(&g.text)),
            None => parse_label(&g.text, &self.prompt.question_order).to_string(),
        })
    }
}

impl CoalitionModel<f64> for BackendModel<'_> {
    fn n_features(&self) -> usize {
        self.units.len()
    }

    fn evaluate(&self, coalition: &[bool]) -> Result<f64, String> {
        let (text, _) = self.units.mask(coalition, "");
        Ok(if self.answer(&text)? == self.original { 1.0 } else { 0.0 })
    }
}

/// Synthetic models with known attribution structure.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticModel {
    /// Only the final token matters.
    LastToken { m: usize },
    /// Linear in the kept tokens with the given positive weights.
    Linear { weights: Vec<f64> },
}

impl SyntheticModel {
    pub fn uniform(m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::Linear {
            weights: (0..m).map(|_| rng.gen_range(0.01..1.0)).collect(),
        }
    }
}

impl CoalitionModel<f64> for SyntheticModel {
    fn n_features(&self) -> usize {
        match self {
            Self::LastToken { m } => *m,
            Self::Linear { weights } => weights.len(),
        }
    }

    fn evaluate(&self, z: &[bool]) -> Result<f64, String> {
        Ok(match self {
            Self::LastToken { m } => {
                if z[m - 1] {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Linear { weights } => weights.iter().zip(z).filter(|(_, &k)| k).map(|(w, _)| w).sum(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weights() {
        assert!((kernel_weight::<f64>(4, 2).unwrap() - 0.125).abs() < 1e-15);
        assert!((kernel_weight::<f64>(2, 1).unwrap() - 0.5).abs() < 1e-15);
        for m in 2..12 {
            for s in 1..m {
                assert_eq!(kernel_weight::<f64>(m, s).unwrap(), kernel_weight::<f64>(m, m - s).unwrap());
            }
        }
        assert!(kernel_weight::<f64>(4, 0).is_err());
        assert!(kernel_weight::<f64>(4, 4).is_err());
    }

    #[test]
    fn linear_model_recovers_coefficients() {
        let m = FnModel::new(2, |z: &[bool]| 2.0 * z[0] as u8 as f64 + 3.0 * z[1] as u8 as f64);
        let r = kernelshap::<f64, _>(&m, 100, 0).unwrap();
        assert!(r.exhaustive);
        assert!((r.phi[0] - 2.0).abs() < 1e-12 && (r.phi[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_model_gets_zero() {
        let m = FnModel::new(5, |_: &[bool]| 0.7);
        let r = kernelshap::<f64, _>(&m, 1000, 0).unwrap();
        assert!(r.phi.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn sampled_mode_is_seeded_and_exact_on_linear_models() {
        let model = SyntheticModel::uniform(40, 3);
        let a = kernelshap::<f64, _>(&model, 200, 11).unwrap();
        let b = kernelshap::<f64, _>(&model, 200, 11).unwrap();
        assert!(!a.exhaustive);
        assert_eq!(a, b);
        let SyntheticModel::Linear { weights } = &model else { unreachable!() };
        for (p, w) in a.phi.iter().zip(weights) {
            assert!((p - w).abs() < 1e-8);
        }
        assert!(a.additivity_gap() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let model = SyntheticModel::LastToken { m: 30 };
        assert!(matches!(
            kernelshap::<f64, _>(&model, 10, 0),
            Err(AttributionError::InsufficientSamples { min: 60, .. })
        ));
    }

    #[test]
    fn model_errors_name_the_coalition() {
        struct Broken;
        impl CoalitionModel<f64> for Broken {
            fn n_features(&self) -> usize {
                3
            }
            fn evaluate(&self, z: &[bool]) -> Result<f64, String> {
                if z == [true, false, true] {
                    Err("boom".into())
                } else {
                    Ok(0.0)
                }
            }
        }
        let err = kernelshap::<f64, _>(&Broken, 100, 0).unwrap_err();
        assert!(err.to_string().contains("101"));
    }

    #[test]
    fn top_k_rules() {
        assert_eq!(top_k_tokens(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_tokens(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
        assert_eq!(top_k_tokens(&[0.1, 0.2, 0.3], 5), vec![2, 1, 0]);
        assert_eq!(top_k_tokens(&[1e-17, -1e-17, 1.0, 3e-17], 3), vec![2, 0, 1]);
    }

    #[test]
    fn positions() {
        let d = relative_positions(&[9], 0, 10);
        assert_eq!(d.positions, vec![1.0]);
        assert_eq!(relative_positions(&[4], 0, 10).positions, vec![0.5]);
        let idx: Vec<usize> = vec![0, 1, 2, 3, 4, 5, 6, 20, 21, 22];
        let d = relative_positions(&idx, 20, 10);
        assert!((d.few_shot_fraction - 0.7).abs() < 1e-12);
        assert_eq!(d.positions.len(), 3);
    }

    #[test]
    fn single_run_summary_is_passthrough() {
        let d = relative_positions(&[3, 5, 7, 9, 1], 0, 10);
        let s = position_summary(std::slice::from_ref(&d)).unwrap();
        assert_eq!(s.median, d.median);
        assert_eq!((s.q1, s.q3), (d.q1, d.q3));
        assert_eq!(s.few_shot_fraction, d.few_shot_fraction);
        assert_eq!(s.density.len(), 101);
        assert!(position_summary(&[]).is_err());
    }

    #[test]
    fn masking_keeps_layout() {
        let u = TokenUnits::from_text("a bb\n\nccc d", 6);
        assert_eq!(u.target_offset, 2);
        let (t, spans) = u.mask(&[true, false, true, false], "<mask>");
        assert_eq!(t, "a <mask>\n\nccc <mask>");
        assert_eq!(&t[spans[1].start..spans[1].end], "<mask>");
        let (t, _) = u.mask(&[false, true, true, true], "");
        assert_eq!(t, " bb\n\nccc d");
    }
}
