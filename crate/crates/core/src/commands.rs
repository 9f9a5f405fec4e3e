//! Config-driven commands behind the `trc` binary.
//!
//! Outputs land in a fixed layout under the run directory:
//! `transcripts/`, `predictions/`, `reports/`, `attributions/`, plus
//! `checkpoints/` and the frozen `fewshot_sets.json`. Every JSON document
//! carries the config hash and seeds; JSONL files start with a meta line.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attribution::{
    density_csv, kernelshap, position_summary, violin_csv, AttributionError, AttributionRecord, AttributionResult,
    BackendModel, CoalitionModel, EncoderModel, PositionDistribution, SyntheticModel, TokenUnits,
};
use crate::corpus::{build_context, compute_stats, parse_corpus, Corpus, CorpusError, Scheme, Split};
use crate::encoder::{
    predict_corpus, train, Checkpoint, EncoderError, FineTuneMode, StubConfig, StubProvider,
    TrainConfig,
};
use crate::evaluation::{aggregate_runs, emit_report, evaluate, EvalError, ReportDocument, ReportFormat, ReportMeta, SetReport};
use crate::inference::{
    run_batch, GenerationBackend, GenerationConfig, HttpBackend, HttpBackendConfig, InferenceError, MockBackend,
    MockScript, Prediction, RetryPolicy, Transcript,
};
use crate::prompting::{load_fewshot_sets, sample_fewshot_sets, save_fewshot_sets, PromptError, PromptRenderer, Protocol};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Capability(String),
    #[error("{0}")]
    Internal(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Backend(_) => 3,
            Self::Capability(_) => 4,
            Self::Internal(_) => 1,
        }
    }
}

impl From<CorpusError> for CommandError {
    fn from(e: CorpusError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<PromptError> for CommandError {
    fn from(e: PromptError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<EncoderError> for CommandError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::NotTrainable(_) | EncoderError::AdaptersUnsupported(_) => Self::Capability(e.to_string()),
            EncoderError::Io { .. } => Self::Internal(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<InferenceError> for CommandError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Script { .. } | InferenceError::Prompt(_) => Self::Input(e.to_string()),
            _ => Self::Backend(e.to_string()),
        }
    }
}

impl From<EvalError> for CommandError {
    fn from(e: EvalError) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<AttributionError> for CommandError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::InsufficientSamples { .. } => Self::Input(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

pub type Result<T, E = CommandError> = std::result::Result<T, E>;

fn internal(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |e| CommandError::Internal(format!("{}: {e}", path.display()))
}

// Configuration.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default = "default_backend_kind")]
    pub kind: BackendKind,
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    #[serde(default)]
    pub http: Option<HttpBackendConfig>,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_backend_kind() -> BackendKind {
    BackendKind::Mock
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSection {
    #[serde(default = "default_sets")]
    pub n_sets: usize,
    pub seed: u64,
}

fn default_sets() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttrModelKind {
    /// The trained encoder head's probability for its prediction.
    Encoder,
    /// Agreement of the backend's answer with its unmasked answer.
    Backend,
    /// Synthetic: only the last prompt token matters.
    LastToken,
    /// Synthetic: random positive linear weights over all tokens.
    Uniform,
}

impl AttrModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Backend => "backend",
            Self::LastToken => "last-token",
            Self::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: u64,
    #[serde(default = "default_attr_model")]
    pub model: AttrModelKind,
    #[serde(default)]
    pub max_instances: Option<usize>,
}

fn default_samples() -> usize {
    2048
}

fn default_k() -> usize {
    5
}

fn default_attr_model() -> AttrModelKind {
    AttrModelKind::Encoder
}

fn default_protocol() -> Protocol {
    Protocol::P
}

fn default_out() -> PathBuf {
    PathBuf::from("trc-out")
}

/// Fully resolved run configuration. Every section has an explicit seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub scheme: Scheme,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    /// Label for reports; defaults to the backend or provider id.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub backend: BackendSection,
    pub fewshot: FewShotSection,
    pub train: TrainConfig,
    pub provider: StubConfig,
    pub attribution: AttributionSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub corpus: Option<PathBuf>,
    pub scheme: Option<String>,
    pub protocol: Option<String>,
    pub backend: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub sets: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub k: Option<usize>,
    pub samples: Option<usize>,
    pub out: Option<PathBuf>,
    pub attr_model: Option<String>,
    pub epochs: Option<usize>,
}

const SEEDED_SECTIONS: [&str; 4] = ["fewshot", "train", "provider", "attribution"];

fn section<'a>(root: &'a mut Map<String, Value>, name: &str) -> Result<&'a mut Map<String, Value>> {
    let v = root.entry(name).or_insert_with(|| Value::Object(Map::new()));
    v.as_object_mut()
        .ok_or_else(|| CommandError::Input(format!("config section `{name}` must be a table")))
}

impl RunConfig {
    /// Reads a TOML or JSON file (by extension) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &RunOverrides) -> Result<Self> {
        let raw: Value = match path {
            None => Value::Object(Map::new()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CommandError::Input(format!("{}: {e}", p.display())))?;
                let parsed = if p.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text).map_err(|e| e.to_string())
                } else {
                    toml::from_str(&text).map_err(|e| e.to_string())
                };
                parsed.map_err(|e| CommandError::Input(format!("{}: {e}", p.display())))?
            }
        };
        Self::from_value(raw, overrides)
    }

    pub fn from_value(raw: Value, o: &RunOverrides) -> Result<Self> {
        let Value::Object(mut root) = raw else {
            return Err(CommandError::Input("config must be a table".into()));
        };
        let set = |root: &mut Map<String, Value>, key: &str, v: Value| {
            root.insert(key.to_string(), v);
        };
        if let Some(v) = &o.corpus {
            set(&mut root, "corpus", json!(v));
        }
        if let Some(v) = &o.scheme {
            set(&mut root, "scheme", json!(v.to_ascii_lowercase()));
        }
        if let Some(v) = &o.protocol {
            set(&mut root, "protocol", json!(v.to_ascii_lowercase()));
        }
        if let Some(v) = &o.out {
            set(&mut root, "out", json!(v));
        }
        if let Some(seed) = o.seed {
            set(&mut root, "seed", json!(seed));
            for name in SEEDED_SECTIONS {
                section(&mut root, name)?.remove("seed");
            }
        }
        {
            let b = section(&mut root, "backend")?;
            if let Some(v) = &o.backend {
                b.insert("kind".into(), json!(v.to_ascii_lowercase()));
            }
            if let Some(v) = &o.mock_script {
                b.insert("mock_script".into(), json!(v));
            }
        }
        if let Some(v) = o.sets {
            section(&mut root, "fewshot")?.insert("n_sets".into(), json!(v));
        }
        if let Some(v) = &o.mode {
            section(&mut root, "train")?.insert("mode".into(), json!(v.to_ascii_lowercase()));
        }
        if let Some(v) = o.epochs {
            section(&mut root, "train")?.insert("epochs".into(), json!(v));
        }
        {
            let a = section(&mut root, "attribution")?;
            if let Some(v) = o.k {
                a.insert("k".into(), json!(v));
            }
            if let Some(v) = o.samples {
                a.insert("n_samples".into(), json!(v));
            }
            if let Some(v) = &o.attr_model {
                a.insert("model".into(), json!(v.to_ascii_lowercase()));
            }
        }

        let top_seed = root.get("seed").cloned();
        for name in SEEDED_SECTIONS {
            let s = section(&mut root, name)?;
            if !s.contains_key("seed") {
                match &top_seed {
                    Some(v) => {
                        s.insert("seed".into(), v.clone());
                    }
                    None => {
                        return Err(CommandError::Input(format!(
                            "no seed for `{name}`: set `seed` in the config or pass --seed"
                        )))
                    }
                }
            }
        }
        for key in ["corpus", "scheme"] {
            if !root.contains_key(key) {
                return Err(CommandError::Input(format!("missing `{key}` (config or --{key})")));
            }
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(root))
            .map_err(|e| CommandError::Input(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !self.corpus.exists() {
            return Err(CommandError::Input(format!("corpus {} does not exist", self.corpus.display())));
        }
        if self.backend.kind == BackendKind::Mock {
            if let Some(p) = &self.backend.mock_script {
                if !p.exists() {
                    return Err(CommandError::Input(format!("mock script {} does not exist", p.display())));
                }
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Hash of everything but the output directory.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.out = PathBuf::new();
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("attribution".to_string(), self.attribution.seed),
            ("fewshot".to_string(), self.fewshot.seed),
            ("provider".to_string(), self.provider.seed),
            ("train".to_string(), self.train.seed),
        ])
    }

    pub fn meta(&self) -> OutputMeta {
        OutputMeta {
            config_hash: self.hash(),
            seeds: self.seeds(),
        }
    }

    fn backend_label(&self) -> String {
        self.model.clone().unwrap_or_else(|| match self.backend.kind {
            BackendKind::Mock => "mock".into(),
            BackendKind::Http => self.backend.http.as_ref().map(|h| h.model.clone()).unwrap_or_else(|| "http".into()),
        })
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).map_err(internal(&d))?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

/// A JSON payload stamped with its run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub meta: OutputMeta,
    pub data: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CommandError::Internal(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(internal(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))
}

/// Writes `{"meta": ...}` followed by one item per line.
pub fn write_jsonl<T: Serialize>(path: &Path, meta: &OutputMeta, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(internal(path))?);
    let head = json!({ "meta": meta });
    serde_json::to_writer(&mut w, &head).map_err(|e| CommandError::Internal(e.to_string()))?;
    w.write_all(b"\n").map_err(internal(path))?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CommandError::Internal(e.to_string()))?;
        w.write_all(b"\n").map_err(internal(path))?;
    }
    w.flush().map_err(internal(path))
}

/// Reads a file written by [`write_jsonl`].
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(OutputMeta, Vec<T>)> {
    let f = File::open(path).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let bad = |n: usize, e: String| CommandError::Input(format!("{} line {n}: {e}", path.display()));
    let first = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".into()))?
        .map_err(|e| bad(1, e.to_string()))?;
    #[derive(Deserialize)]
    struct Head {
        meta: OutputMeta,
    }
    let head: Head = serde_json::from_str(&first).map_err(|e| bad(1, e.to_string()))?;
    let mut items = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(i + 2, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e.to_string()))?);
    }
    Ok((head.meta, items))
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(parse_corpus(&cfg.corpus, cfg.scheme)?)
}

// ingest

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let stats = compute_stats(&corpus);
    let path = cfg.dir("reports")?.join("corpus_stats.json");
    write_json(
        &path,
        &Stamped {
            meta: cfg.meta(),
            data: &stats,
        },
    )?;
    Ok(Outcome {
        summary: format!(
            "{} documents, {} pairs ({} train / {} dev / {} test), {} classes, {} vague dropped",
            stats.documents,
            stats.pairs,
            stats.split_sizes.train,
            stats.split_sizes.dev,
            stats.split_sizes.test,
            stats.classes.len(),
            stats.dropped_vague
        ),
        files: vec![path],
    })
}

// run

fn build_backend(cfg: &RunConfig) -> Result<Box<dyn GenerationBackend>> {
    match cfg.backend.kind {
        BackendKind::Mock => {
            let script = match &cfg.backend.mock_script {
                Some(p) => MockScript::load(p)?,
                None => return Err(CommandError::Input("mock backend needs --mock-script".into())),
            };
            Ok(Box::new(MockBackend::new(script)))
        }
        BackendKind::Http => {
            let http = cfg
                .backend
                .http
                .clone()
                .ok_or_else(|| CommandError::Input("http backend needs a [backend.http] section".into()))?;
            Ok(Box::new(HttpBackend::new(http)))
        }
    }
}

fn fewshot_sets(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<crate::prompting::FewShotSet>> {
    if cfg.fewshot.n_sets == 0 {
        return Ok(Vec::new());
    }
    fs::create_dir_all(&cfg.out).map_err(internal(&cfg.out))?;
    let path = cfg.out.join("fewshot_sets.json");
    if path.exists() {
        let sets = load_fewshot_sets(&path, corpus)?;
        let same = sets.len() == cfg.fewshot.n_sets && sets.iter().all(|s| s.seed == cfg.fewshot.seed);
        if !same {
            return Err(CommandError::Input(format!(
                "{} was sampled with different settings; use a fresh --out",
                path.display()
            )));
        }
        return Ok(sets);
    }
    let sets = sample_fewshot_sets(corpus, cfg.fewshot.n_sets, cfg.fewshot.seed)?;
    save_fewshot_sets(&path, &sets)?;
    Ok(sets)
}

fn report_meta(cfg: &RunConfig, model: String, protocol: String) -> ReportMeta {
    ReportMeta {
        config_hash: cfg.hash(),
        corpus: cfg.scheme,
        model,
        protocol,
        seeds: cfg.seeds(),
    }
}

fn write_reports(cfg: &RunConfig, stem: &str, doc: &ReportDocument) -> Result<Vec<PathBuf>> {
    let dir = cfg.dir("reports")?;
    let mut files = Vec::new();
    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        let path = dir.join(format!("{stem}.{}", format.extension()));
        fs::write(&path, emit_report(doc, format)?).map_err(internal(&path))?;
        files.push(path);
    }
    Ok(files)
}

pub fn cmd_run(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let backend = build_backend(cfg)?;
    let sets = fewshot_sets(cfg, &corpus)?;
    let renderer = PromptRenderer::new(cfg.scheme);
    let targets = corpus
        .pairs_in(Split::Test)
        .map(|p| Ok((p.id.clone(), build_context(p, &corpus)?)))
        .collect::<Result<Vec<_>>>()?;
    let gen = GenerationConfig {
        retry: cfg.backend.retry.clone(),
        parallelism: cfg.backend.parallelism,
        ..GenerationConfig::default()
    };
    let batch = run_batch(backend.as_ref(), &renderer, &targets, cfg.protocol, &sets, &gen);

    let meta = cfg.meta();
    let stem = cfg.protocol.as_str();
    let mut files = Vec::new();
    let t = cfg.dir("transcripts")?.join(format!("{stem}.jsonl"));
    write_jsonl::<Transcript>(&t, &meta, &batch.transcripts)?;
    let p = cfg.dir("predictions")?.join(format!("{stem}.jsonl"));
    write_jsonl::<Prediction>(&p, &meta, &batch.predictions)?;
    let f = cfg.dir("predictions")?.join(format!("{stem}.failures.jsonl"));
    write_jsonl(&f, &meta, &batch.failures)?;
    files.extend([t, p, f]);

    let set_ids: Vec<Option<usize>> = if sets.is_empty() {
        vec![None]
    } else {
        sets.iter().map(|s| Some(s.set_id)).collect()
    };
    let reports = set_ids
        .into_iter()
        .map(|id| {
            Ok(SetReport {
                set_id: id,
                report: evaluate(&batch.predictions_for_set(id), &corpus, Split::Test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate_runs(reports)?;
    let doc = ReportDocument::new(
        report_meta(cfg, cfg.backend_label(), cfg.protocol.to_string()),
        aggregate,
    );
    files.extend(write_reports(cfg, stem, &doc)?);

    let backend_failures = batch.failures.iter().filter(|f| f.backend_error).count();
    let summary = format!(
        "{} predictions over {} set(s); micro-F1 {:.1} ± {:.1}; {} failure(s)",
        batch.predictions.len(),
        doc.aggregate.sets.len(),
        doc.aggregate.mean_micro_f1 * 100.0,
        doc.aggregate.std_micro_f1 * 100.0,
        batch.failures.len()
    );
    if backend_failures > 0 {
        return Err(CommandError::Backend(format!(
            "{summary}; backend errors on {backend_failures} job(s), partial artifacts kept in {}",
            cfg.out.display()
        )));
    }
    Ok(Outcome { summary, files })
}

// train / predict

fn checkpoint_paths(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let d = cfg.dir("checkpoints")?;
    Ok((d.join("head.json"), d.join("provider.json")))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let mut provider = StubProvider::<f64>::new(cfg.provider.clone());
    let outcome = train(&mut provider, &corpus, &cfg.train)?;
    let meta = cfg.meta();
    let (head_path, provider_path) = checkpoint_paths(cfg)?;
    let ck = Checkpoint::new(&provider, &cfg.train, &outcome);
    write_json(
        &head_path,
        &Stamped {
            meta: meta.clone(),
            data: &ck,
        },
    )?;
    let mut files = vec![head_path];
    if cfg.train.mode != FineTuneMode::Frozen {
        write_json(
            &provider_path,
            &Stamped {
                meta: meta.clone(),
                data: &provider,
            },
        )?;
        files.push(provider_path);
    }
    let metrics = cfg.dir("reports")?.join("train_metrics.jsonl");
    write_jsonl(&metrics, &meta, &outcome.epochs)?;
    files.push(metrics);
    Ok(Outcome {
        summary: format!(
            "mode {:?}: best dev micro-F1 {:.3} at epoch {} (encoder lr {}, head lr {}, warmup {}, batch {})",
            cfg.train.mode,
            outcome.best_dev_micro_f1,
            outcome.best_epoch,
            cfg.train.encoder_lr,
            cfg.train.head_lr,
            cfg.train.warmup_fraction,
            cfg.train.batch_size
        ),
        files,
    })
}

fn load_trained(cfg: &RunConfig) -> Result<(StubProvider<f64>, Checkpoint)> {
    let (head_path, provider_path) = checkpoint_paths(cfg)?;
    if !head_path.exists() {
        return Err(CommandError::Input(format!("no checkpoint at {}; run `trc train` first", head_path.display())));
    }
    let ck: Stamped<Checkpoint> = read_json(&head_path)?;
    let ck = ck.data;
    let provider = if ck.config.mode == FineTuneMode::Frozen {
        StubProvider::new(cfg.provider.clone())
    } else {
        let p: Stamped<StubProvider<f64>> = read_json(&provider_path)?;
        p.data
    };
    ck.check_provider(&provider)?;
    Ok((provider, ck))
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let (provider, ck) = load_trained(cfg)?;
    let head = ck.head::<f64>();
    let preds = predict_corpus(&provider, &head, &corpus, Split::Test)?;
    let meta = cfg.meta();
    let path = cfg.dir("predictions")?.join("encoder.jsonl");
    write_jsonl(&path, &meta, &preds)?;
    let refs: Vec<&Prediction> = preds.iter().collect();
    let report = evaluate(&refs, &corpus, Split::Test)?;
    let aggregate = aggregate_runs(vec![SetReport { set_id: None, report }])?;
    let model = cfg.model.clone().unwrap_or_else(|| ck.provider.id.clone());
    let mode = serde_json::to_value(ck.config.mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let doc = ReportDocument::new(report_meta(cfg, model, mode), aggregate);
    let mut files = vec![path];
    files.extend(write_reports(cfg, "encoder", &doc)?);
    Ok(Outcome {
        summary: format!("{} predictions; test micro-F1 {:.1}", preds.len(), doc.aggregate.mean_micro_f1 * 100.0),
        files,
    })
}

// attribute

fn attribute_one<M: CoalitionModel<f64> + ?Sized>(
    id: &str,
    model: &M,
    units: &TokenUnits,
    cfg: &RunConfig,
    index: usize,
) -> Result<(AttributionRecord, PositionDistribution)> {
    let a = &cfg.attribution;
    let result: AttributionResult<f64> = kernelshap(model, a.n_samples, a.seed.wrapping_add(index as u64))
        .map_err(|e| CommandError::from(e).context(id))?;
    Ok(AttributionRecord::new(id, units, &result, a.k))
}

impl CommandError {
    fn context(self, id: &str) -> Self {
        let add = |m: String| format!("instance {id}: {m}");
        match self {
            Self::Input(m) => Self::Input(add(m)),
            Self::Backend(m) => Self::Backend(add(m)),
            Self::Capability(m) => Self::Capability(add(m)),
            Self::Internal(m) => Self::Internal(add(m)),
        }
    }
}

pub fn cmd_attribute(cfg: &RunConfig) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let a = &cfg.attribution;
    let limit = a.max_instances.unwrap_or(usize::MAX);
    let pairs: Vec<_> = corpus.pairs_in(Split::Test).take(limit).collect();
    let mut records = Vec::new();
    let mut dists = Vec::new();
    let (model_label, protocol_label, baseline) = match a.model {
        AttrModelKind::Encoder => {
            let (provider, ck) = load_trained(cfg)?;
            let head = ck.head::<f64>();
            let mut baseline = String::new();
            for (i, pair) in pairs.iter().enumerate() {
                let ctx = build_context(pair, &corpus)?;
                let model = EncoderModel::new(&provider, &head, &ctx).map_err(|e| CommandError::from(e).context(&pair.id))?;
                baseline = model.baseline().to_string();
                let (rec, d) = attribute_one(&pair.id, &model, model.units(), cfg, i)?;
                records.push(rec);
                dists.push(d);
            }
            (ck.provider.id.clone(), "encoder".to_string(), baseline)
        }
        kind => {
            let sets = fewshot_sets(cfg, &corpus)?;
            let renderer = PromptRenderer::new(cfg.scheme);
            let backend = if kind == AttrModelKind::Backend {
                Some(build_backend(cfg)?)
            } else {
                None
            };
            for (i, pair) in pairs.iter().enumerate() {
                let ctx = build_context(pair, &corpus)?;
                let prompt = renderer.render_p(&pair.id, &ctx, sets.first())?;
                let units = TokenUnits::from_prompt(&prompt);
                let (rec, d) = match (&backend, kind) {
                    (Some(b), _) => {
                        let model = BackendModel::new(b.as_ref(), &prompt, GenerationConfig::default().max_new_tokens_p, cfg.backend.retry.clone())
                            .map_err(|m| CommandError::Backend(format!("instance {}: {m}", pair.id)))?;
                        attribute_one(&pair.id, &model, &units, cfg, i)?
                    }
                    (None, AttrModelKind::LastToken) => {
                        let model = SyntheticModel::LastToken { m: units.len() };
                        attribute_one(&pair.id, &model, &units, cfg, i)?
                    }
                    _ => {
                        let model = SyntheticModel::uniform(units.len(), a.seed.wrapping_add(i as u64));
                        attribute_one(&pair.id, &model, &units, cfg, i)?
                    }
                };
                records.push(rec);
                dists.push(d);
            }
            let label = match kind {
                AttrModelKind::Backend => cfg.backend_label(),
                other => other.as_str().to_string(),
            };
            (label, Protocol::P.to_string(), String::new())
        }
    };

    let summary = position_summary(&dists)?;
    let meta = cfg.meta();
    let dir = cfg.dir("attributions")?;
    let stem = a.model.as_str();
    let dump = dir.join(format!("{stem}.jsonl"));
    write_jsonl(&dump, &meta, &records)?;
    let comment = format!("config_hash={} seed={}", meta.config_hash, a.seed);
    let corpus_name = cfg.scheme.as_str();
    let violin = dir.join(format!("{stem}_positions.csv"));
    fs::write(&violin, violin_csv(corpus_name, &model_label, &protocol_label, &summary, Some(&comment)))
        .map_err(internal(&violin))?;
    let density = dir.join(format!("{stem}_density.csv"));
    fs::write(&density, density_csv(corpus_name, &model_label, &protocol_label, &summary, Some(&comment)))
        .map_err(internal(&density))?;
    let summary_path = dir.join(format!("{stem}_summary.json"));
    write_json(
        &summary_path,
        &Stamped {
            meta,
            data: json!({
                "model": model_label,
                "protocol": protocol_label,
                "baseline": baseline,
                "k": a.k,
                "n_samples": a.n_samples,
                "instances": records.len(),
                "median": summary.median,
                "q1": summary.q1,
                "q3": summary.q3,
                "few_shot_fraction": summary.few_shot_fraction,
                "bandwidth": summary.bandwidth,
            }),
        },
    )?;
    Ok(Outcome {
        summary: format!(
            "{} instances; median relative position {}; few-shot fraction {:.3}",
            records.len(),
            summary.median.map(|m| format!("{m:.3}")).unwrap_or_else(|| "n/a".into()),
            summary.few_shot_fraction
        ),
        files: vec![dump, violin, density, summary_path],
    })
}
