//! Annotated corpus model and JSONL ingestion.
//!
//! One document per line:
//!
//! ```json
//! {"doc_id": "d1", "split": "train",
//!  "sentences": [["It", "accused", "the", "company"]],
//!  "events": [{"id": "e1", "sentence": 0, "span": [1, 2]}],
//!  "pairs": [{"e1": "e1", "e2": "e2", "relation": "AFTER"}]}
//! ```
//!
//! Spans are half-open token intervals. Relation names are case-insensitive
//! and accept spaces, underscores or hyphens as separators. Pairs whose gold
//! label is `vague` are dropped on ingest and counted in
//! [`Corpus::dropped_vague`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EVENT1_OPEN: &str = "[event1]";
pub const EVENT1_CLOSE: &str = "[/event1]";
pub const EVENT2_OPEN: &str = "[event2]";
pub const EVENT2_CLOSE: &str = "[/event2]";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: span of event `{event_id}` is out of range")]
    SpanOutOfRange { line: usize, event_id: String },
    #[error("line {line}: unknown relation `{relation}`")]
    UnknownRelation { line: usize, relation: String },
    #[error("line {line}: relation `{relation}` is not part of the {scheme} scheme")]
    RelationNotInScheme {
        line: usize,
        relation: String,
        scheme: Scheme,
    },
    #[error("line {line}: pair references unknown event `{event_id}`")]
    UnknownEvent { line: usize, event_id: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("unknown corpus scheme `{0}` (expected matres, timeline or tbdense)")]
    UnknownScheme(String),
    #[error("`vague` has no inverse relation")]
    VagueHasNoInverse,
    #[error("events `{e1}` and `{e2}` overlap; overlapping spans cannot be tagged")]
    OverlappingEvents { e1: String, e2: String },
    #[error("document `{0}` not found")]
    UnknownDocument(String),
    #[error("event `{event_id}` not found in document `{doc_id}`")]
    MissingEvent { doc_id: String, event_id: String },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Temporal relation labels. Variant order is alphabetical, which is also
/// the class order of the classifier head and the question order of the QA
/// protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalRelation {
    After,
    Before,
    Equal,
    Includes,
    IsIncluded,
    Vague,
}

impl TemporalRelation {
    pub const ALL: [TemporalRelation; 6] = [
        Self::After,
        Self::Before,
        Self::Equal,
        Self::Includes,
        Self::IsIncluded,
        Self::Vague,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::After => "after",
            Self::Before => "before",
            Self::Equal => "equal",
            Self::Includes => "includes",
            Self::IsIncluded => "is_included",
            Self::Vague => "vague",
        }
    }

    /// Surface form used in prompts: `AFTER`, `IS INCLUDED`.
    pub fn display_label(self) -> String {
        self.as_str().replace('_', " ").to_ascii_uppercase()
    }

    /// Scheme-independent name lookup. `simultaneous` is not a relation on
    /// its own; see [`Scheme::resolve_label`].
    pub fn from_name(raw: &str) -> Option<Self> {
        let key = normalize_label(raw);
        Self::ALL.into_iter().find(|r| r.as_str() == key)
    }

    pub fn is_vague(self) -> bool {
        self == Self::Vague
    }
}

impl fmt::Display for TemporalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn normalize_label(raw: &str) -> String {
    raw.trim()
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_")
        .to_ascii_lowercase()
}

/// Inverse relation for the swapped pair `(e2, e1)`.
pub fn invert_relation(r: TemporalRelation) -> Result<TemporalRelation> {
    use TemporalRelation::*;
    match r {
        Before => Ok(After),
        After => Ok(Before),
        Equal => Ok(Equal),
        Includes => Ok(IsIncluded),
        IsIncluded => Ok(Includes),
        Vague => Err(CorpusError::VagueHasNoInverse),
    }
}

/// Annotation scheme of a corpus, which fixes its relation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Matres,
    Timeline,
    #[serde(alias = "tb-dense", alias = "tb_dense")]
    Tbdense,
}

impl Scheme {
    /// Non-vague relations of the scheme, in class order.
    pub fn relations(self) -> &'static [TemporalRelation] {
        use TemporalRelation::*;
        match self {
            Scheme::Matres | Scheme::Timeline => &[After, Before, Equal],
            Scheme::Tbdense => &[After, Before, Equal, Includes, IsIncluded],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Matres => "matres",
            Scheme::Timeline => "timeline",
            Scheme::Tbdense => "tbdense",
        }
    }

    /// Maps a raw gold label to the scheme's label space. `Ok(None)` means a
    /// vague gold label, which the caller drops.
    pub fn resolve_label(self, raw: &str, line: usize) -> Result<Option<TemporalRelation>> {
        let key = normalize_label(raw);
        let relation = if key == "simultaneous" && self == Scheme::Tbdense {
            TemporalRelation::Equal
        } else {
            TemporalRelation::from_name(&key).ok_or_else(|| CorpusError::UnknownRelation {
                line,
                relation: raw.to_string(),
            })?
        };
        if relation.is_vague() {
            return Ok(None);
        }
        if !self.relations().contains(&relation) {
            return Err(CorpusError::RelationNotInScheme {
                line,
                relation: raw.to_string(),
                scheme: self,
            });
        }
        Ok(Some(relation))
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match normalize_label(s).replace('_', "").as_str() {
            "matres" => Ok(Scheme::Matres),
            "timeline" => Ok(Scheme::Timeline),
            "tbdense" => Ok(Scheme::Tbdense),
            _ => Err(CorpusError::UnknownScheme(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub index: usize,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Byte offset of each token's start within [`Sentence::text`].
    fn token_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.tokens.len());
        let mut pos = 0;
        for t in &self.tokens {
            starts.push(pos);
            pos += t.len() + 1;
        }
        starts
    }

    /// Byte span of the half-open token range `[start, end)`.
    fn char_span(&self, tokens: TokenSpan) -> TextSpan {
        let starts = self.token_starts();
        let last = tokens.end - 1;
        TextSpan {
            start: starts[tokens.start],
            end: starts[last] + self.tokens[last].len(),
        }
    }
}

/// Half-open token interval `[start, end)` within a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Half-open byte interval into a UTF-8 string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextSpan {
    pub start: usize,
    pub end: usize,
}

impl TextSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// True when the two spans share at least one byte.
    pub fn intersects(&self, other: &TextSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    fn shifted(self, by: usize) -> Self {
        Self {
            start: self.start + by,
            end: self.end + by,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTrigger {
    pub event_id: String,
    pub sentence_index: usize,
    pub token_span: TokenSpan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub split: Split,
    pub sentences: Vec<Sentence>,
    pub events: Vec<EventTrigger>,
}

impl Document {
    pub fn event(&self, event_id: &str) -> Option<&EventTrigger> {
        self.events.iter().find(|e| e.event_id == event_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventPair {
    /// `doc_id:e1:e2`, unique within a corpus.
    pub id: String,
    pub doc_id: String,
    pub e1: String,
    pub e2: String,
    pub gold: TemporalRelation,
    pub split: Split,
}

impl EventPair {
    pub fn make_id(doc_id: &str, e1: &str, e2: &str) -> String {
        format!("{doc_id}:{e1}:{e2}")
    }
}

/// Parsed, validated corpus. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Corpus {
    scheme: Scheme,
    documents: Vec<Document>,
    pairs: Vec<EventPair>,
    dropped_vague: usize,
    doc_index: HashMap<String, usize>,
    pair_index: HashMap<String, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme
            && self.documents == other.documents
            && self.pairs == other.pairs
    }
}

// Wire format.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub events: Vec<EventRecord>,
    pub pairs: Vec<PairRecord>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub sentence: usize,
    pub span: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub e1: String,
    pub e2: String,
    pub relation: String,
}

impl Corpus {
    pub fn empty(scheme: Scheme) -> Self {
        Self::build(scheme, Vec::new(), Vec::new(), 0)
    }

    fn build(scheme: Scheme, documents: Vec<Document>, pairs: Vec<EventPair>, dropped_vague: usize) -> Self {
        let doc_index = documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i))
            .collect();
        let pair_index = pairs.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Self {
            scheme,
            documents,
            pairs,
            dropped_vague,
            doc_index,
            pair_index,
        }
    }

    /// Validates records. `line` numbers reported in errors are the 1-based
    /// positions supplied alongside each record.
    pub fn from_records<I>(scheme: Scheme, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, DocumentRecord)>,
    {
        let mut documents = Vec::new();
        let mut pairs = Vec::new();
        let mut dropped_vague = 0;
        let mut seen_docs = HashSet::new();
        let mut seen_pairs = HashSet::new();

        for (line, record) in records {
            let invalid = |message: String| CorpusError::Invalid { line, message };
            if !seen_docs.insert(record.doc_id.clone()) {
                return Err(invalid(format!("duplicate doc_id `{}`", record.doc_id)));
            }
            let mut sentences = Vec::with_capacity(record.sentences.len());
            for (index, tokens) in record.sentences.into_iter().enumerate() {
                if tokens.is_empty() {
                    return Err(invalid(format!("sentence {index} is empty")));
                }
                if let Some(bad) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
                    return Err(invalid(format!(
                        "sentence {index} has token {bad:?}; tokens must be non-empty and contain no whitespace"
                    )));
                }
                sentences.push(Sentence { index, tokens });
            }

            let mut events: Vec<EventTrigger> = Vec::with_capacity(record.events.len());
            for ev in record.events {
                if events.iter().any(|e| e.event_id == ev.id) {
                    return Err(invalid(format!("duplicate event id `{}`", ev.id)));
                }
                let [start, end] = ev.span;
                let in_range = sentences
                    .get(ev.sentence)
                    .is_some_and(|s| start < end && end <= s.tokens.len());
                if !in_range {
                    return Err(CorpusError::SpanOutOfRange { line, event_id: ev.id });
                }
                events.push(EventTrigger {
                    event_id: ev.id,
                    sentence_index: ev.sentence,
                    token_span: TokenSpan { start, end },
                });
            }

            for p in record.pairs {
                for id in [&p.e1, &p.e2] {
                    if !events.iter().any(|e| &e.event_id == id) {
                        return Err(CorpusError::UnknownEvent {
                            line,
                            event_id: id.clone(),
                        });
                    }
                }
                if p.e1 == p.e2 {
                    return Err(invalid(format!("pair relates event `{}` to itself", p.e1)));
                }
                let Some(gold) = scheme.resolve_label(&p.relation, line)? else {
                    dropped_vague += 1;
                    continue;
                };
                let id = EventPair::make_id(&record.doc_id, &p.e1, &p.e2);
                if !seen_pairs.insert(id.clone()) {
                    return Err(invalid(format!("duplicate pair `{id}`")));
                }
                pairs.push(EventPair {
                    id,
                    doc_id: record.doc_id.clone(),
                    e1: p.e1,
                    e2: p.e2,
                    gold,
                    split: record.split,
                });
            }

            documents.push(Document {
                doc_id: record.doc_id,
                split: record.split,
                sentences,
                events,
            });
        }
        Ok(Self::build(scheme, documents, pairs, dropped_vague))
    }

    pub fn from_reader<R: BufRead>(scheme: Scheme, reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: DocumentRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            records.push((line_no, record));
        }
        Self::from_records(scheme, records)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn pairs(&self) -> &[EventPair] {
        &self.pairs
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &EventPair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Number of gold-vague pairs removed during ingestion.
    pub fn dropped_vague(&self) -> usize {
        self.dropped_vague
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.doc_index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn pair(&self, pair_id: &str) -> Option<&EventPair> {
        self.pair_index.get(pair_id).map(|&i| &self.pairs[i])
    }

    pub fn to_records(&self) -> Vec<DocumentRecord> {
        self.documents
            .iter()
            .map(|d| DocumentRecord {
                doc_id: d.doc_id.clone(),
                sentences: d.sentences.iter().map(|s| s.tokens.clone()).collect(),
                events: d
                    .events
                    .iter()
                    .map(|e| EventRecord {
                        id: e.event_id.clone(),
                        sentence: e.sentence_index,
                        span: [e.token_span.start, e.token_span.end],
                    })
                    .collect(),
                pairs: self
                    .pairs
                    .iter()
                    .filter(|p| p.doc_id == d.doc_id)
                    .map(|p| PairRecord {
                        e1: p.e1.clone(),
                        e2: p.e2.clone(),
                        relation: p.gold.as_str().to_string(),
                    })
                    .collect(),
                split: d.split,
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for record in self.to_records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads a JSONL corpus file under the given scheme.
pub fn parse_corpus(path: impl AsRef<Path>, scheme: Scheme) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::from_reader(scheme, BufReader::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Intra,
    Inter,
}

/// Sentence context of an event pair with the byte spans of both events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub text: String,
    pub e1_span: TextSpan,
    pub e2_span: TextSpan,
    pub scope: Scope,
}

impl ContextWindow {
    /// Whitespace-delimited tokens of the context with their byte spans.
    pub fn token_spans(&self) -> Vec<(TextSpan, &str)> {
        whitespace_tokens(&self.text)
    }
}

/// Whitespace tokens of `text` with their byte spans.
pub fn whitespace_tokens(text: &str) -> Vec<(TextSpan, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((TextSpan::new(s, i), &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((TextSpan::new(s, text.len()), &text[s..]));
    }
    out
}

/// Builds the classifier/prompt context for a pair: the shared sentence, or
/// the two sentences joined by one space in document order.
pub fn build_context(pair: &EventPair, corpus: &Corpus) -> Result<ContextWindow> {
    let doc = corpus
        .document(&pair.doc_id)
        .ok_or_else(|| CorpusError::UnknownDocument(pair.doc_id.clone()))?;
    let find = |id: &str| {
        doc.event(id).ok_or_else(|| CorpusError::MissingEvent {
            doc_id: doc.doc_id.clone(),
            event_id: id.to_string(),
        })
    };
    let (ev1, ev2) = (find(&pair.e1)?, find(&pair.e2)?);
    let s1 = &doc.sentences[ev1.sentence_index];
    let s2 = &doc.sentences[ev2.sentence_index];
    let span1 = s1.char_span(ev1.token_span);
    let span2 = s2.char_span(ev2.token_span);

    if ev1.sentence_index == ev2.sentence_index {
        return Ok(ContextWindow {
            text: s1.text(),
            e1_span: span1,
            e2_span: span2,
            scope: Scope::Intra,
        });
    }
    let (t1, t2) = (s1.text(), s2.text());
    let ctx = if ev1.sentence_index < ev2.sentence_index {
        let shift = t1.len() + 1;
        ContextWindow {
            text: format!("{t1} {t2}"),
            e1_span: span1,
            e2_span: span2.shifted(shift),
            scope: Scope::Inter,
        }
    } else {
        let shift = t2.len() + 1;
        ContextWindow {
            text: format!("{t2} {t1}"),
            e1_span: span1.shifted(shift),
            e2_span: span2,
            scope: Scope::Inter,
        }
    };
    Ok(ctx)
}

/// Scope of a pair without materializing its text.
pub fn pair_scope(pair: &EventPair, corpus: &Corpus) -> Option<Scope> {
    let doc = corpus.document(&pair.doc_id)?;
    let a = doc.event(&pair.e1)?.sentence_index;
    let b = doc.event(&pair.e2)?.sentence_index;
    Some(if a == b { Scope::Intra } else { Scope::Inter })
}

/// Wraps both event surfaces in `[event1] … [/event1]` and
/// `[event2] … [/event2]`.
pub fn tag_events(ctx: &ContextWindow) -> Result<String> {
    if ctx.e1_span.intersects(&ctx.e2_span) {
        return Err(CorpusError::OverlappingEvents {
            e1: ctx.text[ctx.e1_span.start..ctx.e1_span.end].to_string(),
            e2: ctx.text[ctx.e2_span.start..ctx.e2_span.end].to_string(),
        });
    }
    let mut marks = [
        (ctx.e1_span, EVENT1_OPEN, EVENT1_CLOSE),
        (ctx.e2_span, EVENT2_OPEN, EVENT2_CLOSE),
    ];
    // Right to left so earlier offsets stay valid.
    marks.sort_by_key(|m| std::cmp::Reverse(m.0.start));
    let mut out = ctx.text.clone();
    for (span, open, close) in marks {
        out.insert_str(span.end, &format!(" {close}"));
        out.insert_str(span.start, &format!("{open} "));
    }
    Ok(out)
}

/// Removes the event tags inserted by [`tag_events`].
pub fn strip_tags(tagged: &str) -> String {
    let mut out = tagged.to_string();
    for open in [EVENT1_OPEN, EVENT2_OPEN] {
        out = out.replace(&format!("{open} "), "");
    }
    for close in [EVENT1_CLOSE, EVENT2_CLOSE] {
        out = out.replace(&format!(" {close}"), "");
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Dev => self.dev += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub scheme: Scheme,
    pub classes: Vec<TemporalRelation>,
    pub documents: usize,
    pub pairs: usize,
    pub split_sizes: SplitCounts,
    pub label_counts: BTreeMap<TemporalRelation, usize>,
    /// Over all splits together. Empty for an empty corpus.
    pub label_proportions: BTreeMap<TemporalRelation, f64>,
    pub split_label_counts: BTreeMap<Split, BTreeMap<TemporalRelation, usize>>,
    pub intra: usize,
    pub inter: usize,
    pub intra_proportion: f64,
    pub inter_proportion: f64,
    pub dropped_vague: usize,
}

pub fn compute_stats(corpus: &Corpus) -> CorpusStats {
    let mut split_sizes = SplitCounts::default();
    let mut label_counts = BTreeMap::new();
    let mut split_label_counts: BTreeMap<Split, BTreeMap<TemporalRelation, usize>> = BTreeMap::new();
    let (mut intra, mut inter) = (0, 0);
    for pair in corpus.pairs() {
        split_sizes.bump(pair.split);
        *label_counts.entry(pair.gold).or_insert(0) += 1;
        *split_label_counts
            .entry(pair.split)
            .or_default()
            .entry(pair.gold)
            .or_insert(0) += 1;
        match pair_scope(pair, corpus) {
            Some(Scope::Intra) => intra += 1,
            Some(Scope::Inter) => inter += 1,
            None => {}
        }
    }
    let n = corpus.pairs().len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    CorpusStats {
        scheme: corpus.scheme(),
        classes: corpus.scheme().relations().to_vec(),
        documents: corpus.documents().len(),
        pairs: n,
        split_sizes,
        label_proportions: label_counts.iter().map(|(&r, &k)| (r, frac(k))).collect(),
        label_counts,
        split_label_counts,
        intra,
        inter,
        intra_proportion: frac(intra),
        inter_proportion: frac(inter),
        dropped_vague: corpus.dropped_vague(),
    }
}
