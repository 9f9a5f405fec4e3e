//! Prompt protocols P, QA1 and QA2 with frozen few-shot sets.
//!
//! Block layouts (few-shot blocks are separated by one blank line and the
//! target block comes last):
//!
//! ```text
//! P    Given the context: <tagged> -> AFTER
//! QA1  Given the context: <tagged> Answer the question: <question> YES
//! QA2  Given the context: <tagged> Answer the questions: <q1> YES <q2> NO <q3> NO
//! ```
//!
//! Target blocks stop where the model is expected to continue: after `->`
//! for P and after the trailing space of the pending question for QA.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_context, tag_events, ContextWindow, Corpus, CorpusError, Scheme, Split, TemporalRelation};
use crate::corpus::{EVENT1_CLOSE, EVENT1_OPEN, EVENT2_CLOSE, EVENT2_OPEN};

pub const CONTEXT_PREFIX: &str = "Given the context: ";
pub const QUESTION_PREFIX: &str = " Answer the question: ";
pub const QUESTIONS_PREFIX: &str = " Answer the questions: ";
pub const LABEL_ARROW: &str = " ->";
pub const BLOCK_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("`vague` has no question")]
    VagueQuestion,
    #[error("training split has no example of class `{0}`")]
    MissingClass(TemporalRelation),
    #[error("QA2 history already answers all {0} questions")]
    HistoryComplete(usize),
    #[error("QA2 history is out of order: expected `{expected}` at turn {turn}, found `{found}`")]
    HistoryOrder {
        turn: usize,
        expected: TemporalRelation,
        found: TemporalRelation,
    },
    #[error("few-shot file references unknown pair `{0}`")]
    UnknownPair(String),
    #[error("unknown protocol `{0}` (expected p, qa1 or qa2)")]
    UnknownProtocol(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("few-shot file {path}: {message}")]
    Persist { path: String, message: String },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    P,
    Qa1,
    Qa2,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::P => "p",
            Protocol::Qa1 => "qa1",
            Protocol::Qa2 => "qa2",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p" => Ok(Protocol::P),
            "qa1" => Ok(Protocol::Qa1),
            "qa2" => Ok(Protocol::Qa2),
            _ => Err(PromptError::UnknownProtocol(s.to_string())),
        }
    }
}

/// One yes/no question per relation class.
#[derive(Debug, Clone)]
pub struct QuestionBank {
    templates: BTreeMap<TemporalRelation, &'static str>,
}

fn template(r: TemporalRelation) -> Option<&'static str> {
    use TemporalRelation::*;
    match r {
        Before => Some("Does {e1} happen before {e2}?"),
        After => Some("Does {e1} happen after {e2}?"),
        Equal => Some("Does {e1} happen at the same time as {e2}?"),
        Includes => Some("Does {e1} temporally include {e2}?"),
        IsIncluded => Some("Is {e1} temporally included in {e2}?"),
        Vague => None,
    }
}

impl QuestionBank {
    /// Questions for exactly the scheme's relations. TB-Dense `simultaneous`
    /// is folded into `equal` on ingest, so it shares the `equal` question.
    pub fn for_scheme(scheme: Scheme) -> Self {
        let templates = scheme
            .relations()
            .iter()
            .filter_map(|&r| template(r).map(|t| (r, t)))
            .collect();
        Self { templates }
    }

    pub fn relations(&self) -> impl Iterator<Item = TemporalRelation> + '_ {
        self.templates.keys().copied()
    }

    pub fn question(&self, r: TemporalRelation, e1_tagged: &str, e2_tagged: &str) -> Result<String> {
        let t = self.templates.get(&r).ok_or(PromptError::VagueQuestion)?;
        Ok(t.replace("{e1}", e1_tagged).replace("{e2}", e2_tagged))
    }
}

/// Question for `r` with the tagged event surfaces substituted.
pub fn question_for(r: TemporalRelation, e1_tagged: &str, e2_tagged: &str) -> Result<String> {
    let t = template(r).ok_or(PromptError::VagueQuestion)?;
    Ok(t.replace("{e1}", e1_tagged).replace("{e2}", e2_tagged))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    pub pair_id: String,
    pub gold: TemporalRelation,
    pub context: ContextWindow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSet {
    pub set_id: usize,
    pub seed: u64,
    pub examples: Vec<FewShotExample>,
}

impl FewShotSet {
    pub fn new(set_id: usize, seed: u64, examples: Vec<FewShotExample>) -> Self {
        Self { set_id, seed, examples }
    }

    pub fn to_record(&self) -> FewShotRecord {
        FewShotRecord {
            set_id: self.set_id,
            seed: self.seed,
            examples: self
                .examples
                .iter()
                .map(|e| FewShotEntry {
                    pair_id: e.pair_id.clone(),
                    gold: e.gold,
                })
                .collect(),
        }
    }

    pub fn from_record(record: &FewShotRecord, corpus: &Corpus) -> Result<Self> {
        let examples = record
            .examples
            .iter()
            .map(|entry| {
                let pair = corpus
                    .pair(&entry.pair_id)
                    .ok_or_else(|| PromptError::UnknownPair(entry.pair_id.clone()))?;
                Ok(FewShotExample {
                    pair_id: pair.id.clone(),
                    gold: pair.gold,
                    context: build_context(pair, corpus)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(record.set_id, record.seed, examples))
    }
}

/// Persisted form of a few-shot set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotRecord {
    pub set_id: usize,
    pub seed: u64,
    pub examples: Vec<FewShotEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotEntry {
    pub pair_id: String,
    pub gold: TemporalRelation,
}

/// Draws `n_sets` sets of one training example per class. Set `i` uses the
/// ChaCha stream `i` of `seed`, so adding sets never changes earlier ones.
pub fn sample_fewshot_sets(corpus: &Corpus, n_sets: usize, seed: u64) -> Result<Vec<FewShotSet>> {
    let relations = corpus.scheme().relations();
    let mut by_class: BTreeMap<TemporalRelation, Vec<&crate::corpus::EventPair>> = BTreeMap::new();
    for pair in corpus.pairs_in(Split::Train) {
        by_class.entry(pair.gold).or_default().push(pair);
    }
    for r in relations {
        if !by_class.contains_key(r) {
            return Err(PromptError::MissingClass(*r));
        }
    }
    (0..n_sets)
        .map(|set_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(set_id as u64);
            let examples = relations
                .iter()
                .map(|r| {
                    let pair = by_class[r].choose(&mut rng).expect("class is non-empty");
                    Ok(FewShotExample {
                        pair_id: pair.id.clone(),
                        gold: pair.gold,
                        context: build_context(pair, corpus)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FewShotSet::new(set_id, seed, examples))
        })
        .collect()
}

pub fn save_fewshot_sets(path: impl AsRef<Path>, sets: &[FewShotSet]) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<FewShotRecord> = sets.iter().map(FewShotSet::to_record).collect();
    let persist = |message: String| PromptError::Persist {
        path: path.display().to_string(),
        message,
    };
    let json = serde_json::to_string_pretty(&records).map_err(|e| persist(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| persist(e.to_string()))
}

pub fn load_fewshot_sets(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<FewShotSet>> {
    let path = path.as_ref();
    let persist = |message: String| PromptError::Persist {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| persist(e.to_string()))?;
    let records: Vec<FewShotRecord> = serde_json::from_str(&text).map_err(|e| persist(e.to_string()))?;
    records.iter().map(|r| FewShotSet::from_record(r, corpus)).collect()
}

/// A rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub protocol: Protocol,
    pub pair_id: String,
    pub text: String,
    /// Byte offset where the target block starts; everything before it is
    /// few-shot material.
    pub target_offset: usize,
    pub question_order: Vec<TemporalRelation>,
    /// The pending question for QA protocols.
    pub question: Option<TemporalRelation>,
}

impl PromptInstance {
    pub fn fewshot_context(&self) -> &str {
        &self.text[..self.target_offset]
    }

    pub fn target(&self) -> &str {
        &self.text[self.target_offset..]
    }
}

pub fn answer_word(yes: bool) -> &'static str {
    if yes {
        "YES"
    } else {
        "NO"
    }
}

/// Renders prompts for one scheme.
#[derive(Debug, Clone)]
pub struct PromptRenderer {
    scheme: Scheme,
    bank: QuestionBank,
}

struct Tagged {
    context: String,
    e1: String,
    e2: String,
}

fn tagged(ctx: &ContextWindow) -> Result<Tagged> {
    let surface = |s: crate::corpus::TextSpan| &ctx.text[s.start..s.end];
    Ok(Tagged {
        context: tag_events(ctx)?,
        e1: format!("{EVENT1_OPEN} {} {EVENT1_CLOSE}", surface(ctx.e1_span)),
        e2: format!("{EVENT2_OPEN} {} {EVENT2_CLOSE}", surface(ctx.e2_span)),
    })
}

fn assemble(blocks: Vec<String>, target: String) -> (String, usize) {
    let mut text = String::new();
    for b in blocks {
        text.push_str(&b);
        text.push_str(BLOCK_SEPARATOR);
    }
    let offset = text.len();
    text.push_str(&target);
    (text, offset)
}

impl PromptRenderer {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            bank: QuestionBank::for_scheme(scheme),
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Fixed QA question order: after, before, equal, then includes and
    /// is_included where the scheme has them.
    pub fn question_order(&self) -> Vec<TemporalRelation> {
        self.scheme.relations().to_vec()
    }

    fn examples(fewshot: Option<&FewShotSet>) -> &[FewShotExample] {
        fewshot.map(|s| s.examples.as_slice()).unwrap_or(&[])
    }

    pub fn render_p(&self, pair_id: &str, ctx: &ContextWindow, fewshot: Option<&FewShotSet>) -> Result<PromptInstance> {
        let blocks = Self::examples(fewshot)
            .iter()
            .map(|ex| {
                let t = tagged(&ex.context)?;
                Ok(format!("{CONTEXT_PREFIX}{}{LABEL_ARROW} {}", t.context, ex.gold.display_label()))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = tagged(ctx)?;
        let (text, target_offset) = assemble(blocks, format!("{CONTEXT_PREFIX}{}{LABEL_ARROW}", t.context));
        Ok(PromptInstance {
            protocol: Protocol::P,
            pair_id: pair_id.to_string(),
            text,
            target_offset,
            question_order: Vec::new(),
            question: None,
        })
    }

    /// One independent question. Each few-shot example is asked the same
    /// question and answered YES exactly when its gold label is `r`.
    pub fn render_qa1(
        &self,
        pair_id: &str,
        ctx: &ContextWindow,
        r: TemporalRelation,
        fewshot: Option<&FewShotSet>,
    ) -> Result<PromptInstance> {
        let blocks = Self::examples(fewshot)
            .iter()
            .map(|ex| {
                let t = tagged(&ex.context)?;
                let q = self.bank.question(r, &t.e1, &t.e2)?;
                Ok(format!(
                    "{CONTEXT_PREFIX}{}{QUESTION_PREFIX}{q} {}",
                    t.context,
                    answer_word(ex.gold == r)
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = tagged(ctx)?;
        let q = self.bank.question(r, &t.e1, &t.e2)?;
        let (text, target_offset) = assemble(blocks, format!("{CONTEXT_PREFIX}{}{QUESTION_PREFIX}{q} ", t.context));
        Ok(PromptInstance {
            protocol: Protocol::Qa1,
            pair_id: pair_id.to_string(),
            text,
            target_offset,
            question_order: self.question_order(),
            question: Some(r),
        })
    }

    /// Next question of the sequential protocol. `history` holds the
    /// already-asked relations (in question order) with the answer text to
    /// replay after each question.
    pub fn render_qa2(
        &self,
        pair_id: &str,
        ctx: &ContextWindow,
        history: &[(TemporalRelation, String)],
        fewshot: Option<&FewShotSet>,
    ) -> Result<PromptInstance> {
        let order = self.question_order();
        if history.len() >= order.len() {
            return Err(PromptError::HistoryComplete(order.len()));
        }
        for (turn, ((found, _), expected)) in history.iter().zip(&order).enumerate() {
            if found != expected {
                return Err(PromptError::HistoryOrder {
                    turn,
                    expected: *expected,
                    found: *found,
                });
            }
        }

        let blocks = Self::examples(fewshot)
            .iter()
            .map(|ex| {
                let t = tagged(&ex.context)?;
                let mut block = format!("{CONTEXT_PREFIX}{}{QUESTIONS_PREFIX}", t.context);
                for (i, &r) in order.iter().enumerate() {
                    if i > 0 {
                        block.push(' ');
                    }
                    block.push_str(&self.bank.question(r, &t.e1, &t.e2)?);
                    block.push(' ');
                    block.push_str(answer_word(ex.gold == r));
                }
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;

        let t = tagged(ctx)?;
        let mut target = format!("{CONTEXT_PREFIX}{}{QUESTIONS_PREFIX}", t.context);
        for (r, answer) in history {
            target.push_str(&self.bank.question(*r, &t.e1, &t.e2)?);
            target.push(' ');
            target.push_str(answer);
            target.push(' ');
        }
        let next = order[history.len()];
        target.push_str(&self.bank.question(next, &t.e1, &t.e2)?);
        target.push(' ');

        let (text, target_offset) = assemble(blocks, target);
        Ok(PromptInstance {
            protocol: Protocol::Qa2,
            pair_id: pair_id.to_string(),
            text,
            target_offset,
            question_order: order,
            question: Some(next),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Scheme, Split};
    use crate::fixtures::{synthetic_records, worked_example_record, SplitPlan, TriggerWords};
    use TemporalRelation::*;

    fn worked_example() -> (Corpus, ContextWindow) {
        let c = Corpus::from_records(Scheme::Matres, [(1, worked_example_record("t8", Split::Train))]).unwrap();
        let ctx = build_context(&c.pairs()[0], &c).unwrap();
        (c, ctx)
    }

    fn corpus(scheme: Scheme) -> Corpus {
        let labels: Vec<(TemporalRelation, usize)> = scheme.relations().iter().map(|&r| (r, 4)).collect();
        let recs = synthetic_records(
            &[SplitPlan::new(Split::Train, &labels, 6), SplitPlan::new(Split::Test, &labels, 6)],
            TriggerWords::Random,
            11,
        );
        Corpus::from_records(scheme, recs.into_iter().enumerate()).unwrap()
    }

    #[test]
    fn question_templates() {
        let e1 = "[event1] accused [/event1]";
        let e2 = "[event2] driving [/event2]";
        assert_eq!(
            question_for(Before, e1, e2).unwrap(),
            "Does [event1] accused [/event1] happen before [event2] driving [/event2]?"
        );
        assert!(question_for(Equal, e1, e2).unwrap().contains("happen at the same time as"));
        assert_eq!(
            question_for(IsIncluded, "A", "B").unwrap(),
            "Is A temporally included in B?"
        );
        assert_eq!(question_for(Includes, "A", "B").unwrap(), "Does A temporally include B?");
        assert!(matches!(question_for(Vague, e1, e2), Err(PromptError::VagueQuestion)));
    }

    #[test]
    fn question_bank_covers_scheme() {
        let bank = QuestionBank::for_scheme(Scheme::Matres);
        assert_eq!(bank.relations().collect::<Vec<_>>(), vec![After, Before, Equal]);
        assert!(bank.question(Includes, "a", "b").is_err());
        assert_eq!(QuestionBank::for_scheme(Scheme::Tbdense).relations().count(), 5);
    }

    #[test]
    fn fewshot_cardinality_per_scheme() {
        let m = sample_fewshot_sets(&corpus(Scheme::Matres), 5, 1).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|s| s.examples.len() == 3));
        let t = sample_fewshot_sets(&corpus(Scheme::Tbdense), 5, 1).unwrap();
        assert!(t.iter().all(|s| s.examples.len() == 5));
        for set in &t {
            let golds: Vec<_> = set.examples.iter().map(|e| e.gold).collect();
            assert_eq!(golds, Scheme::Tbdense.relations());
        }
    }

    #[test]
    fn fewshot_sampling_is_deterministic_and_train_only() {
        let c = corpus(Scheme::Matres);
        let a = sample_fewshot_sets(&c, 5, 42).unwrap();
        let b = sample_fewshot_sets(&c, 5, 42).unwrap();
        assert_eq!(a, b);
        for set in &a {
            for ex in &set.examples {
                assert_eq!(c.pair(&ex.pair_id).unwrap().split, Split::Train);
            }
        }
        let first_two = sample_fewshot_sets(&c, 2, 42).unwrap();
        assert_eq!(&a[..2], &first_two[..]);
    }

    #[test]
    fn fewshot_missing_class_is_named() {
        let (c, _) = worked_example();
        match sample_fewshot_sets(&c, 1, 0) {
            Err(PromptError::MissingClass(r)) => assert_eq!(r, Before),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fewshot_persistence_round_trip() {
        let c = corpus(Scheme::Matres);
        let sets = sample_fewshot_sets(&c, 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sets.json");
        save_fewshot_sets(&path, &sets).unwrap();
        assert_eq!(load_fewshot_sets(&path, &c).unwrap(), sets);
    }

    #[test]
    fn zero_shot_p_has_zero_offset() {
        let (_, ctx) = worked_example();
        let p = PromptRenderer::new(Scheme::Matres).render_p("x", &ctx, None).unwrap();
        assert_eq!(p.target_offset, 0);
        assert!(p.text.ends_with(" ->"));
    }

    #[test]
    fn p_fewshot_blocks_carry_labels() {
        let c = corpus(Scheme::Matres);
        let sets = sample_fewshot_sets(&c, 1, 3).unwrap();
        let pair = c.pairs_in(Split::Test).next().unwrap();
        let ctx = build_context(pair, &c).unwrap();
        let p = PromptRenderer::new(Scheme::Matres).render_p(&pair.id, &ctx, Some(&sets[0])).unwrap();
        let labelled = p
            .fewshot_context()
            .split(BLOCK_SEPARATOR)
            .filter(|b| ["AFTER", "BEFORE", "EQUAL"].iter().any(|l| b.ends_with(&format!("-> {l}"))))
            .count();
        assert_eq!(labelled, 3);
        assert!(!p.target().contains(BLOCK_SEPARATOR));
        assert!(p.target().contains(&tag_events(&ctx).unwrap()));
    }

    #[test]
    fn qa1_fewshot_answers_follow_gold() {
        let c = corpus(Scheme::Matres);
        let sets = sample_fewshot_sets(&c, 1, 3).unwrap();
        let pair = c.pairs_in(Split::Test).next().unwrap();
        let ctx = build_context(pair, &c).unwrap();
        let r = PromptRenderer::new(Scheme::Matres);
        for q in [After, Before, Equal] {
            let p = r.render_qa1(&pair.id, &ctx, q, Some(&sets[0])).unwrap();
            let blocks: Vec<&str> = p.fewshot_context().split(BLOCK_SEPARATOR).filter(|b| !b.is_empty()).collect();
            for (block, ex) in blocks.iter().zip(&sets[0].examples) {
                let expected = if ex.gold == q { "YES" } else { "NO" };
                assert!(block.ends_with(&format!("? {expected}")), "{block}");
            }
            assert!(p.text.ends_with("? "));
            assert_eq!(p.question, Some(q));
        }
    }

    #[test]
    fn qa2_empty_history_asks_one_question() {
        let (_, ctx) = worked_example();
        let p = PromptRenderer::new(Scheme::Matres).render_qa2("x", &ctx, &[], None).unwrap();
        assert_eq!(p.text.matches('?').count(), 1);
        assert_eq!(p.question, Some(After));
    }

    #[test]
    fn qa2_turns_are_prefix_consistent() {
        let c = corpus(Scheme::Tbdense);
        let sets = sample_fewshot_sets(&c, 1, 8).unwrap();
        let pair = c.pairs_in(Split::Test).next().unwrap();
        let ctx = build_context(pair, &c).unwrap();
        let r = PromptRenderer::new(Scheme::Tbdense);
        let order = r.question_order();
        assert_eq!(order, vec![After, Before, Equal, Includes, IsIncluded]);
        let mut history = Vec::new();
        let mut prev: Option<PromptInstance> = None;
        for (i, &q) in order.iter().enumerate() {
            let p = r.render_qa2(&pair.id, &ctx, &history, Some(&sets[0])).unwrap();
            assert_eq!(p.question, Some(q));
            if let Some(prev) = &prev {
                assert!(p.text.starts_with(&prev.text));
                assert_eq!(p.target_offset, prev.target_offset);
            }
            history.push((q, answer_word(i == 1).to_string()));
            prev = Some(p);
        }
        assert!(matches!(
            r.render_qa2(&pair.id, &ctx, &history, None),
            Err(PromptError::HistoryComplete(5))
        ));
    }

    #[test]
    fn qa2_rejects_out_of_order_history() {
        let (_, ctx) = worked_example();
        let history = vec![(Before, "NO".to_string())];
        assert!(matches!(
            PromptRenderer::new(Scheme::Matres).render_qa2("x", &ctx, &history, None),
            Err(PromptError::HistoryOrder { turn: 0, .. })
        ));
    }

    #[test]
    fn rendering_is_pure() {
        let c = corpus(Scheme::Matres);
        let sets = sample_fewshot_sets(&c, 1, 3).unwrap();
        let pair = c.pairs_in(Split::Test).nth(2).unwrap();
        let ctx = build_context(pair, &c).unwrap();
        let r = PromptRenderer::new(Scheme::Matres);
        let a = r.render_qa1(&pair.id, &ctx, Before, Some(&sets[0])).unwrap();
        let b = r.render_qa1(&pair.id, &ctx, Before, Some(&sets[0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn protocol_parse() {
        assert_eq!("QA2".parse::<Protocol>().unwrap(), Protocol::Qa2);
        assert!("qa3".parse::<Protocol>().is_err());
    }
}
