//! Deterministic synthetic corpora with controlled label and scope mixes.
//!
//! Each pair gets its own small document so label counts and intra/inter
//! counts can be dialed exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DocumentRecord, EventRecord, PairRecord, Split, TemporalRelation};

/// Pairs to generate for one split.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub split: Split,
    pub labels: Vec<(TemporalRelation, usize)>,
    /// How many of the split's pairs share a sentence.
    pub intra: usize,
}

impl SplitPlan {
    pub fn new(split: Split, labels: &[(TemporalRelation, usize)], intra: usize) -> Self {
        Self {
            split,
            labels: labels.to_vec(),
            intra,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerWords {
    /// Triggers drawn from one shared pool; labels are not recoverable from words.
    Random,
    /// The first event's trigger is drawn from a per-class pool, which makes
    /// the pooled first-event embedding linearly separable by class.
    ByClass,
}

const FILLER: &[&str] = &[
    "the", "a", "city", "council", "report", "on", "monday", "officials", "in", "market", "prices",
    "of", "new", "plan", "and", "this", "week", "local", "bank", "said", "its", "team", "over",
    "board", "vote",
];
const SHARED_TRIGGERS: &[&str] = &["went", "came", "made", "took", "gave", "got", "sent", "paid"];

fn class_triggers(r: TemporalRelation) -> &'static [&'static str] {
    use TemporalRelation::*;
    match r {
        After => &["left", "ended", "closed", "quit", "fled"],
        Before => &["began", "opened", "met", "rose", "won"],
        Equal => &["saw", "told", "knew", "felt", "heard"],
        Includes => &["ran", "held", "kept"],
        IsIncluded => &["hit", "cut", "fell"],
        Vague => &["seemed"],
    }
}

fn sentence(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len)
        .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
        .collect()
}

/// Generates one document per pair. Output order is plan order, pairs
/// within a split shuffled by `seed`.
pub fn synthetic_records(plans: &[SplitPlan], triggers: TriggerWords, seed: u64) -> Vec<DocumentRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for plan in plans {
        let mut labels: Vec<TemporalRelation> = plan
            .labels
            .iter()
            .flat_map(|&(r, n)| std::iter::repeat_n(r, n))
            .collect();
        labels.shuffle(&mut rng);
        let mut intra_flags: Vec<bool> = (0..labels.len()).map(|i| i < plan.intra).collect();
        intra_flags.shuffle(&mut rng);

        for (i, (gold, intra)) in labels.into_iter().zip(intra_flags).enumerate() {
            let w1 = match triggers {
                TriggerWords::ByClass => {
                    let pool = class_triggers(gold);
                    pool[rng.gen_range(0..pool.len())]
                }
                TriggerWords::Random => SHARED_TRIGGERS[rng.gen_range(0..SHARED_TRIGGERS.len())],
            };
            let w2 = SHARED_TRIGGERS[rng.gen_range(0..SHARED_TRIGGERS.len())];
            let doc_id = format!("{}-{:05}", plan.split, i);
            let (sentences, events) = if intra {
                let len = rng.gen_range(5..12);
                let mut s = sentence(&mut rng, len);
                let p1 = rng.gen_range(0..=s.len());
                s.insert(p1, w1.to_string());
                let p2 = rng.gen_range(0..=s.len());
                s.insert(p2, w2.to_string());
                // Inserting w2 at or before p1 pushes w1 right.
                let p1 = if p2 <= p1 { p1 + 1 } else { p1 };
                (
                    vec![s],
                    vec![
                        EventRecord { id: "e1".into(), sentence: 0, span: [p1, p1 + 1] },
                        EventRecord { id: "e2".into(), sentence: 0, span: [p2, p2 + 1] },
                    ],
                )
            } else {
                let mut sents: Vec<Vec<String>> = (0..3)
                    .map(|_| {
                        let len = rng.gen_range(4..10);
                        sentence(&mut rng, len)
                    })
                    .collect();
                let (i1, i2) = if rng.gen_bool(0.5) { (0, 2) } else { (2, 0) };
                let p1 = rng.gen_range(0..=sents[i1].len());
                sents[i1].insert(p1, w1.to_string());
                let p2 = rng.gen_range(0..=sents[i2].len());
                sents[i2].insert(p2, w2.to_string());
                (
                    sents,
                    vec![
                        EventRecord { id: "e1".into(), sentence: i1, span: [p1, p1 + 1] },
                        EventRecord { id: "e2".into(), sentence: i2, span: [p2, p2 + 1] },
                    ],
                )
            };
            out.push(DocumentRecord {
                doc_id,
                sentences,
                events,
                pairs: vec![PairRecord {
                    e1: "e1".into(),
                    e2: "e2".into(),
                    relation: gold.as_str().to_uppercase(),
                }],
                split: plan.split,
            });
        }
    }
    out
}

/// The 724-pair test split with the MATRES label mix (58/38/4) and a
/// 39/61 intra/inter mix.
pub fn matres_test_plan() -> SplitPlan {
    use TemporalRelation::*;
    SplitPlan::new(Split::Test, &[(Before, 420), (After, 275), (Equal, 29)], 282)
}

pub const WORKED_EXAMPLE_SENTENCE: &str = "It accused the company of deliberately slashing oil revenues by overproducing oil and driving down prices, among other charges.";

/// The worked example: e1 = "accused", e2 = "driving", gold AFTER.
pub fn worked_example_record(doc_id: &str, split: Split) -> DocumentRecord {
    let tokens: Vec<String> = WORKED_EXAMPLE_SENTENCE.split(' ').map(str::to_string).collect();
    DocumentRecord {
        doc_id: doc_id.to_string(),
        sentences: vec![tokens],
        events: vec![
            EventRecord { id: "e1".into(), sentence: 0, span: [1, 2] },
            EventRecord { id: "e2".into(), sentence: 0, span: [13, 14] },
        ],
        pairs: vec![PairRecord {
            e1: "e1".into(),
            e2: "e2".into(),
            relation: "AFTER".into(),
        }],
        split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{compute_stats, Corpus, Scheme};

    #[test]
    fn plan_counts_are_exact() {
        let recs = synthetic_records(&[matres_test_plan()], TriggerWords::Random, 3);
        let c = Corpus::from_records(Scheme::Matres, recs.into_iter().enumerate()).unwrap();
        let s = compute_stats(&c);
        assert_eq!(s.split_sizes.test, 724);
        assert_eq!(s.intra, 282);
        assert_eq!(s.label_counts[&TemporalRelation::Before], 420);
    }

    #[test]
    fn generation_is_seeded() {
        let a = synthetic_records(&[matres_test_plan()], TriggerWords::ByClass, 9);
        let b = synthetic_records(&[matres_test_plan()], TriggerWords::ByClass, 9);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
