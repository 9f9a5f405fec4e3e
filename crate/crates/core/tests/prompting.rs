use trc_core::corpus::{build_context, Corpus, Scheme, Split, TemporalRelation};
use trc_core::fixtures::{synthetic_records, SplitPlan, TriggerWords};
use trc_core::prompting::{
    load_fewshot_sets, sample_fewshot_sets, save_fewshot_sets, PromptError, PromptRenderer, BLOCK_SEPARATOR,
};

use TemporalRelation::*;

fn tbdense() -> Corpus {
    let all = [(After, 3), (Before, 3), (Equal, 3), (Includes, 3), (IsIncluded, 3)];
    let plans = [SplitPlan::new(Split::Train, &all, 8), SplitPlan::new(Split::Test, &all, 8)];
    let recs = synthetic_records(&plans, TriggerWords::Random, 21);
    Corpus::from_records(Scheme::Tbdense, recs.into_iter().enumerate()).unwrap()
}

#[test]
fn fewshot_sets_persist_and_reload() {
    let corpus = tbdense();
    let sets = sample_fewshot_sets(&corpus, 5, 42).unwrap();
    assert_eq!(sets.len(), 5);
    for s in &sets {
        let golds: Vec<_> = s.examples.iter().map(|e| e.gold).collect();
        assert_eq!(golds, vec![After, Before, Equal, Includes, IsIncluded]);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sets.json");
    save_fewshot_sets(&path, &sets).unwrap();
    assert_eq!(load_fewshot_sets(&path, &corpus).unwrap(), sets);
    // Adding sets keeps the earlier ones.
    assert_eq!(sample_fewshot_sets(&corpus, 7, 42).unwrap()[..5], sets[..]);
}

#[test]
fn sampling_needs_every_class_in_train() {
    let plans = [SplitPlan::new(Split::Train, &[(After, 3), (Before, 3)], 3)];
    let recs = synthetic_records(&plans, TriggerWords::Random, 1);
    let corpus = Corpus::from_records(Scheme::Matres, recs.into_iter().enumerate()).unwrap();
    assert!(matches!(sample_fewshot_sets(&corpus, 1, 0), Err(PromptError::MissingClass(Equal))));
}

#[test]
fn tbdense_prompts_cover_five_relations() {
    let corpus = tbdense();
    let sets = sample_fewshot_sets(&corpus, 1, 3).unwrap();
    let r = PromptRenderer::new(Scheme::Tbdense);
    assert_eq!(r.question_order(), vec![After, Before, Equal, Includes, IsIncluded]);
    let pair = corpus.pairs_in(Split::Test).next().unwrap();
    let ctx = build_context(pair, &corpus).unwrap();
    let p = r.render_p(&pair.id, &ctx, Some(&sets[0])).unwrap();
    assert_eq!(p.text.matches(BLOCK_SEPARATOR).count(), 5);
    assert!(p.text.ends_with(" ->"));
    assert!(p.target().starts_with("Given the context: "));

    let qa2 = r.render_qa2(&pair.id, &ctx, &[], Some(&sets[0])).unwrap();
    let demo = qa2.fewshot_context();
    assert_eq!(demo.matches("temporally included in").count(), 5);
    assert_eq!(qa2.question, Some(After));

    let bad = r.render_qa2(&pair.id, &ctx, &[(Before, "NO".into())], None);
    assert!(matches!(bad, Err(PromptError::HistoryOrder { turn: 0, .. })));
}

#[test]
fn zero_shot_prompts_are_just_the_target() {
    let corpus = tbdense();
    let pair = corpus.pairs_in(Split::Test).next().unwrap();
    let ctx = build_context(pair, &corpus).unwrap();
    let p = PromptRenderer::new(Scheme::Tbdense).render_p(&pair.id, &ctx, None).unwrap();
    assert_eq!(p.target_offset, 0);
    assert!(!p.text.contains(BLOCK_SEPARATOR));
}
