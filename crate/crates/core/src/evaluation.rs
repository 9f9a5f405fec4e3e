//! Micro-F1 and friends, intra/inter slicing, aggregation over few-shot
//! sets, and report rendering.
//!
//! Vague predictions are abstentions: they cost recall but are never a
//! false positive for a real class.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Scheme, Scope, Split, TemporalRelation};
use crate::inference::Prediction;
use crate::scalar::Scalar;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("gold label at position {0} is vague")]
    VagueGold(usize),
    #[error("nothing to aggregate")]
    NoReports,
    #[error("unknown report format `{0}` (expected json, csv or md)")]
    UnknownFormat(String),
    #[error("prediction for unknown pair `{0}`")]
    UnknownPair(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check(preds: &[TemporalRelation], golds: &[TemporalRelation]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    match golds.iter().position(|g| g.is_vague()) {
        Some(i) => Err(EvalError::VagueGold(i)),
        None => Ok(()),
    }
}

fn f1_from<T: Scalar>(precision: T, recall: T) -> T {
    if precision + recall == T::zero() {
        T::zero()
    } else {
        T::of(2.0) * precision * recall / (precision + recall)
    }
}

fn ratio<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::of_usize(num) / T::of_usize(den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MicroCounts {
    pub n: usize,
    pub tp: usize,
    /// Predictions other than vague.
    pub predicted: usize,
}

impl MicroCounts {
    pub fn precision<T: Scalar>(&self) -> T {
        ratio(self.tp, self.predicted)
    }

    pub fn recall<T: Scalar>(&self) -> T {
        ratio(self.tp, self.n)
    }

    pub fn f1<T: Scalar>(&self) -> T {
        f1_from(self.precision(), self.recall())
    }
}

pub fn micro_counts(preds: &[TemporalRelation], golds: &[TemporalRelation]) -> Result<MicroCounts> {
    check(preds, golds)?;
    Ok(MicroCounts {
        n: golds.len(),
        tp: preds.iter().zip(golds).filter(|(p, g)| p == g).count(),
        predicted: preds.iter().filter(|p| !p.is_vague()).count(),
    })
}

pub fn micro_f1<T: Scalar>(preds: &[TemporalRelation], golds: &[TemporalRelation]) -> Result<T> {
    Ok(micro_counts(preds, golds)?.f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore<T> {
    pub class: TemporalRelation,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Gold count.
    pub support: usize,
    pub precision: T,
    pub recall: T,
    pub f1: T,
    /// The class never occurs in gold; its F1 is reported as 0.
    pub absent: bool,
}

pub fn per_class_f1<T: Scalar>(
    preds: &[TemporalRelation],
    golds: &[TemporalRelation],
    class: TemporalRelation,
) -> Result<ClassScore<T>> {
    check(preds, golds)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let support = tp + fn_;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, support);
    Ok(ClassScore {
        class,
        tp,
        fp,
        fn_,
        support,
        precision,
        recall,
        f1: f1_from(precision, recall),
        absent: support == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub counts: MicroCounts,
    pub micro_f1: f64,
    pub proportion: f64,
}

/// Empty slices are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraInter {
    pub intra: Option<SliceScore>,
    pub inter: Option<SliceScore>,
}

pub fn slice_intra_inter(
    preds: &[TemporalRelation],
    golds: &[TemporalRelation],
    scopes: &[Scope],
) -> Result<IntraInter> {
    check(preds, golds)?;
    if scopes.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: scopes.len(),
            golds: golds.len(),
        });
    }
    let slice = |scope: Scope| -> Result<Option<SliceScore>> {
        let (p, g): (Vec<_>, Vec<_>) = preds
            .iter()
            .zip(golds)
            .zip(scopes)
            .filter(|(_, &s)| s == scope)
            .map(|((&p, &g), _)| (p, g))
            .unzip();
        if g.is_empty() {
            return Ok(None);
        }
        let counts = micro_counts(&p, &g)?;
        Ok(Some(SliceScore {
            counts,
            micro_f1: counts.f1(),
            proportion: ratio(g.len(), golds.len()),
        }))
    };
    Ok(IntraInter {
        intra: slice(Scope::Intra)?,
        inter: slice(Scope::Inter)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: MicroCounts,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub per_class: Vec<ClassScore<f64>>,
    pub slices: IntraInter,
    pub vague_rate: f64,
    pub contradiction_rate: f64,
    /// Pairs with no prediction at all (failed requests); scored as vague.
    pub missing: usize,
}

/// One labeled instance as seen by [`evaluate_labels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scored {
    pub predicted: TemporalRelation,
    pub gold: TemporalRelation,
    pub scope: Scope,
    pub contradiction: bool,
}

pub fn evaluate_labels(items: &[Scored], classes: &[TemporalRelation], missing: usize) -> Result<EvalReport> {
    let preds: Vec<_> = items.iter().map(|s| s.predicted).collect();
    let golds: Vec<_> = items.iter().map(|s| s.gold).collect();
    let scopes: Vec<_> = items.iter().map(|s| s.scope).collect();
    let counts = micro_counts(&preds, &golds)?;
    let per_class = classes
        .iter()
        .map(|&c| per_class_f1(&preds, &golds, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        counts,
        micro_precision: counts.precision(),
        micro_recall: counts.recall(),
        micro_f1: counts.f1(),
        per_class,
        slices: slice_intra_inter(&preds, &golds, &scopes)?,
        vague_rate: ratio(preds.iter().filter(|p| p.is_vague()).count(), items.len()),
        contradiction_rate: ratio(items.iter().filter(|s| s.contradiction).count(), items.len()),
        missing,
    })
}

/// Scores predictions against every pair of `split`. Pairs without a
/// prediction count as vague.
pub fn evaluate(predictions: &[&Prediction], corpus: &Corpus, split: Split) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.pair_id.as_str(), *p)).collect();
    for p in predictions {
        if corpus.pair(&p.pair_id).is_none() {
            return Err(EvalError::UnknownPair(p.pair_id.clone()));
        }
    }
    let mut items = Vec::new();
    let mut missing = 0;
    for pair in corpus.pairs_in(split) {
        let scope = crate::corpus::pair_scope(pair, corpus).unwrap_or(Scope::Intra);
        let (predicted, contradiction) = match by_id.get(pair.id.as_str()) {
            Some(p) => (p.predicted, p.contradiction),
            None => {
                missing += 1;
                (TemporalRelation::Vague, false)
            }
        };
        items.push(Scored {
            predicted,
            gold: pair.gold,
            scope,
            contradiction,
        });
    }
    evaluate_labels(&items, corpus.scheme().relations(), missing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub set_id: Option<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub sets: Vec<SetReport>,
    pub mean_micro_f1: f64,
    /// Population standard deviation across sets.
    pub std_micro_f1: f64,
    pub min_micro_f1: f64,
    pub max_micro_f1: f64,
}

pub fn aggregate_runs(sets: Vec<SetReport>) -> Result<RunAggregate> {
    if sets.is_empty() {
        return Err(EvalError::NoReports);
    }
    let scores: Vec<f64> = sets.iter().map(|s| s.report.micro_f1).collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(RunAggregate {
        mean_micro_f1: mean,
        std_micro_f1: var.sqrt(),
        min_micro_f1: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max_micro_f1: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorIntersection {
    /// Pairs `a` gets wrong and `b` gets right.
    pub ids: Vec<String>,
    pub fraction_of_a_errors: f64,
    pub fraction_of_test: f64,
}

pub fn error_intersection(
    ids: &[String],
    preds_a: &[TemporalRelation],
    preds_b: &[TemporalRelation],
    golds: &[TemporalRelation],
) -> Result<ErrorIntersection> {
    check(preds_a, golds)?;
    check(preds_b, golds)?;
    if ids.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: ids.len(),
            golds: golds.len(),
        });
    }
    let mut a_errors = 0;
    let mut out = Vec::new();
    for i in 0..golds.len() {
        if preds_a[i] != golds[i] {
            a_errors += 1;
            if preds_b[i] == golds[i] {
                out.push(ids[i].clone());
            }
        }
    }
    Ok(ErrorIntersection {
        fraction_of_a_errors: ratio(out.len(), a_errors),
        fraction_of_test: ratio(out.len(), golds.len()),
        ids: out,
    })
}

// Rendering.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            _ => Err(EvalError::UnknownFormat(s.to_string())),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub corpus: Scheme,
    pub model: String,
    /// `p`, `qa1`, `qa2`, or the encoder training mode.
    pub protocol: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub meta: ReportMeta,
    pub aggregate: RunAggregate,
}

impl ReportDocument {
    pub fn new(meta: ReportMeta, aggregate: RunAggregate) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            meta,
            aggregate,
        }
    }
}

pub const CSV_HEADER: &str =
    "config_hash,corpus,model,protocol,set,n,tp,predicted,micro_precision,micro_recall,micro_f1,intra_f1,inter_f1,vague_rate,contradiction_rate";

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn opt_num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn corpus_title(s: Scheme) -> &'static str {
    match s {
        Scheme::Matres => "MATRES",
        Scheme::Tbdense => "TB-Dense",
        Scheme::Timeline => "TIMELINE",
    }
}

pub fn emit_report(doc: &ReportDocument, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(doc)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => Ok(report_csv(doc)),
        ReportFormat::Markdown => Ok(report_markdown(doc)),
    }
}

fn report_csv(doc: &ReportDocument) -> String {
    let m = &doc.meta;
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    wtr.write_record(&header).expect("in-memory write");
    let prefix = [
        m.config_hash.clone(),
        m.corpus.to_string(),
        m.model.clone(),
        m.protocol.clone(),
    ];
    for s in &doc.aggregate.sets {
        let r = &s.report;
        let set = s.set_id.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
        let row = [
            set,
            r.counts.n.to_string(),
            r.counts.tp.to_string(),
            r.counts.predicted.to_string(),
            r.micro_precision.to_string(),
            r.micro_recall.to_string(),
            r.micro_f1.to_string(),
            opt_num(r.slices.intra.map(|x| x.micro_f1)),
            opt_num(r.slices.inter.map(|x| x.micro_f1)),
            r.vague_rate.to_string(),
            r.contradiction_rate.to_string(),
        ];
        wtr.write_record(prefix.iter().chain(row.iter())).expect("in-memory write");
    }
    for (label, value) in [("mean", doc.aggregate.mean_micro_f1), ("std", doc.aggregate.std_micro_f1)] {
        let mut row: Vec<String> = prefix.to_vec();
        row.push(label.into());
        row.extend(std::iter::repeat_n(String::new(), 5));
        row.push(value.to_string());
        row.extend(std::iter::repeat_n(String::new(), 4));
        wtr.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn report_markdown(doc: &ReportDocument) -> String {
    let mut out = summary_markdown(std::slice::from_ref(doc));
    let agg = &doc.aggregate;
    let classes: Vec<TemporalRelation> = agg
        .sets
        .first()
        .map(|s| s.report.per_class.iter().map(|c| c.class).collect())
        .unwrap_or_default();

    out.push_str("\n| Set | ");
    out.push_str(&classes.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(" | "));
    out.push_str(" |\n|---|");
    out.push_str(&"---|".repeat(classes.len()));
    out.push('\n');
    for s in &agg.sets {
        let set = s.set_id.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
        let cells: Vec<String> = s.report.per_class.iter().map(|c| pct(c.f1)).collect();
        let _ = writeln!(out, "| {set} | {} |", cells.join(" | "));
    }

    out.push_str("\n| Set | Intra | Inter |\n|---|---|---|\n");
    for s in &agg.sets {
        let set = s.set_id.map(|i| i.to_string()).unwrap_or_else(|| "-".into());
        let cell = |x: Option<SliceScore>| x.map(|v| pct(v.micro_f1)).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "| {set} | {} | {} |", cell(s.report.slices.intra), cell(s.report.slices.inter));
    }
    out
}

/// One row per model/protocol, one column per corpus, cells `mean ± std`
/// in percent.
pub fn summary_markdown(docs: &[ReportDocument]) -> String {
    let mut corpora: Vec<Scheme> = docs.iter().map(|d| d.meta.corpus).collect();
    corpora.sort_by_key(|s| s.as_str());
    corpora.dedup();
    let mut rows: BTreeMap<(String, String), BTreeMap<&str, String>> = BTreeMap::new();
    for d in docs {
        let cell = format!("{} ± {}", pct(d.aggregate.mean_micro_f1), pct(d.aggregate.std_micro_f1));
        rows.entry((d.meta.model.clone(), d.meta.protocol.clone()))
            .or_default()
            .insert(d.meta.corpus.as_str(), cell);
    }
    let mut out = String::from("| Model | Protocol |");
    for c in &corpora {
        let _ = write!(out, " {} |", corpus_title(*c));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(corpora.len()));
    out.push('\n');
    for ((model, protocol), cells) in rows {
        let _ = write!(out, "| {model} | {protocol} |");
        for c in &corpora {
            let _ = write!(out, " {} |", cells.get(c.as_str()).map(String::as_str).unwrap_or("-"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use TemporalRelation::*;

    #[test]
    fn hand_counted_micro_f1() {
        let golds = vec![Before; 10];
        let mut preds = vec![Before; 6];
        preds.extend([After, Equal, Vague, Vague]);
        let c = micro_counts(&preds, &golds).unwrap();
        assert_eq!((c.tp, c.predicted, c.n), (6, 8, 10));
        let f1: f64 = c.f1();
        assert!((f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn degenerate_micro_f1() {
        let golds = [After, Before, Equal];
        assert_eq!(micro_f1::<f64>(&golds, &golds).unwrap(), 1.0);
        assert_eq!(micro_f1::<f64>(&[Vague; 3], &golds).unwrap(), 0.0);
        assert!(matches!(micro_f1::<f64>(&[After], &golds), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(micro_f1::<f64>(&[After], &[Vague]), Err(EvalError::VagueGold(0))));
    }

    #[test]
    fn per_class_from_constructed_confusion() {
        // TP=3, FP=1, FN=2 for `after`.
        let golds = [After, After, After, After, After, Before, Before];
        let preds = [After, After, After, Before, Vague, After, Before];
        let s: ClassScore<f64> = per_class_f1(&preds, &golds, After).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (3, 1, 2));
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.6).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn never_predicting_a_class_zeroes_it() {
        let golds = [Equal, Before, After];
        let preds = [Before, Before, After];
        assert_eq!(per_class_f1::<f64>(&preds, &golds, Equal).unwrap().f1, 0.0);
        let absent = per_class_f1::<f64>(&preds, &golds, Includes).unwrap();
        assert!(absent.absent && absent.f1 == 0.0 && absent.support == 0);
    }

    #[test]
    fn slices() {
        let golds = [After, After, Before, Before];
        let preds = [After, Before, Before, Before];
        let scopes = [Scope::Intra, Scope::Intra, Scope::Inter, Scope::Inter];
        let s = slice_intra_inter(&preds, &golds, &scopes).unwrap();
        assert_eq!(s.intra.unwrap().micro_f1, 0.5);
        assert_eq!(s.inter.unwrap().micro_f1, 1.0);
        let all_intra = slice_intra_inter(&preds, &golds, &[Scope::Intra; 4]).unwrap();
        assert!(all_intra.inter.is_none());
        assert_eq!(all_intra.intra.unwrap().micro_f1, micro_f1::<f64>(&preds, &golds).unwrap());
    }

    fn report_with(f1: f64) -> SetReport {
        SetReport {
            set_id: None,
            report: EvalReport {
                counts: MicroCounts::default(),
                micro_precision: f1,
                micro_recall: f1,
                micro_f1: f1,
                per_class: vec![],
                slices: IntraInter { intra: None, inter: None },
                vague_rate: 0.0,
                contradiction_rate: 0.0,
                missing: 0,
            },
        }
    }

    #[test]
    fn population_std() {
        let a = aggregate_runs(vec![report_with(0.4), report_with(0.6)]).unwrap();
        assert!((a.mean_micro_f1 - 0.5).abs() < 1e-12);
        assert!((a.std_micro_f1 - 0.1).abs() < 1e-12);
        let same = aggregate_runs(vec![report_with(0.5); 5]).unwrap();
        assert_eq!(same.std_micro_f1, 0.0);
        let one = aggregate_runs(vec![report_with(0.7)]).unwrap();
        assert_eq!((one.mean_micro_f1, one.std_micro_f1), (0.7, 0.0));
        assert!(matches!(aggregate_runs(vec![]), Err(EvalError::NoReports)));
    }

    #[test]
    fn error_intersection_counts() {
        let ids: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        let golds = vec![Before; 100];
        let mut a = vec![Before; 100];
        let mut b = vec![Before; 100];
        for i in 0..20 {
            a[i] = After;
        }
        for i in 10..20 {
            b[i] = After;
        }
        let x = error_intersection(&ids, &a, &b, &golds).unwrap();
        assert_eq!(x.ids.len(), 10);
        assert!((x.fraction_of_test - 0.10).abs() < 1e-12);
        assert!((x.fraction_of_a_errors - 0.5).abs() < 1e-12);
        assert!(error_intersection(&ids, &a, &a, &golds).unwrap().ids.is_empty());
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!(matches!("xml".parse::<ReportFormat>(), Err(EvalError::UnknownFormat(_))));
        assert_eq!("MD".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    }
}
