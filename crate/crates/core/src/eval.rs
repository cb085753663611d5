//! Span-level scoring and error taxonomy.
//!
//! Spans are compared as sets of `(start, end, label)` triples per sentence
//! and counts are micro-averaged over the corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, LabeledSpan};
use crate::decode::Prediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    MislabeledSpan,
    BoundaryError,
    SpanAndLabelError,
    MissingSpan,
    SpuriousSpan,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        ErrorType::MislabeledSpan,
        ErrorType::BoundaryError,
        ErrorType::SpanAndLabelError,
        ErrorType::MissingSpan,
        ErrorType::SpuriousSpan,
    ];
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub id: String,
    pub kind: ErrorType,
    pub gold: Vec<LabeledSpan>,
    pub pred: Vec<LabeledSpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub matched: usize,
}

impl Counts {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.matched as f64 / self.predicted as f64
        }
    }

    /// 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            1.0
        } else {
            self.matched as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, other: Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.matched += other.matched;
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_label: BTreeMap<String, Counts>,
    pub errors: BTreeMap<ErrorType, usize>,
}

type Triple = (usize, usize, String);

fn triples(spans: &[LabeledSpan]) -> BTreeSet<Triple> {
    spans
        .iter()
        .map(|s| (s.start, s.end, s.label.clone()))
        .collect()
}

fn span(t: &Triple) -> LabeledSpan {
    LabeledSpan::new(t.0, t.1, t.2.clone())
}

/// Pairs every gold sentence with its prediction by id.
pub fn align<'a>(
    gold: &'a [AnnotatedSentence],
    pred: &'a [Prediction],
) -> Result<Vec<(&'a AnnotatedSentence, &'a Prediction)>> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(pred.len());
    for p in pred {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::IdMismatch(format!("duplicate prediction id {}", p.id)));
        }
    }
    let mut out = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_id
            .remove(g.id())
            .ok_or_else(|| Error::IdMismatch(format!("no prediction for sentence {}", g.id())))?;
        out.push((g, p));
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::IdMismatch(format!(
            "prediction {extra} has no gold sentence"
        )));
    }
    Ok(out)
}

/// Scores aligned `(gold, predicted)` span lists.
pub fn score_pairs<'a, I>(pairs: I) -> EvalReport
where
    I: IntoIterator<Item = (&'a [LabeledSpan], &'a [LabeledSpan])>,
{
    let mut counts = Counts::default();
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    let mut errors: BTreeMap<ErrorType, usize> = ErrorType::ALL.iter().map(|&t| (t, 0)).collect();
    for (gold, pred) in pairs {
        let g = triples(gold);
        let p = triples(pred);
        for t in &g {
            let c = per_label.entry(t.2.clone()).or_default();
            c.gold += 1;
            if p.contains(t) {
                c.matched += 1;
            }
        }
        for t in &p {
            per_label.entry(t.2.clone()).or_default().predicted += 1;
        }
        counts.add(Counts {
            gold: g.len(),
            predicted: p.len(),
            matched: g.intersection(&p).count(),
        });
        for r in classify_sets("", &g, &p) {
            *errors.entry(r.kind).or_default() += 1;
        }
    }
    EvalReport {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
        per_label,
        errors,
    }
}

pub fn score(gold: &[AnnotatedSentence], pred: &[Prediction]) -> Result<EvalReport> {
    let pairs = align(gold, pred)?;
    Ok(score_pairs(
        pairs
            .iter()
            .map(|(g, p)| (g.spans.as_slice(), p.spans.as_slice())),
    ))
}

type SpanTest<'a> = dyn Fn(&Triple, &Triple) -> bool + 'a;

fn classify_sets(id: &str, gold: &BTreeSet<Triple>, pred: &BTreeSet<Triple>) -> Vec<ErrorRecord> {
    let missed: Vec<&Triple> = gold.difference(pred).collect();
    let extra: Vec<&Triple> = pred.difference(gold).collect();
    let mut used = vec![false; extra.len()];
    let mut kind: Vec<Option<(ErrorType, usize)>> = vec![None; missed.len()];

    let overlaps = |a: &Triple, b: &Triple| a.0 < b.1 && b.0 < a.1;
    let passes: [(ErrorType, &SpanTest); 3] = [
        (ErrorType::MislabeledSpan, &|g, p| g.0 == p.0 && g.1 == p.1),
        (ErrorType::BoundaryError, &|g, p| g.2 == p.2 && overlaps(g, p)),
        (ErrorType::SpanAndLabelError, &|g, p| overlaps(g, p)),
    ];
    for (t, rule) in passes {
        for (gi, g) in missed.iter().enumerate() {
            if kind[gi].is_some() {
                continue;
            }
            if let Some(pi) = (0..extra.len()).find(|&pi| !used[pi] && rule(g, extra[pi])) {
                used[pi] = true;
                kind[gi] = Some((t, pi));
            }
        }
    }

    let mut out = Vec::with_capacity(missed.len() + extra.len());
    for (g, k) in missed.iter().zip(kind) {
        out.push(match k {
            Some((t, pi)) => ErrorRecord {
                id: id.to_string(),
                kind: t,
                gold: vec![span(g)],
                pred: vec![span(extra[pi])],
            },
            None => ErrorRecord {
                id: id.to_string(),
                kind: ErrorType::MissingSpan,
                gold: vec![span(g)],
                pred: Vec::new(),
            },
        });
    }
    for (p, u) in extra.iter().zip(used) {
        if !u {
            out.push(ErrorRecord {
                id: id.to_string(),
                kind: ErrorType::SpuriousSpan,
                gold: Vec::new(),
                pred: vec![span(p)],
            });
        }
    }
    out
}

/// Error records for one sentence. Unmatched gold spans are typed in
/// precedence passes (exact boundaries, then same-label overlap, then any
/// overlap); each unmatched prediction explains at most one gold span and
/// the rest are spurious.
pub fn classify_sentence(id: &str, gold: &[LabeledSpan], pred: &[LabeledSpan]) -> Vec<ErrorRecord> {
    classify_sets(id, &triples(gold), &triples(pred))
}

pub fn classify_errors(gold: &[AnnotatedSentence], pred: &[Prediction]) -> Result<Vec<ErrorRecord>> {
    Ok(align(gold, pred)?
        .into_iter()
        .flat_map(|(g, p)| classify_sentence(g.id(), &g.spans, &p.spans))
        .collect())
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}",
            "label", "gold", "pred", "match", "P", "R", "F1"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, c: &Counts| {
            writeln!(
                f,
                "{:<16} {:>7} {:>7} {:>7} {:>9.4} {:>9.4} {:>9.4}",
                name,
                c.gold,
                c.predicted,
                c.matched,
                c.precision(),
                c.recall(),
                c.f1()
            )
        };
        for (label, c) in &self.per_label {
            row(f, label, c)?;
        }
        row(f, "micro", &self.counts)?;
        writeln!(f)?;
        for (t, n) in &self.errors {
            writeln!(f, "{:<18} {n}", t.to_string())?;
        }
        Ok(())
    }
}

/// Columns: `scope,label,gold,predicted,matched,precision,recall,f1`.
/// `scope` is `micro` for the corpus total, `label` for per-label rows and
/// `error` for error-type rows, which carry their count in `gold` only.
pub fn write_report_csv<W: Write>(report: &EvalReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scope", "label", "gold", "predicted", "matched", "precision", "recall", "f1"])?;
    let mut row = |scope: &str, label: &str, c: &Counts| {
        out.write_record([
            scope.to_string(),
            label.to_string(),
            c.gold.to_string(),
            c.predicted.to_string(),
            c.matched.to_string(),
            c.precision().to_string(),
            c.recall().to_string(),
            c.f1().to_string(),
        ])
    };
    row("micro", "", &report.counts)?;
    for (label, c) in &report.per_label {
        row("label", label, c)?;
    }
    for (t, n) in &report.errors {
        out.write_record(["error", &t.to_string(), &n.to_string(), "", "", "", "", ""])?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Columns: `id,type,gold,pred`, spans written as `start:end:LABEL`.
pub fn write_errors_csv<W: Write>(records: &[ErrorRecord], w: W) -> Result<()> {
    let fmt_spans = |v: &[LabeledSpan]| {
        v.iter()
            .map(|s| format!("{}:{}:{}", s.start, s.end, s.label))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "type", "gold", "pred"])?;
    for r in records {
        out.write_record([
            r.id.clone(),
            r.kind.to_string(),
            fmt_spans(&r.gold),
            fmt_spans(&r.pred),
        ])?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn save_report_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report_csv(report, file)
}
