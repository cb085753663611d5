//! Span sets to decision sequences and back.
//!
//! A span `[s, e)` with label `l` becomes a pointer to its first token, one
//! CopyNext per remaining token, then the label. The whole sequence ends
//! with the `EOS` label. Two variants exist for comparison: `CopyOnly`
//! points at every token explicitly, `CopyPrevBackward` orders spans by
//! end index and grows each span leftwards.

use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSet, LabeledSpan};
use crate::error::{Error, Result};

/// One output step: point at a token, extend the open span, or emit a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Point(usize),
    CopyNext,
    Label(usize),
}

impl Decision {
    pub const EOS: Decision = Decision::Label(LabelSet::EOS_ID);

    /// Index into the `[pointers; labels; copy-next]` decision vector.
    pub fn encode(self, n: usize, num_labels: usize) -> usize {
        match self {
            Decision::Point(i) => i,
            Decision::Label(l) => n + l,
            Decision::CopyNext => n + num_labels,
        }
    }

    pub fn decode(index: usize, n: usize, num_labels: usize) -> Option<Decision> {
        if index < n {
            Some(Decision::Point(index))
        } else if index < n + num_labels {
            Some(Decision::Label(index - n))
        } else if index == n + num_labels {
            Some(Decision::CopyNext)
        } else {
            None
        }
    }

    pub fn is_eos(self) -> bool {
        self == Decision::EOS
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Point(i) => write!(f, "{i}"),
            Decision::CopyNext => f.write_str("CN"),
            Decision::Label(l) => write!(f, "L{l}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    #[serde(rename = "copynext")]
    CopyNextForward,
    #[serde(rename = "copy")]
    CopyOnly,
    #[serde(rename = "copyprev")]
    CopyPrevBackward,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [
        Scheme::CopyNextForward,
        Scheme::CopyOnly,
        Scheme::CopyPrevBackward,
    ];

    /// Short name used on the command line and in checkpoints.
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::CopyNextForward => "copynext",
            Scheme::CopyOnly => "copy",
            Scheme::CopyPrevBackward => "copyprev",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Scheme::CopyNextForward => 0,
            Scheme::CopyOnly => 1,
            Scheme::CopyPrevBackward => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Scheme> {
        Scheme::ALL.into_iter().find(|s| s.code() == code)
    }

    /// Token reached by a CopyNext from `frontier`, if it stays in `[0, n)`.
    pub fn copy_target(self, frontier: usize, n: usize) -> Option<usize> {
        match self {
            Scheme::CopyNextForward => (frontier + 1 < n).then_some(frontier + 1),
            Scheme::CopyPrevBackward => frontier.checked_sub(1),
            Scheme::CopyOnly => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copynext" | "forward" => Ok(Scheme::CopyNextForward),
            "copy" | "copyonly" => Ok(Scheme::CopyOnly),
            "copyprev" | "backward" => Ok(Scheme::CopyPrevBackward),
            other => Err(Error::Config(format!(
                "unknown scheme {other:?} (expected copynext, copy or copyprev)"
            ))),
        }
    }
}

/// A complete decision sequence terminated by `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TargetSequence {
    pub decisions: Vec<Decision>,
}

impl TargetSequence {
    pub fn new(decisions: Vec<Decision>) -> Self {
        TargetSequence { decisions }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn as_slice(&self) -> &[Decision] {
        &self.decisions
    }

    /// Space-separated form: token indices, `CN`, and label names.
    pub fn to_printed(&self, labels: &LabelSet) -> String {
        let mut out = String::new();
        for (i, d) in self.decisions.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match d {
                Decision::Point(p) => out.push_str(&p.to_string()),
                Decision::CopyNext => out.push_str("CN"),
                Decision::Label(l) => out.push_str(labels.name(*l)),
            }
        }
        out
    }

    pub fn parse_printed(text: &str, labels: &LabelSet) -> Result<Self> {
        let decisions = text
            .split_whitespace()
            .map(|tok| {
                if tok == "CN" {
                    Ok(Decision::CopyNext)
                } else if let Ok(i) = tok.parse::<usize>() {
                    Ok(Decision::Point(i))
                } else {
                    labels.require(tok).map(Decision::Label)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TargetSequence { decisions })
    }
}

impl AsRef<[Decision]> for TargetSequence {
    fn as_ref(&self) -> &[Decision] {
        &self.decisions
    }
}

/// A span whose label is already resolved to a label id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdSpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl IdSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

pub fn resolve_spans(spans: &[LabeledSpan], labels: &LabelSet) -> Result<Vec<IdSpan>> {
    spans
        .iter()
        .map(|s| {
            let label = labels.require(&s.label)?;
            if label == LabelSet::EOS_ID {
                return Err(Error::UnknownLabel(s.label.clone()));
            }
            Ok(IdSpan {
                start: s.start,
                end: s.end,
                label,
            })
        })
        .collect()
}

pub fn name_spans(spans: &[IdSpan], labels: &LabelSet) -> Vec<LabeledSpan> {
    spans
        .iter()
        .map(|s| LabeledSpan::new(s.start, s.end, labels.name(s.label)))
        .collect()
}

/// Orders spans for emission. Ties left by the scheme's sort key are broken
/// by a shuffle drawn from `seed`, applied to a canonical order so the result
/// does not depend on the input order.
pub fn order_spans(spans: &[IdSpan], scheme: Scheme, seed: u64) -> Vec<IdSpan> {
    let mut ordered = spans.to_vec();
    ordered.sort_unstable();
    ordered.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    match scheme {
        Scheme::CopyNextForward | Scheme::CopyOnly => {
            ordered.sort_by_key(|s| (s.start, Reverse(s.len())));
        }
        Scheme::CopyPrevBackward => {
            ordered.sort_by_key(|s| (Reverse(s.end), Reverse(s.len())));
        }
    }
    ordered
}

pub fn linearize_ids(spans: &[IdSpan], n: usize, scheme: Scheme, seed: u64) -> TargetSequence {
    let mut decisions = Vec::with_capacity(target_length_ids(spans));
    for s in order_spans(spans, scheme, seed) {
        debug_assert!(s.start < s.end && s.end <= n, "span out of bounds");
        match scheme {
            Scheme::CopyNextForward => {
                decisions.push(Decision::Point(s.start));
                decisions.extend(std::iter::repeat_n(Decision::CopyNext, s.len() - 1));
            }
            Scheme::CopyOnly => decisions.extend((s.start..s.end).map(Decision::Point)),
            Scheme::CopyPrevBackward => {
                decisions.push(Decision::Point(s.end - 1));
                decisions.extend(std::iter::repeat_n(Decision::CopyNext, s.len() - 1));
            }
        }
        decisions.push(Decision::Label(s.label));
    }
    decisions.push(Decision::EOS);
    TargetSequence { decisions }
}

pub fn linearize(
    spans: &[LabeledSpan],
    n: usize,
    scheme: Scheme,
    seed: u64,
    labels: &LabelSet,
) -> Result<TargetSequence> {
    if let Some(bad) = spans.iter().find(|s| s.start >= s.end || s.end > n) {
        return Err(Error::Validation {
            id: String::new(),
            message: format!("span [{}, {}) out of bounds for {n} tokens", bad.start, bad.end),
        });
    }
    let ids = resolve_spans(spans, labels)?;
    Ok(linearize_ids(&ids, n, scheme, seed))
}

fn structure(step: usize, message: impl Into<String>) -> Error {
    Error::Structure {
        step,
        message: message.into(),
    }
}

/// Parses a decision sequence back into its span set (sorted, deduplicated).
/// Span order inside the sequence is not checked.
pub fn delinearize_ids(
    seq: &[Decision],
    n: usize,
    num_labels: usize,
    scheme: Scheme,
) -> Result<Vec<IdSpan>> {
    // (first pointed token, most recently copied token) of the open span
    let mut open: Option<(usize, usize)> = None;
    let mut spans = Vec::new();
    let mut finished = false;
    for (step, &d) in seq.iter().enumerate() {
        if finished {
            return Err(structure(step, "decision after EOS"));
        }
        match d {
            Decision::Point(i) => {
                if i >= n {
                    return Err(structure(step, format!("pointer {i} beyond {n} tokens")));
                }
                open = match open {
                    None => Some((i, i)),
                    Some((first, last)) if scheme == Scheme::CopyOnly && i == last + 1 => {
                        Some((first, i))
                    }
                    Some((_, last)) if scheme == Scheme::CopyOnly => {
                        return Err(structure(
                            step,
                            format!("pointer {i} does not continue the span at {last}"),
                        ))
                    }
                    Some(_) => return Err(structure(step, "pointer inside an open span")),
                };
            }
            Decision::CopyNext => {
                let Some((first, last)) = open else {
                    return Err(structure(step, "CN before any pointer"));
                };
                let next = match scheme {
                    Scheme::CopyOnly => {
                        return Err(structure(step, "CN is not part of the copy-only scheme"))
                    }
                    Scheme::CopyNextForward if last + 1 < n => last + 1,
                    Scheme::CopyPrevBackward if last > 0 => last - 1,
                    _ => return Err(structure(step, "CN crosses the sentence boundary")),
                };
                open = Some((first, next));
            }
            Decision::Label(l) => {
                if l >= num_labels {
                    return Err(structure(step, format!("label id {l} out of range")));
                }
                if l == LabelSet::EOS_ID {
                    if open.is_some() {
                        return Err(structure(step, "EOS while a span is open"));
                    }
                    finished = true;
                    continue;
                }
                let Some((first, last)) = open.take() else {
                    return Err(structure(step, "label before any pointer"));
                };
                let (start, end) = match scheme {
                    Scheme::CopyPrevBackward => (last, first + 1),
                    _ => (first, last + 1),
                };
                spans.push(IdSpan {
                    start,
                    end,
                    label: l,
                });
            }
        }
    }
    if !finished {
        return Err(structure(seq.len(), "sequence does not end with EOS"));
    }
    spans.sort_unstable();
    spans.dedup();
    Ok(spans)
}

pub fn delinearize(
    seq: &TargetSequence,
    n: usize,
    scheme: Scheme,
    labels: &LabelSet,
) -> Result<Vec<LabeledSpan>> {
    let ids = delinearize_ids(&seq.decisions, n, labels.len(), scheme)?;
    Ok(name_spans(&ids, labels))
}

pub fn target_length_ids(spans: &[IdSpan]) -> usize {
    spans.iter().map(|s| s.len() + 1).sum::<usize>() + 1
}

/// Number of decisions `linearize` emits. Identical for all schemes: a
/// span of length k costs k token decisions plus its label.
pub fn target_length(spans: &[LabeledSpan], _scheme: Scheme) -> usize {
    spans.iter().map(|s| s.len() + 1).sum::<usize>() + 1
}
