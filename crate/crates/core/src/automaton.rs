//! Well-formedness automaton over decision sequences.
//!
//! Two live phases: `Boundary` (before the first span or right after a
//! label) and `InSpan` (a span is open and `frontier` is the last token it
//! copied). Emitting `EOS` from `Boundary` finishes the sequence.

use std::fmt;

use crate::error::{Error, Result};
use crate::linearize::{Decision, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Boundary,
    InSpan { frontier: usize },
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AutomatonState {
    pub phase: Phase,
    pub scheme: Scheme,
}

impl fmt::Display for AutomatonState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            Phase::Boundary => write!(f, "Boundary[{}]", self.scheme),
            Phase::InSpan { frontier } => write!(f, "InSpan({frontier})[{}]", self.scheme),
            Phase::Finished => write!(f, "Finished[{}]", self.scheme),
        }
    }
}

/// Legality of each entry of the `[pointers; labels; copy-next]` vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionMask {
    pub legal: Vec<bool>,
    n: usize,
    num_labels: usize,
}

impl DecisionMask {
    pub fn all(n: usize, num_labels: usize) -> Self {
        DecisionMask {
            legal: vec![true; n + num_labels + 1],
            n,
            num_labels,
        }
    }

    pub fn allows(&self, d: Decision) -> bool {
        let k = d.encode(self.n, self.num_labels);
        k < self.legal.len() && self.legal[k]
    }

    pub fn count(&self) -> usize {
        self.legal.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.legal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.legal.is_empty()
    }

    /// Legal decisions in increasing index order.
    pub fn decisions(&self) -> impl Iterator<Item = Decision> + '_ {
        self.legal
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| Decision::decode(k, self.n, self.num_labels).expect("in range"))
    }
}

impl AutomatonState {
    pub fn initial(scheme: Scheme) -> Self {
        AutomatonState {
            phase: Phase::Boundary,
            scheme,
        }
    }

    pub fn frontier(&self) -> Option<usize> {
        match self.phase {
            Phase::InSpan { frontier } => Some(frontier),
            _ => None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// Whether `d` is a legal next decision. Cheaper than building a mask.
    pub fn allows(&self, d: Decision, n: usize, num_labels: usize) -> bool {
        match (self.phase, d) {
            (Phase::Finished, _) => false,
            (Phase::Boundary, Decision::Point(i)) => i < n,
            (Phase::Boundary, Decision::Label(l)) => l == 0,
            (Phase::Boundary, Decision::CopyNext) => false,
            (Phase::InSpan { .. }, Decision::Label(l)) => l != 0 && l < num_labels,
            (Phase::InSpan { frontier }, Decision::CopyNext) => {
                self.scheme.copy_target(frontier, n).is_some()
            }
            (Phase::InSpan { frontier }, Decision::Point(i)) => {
                self.scheme == Scheme::CopyOnly && i == frontier + 1 && i < n
            }
        }
    }

    pub fn legal_mask(&self, n: usize, num_labels: usize) -> DecisionMask {
        let mut mask = DecisionMask {
            legal: vec![false; n + num_labels + 1],
            n,
            num_labels,
        };
        match self.phase {
            Phase::Finished => {}
            Phase::Boundary => {
                mask.legal[..n].fill(true);
                mask.legal[n] = true;
            }
            Phase::InSpan { frontier } => {
                mask.legal[n + 1..n + num_labels].fill(true);
                match self.scheme {
                    Scheme::CopyOnly => {
                        if frontier + 1 < n {
                            mask.legal[frontier + 1] = true;
                        }
                    }
                    scheme => {
                        mask.legal[n + num_labels] = scheme.copy_target(frontier, n).is_some();
                    }
                }
            }
        }
        mask
    }

    pub fn step(&self, d: Decision, n: usize, num_labels: usize) -> Result<AutomatonState> {
        if !self.allows(d, n, num_labels) {
            return Err(Error::Transition {
                decision: d.to_string(),
                state: self.to_string(),
            });
        }
        let phase = match d {
            Decision::Point(i) => Phase::InSpan { frontier: i },
            Decision::CopyNext => {
                let frontier = self.frontier().expect("allowed CN implies an open span");
                Phase::InSpan {
                    frontier: self
                        .scheme
                        .copy_target(frontier, n)
                        .expect("allowed CN stays in range"),
                }
            }
            Decision::Label(0) => Phase::Finished,
            Decision::Label(_) => Phase::Boundary,
        };
        Ok(AutomatonState {
            phase,
            scheme: self.scheme,
        })
    }
}

pub fn initial_state(scheme: Scheme) -> AutomatonState {
    AutomatonState::initial(scheme)
}

pub fn legal_mask(state: &AutomatonState, n: usize, num_labels: usize) -> DecisionMask {
    state.legal_mask(n, num_labels)
}

pub fn step(
    state: &AutomatonState,
    d: Decision,
    n: usize,
    num_labels: usize,
) -> Result<AutomatonState> {
    state.step(d, n, num_labels)
}

/// True iff every step is legal and the sequence ends exactly at `EOS`.
pub fn accepts(seq: &[Decision], n: usize, num_labels: usize, scheme: Scheme) -> bool {
    let mut state = AutomatonState::initial(scheme);
    for &d in seq {
        match state.step(d, n, num_labels) {
            Ok(next) => state = next,
            Err(_) => return false,
        }
    }
    state.is_finished()
}

/// Whether `prefix` can still be completed to an accepted sequence.
pub fn accepts_prefix(prefix: &[Decision], n: usize, num_labels: usize, scheme: Scheme) -> bool {
    let mut state = AutomatonState::initial(scheme);
    for &d in prefix {
        match state.step(d, n, num_labels) {
            Ok(next) => state = next,
            Err(_) => return false,
        }
    }
    true
}
