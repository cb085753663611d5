#![allow(dead_code)]

use rand::Rng;
use spantrans::linearize::IdSpan;

/// Random duplicate-free span set over `n` tokens and labels `1..num_labels`,
/// sorted and deduplicated like the parser's output.
pub fn random_spans(rng: &mut impl Rng, n: usize, num_labels: usize, max_spans: usize) -> Vec<IdSpan> {
    let count = rng.random_range(0..=max_spans);
    let mut spans: Vec<IdSpan> = (0..count)
        .map(|_| {
            let start = rng.random_range(0..n);
            let end = rng.random_range(start + 1..=n);
            IdSpan {
                start,
                end,
                label: rng.random_range(1..num_labels),
            }
        })
        .collect();
    spans.sort();
    spans.dedup();
    spans
}
