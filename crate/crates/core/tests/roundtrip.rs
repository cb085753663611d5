mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spantrans::automaton::{accepts, accepts_prefix};
use spantrans::linearize::{delinearize_ids, linearize_ids, target_length_ids, IdSpan, Scheme};

fn span_set() -> impl Strategy<Value = (usize, usize, Vec<IdSpan>)> {
    (1usize..12, 2usize..6).prop_flat_map(|(n, num_labels)| {
        let span = (0..n, 0..n, 1..num_labels).prop_map(|(a, b, label)| IdSpan {
            start: a.min(b),
            end: a.max(b) + 1,
            label,
        });
        (Just(n), Just(num_labels), prop::collection::vec(span, 0..8))
    })
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop::sample::select(Scheme::ALL.to_vec())
}

proptest! {
    #[test]
    fn delinearize_inverts_linearize((n, num_labels, mut spans) in span_set(), scheme in scheme(), seed in any::<u64>()) {
        spans.sort();
        spans.dedup();
        let seq = linearize_ids(&spans, n, scheme, seed);
        prop_assert_eq!(seq.len(), target_length_ids(&spans));
        prop_assert!(accepts(&seq.decisions, n, num_labels, scheme));
        for k in 0..seq.len() {
            prop_assert!(accepts_prefix(&seq.decisions[..k], n, num_labels, scheme));
        }
        prop_assert_eq!(delinearize_ids(&seq.decisions, n, num_labels, scheme).unwrap(), spans);
    }

    #[test]
    fn tie_seed_changes_order_not_content((n, num_labels, mut spans) in span_set(), a in any::<u64>(), b in any::<u64>()) {
        spans.sort();
        spans.dedup();
        let x = linearize_ids(&spans, n, Scheme::CopyNextForward, a);
        let y = linearize_ids(&spans, n, Scheme::CopyNextForward, b);
        prop_assert_eq!(x.len(), y.len());
        prop_assert_eq!(
            delinearize_ids(&x.decisions, n, num_labels, Scheme::CopyNextForward).unwrap(),
            delinearize_ids(&y.decisions, n, num_labels, Scheme::CopyNextForward).unwrap()
        );
    }
}

#[test]
fn ten_thousand_seeded_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10_000u64 {
        let n = 1 + (i as usize % 30);
        let num_labels = 2 + (i as usize % 5);
        let spans = common::random_spans(&mut rng, n, num_labels, 10);
        for scheme in Scheme::ALL {
            let seq = linearize_ids(&spans, n, scheme, i);
            let back = delinearize_ids(&seq.decisions, n, num_labels, scheme).unwrap();
            assert_eq!(back, spans, "case {i} {scheme}");
        }
    }
}
