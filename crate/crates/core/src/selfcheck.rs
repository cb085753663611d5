//! Built-in oracles: exhaustive automaton/parser agreement and
//! finite-difference gradient checks on seeded fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::automaton::accepts;
use crate::corpus::Vocab;
use crate::error::Result;
use crate::linearize::{delinearize_ids, linearize_ids, Decision, IdSpan, Scheme, TargetSequence};
use crate::model::{sequence_loss, sequence_nll, EncoderInput, ModelConfig, TransducerParams};

/// Decision strings of length 1..=max_len where the automaton and the
/// parser disagree. Returns `(strings checked, discrepancies)`.
pub fn automaton_equivalence(
    n: usize,
    num_labels: usize,
    max_len: usize,
    scheme: Scheme,
) -> (usize, Vec<Vec<Decision>>) {
    let k = n + num_labels + 1;
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut seq = Vec::with_capacity(max_len);
    for len in 1..=max_len {
        let total = k.pow(len as u32);
        for mut code in 0..total {
            seq.clear();
            for _ in 0..len {
                seq.push(Decision::decode(code % k, n, num_labels).expect("index in range"));
                code /= k;
            }
            checked += 1;
            let a = accepts(&seq, n, num_labels, scheme);
            let p = delinearize_ids(&seq, n, num_labels, scheme).is_ok();
            if a != p {
                bad.push(seq.clone());
            }
        }
    }
    (checked, bad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Array name and offset of the worst coordinate.
    pub worst: (String, usize),
}

/// Relative error `|fd − an| / max(|fd|, |an|, 1e-5)`; the floor keeps
/// coordinates whose true gradient is zero from dividing by rounding noise.
pub fn rel_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5)
}

/// Compares every analytic gradient coordinate with a central difference
/// of step `h` computed through the forward-only loss.
pub fn gradient_check(
    input: &EncoderInput,
    gold: &TargetSequence,
    params: &TransducerParams,
    scheme: Scheme,
    h: f64,
) -> Result<GradCheck> {
    let an = sequence_loss(input, gold, params, scheme, None)?.grads;
    let mut q = params.clone();
    let mut out = GradCheck {
        coordinates: params.num_params(),
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    for k in 0..params.num_params() {
        let v = params.get_flat(k);
        q.set_flat(k, v + h);
        let lp = sequence_nll(input, gold, &q, scheme)?;
        q.set_flat(k, v - h);
        let lm = sequence_nll(input, gold, &q, scheme)?;
        q.set_flat(k, v);
        let rel = rel_error((lp - lm) / (2.0 * h), an.get_flat(k));
        if rel > out.max_rel_error || k == 0 {
            out.max_rel_error = rel;
            out.worst = params.locate_flat(k);
        }
    }
    Ok(out)
}

pub struct Fixture {
    pub input: EncoderInput,
    pub target: TargetSequence,
    pub params: TransducerParams,
    pub scheme: Scheme,
}

/// Random sentence of at most `max_n` tokens with random nested spans over
/// `num_labels - 1` labels, and parameters drawn uniformly from ±`scale`.
pub fn random_fixture(
    seed: u64,
    layers: usize,
    hidden: usize,
    max_n: usize,
    num_labels: usize,
    scheme: Scheme,
    scale: f64,
) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let vocab = Vocab::from_ordered((0..6).map(|i| if i == 0 { crate::corpus::UNK.to_string() } else { format!("w{i}") }).collect())?;
    let use_tokens = rng.random_bool(0.5);
    let input_dim = 3;
    let cfg = ModelConfig {
        layers,
        hidden,
        input_dim,
        num_labels,
        vocab_size: use_tokens.then_some(vocab.len()),
        scheme,
        seed,
    };
    cfg.validate()?;
    let mut params = TransducerParams::zeros(&cfg);
    for (_, m) in params.arrays_mut() {
        m.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
    let input = if use_tokens {
        EncoderInput::Tokens((0..n).map(|_| rng.random_range(0..vocab.len())).collect())
    } else {
        EncoderInput::Vectors(
            (0..n)
                .map(|_| (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
    };
    let mut spans = Vec::new();
    for _ in 0..rng.random_range(0..=3) {
        let start = rng.random_range(0..n);
        let end = rng.random_range(start + 1..=n);
        let label = rng.random_range(1..num_labels);
        let s = IdSpan { start, end, label };
        if !spans.contains(&s) {
            spans.push(s);
        }
    }
    let target = linearize_ids(&spans, n, scheme, seed);
    Ok(Fixture {
        input,
        target,
        params,
        scheme,
    })
}
