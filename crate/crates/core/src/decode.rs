//! Mask-constrained greedy and beam decoding.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::automaton::{AutomatonState, Phase};
use crate::corpus::{LabeledSpan, Sentence};
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::linearize::{delinearize, Decision, Scheme, TargetSequence};
use crate::model::{
    encode, input_source, legal_logits, next_frontier, source_vector, DecoderState, EncoderInput,
    EncoderStates, InputSource, Model, TransducerParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 1 means greedy.
    pub beam: usize,
    /// Decision budget before truncation; `None` means `8 · N`.
    pub max_len: Option<usize>,
    pub scheme: Scheme,
}

impl DecodeConfig {
    pub fn greedy(scheme: Scheme) -> Self {
        DecodeConfig {
            beam: 1,
            max_len: None,
            scheme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_len_for(&self, n: usize) -> usize {
        self.max_len.unwrap_or(8 * n).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub sequence: TargetSequence,
    /// Sum of mask-renormalized log probabilities of the returned sequence.
    pub log_prob: f64,
    /// The decision budget ran out and the truncation rule was applied.
    pub truncated: bool,
}

/// Closes a truncated prefix: append EOS if legal, otherwise drop the
/// unfinished trailing span first.
pub fn close_truncated(decisions: &mut Vec<Decision>, state: &AutomatonState) {
    if let Phase::InSpan { .. } = state.phase {
        let keep = decisions
            .iter()
            .rposition(|d| matches!(d, Decision::Label(_)))
            .map_or(0, |k| k + 1);
        decisions.truncate(keep);
    }
    if state.phase != Phase::Finished {
        decisions.push(Decision::EOS);
    }
}

/// Masked log probability of a complete sequence under teacher forcing.
pub fn sequence_log_prob(
    params: &TransducerParams,
    scheme: Scheme,
    enc: &EncoderStates,
    seq: &[Decision],
) -> Result<f64> {
    let n = enc.len();
    let num_labels = params.num_labels();
    let mut dec = DecoderState::initial(params);
    let mut auto = AutomatonState::initial(scheme);
    let mut src = InputSource::Start;
    let mut frontier = None;
    let mut scratch = Vec::new();
    let mut cands = Vec::new();
    let mut total = 0.0;
    for &d in seq {
        dec.advance(source_vector(src, enc, params), params, &mut scratch);
        legal_logits(&auto, dec.top(), enc, params, &mut cands);
        let lse = log_sum_exp(cands.iter().map(|c| c.1));
        let z = cands
            .iter()
            .find(|c| c.0 == d)
            .map(|c| c.1)
            .ok_or_else(|| Error::Transition {
                decision: d.to_string(),
                state: auto.to_string(),
            })?;
        total += z - lse;
        auto = auto.step(d, n, num_labels)?;
        if !auto.is_finished() {
            src = input_source(Some(d), frontier, scheme, n)?;
            frontier = next_frontier(d, frontier, scheme, n);
        }
    }
    Ok(total)
}

/// Picks the highest masked log probability; ties go to the lowest
/// decision index (candidates arrive in index order).
fn argmax(cands: &[(Decision, f64)], lse: f64) -> (Decision, f64) {
    let mut best = (cands[0].0, cands[0].1 - lse);
    for &(d, z) in &cands[1..] {
        let lp = z - lse;
        if lp > best.1 {
            best = (d, lp);
        }
    }
    best
}

pub fn greedy_decode_encoded(
    params: &TransducerParams,
    scheme: Scheme,
    enc: &EncoderStates,
    max_len: usize,
) -> Result<Decoded> {
    let n = enc.len();
    let num_labels = params.num_labels();
    let mut dec = DecoderState::initial(params);
    let mut auto = AutomatonState::initial(scheme);
    let mut src = InputSource::Start;
    let mut frontier = None;
    let mut scratch = Vec::new();
    let mut cands = Vec::with_capacity(n + num_labels + 1);
    let mut decisions = Vec::new();
    let mut log_prob = 0.0;
    while decisions.len() < max_len {
        dec.advance(source_vector(src, enc, params), params, &mut scratch);
        legal_logits(&auto, dec.top(), enc, params, &mut cands);
        let lse = log_sum_exp(cands.iter().map(|c| c.1));
        let (d, lp) = argmax(&cands, lse);
        decisions.push(d);
        log_prob += lp;
        auto = auto.step(d, n, num_labels)?;
        if auto.is_finished() {
            return Ok(Decoded {
                sequence: TargetSequence::new(decisions),
                log_prob,
                truncated: false,
            });
        }
        src = input_source(Some(d), frontier, scheme, n)?;
        frontier = next_frontier(d, frontier, scheme, n);
    }
    close_truncated(&mut decisions, &auto);
    let log_prob = sequence_log_prob(params, scheme, enc, &decisions)?;
    Ok(Decoded {
        sequence: TargetSequence::new(decisions),
        log_prob,
        truncated: true,
    })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    decisions: Vec<Decision>,
    auto: AutomatonState,
    dec: DecoderState,
    src: InputSource,
    frontier: Option<usize>,
    score: f64,
}

struct Candidate {
    parent: usize,
    decision: Decision,
    local: f64,
    total: f64,
}

/// Ranking used to fill the beam: total score, then the step's own log
/// probability, then parent rank, then decision index.
fn rank(a: &Candidate, b: &Candidate, n: usize, num_labels: usize) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(b.local.total_cmp(&a.local))
        .then(a.parent.cmp(&b.parent))
        .then(
            a.decision
                .encode(n, num_labels)
                .cmp(&b.decision.encode(n, num_labels)),
        )
}

pub fn beam_decode_encoded(
    params: &TransducerParams,
    scheme: Scheme,
    enc: &EncoderStates,
    beam: usize,
    max_len: usize,
) -> Result<Decoded> {
    let n = enc.len();
    let num_labels = params.num_labels();
    let mut scratch = Vec::new();
    let mut cands_buf = Vec::with_capacity(n + num_labels + 1);
    let mut active = vec![Hypothesis {
        decisions: Vec::new(),
        auto: AutomatonState::initial(scheme),
        dec: DecoderState::initial(params),
        src: InputSource::Start,
        frontier: None,
        score: 0.0,
    }];
    let mut completed: Vec<(Vec<Decision>, f64, bool)> = Vec::new();

    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut advanced = Vec::with_capacity(active.len());
        let mut cands = Vec::new();
        for (pi, h) in active.iter().enumerate() {
            let mut dec = h.dec.clone();
            dec.advance(source_vector(h.src, enc, params), params, &mut scratch);
            legal_logits(&h.auto, dec.top(), enc, params, &mut cands_buf);
            let lse = log_sum_exp(cands_buf.iter().map(|c| c.1));
            for &(d, z) in &cands_buf {
                let local = z - lse;
                cands.push(Candidate {
                    parent: pi,
                    decision: d,
                    local,
                    total: h.score + local,
                });
            }
            advanced.push(dec);
        }
        cands.sort_by(|a, b| rank(a, b, n, num_labels));

        let mut next = Vec::with_capacity(beam);
        for c in cands {
            if next.len() == beam {
                break;
            }
            let parent = &active[c.parent];
            let mut decisions = parent.decisions.clone();
            decisions.push(c.decision);
            let auto = parent.auto.step(c.decision, n, num_labels)?;
            if auto.is_finished() {
                completed.push((decisions, c.total, false));
                continue;
            }
            next.push(Hypothesis {
                decisions,
                auto,
                dec: advanced[c.parent].clone(),
                src: input_source(Some(c.decision), parent.frontier, scheme, n)?,
                frontier: next_frontier(c.decision, parent.frontier, scheme, n),
                score: c.total,
            });
        }
        active = next;

        // Scores only decrease, so no active hypothesis can overtake this.
        let best_done = completed
            .iter()
            .map(|c| c.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_active = active
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_active {
            active.clear();
        }
    }
    for h in active {
        let mut decisions = h.decisions;
        close_truncated(&mut decisions, &h.auto);
        let score = sequence_log_prob(params, scheme, enc, &decisions)?;
        completed.push((decisions, score, true));
    }
    let mut best: Option<(Vec<Decision>, f64, bool)> = None;
    for c in completed {
        if best.as_ref().is_none_or(|b| c.1 > b.1) {
            best = Some(c);
        }
    }
    let (decisions, log_prob, truncated) = best.expect("beam search always completes a hypothesis");
    Ok(Decoded {
        sequence: TargetSequence::new(decisions),
        log_prob,
        truncated,
    })
}

fn prepare(model: &Model, sent: &Sentence, config: &DecodeConfig) -> Result<EncoderStates> {
    config.validate()?;
    crate::checkpoint::ensure_scheme(model, config.scheme)?;
    let input: EncoderInput = model.input_for(sent)?;
    encode(&input, &model.params)
}

pub fn greedy_decode(model: &Model, sent: &Sentence, config: &DecodeConfig) -> Result<Decoded> {
    let enc = prepare(model, sent, config)?;
    greedy_decode_encoded(&model.params, config.scheme, &enc, config.max_len_for(sent.len()))
}

pub fn beam_decode(model: &Model, sent: &Sentence, config: &DecodeConfig) -> Result<Decoded> {
    let enc = prepare(model, sent, config)?;
    beam_decode_encoded(
        &model.params,
        config.scheme,
        &enc,
        config.beam,
        config.max_len_for(sent.len()),
    )
}

/// Greedy when `beam == 1`, beam search otherwise.
pub fn decode(model: &Model, sent: &Sentence, config: &DecodeConfig) -> Result<Decoded> {
    if config.beam == 1 {
        greedy_decode(model, sent, config)
    } else {
        beam_decode(model, sent, config)
    }
}

pub fn predict_spans(
    model: &Model,
    sent: &Sentence,
    config: &DecodeConfig,
) -> Result<Vec<LabeledSpan>> {
    let out = decode(model, sent, config)?;
    delinearize(&out.sequence, sent.len(), config.scheme, &model.labels)
}

/// One line of prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(with = "span_triples")]
    pub spans: Vec<LabeledSpan>,
    pub sequence: String,
    pub decode_ms: f64,
}

mod span_triples {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::corpus::LabeledSpan;

    pub fn serialize<S: Serializer>(spans: &[LabeledSpan], s: S) -> Result<S::Ok, S::Error> {
        let triples: Vec<(usize, usize, &str)> = spans
            .iter()
            .map(|sp| (sp.start, sp.end, sp.label.as_str()))
            .collect();
        triples.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<LabeledSpan>, D::Error> {
        let triples: Vec<(usize, usize, String)> = Vec::deserialize(d)?;
        Ok(triples
            .into_iter()
            .map(|(start, end, label)| LabeledSpan { start, end, label })
            .collect())
    }
}

pub fn predict_one(model: &Model, sent: &Sentence, config: &DecodeConfig) -> Result<Prediction> {
    let t0 = Instant::now();
    let out = decode(model, sent, config)?;
    let spans = delinearize(&out.sequence, sent.len(), config.scheme, &model.labels)?;
    let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(Prediction {
        id: sent.id.clone(),
        spans,
        sequence: out.sequence.to_printed(&model.labels),
        decode_ms,
    })
}

/// Decodes sentences independently in parallel, preserving input order.
pub fn predict_corpus<'a, I>(model: &Model, sentences: I, config: &DecodeConfig) -> Result<Vec<Prediction>>
where
    I: IntoParallelIterator<Item = &'a Sentence>,
    I::Iter: IndexedParallelIterator,
{
    sentences
        .into_par_iter()
        .map(|s| predict_one(model, s, config))
        .collect()
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("predictions serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::accepts;
    use crate::corpus::LabelSet;
    use crate::linalg::Matrix;
    use crate::model::ModelConfig;

    fn vec_model(scheme: Scheme, labels: &[&str], hidden: usize, seed: u64) -> Model {
        let labels = LabelSet::new(labels.iter().copied()).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            hidden,
            input_dim: 2,
            num_labels: labels.len(),
            vocab_size: None,
            scheme,
            seed,
        };
        Model::new(cfg, labels, None).unwrap()
    }

    fn sent(n: usize) -> Sentence {
        let mut s = Sentence::new("s", vec!["w".into(); n]);
        s.vectors = Some((0..n).map(|i| vec![i as f64 * 0.1, 1.0]).collect());
        s
    }

    #[test]
    fn eos_first_model_predicts_nothing() {
        let mut m = vec_model(Scheme::CopyNextForward, &["A"], 2, 0);
        m.params = m.params.zeros_like();
        m.params.start = Matrix::from_rows(&[vec![1.0, 1.0]]);
        m.params.decoder[0].bias.data = vec![0., 0., 0., 0., 0., 0., 30., 30.];
        m.params.decoder[0].w_ih.data.iter_mut().for_each(|v| *v = 0.0);
        // i and g gates fixed so c = i*g > 0, o ≈ 1: d_t is a positive constant.
        m.params.decoder[0].bias.data = vec![5., 5., 0., 0., 5., 5., 30., 30.];
        m.params.label_head = Matrix::from_rows(&[vec![10.0, 10.0], vec![0.0, 0.0]]);
        let cfg = DecodeConfig::greedy(Scheme::CopyNextForward);
        let out = greedy_decode(&m, &sent(4), &cfg).unwrap();
        assert_eq!(out.sequence.decisions, vec![Decision::EOS]);
        assert!(predict_spans(&m, &sent(4), &cfg).unwrap().is_empty());
    }

    #[test]
    fn truncation_drops_open_span() {
        let mut d = vec![
            Decision::Point(0),
            Decision::Label(1),
            Decision::Point(2),
            Decision::CopyNext,
        ];
        let st = AutomatonState {
            phase: Phase::InSpan { frontier: 3 },
            scheme: Scheme::CopyNextForward,
        };
        close_truncated(&mut d, &st);
        assert_eq!(d, vec![Decision::Point(0), Decision::Label(1), Decision::EOS]);
        let mut d = vec![Decision::Point(0), Decision::Label(1)];
        close_truncated(&mut d, &AutomatonState::initial(Scheme::CopyNextForward));
        assert_eq!(d, vec![Decision::Point(0), Decision::Label(1), Decision::EOS]);
    }

    #[test]
    fn short_budget_output_is_well_formed() {
        for seed in 0..30 {
            let m = vec_model(Scheme::CopyNextForward, &["A", "B"], 4, seed);
            let cfg = DecodeConfig {
                beam: 1,
                max_len: Some(3),
                scheme: Scheme::CopyNextForward,
            };
            let out = greedy_decode(&m, &sent(6), &cfg).unwrap();
            assert!(accepts(&out.sequence.decisions, 6, 3, Scheme::CopyNextForward));
            assert!(out.sequence.len() <= 4);
        }
    }

    #[test]
    fn greedy_log_prob_matches_rescoring() {
        for seed in 0..20 {
            let m = vec_model(Scheme::CopyOnly, &["A", "B"], 4, seed);
            let s = sent(5);
            let cfg = DecodeConfig::greedy(Scheme::CopyOnly);
            let out = greedy_decode(&m, &s, &cfg).unwrap();
            let enc = encode(&m.input_for(&s).unwrap(), &m.params).unwrap();
            let again = sequence_log_prob(&m.params, Scheme::CopyOnly, &enc, &out.sequence.decisions)
                .unwrap();
            assert!((again - out.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn scheme_mismatch_is_refused() {
        let m = vec_model(Scheme::CopyOnly, &["A"], 2, 0);
        let cfg = DecodeConfig::greedy(Scheme::CopyNextForward);
        assert!(matches!(
            greedy_decode(&m, &sent(3), &cfg),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn prediction_json_shape() {
        let p = Prediction {
            id: "x".into(),
            spans: vec![LabeledSpan::new(0, 2, "PER")],
            sequence: "0 CN PER EOS".into(),
            decode_ms: 0.5,
        };
        let line = serde_json::to_string(&p).unwrap();
        assert_eq!(
            line,
            r#"{"id":"x","spans":[[0,2,"PER"]],"sequence":"0 CN PER EOS","decode_ms":0.5}"#
        );
        let back: Prediction = serde_json::from_str(&line).unwrap();
        assert_eq!(back, p);
    }
}
