//! Teacher-forced training with Adam, gradient clipping and early stopping
//! on development F1.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::automaton::accepts;
use crate::checkpoint::save_checkpoint;
use crate::corpus::{AnnotatedSentence, LabelSet, Vocab};
use crate::decode::{predict_corpus, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::score;
use crate::linearize::{linearize, Scheme, TargetSequence};
use crate::model::{sequence_loss, Dropout, EncoderInput, Model, ModelConfig, TransducerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub layers: usize,
    pub hidden: usize,
    /// Width of the learned token embeddings when sentences carry no vectors.
    pub embed_dim: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Epochs between dev evaluations.
    pub eval_interval: usize,
    pub dropout: f64,
    /// Wall-clock budget in seconds, checked after every epoch.
    pub time_limit: Option<f64>,
    /// Stop as soon as dev F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 0,
            scheme: Scheme::CopyNextForward,
            layers: 1,
            hidden: 64,
            embed_dim: 32,
            patience: 5,
            eval_interval: 1,
            dropout: 0.0,
            time_limit: None,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("patience", self.patience),
            ("eval_interval", self.eval_interval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config("hidden must be even".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-decision loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_epoch: Option<usize>,
    pub best_f1: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub epoch_seconds: Vec<f64>,
    pub stopped_early: bool,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (e, (loss, secs)) in self.epoch_loss.iter().zip(&self.epoch_seconds).enumerate() {
            write!(f, "epoch {:>3}  loss {loss:.5}  {secs:.1}s", e + 1)?;
            if let Some(p) = self.evals.iter().find(|p| p.epoch == e + 1) {
                write!(f, "  dev P {:.4} R {:.4} F1 {:.4}", p.precision, p.recall, p.f1)?;
            }
            writeln!(f)?;
        }
        if let (Some(e), Some(f1)) = (self.best_epoch, self.best_f1) {
            writeln!(f, "best dev F1 {f1:.4} at epoch {e}")?;
        }
        Ok(())
    }
}

/// Adaptive moment estimation state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: TransducerParams,
    v: TransducerParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &TransducerParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut TransducerParams, grads: &TransducerParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let ps = params.arrays_mut();
        let gs = grads.arrays();
        let ms = self.m.arrays_mut();
        let vs = self.v.arrays_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for k in 0..p.1.data.len() {
                let gk = g.1.data[k];
                let mk = b1 * m.1.data[k] + (1.0 - b1) * gk;
                let vk = b2 * v.1.data[k] + (1.0 - b2) * gk * gk;
                m.1.data[k] = mk;
                v.1.data[k] = vk;
                p.1.data[k] -= lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut TransducerParams, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Seed for one sentence's tie order, fixed for the whole run.
pub fn sentence_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct Example {
    pub input: EncoderInput,
    pub target: TargetSequence,
}

/// Builds a freshly initialized model whose vocabularies cover `corpus`.
pub fn init_model(corpus: &[AnnotatedSentence], config: &TrainConfig) -> Result<Model> {
    let labels = LabelSet::from_corpus(corpus)?;
    let dims: Vec<Option<usize>> = corpus.iter().map(|s| s.sentence.vector_dim()).collect();
    let (input_dim, vocab) = match dims.first().copied().flatten() {
        Some(d) => {
            if dims.iter().any(|x| *x != Some(d)) {
                return Err(Error::Config(
                    "either every training sentence carries vectors of one dimension or none does".into(),
                ));
            }
            (d, None)
        }
        None => {
            if dims.iter().any(Option::is_some) {
                return Err(Error::Config(
                    "either every training sentence carries vectors of one dimension or none does".into(),
                ));
            }
            let vocab = Vocab::build(corpus.iter().map(|s| &s.sentence));
            (config.embed_dim, Some(vocab))
        }
    };
    let cfg = ModelConfig {
        layers: config.layers,
        hidden: config.hidden,
        input_dim,
        num_labels: labels.len(),
        vocab_size: vocab.as_ref().map(Vocab::len),
        scheme: config.scheme,
        seed: config.seed,
    };
    Model::new(cfg, labels, vocab)
}

/// Gold linearizations, one tie-order seed per sentence.
pub fn prepare_examples(model: &Model, corpus: &[AnnotatedSentence], seed: u64) -> Result<Vec<Example>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.validate()?;
            let n = s.sentence.len();
            let target = linearize(&s.spans, n, model.scheme(), sentence_seed(seed, i), &model.labels)?;
            if !accepts(&target.decisions, n, model.labels.len(), model.scheme()) {
                return Err(Error::Validation {
                    id: s.id().to_string(),
                    message: "gold linearization rejected by the automaton".into(),
                });
            }
            Ok(Example {
                input: model.input_for(&s.sentence)?,
                target,
            })
        })
        .collect()
}

/// Sentences of similar length share a batch; batch order is shuffled.
fn batches(examples: &[Example], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| examples[i].input.len());
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    out.shuffle(rng);
    out
}

/// Sums per-sentence losses and gradients in input order and normalizes by
/// the number of decisions. Returns `(mean loss, decisions, gradient)`.
pub fn batch_gradient(
    params: &TransducerParams,
    scheme: Scheme,
    examples: &[&Example],
    dropout: Option<(f64, u64)>,
) -> Result<(f64, usize, TransducerParams)> {
    let parts: Vec<_> = examples
        .par_iter()
        .enumerate()
        .map(|(k, ex)| {
            let d = dropout.map(|(rate, seed)| Dropout {
                rate,
                seed: sentence_seed(seed, k),
            });
            sequence_loss(&ex.input, &ex.target, params, scheme, d)
        })
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut steps = 0;
    for p in parts {
        loss += p.loss;
        steps += p.steps;
        grads.add_assign(&p.grads);
    }
    let scale = 1.0 / steps.max(1) as f64;
    grads.scale(scale);
    Ok((loss * scale, steps, grads))
}

pub fn dev_f1(model: &Model, dev: &[AnnotatedSentence]) -> Result<EvalPoint> {
    let sents: Vec<_> = dev.iter().map(|s| &s.sentence).collect();
    let preds = predict_corpus(model, sents, &DecodeConfig::greedy(model.scheme()))?;
    let r = score(dev, &preds)?;
    Ok(EvalPoint {
        epoch: 0,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
    })
}

/// Trains a fresh model; see [`train_model`].
pub fn train(
    corpus: &[AnnotatedSentence],
    dev: &[AnnotatedSentence],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(Model, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    config.validate()?;
    let mut model = init_model(corpus, config)?;
    let report = train_model(&mut model, corpus, dev, config, checkpoint)?;
    Ok((model, report))
}

/// Optimizes `model` in place. With a non-empty dev set the model ends up
/// holding the parameters of the best dev evaluation, which are also
/// written to `checkpoint` whenever they improve.
pub fn train_model(
    model: &mut Model,
    corpus: &[AnnotatedSentence],
    dev: &[AnnotatedSentence],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if model.scheme() != config.scheme {
        return Err(Error::Config("model scheme differs from the training scheme".into()));
    }
    let examples = prepare_examples(model, corpus, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let start = Instant::now();
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        evals: Vec::new(),
        best_epoch: None,
        best_f1: None,
        best_checkpoint: None,
        epoch_seconds: Vec::new(),
        stopped_early: false,
    };
    let mut best_params: Option<TransducerParams> = None;
    let mut stale = 0;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut steps_sum = 0usize;
        for batch in batches(&examples, config.batch_size, &mut rng) {
            step += 1;
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let dropout = (config.dropout > 0.0).then(|| {
                (config.dropout, sentence_seed(config.seed, step).wrapping_add(epoch as u64))
            });
            let (loss, steps, mut grads) = batch_gradient(&model.params, config.scheme, &refs, dropout)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric {
                    context: format!("epoch {epoch}, step {step}"),
                });
            }
            clip_gradients(&mut grads, config.clip_norm);
            adam.step(&mut model.params, &grads);
            loss_sum += loss * steps as f64;
            steps_sum += steps;
        }
        let mean = loss_sum / steps_sum.max(1) as f64;
        report.epoch_loss.push(mean);
        report.epoch_seconds.push(t0.elapsed().as_secs_f64());
        log::info!("epoch {epoch} loss {mean:.5}");

        let mut stop = false;
        if !dev.is_empty() && (epoch % config.eval_interval == 0 || epoch == config.epochs) {
            let mut p = dev_f1(model, dev)?;
            p.epoch = epoch;
            log::info!("epoch {epoch} dev P {:.4} R {:.4} F1 {:.4}", p.precision, p.recall, p.f1);
            if report.best_f1.is_none_or(|b| p.f1 > b) {
                report.best_f1 = Some(p.f1);
                report.best_epoch = Some(epoch);
                best_params = Some(model.params.clone());
                stale = 0;
                if let Some(path) = checkpoint {
                    save_checkpoint(model, path)?;
                    report.best_checkpoint = Some(path.to_path_buf());
                }
            } else {
                stale += 1;
                if stale >= config.patience {
                    stop = true;
                }
            }
            if config.target_f1.is_some_and(|t| p.f1 >= t) {
                stop = true;
            }
            report.evals.push(p);
        }
        if config.time_limit.is_some_and(|t| start.elapsed().as_secs_f64() >= t) {
            stop = true;
        }
        if stop && epoch < config.epochs {
            report.stopped_early = true;
            break;
        }
    }
    match best_params {
        Some(p) => model.params = p,
        None => {
            if let Some(path) = checkpoint {
                save_checkpoint(model, path)?;
                report.best_checkpoint = Some(path.to_path_buf());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabeledSpan, Sentence};

    fn tiny() -> Vec<AnnotatedSentence> {
        vec![AnnotatedSentence {
            sentence: Sentence::new("s0", "the big red dog barked".split(' ').map(String::from).collect()),
            spans: vec![
                LabeledSpan::new(1, 4, "ANIMAL"),
                LabeledSpan::new(2, 3, "COLOR"),
            ],
        }]
    }

    fn small(scheme: Scheme) -> TrainConfig {
        TrainConfig {
            hidden: 8,
            embed_dim: 6,
            scheme,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let corpus = tiny();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..small(Scheme::CopyNextForward)
        };
        let mut model = init_model(&corpus, &cfg).unwrap();
        let before = model.params.clone();
        train_model(&mut model, &corpus, &[], &cfg, None).unwrap();
        let bits = |p: &TransducerParams| -> Vec<u64> {
            p.arrays().iter().flat_map(|(_, m)| m.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&before), bits(&model.params));
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        for seed in 0..5 {
            let corpus = tiny();
            let cfg = TrainConfig {
                seed,
                learning_rate: 1e-4,
                ..small(Scheme::CopyNextForward)
            };
            let model = init_model(&corpus, &cfg).unwrap();
            let ex = prepare_examples(&model, &corpus, seed).unwrap();
            let refs: Vec<&Example> = ex.iter().collect();
            let (l0, _, g) = batch_gradient(&model.params, cfg.scheme, &refs, None).unwrap();
            let mut params = model.params.clone();
            let mut adam = Adam::new(&params, cfg.learning_rate);
            adam.step(&mut params, &g);
            let (l1, _, _) = batch_gradient(&params, cfg.scheme, &refs, None).unwrap();
            assert!(l1 <= l0, "seed {seed}: {l0} -> {l1}");
        }
    }

    #[test]
    fn memorizes_a_single_sentence() {
        let corpus = tiny();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            hidden: 32,
            ..small(Scheme::CopyNextForward)
        };
        let (model, report) = train(&corpus, &[], &cfg, None).unwrap();
        assert!(*report.epoch_loss.last().unwrap() < 0.01, "{report}");
        let ex = prepare_examples(&model, &corpus, cfg.seed).unwrap();
        let out = crate::decode::greedy_decode(
            &model,
            &corpus[0].sentence,
            &DecodeConfig::greedy(cfg.scheme),
        )
        .unwrap();
        assert_eq!(out.sequence, ex[0].target);
        let spans =
            crate::decode::predict_spans(&model, &corpus[0].sentence, &DecodeConfig::greedy(cfg.scheme)).unwrap();
        assert_eq!(spans, corpus[0].spans);
    }

    #[test]
    fn same_seed_same_report() {
        let corpus = tiny();
        let cfg = TrainConfig {
            epochs: 4,
            ..small(Scheme::CopyOnly)
        };
        let (_, a) = train(&corpus, &corpus, &cfg, None).unwrap();
        let (_, b) = train(&corpus, &corpus, &cfg, None).unwrap();
        assert_eq!(a.epoch_loss, b.epoch_loss);
        assert_eq!(a.evals, b.evals);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("epochs = 3\nscheme = \"copy\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.scheme, Scheme::CopyOnly);
        assert!(TrainConfig::from_toml("epochs = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}
