//! The transducer network.
//!
//! A stacked bidirectional LSTM encodes the sentence into states `e_i ∈ R^D`
//! (each direction contributes `D/2`). A stacked LSTM decoder of width `D`
//! consumes, at every step, either a learned start vector, an encoder state
//! (after a pointer or CopyNext) or a label embedding (after a label). Its
//! top state `d_t` scores the three decision kinds:
//!
//! ```text
//! s_i = e_i · d_t        (pointer to token i)
//! l   = W_L d_t          (labels, EOS included)
//! c   = w_C · d_t        (CopyNext)
//! y_t = softmax([s; l; c])
//! ```
//!
//! Training minimizes `Σ_t -ln y_t[gold_t]` with exact reverse-mode
//! gradients computed by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::automaton::{AutomatonState, DecisionMask};
use crate::corpus::{LabelSet, Sentence, Vocab};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_sum_exp, softmax, Matrix};
use crate::linearize::{Decision, Scheme, TargetSequence};
use crate::lstm::{LstmCell, LstmState, StepCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stacked layers in both encoder and decoder.
    pub layers: usize,
    /// Encoder output / decoder width `D`; each encoder direction gets `D/2`.
    pub hidden: usize,
    /// Input vector dimension `E`.
    pub input_dim: usize,
    /// Label count including EOS.
    pub num_labels: usize,
    /// Rows of the learned token embedding table; `None` means the model
    /// ingests precomputed vectors.
    pub vocab_size: Option<usize>,
    pub scheme: Scheme,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden size must be positive and even, got {}",
                self.hidden
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if self.num_labels < 1 {
            return Err(Error::Config("label set must contain EOS".into()));
        }
        if self.vocab_size == Some(0) {
            return Err(Error::Config("vocabulary must contain UNK".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

/// All learnable arrays. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerParams {
    pub token_embeddings: Option<Matrix>,
    pub encoder: Vec<BiLayer>,
    pub decoder: Vec<LstmCell>,
    /// `|L| × D`, decoder inputs after a label.
    pub label_embeddings: Matrix,
    /// `|L| × D`, rows are the columns of `W_L`.
    pub label_head: Matrix,
    /// `1 × D`
    pub copy_head: Matrix,
    /// `1 × D`, decoder input at t = 0.
    pub start: Matrix,
}

impl TransducerParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let h = d / 2;
        let encoder = (0..cfg.layers)
            .map(|j| {
                let input = if j == 0 { cfg.input_dim } else { d };
                BiLayer {
                    fwd: LstmCell::zeros(input, h),
                    bwd: LstmCell::zeros(input, h),
                }
            })
            .collect();
        TransducerParams {
            token_embeddings: cfg.vocab_size.map(|v| Matrix::zeros(v, cfg.input_dim)),
            encoder,
            decoder: (0..cfg.layers).map(|_| LstmCell::zeros(d, d)).collect(),
            label_embeddings: Matrix::zeros(cfg.num_labels, d),
            label_head: Matrix::zeros(cfg.num_labels, d),
            copy_head: Matrix::zeros(1, d),
            start: Matrix::zeros(1, d),
        }
    }

    /// Recurrent weights ~ U(-0.1, 0.1), biases 0, embeddings and heads
    /// ~ N(0, 0.02).
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let uniform = Uniform::new_inclusive(-0.1, 0.1).expect("valid range");
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        for (name, m) in p.arrays_mut() {
            if name.ends_with(".bias") {
                continue;
            }
            if name.ends_with(".w_ih") || name.ends_with(".w_hh") {
                m.data.iter_mut().for_each(|v| *v = uniform.sample(rng));
            } else {
                m.data.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
        p
    }

    pub fn layers(&self) -> usize {
        self.decoder.len()
    }

    pub fn hidden(&self) -> usize {
        self.start.cols
    }

    pub fn num_labels(&self) -> usize {
        self.label_head.rows
    }

    /// Named arrays in a fixed order (the checkpoint order).
    pub fn arrays(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(t) = &self.token_embeddings {
            out.push(("token_embeddings".to_string(), t));
        }
        for (j, layer) in self.encoder.iter().enumerate() {
            for (dir, cell) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                out.push((format!("encoder.{j}.{dir}.w_ih"), &cell.w_ih));
                out.push((format!("encoder.{j}.{dir}.w_hh"), &cell.w_hh));
                out.push((format!("encoder.{j}.{dir}.bias"), &cell.bias));
            }
        }
        for (j, cell) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{j}.w_ih"), &cell.w_ih));
            out.push((format!("decoder.{j}.w_hh"), &cell.w_hh));
            out.push((format!("decoder.{j}.bias"), &cell.bias));
        }
        out.push(("label_embeddings".into(), &self.label_embeddings));
        out.push(("label_head".into(), &self.label_head));
        out.push(("copy_head".into(), &self.copy_head));
        out.push(("start".into(), &self.start));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.token_embeddings {
            out.push(("token_embeddings".to_string(), t));
        }
        for (j, layer) in self.encoder.iter_mut().enumerate() {
            for (dir, cell) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                out.push((format!("encoder.{j}.{dir}.w_ih"), &mut cell.w_ih));
                out.push((format!("encoder.{j}.{dir}.w_hh"), &mut cell.w_hh));
                out.push((format!("encoder.{j}.{dir}.bias"), &mut cell.bias));
            }
        }
        for (j, cell) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{j}.w_ih"), &mut cell.w_ih));
            out.push((format!("decoder.{j}.w_hh"), &mut cell.w_hh));
            out.push((format!("decoder.{j}.bias"), &mut cell.bias));
        }
        out.push(("label_embeddings".into(), &mut self.label_embeddings));
        out.push(("label_head".into(), &mut self.label_head));
        out.push(("copy_head".into(), &mut self.copy_head));
        out.push(("start".into(), &mut self.start));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.arrays_mut() {
            m.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn add_assign(&mut self, other: &TransducerParams) {
        for ((_, a), (_, b)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, m) in self.arrays_mut() {
            m.scale(k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.arrays()
            .iter()
            .map(|(_, m)| m.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, m)| m.data.iter().all(|v| v.is_finite()))
    }

    /// Coordinate `k` in the flattened checkpoint order.
    pub fn get_flat(&self, mut k: usize) -> f64 {
        for (_, m) in self.arrays() {
            if k < m.len() {
                return m.data[k];
            }
            k -= m.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut k: usize, v: f64) {
        for (_, m) in self.arrays_mut() {
            if k < m.len() {
                m.data[k] = v;
                return;
            }
            k -= m.len();
        }
        panic!("flat index out of range")
    }

    /// Name of the array holding flat coordinate `k`, plus the offset in it.
    pub fn locate_flat(&self, mut k: usize) -> (String, usize) {
        for (name, m) in self.arrays() {
            if k < m.len() {
                return (name, k);
            }
            k -= m.len();
        }
        panic!("flat index out of range")
    }
}

/// What the first encoder layer consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    /// Rows of the token embedding table.
    Tokens(Vec<usize>),
    /// Precomputed vectors, one per token.
    Vectors(Vec<Vec<f64>>),
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        match self {
            EncoderInput::Tokens(t) => t.len(),
            EncoderInput::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, params: &TransducerParams) -> Result<Matrix> {
        match self {
            EncoderInput::Tokens(ids) => {
                let table = params.token_embeddings.as_ref().ok_or_else(|| {
                    Error::Config("model has no token embeddings; supply vectors".into())
                })?;
                let mut m = Matrix::zeros(ids.len(), table.cols);
                for (i, &id) in ids.iter().enumerate() {
                    if id >= table.rows {
                        return Err(Error::Config(format!(
                            "token id {id} outside embedding table of {} rows",
                            table.rows
                        )));
                    }
                    m.row_mut(i).copy_from_slice(table.row(id));
                }
                Ok(m)
            }
            EncoderInput::Vectors(vs) => {
                let expected = params.encoder[0].fwd.input();
                if let Some(bad) = vs.iter().find(|v| v.len() != expected) {
                    return Err(Error::Config(format!(
                        "input vectors have dimension {} but the first encoder layer expects {expected}",
                        bad.len()
                    )));
                }
                Ok(Matrix::from_rows(vs))
            }
        }
    }
}

/// Last-layer encoder outputs, one `D`-vector per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub e: Matrix,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.e.rows
    }

    pub fn is_empty(&self) -> bool {
        self.e.rows == 0
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.e.row(i)
    }
}

fn run_layer(layer: &BiLayer, input: &Matrix, scratch: &mut Vec<f64>) -> Matrix {
    let n = input.rows;
    let h = layer.fwd.hidden();
    let mut out = Matrix::zeros(n, 2 * h);
    let mut s = LstmState::zeros(h);
    for i in 0..n {
        layer.fwd.step(input.row(i), &mut s, scratch);
        out.row_mut(i)[..h].copy_from_slice(&s.h);
    }
    let mut s = LstmState::zeros(h);
    for i in (0..n).rev() {
        layer.bwd.step(input.row(i), &mut s, scratch);
        out.row_mut(i)[h..].copy_from_slice(&s.h);
    }
    out
}

pub fn encode(input: &EncoderInput, params: &TransducerParams) -> Result<EncoderStates> {
    if input.is_empty() {
        return Err(Error::Config("cannot encode an empty sentence".into()));
    }
    let mut x = input.rows(params)?;
    let mut scratch = Vec::new();
    for layer in &params.encoder {
        x = run_layer(layer, &x, &mut scratch);
    }
    Ok(EncoderStates { e: x })
}

/// Where a decoder input vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSource {
    Start,
    Encoder(usize),
    Label(usize),
}

/// Resolves the decoder input following `prev`. `frontier` is the encoder
/// index fed at the previous step and is required after a CopyNext.
pub fn input_source(
    prev: Option<Decision>,
    frontier: Option<usize>,
    scheme: Scheme,
    n: usize,
) -> Result<InputSource> {
    match prev {
        None => Ok(InputSource::Start),
        Some(Decision::Point(i)) if i < n => Ok(InputSource::Encoder(i)),
        Some(Decision::Point(i)) => Err(Error::Config(format!(
            "pointer {i} outside a {n}-token sentence"
        ))),
        Some(Decision::Label(l)) => Ok(InputSource::Label(l)),
        Some(Decision::CopyNext) => frontier
            .and_then(|f| scheme.copy_target(f, n))
            .map(InputSource::Encoder)
            .ok_or_else(|| Error::Transition {
                decision: "CN".into(),
                state: format!("frontier {frontier:?} of {n} tokens under {scheme}"),
            }),
    }
}

pub fn source_vector<'a>(
    src: InputSource,
    enc: &'a EncoderStates,
    params: &'a TransducerParams,
) -> &'a [f64] {
    match src {
        InputSource::Start => &params.start.data,
        InputSource::Encoder(i) => enc.state(i),
        InputSource::Label(l) => params.label_embeddings.row(l),
    }
}

pub fn decoder_input(
    prev: Option<Decision>,
    frontier: Option<usize>,
    scheme: Scheme,
    enc: &EncoderStates,
    params: &TransducerParams,
) -> Result<Vec<f64>> {
    let src = input_source(prev, frontier, scheme, enc.len())?;
    Ok(source_vector(src, enc, params).to_vec())
}

/// Encoder index fed to the decoder after `d`, given the previous one.
pub fn next_frontier(d: Decision, frontier: Option<usize>, scheme: Scheme, n: usize) -> Option<usize> {
    match d {
        Decision::Point(i) => Some(i),
        Decision::CopyNext => frontier.and_then(|f| scheme.copy_target(f, n)),
        Decision::Label(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
}

impl DecoderState {
    pub fn initial(params: &TransducerParams) -> Self {
        DecoderState {
            layers: (0..params.layers())
                .map(|_| LstmState::zeros(params.hidden()))
                .collect(),
        }
    }

    /// `d_t`, the top-layer output.
    pub fn top(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").h
    }

    pub fn advance(&mut self, input: &[f64], params: &TransducerParams, scratch: &mut Vec<f64>) {
        let mut x = input.to_vec();
        for (cell, s) in params.decoder.iter().zip(self.layers.iter_mut()) {
            cell.step(&x, s, scratch);
            x.clone_from(&s.h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLogitsAndProbs {
    pub pointer: Vec<f64>,
    pub label: Vec<f64>,
    pub copy: f64,
    /// softmax over `[pointer; label; copy]`
    pub probs: Vec<f64>,
}

impl DecisionLogitsAndProbs {
    pub fn logit(&self, d: Decision) -> f64 {
        match d {
            Decision::Point(i) => self.pointer[i],
            Decision::Label(l) => self.label[l],
            Decision::CopyNext => self.copy,
        }
    }

    pub fn logits(&self) -> Vec<f64> {
        let mut z = self.pointer.clone();
        z.extend_from_slice(&self.label);
        z.push(self.copy);
        z
    }

    pub fn prob(&self, d: Decision) -> f64 {
        self.probs[d.encode(self.pointer.len(), self.label.len())]
    }
}

pub fn logit_of(d: Decision, dt: &[f64], enc: &EncoderStates, params: &TransducerParams) -> f64 {
    match d {
        Decision::Point(i) => dot(enc.state(i), dt),
        Decision::Label(l) => dot(params.label_head.row(l), dt),
        Decision::CopyNext => dot(&params.copy_head.data, dt),
    }
}

pub fn score_all(dt: &[f64], enc: &EncoderStates, params: &TransducerParams) -> DecisionLogitsAndProbs {
    let mut pointer = vec![0.0; enc.len()];
    enc.e.gemv_acc(dt, &mut pointer);
    let mut label = vec![0.0; params.num_labels()];
    params.label_head.gemv_acc(dt, &mut label);
    let copy = dot(&params.copy_head.data, dt);
    let mut all = pointer.clone();
    all.extend_from_slice(&label);
    all.push(copy);
    let probs = softmax(&all);
    DecisionLogitsAndProbs {
        pointer,
        label,
        copy,
        probs,
    }
}

/// Advances the decoder by one input and scores every decision.
pub fn decode_step(
    state: &DecoderState,
    input: &[f64],
    enc: &EncoderStates,
    params: &TransducerParams,
) -> (DecoderState, DecisionLogitsAndProbs) {
    let mut next = state.clone();
    let mut scratch = Vec::new();
    next.advance(input, params, &mut scratch);
    let scores = score_all(next.top(), enc, params);
    (next, scores)
}

/// `ln(y[d] / Σ_{legal k} y[k])`, computed from logits for stability.
pub fn masked_log_prob(
    probs: &DecisionLogitsAndProbs,
    mask: &DecisionMask,
    d: Decision,
) -> Result<f64> {
    if !mask.allows(d) {
        return Err(Error::Transition {
            decision: d.to_string(),
            state: "masked".into(),
        });
    }
    let logits = probs.logits();
    let lse = log_sum_exp(
        logits
            .iter()
            .zip(&mask.legal)
            .filter(|(_, &ok)| ok)
            .map(|(&z, _)| z),
    );
    Ok(probs.logit(d) - lse)
}

/// Logits of the legal decisions only, in increasing decision index.
/// Pointer scores are computed only when some pointer is legal, which keeps
/// in-span steps independent of the sentence length.
pub fn legal_logits(
    state: &AutomatonState,
    dt: &[f64],
    enc: &EncoderStates,
    params: &TransducerParams,
    out: &mut Vec<(Decision, f64)>,
) {
    let n = enc.len();
    let num_labels = params.num_labels();
    out.clear();
    match state.phase {
        crate::automaton::Phase::Finished => {}
        crate::automaton::Phase::Boundary => {
            for i in 0..n {
                out.push((Decision::Point(i), dot(enc.state(i), dt)));
            }
            out.push((Decision::EOS, dot(params.label_head.row(0), dt)));
        }
        crate::automaton::Phase::InSpan { frontier } => {
            if state.scheme == Scheme::CopyOnly && frontier + 1 < n {
                let d = Decision::Point(frontier + 1);
                out.push((d, logit_of(d, dt, enc, params)));
            }
            for l in 1..num_labels {
                out.push((Decision::Label(l), dot(params.label_head.row(l), dt)));
            }
            if state.scheme.copy_target(frontier, n).is_some() {
                out.push((Decision::CopyNext, dot(&params.copy_head.data, dt)));
            }
        }
    }
}

/// Per-step forward record kept for the backward pass.
struct DecoderStep {
    source: InputSource,
    caches: Vec<StepCache>,
    dt: Vec<f64>,
    /// softmax minus one-hot of the gold decision
    dlogits: Vec<f64>,
}

struct LayerTape {
    fwd: Vec<StepCache>,
    bwd: Vec<StepCache>,
}

/// Inverted dropout on the first-layer encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

pub struct LossAndGrad {
    pub loss: f64,
    pub steps: usize,
    pub grads: TransducerParams,
}

/// Teacher-forced cross-entropy `Σ_t -ln y_t[gold_t]` and its exact
/// gradient with respect to every parameter.
pub fn sequence_loss(
    input: &EncoderInput,
    gold: &TargetSequence,
    params: &TransducerParams,
    scheme: Scheme,
    dropout: Option<Dropout>,
) -> Result<LossAndGrad> {
    let n = input.len();
    if n == 0 {
        return Err(Error::Config("cannot encode an empty sentence".into()));
    }
    let num_labels = params.num_labels();
    let d = params.hidden();
    let h = d / 2;

    // Encoder forward with tapes.
    let mut x0 = input.rows(params)?;
    let keep = match dropout {
        Some(Dropout { rate, seed }) if rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..x0.len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                .collect();
            for (v, m) in x0.data.iter_mut().zip(&mask) {
                *v *= m;
            }
            Some(mask)
        }
        _ => None,
    };
    let mut tapes = Vec::with_capacity(params.encoder.len());
    let mut x = x0;
    for layer in &params.encoder {
        let mut out = Matrix::zeros(n, d);
        let mut fwd = Vec::with_capacity(n);
        let mut s = LstmState::zeros(h);
        for i in 0..n {
            let (ns, c) = layer.fwd.forward(x.row(i), &s);
            out.row_mut(i)[..h].copy_from_slice(&ns.h);
            fwd.push(c);
            s = ns;
        }
        let mut bwd = Vec::with_capacity(n);
        let mut s = LstmState::zeros(h);
        for i in (0..n).rev() {
            let (ns, c) = layer.bwd.forward(x.row(i), &s);
            out.row_mut(i)[h..].copy_from_slice(&ns.h);
            bwd.push(c);
            s = ns;
        }
        bwd.reverse();
        tapes.push(LayerTape { fwd, bwd });
        x = out;
    }
    let enc = EncoderStates { e: x };

    // Decoder forward.
    let mut loss = 0.0;
    let mut steps = Vec::with_capacity(gold.len());
    let mut state: Vec<LstmState> = (0..params.layers()).map(|_| LstmState::zeros(d)).collect();
    let mut source = InputSource::Start;
    let mut frontier = None;
    for (t, &g) in gold.decisions.iter().enumerate() {
        let mut layer_in = source_vector(source, &enc, params).to_vec();
        let mut caches = Vec::with_capacity(params.layers());
        for (cell, s) in params.decoder.iter().zip(state.iter_mut()) {
            let (ns, c) = cell.forward(&layer_in, s);
            caches.push(c);
            *s = ns;
            layer_in.clone_from(&s.h);
        }
        let dt = layer_in;
        let scores = score_all(&dt, &enc, params);
        let gi = g.encode(n, num_labels);
        if gi >= scores.probs.len() {
            return Err(Error::Structure {
                step: t,
                message: format!("gold decision {g} outside the decision space"),
            });
        }
        let logits = scores.logits();
        let step_loss = log_sum_exp(logits.iter().copied()) - logits[gi];
        if !step_loss.is_finite() {
            return Err(Error::Numeric {
                context: format!("decoder step {t}"),
            });
        }
        loss += step_loss;
        let mut dlogits = scores.probs;
        dlogits[gi] -= 1.0;
        steps.push(DecoderStep {
            source,
            caches,
            dt,
            dlogits,
        });
        if t + 1 < gold.len() {
            source = input_source(Some(g), frontier, scheme, n)?;
            frontier = next_frontier(g, frontier, scheme, n);
        }
    }

    // Decoder backward (through time and layers).
    let mut grads = params.zeros_like();
    let mut d_enc = Matrix::zeros(n, d);
    let layers = params.layers();
    let mut dh_next = vec![vec![0.0; d]; layers];
    let mut dc_next = vec![vec![0.0; d]; layers];
    let mut dh_prev = vec![0.0; d];
    let mut dc_prev = vec![0.0; d];
    for step in steps.iter().rev() {
        let (dz_ptr, rest) = step.dlogits.split_at(n);
        let (dz_lab, dz_copy) = rest.split_at(num_labels);
        let dz_copy = dz_copy[0];

        let mut dd = vec![0.0; d];
        enc.e.gemv_t_acc(dz_ptr, &mut dd);
        d_enc.ger(dz_ptr, &step.dt);
        params.label_head.gemv_t_acc(dz_lab, &mut dd);
        grads.label_head.ger(dz_lab, &step.dt);
        axpy(dz_copy, &params.copy_head.data, &mut dd);
        axpy(dz_copy, &step.dt, &mut grads.copy_head.data);

        let mut dh_in = dd;
        for k in (0..layers).rev() {
            for (a, b) in dh_in.iter_mut().zip(&dh_next[k]) {
                *a += b;
            }
            let mut dx = vec![0.0; params.decoder[k].input()];
            params.decoder[k].backward(
                &step.caches[k],
                &dh_in,
                &dc_next[k],
                &mut grads.decoder[k],
                &mut dx,
                &mut dh_prev,
                &mut dc_prev,
            );
            dh_next[k].copy_from_slice(&dh_prev);
            dc_next[k].copy_from_slice(&dc_prev);
            dh_in = dx;
        }
        match step.source {
            InputSource::Start => axpy(1.0, &dh_in, &mut grads.start.data),
            InputSource::Encoder(i) => axpy(1.0, &dh_in, d_enc.row_mut(i)),
            InputSource::Label(l) => axpy(1.0, &dh_in, grads.label_embeddings.row_mut(l)),
        }
    }

    // Encoder backward, top layer first.
    let mut d_out = d_enc;
    for (j, tape) in tapes.iter().enumerate().rev() {
        let layer = &params.encoder[j];
        let mut d_in = Matrix::zeros(n, layer.fwd.input());
        let mut dh = vec![0.0; h];
        let mut dhn = vec![0.0; h];
        let mut dcn = vec![0.0; h];
        for i in (0..n).rev() {
            for (a, (b, c)) in dh.iter_mut().zip(d_out.row(i)[..h].iter().zip(&dhn)) {
                *a = b + c;
            }
            let dc = dcn.clone();
            layer.fwd.backward(
                &tape.fwd[i],
                &dh,
                &dc,
                &mut grads.encoder[j].fwd,
                d_in.row_mut(i),
                &mut dhn,
                &mut dcn,
            );
        }
        dhn.fill(0.0);
        dcn.fill(0.0);
        for i in 0..n {
            for (a, (b, c)) in dh.iter_mut().zip(d_out.row(i)[h..].iter().zip(&dhn)) {
                *a = b + c;
            }
            let dc = dcn.clone();
            layer.bwd.backward(
                &tape.bwd[i],
                &dh,
                &dc,
                &mut grads.encoder[j].bwd,
                d_in.row_mut(i),
                &mut dhn,
                &mut dcn,
            );
        }
        d_out = d_in;
    }
    if let (EncoderInput::Tokens(ids), Some(table)) = (input, grads.token_embeddings.as_mut()) {
        for (i, &id) in ids.iter().enumerate() {
            let row = d_out.row_mut(i);
            if let Some(mask) = &keep {
                let cols = row.len();
                for (v, m) in row.iter_mut().zip(&mask[i * cols..(i + 1) * cols]) {
                    *v *= m;
                }
            }
            axpy(1.0, row, table.row_mut(id));
        }
    }

    Ok(LossAndGrad {
        loss,
        steps: gold.len(),
        grads,
    })
}

/// Loss only, via the same forward arithmetic as inference. Used as the
/// independent side of finite-difference checks.
pub fn sequence_nll(
    input: &EncoderInput,
    gold: &TargetSequence,
    params: &TransducerParams,
    scheme: Scheme,
) -> Result<f64> {
    let enc = encode(input, params)?;
    let n = enc.len();
    let mut state = DecoderState::initial(params);
    let mut scratch = Vec::new();
    let mut loss = 0.0;
    let mut src = InputSource::Start;
    let mut frontier = None;
    for (t, &g) in gold.decisions.iter().enumerate() {
        let input_vec = source_vector(src, &enc, params).to_vec();
        state.advance(&input_vec, params, &mut scratch);
        let scores = score_all(state.top(), &enc, params);
        let logits = scores.logits();
        loss += log_sum_exp(logits.iter().copied()) - logits[g.encode(n, params.num_labels())];
        if t + 1 < gold.len() {
            src = input_source(Some(g), frontier, scheme, n)?;
            frontier = next_frontier(g, frontier, scheme, n);
        }
    }
    Ok(loss)
}

/// Parameters plus the vocabularies and settings needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: TransducerParams,
    pub labels: LabelSet,
    pub vocab: Option<Vocab>,
}

impl Model {
    pub fn new(config: ModelConfig, labels: LabelSet, vocab: Option<Vocab>) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.num_labels {
            return Err(Error::Config(format!(
                "config declares {} labels, label set has {}",
                config.num_labels,
                labels.len()
            )));
        }
        if vocab.as_ref().map(Vocab::len) != config.vocab_size {
            return Err(Error::Config(
                "vocabulary size disagrees with the model configuration".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = TransducerParams::init(&config, &mut rng);
        Ok(Model {
            config,
            params,
            labels,
            vocab,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    /// Encoder input for a sentence: token ids when the model owns an
    /// embedding table, otherwise the sentence's precomputed vectors.
    pub fn input_for(&self, sent: &Sentence) -> Result<EncoderInput> {
        match &self.vocab {
            Some(vocab) => Ok(EncoderInput::Tokens(vocab.ids(&sent.tokens))),
            None => {
                let vectors = sent.vectors.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "sentence {} has no vectors and the model has no token embeddings",
                        sent.id
                    ))
                })?;
                Ok(EncoderInput::Vectors(vectors.clone()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::automaton::initial_state;
    use crate::linalg::sigmoid;

    fn cfg(layers: usize, hidden: usize, input_dim: usize, num_labels: usize) -> ModelConfig {
        ModelConfig {
            layers,
            hidden,
            input_dim,
            num_labels,
            vocab_size: None,
            scheme: Scheme::CopyNextForward,
            seed: 0,
        }
    }

    fn random_params(c: &ModelConfig, seed: u64, scale: f64) -> TransducerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TransducerParams::zeros(c);
        for (_, m) in p.arrays_mut() {
            m.data
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
        }
        p
    }

    fn random_vectors(n: usize, e: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..e).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_network_encodes_to_zero() {
        let c = cfg(2, 6, 3, 2);
        let p = TransducerParams::zeros(&c);
        let enc = encode(&EncoderInput::Vectors(random_vectors(4, 3, 1)), &p).unwrap();
        assert!(enc.e.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_sentence_encodes() {
        let c = cfg(2, 6, 3, 2);
        let p = random_params(&c, 3, 0.5);
        let enc = encode(&EncoderInput::Vectors(random_vectors(1, 3, 2)), &p).unwrap();
        assert_eq!(enc.e.shape(), (1, 6));
    }

    #[test]
    fn encoder_input_dimension_mismatch() {
        let c = cfg(1, 4, 3, 2);
        let p = random_params(&c, 3, 0.5);
        let err = encode(&EncoderInput::Vectors(random_vectors(2, 5, 2)), &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    /// Scalar LSTM cell written directly from the gate equations.
    fn scalar_cell(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = h.len();
        let pre = |row: usize| -> f64 {
            let mut z = cell.bias.data[row];
            for k in 0..x.len() {
                z += cell.w_ih.data[row * x.len() + k] * x[k];
            }
            for k in 0..hd {
                z += cell.w_hh.data[row * hd + k] * h[k];
            }
            z
        };
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for k in 0..hd {
            let i = sigmoid(pre(k));
            let f = sigmoid(pre(hd + k));
            let g = pre(2 * hd + k).tanh();
            let o = sigmoid(pre(3 * hd + k));
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn encoder_matches_scalar_oracle() {
        let c = cfg(1, 4, 3, 2);
        let p = random_params(&c, 11, 0.8);
        let xs = random_vectors(3, 3, 12);
        let enc = encode(&EncoderInput::Vectors(xs.clone()), &p).unwrap();
        let layer = &p.encoder[0];
        let (mut hf, mut cf) = (vec![0.0; 2], vec![0.0; 2]);
        for x in &xs {
            (hf, cf) = scalar_cell(&layer.fwd, x, &hf, &cf);
        }
        let (hb, _) = scalar_cell(&layer.bwd, &xs[2], &[0.0; 2], &[0.0; 2]);
        let want: Vec<f64> = hf.iter().chain(&hb).copied().collect();
        for (a, b) in enc.state(2).iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn decoder_inputs_follow_previous_decision() {
        let c = cfg(1, 4, 3, 3);
        let p = random_params(&c, 5, 0.5);
        let enc = encode(&EncoderInput::Vectors(random_vectors(7, 3, 6)), &p).unwrap();
        let s = Scheme::CopyNextForward;
        assert_eq!(
            decoder_input(Some(Decision::Point(4)), None, s, &enc, &p).unwrap(),
            enc.state(4)
        );
        assert_eq!(
            decoder_input(Some(Decision::CopyNext), Some(4), s, &enc, &p).unwrap(),
            enc.state(5)
        );
        assert_eq!(
            decoder_input(Some(Decision::CopyNext), Some(4), Scheme::CopyPrevBackward, &enc, &p)
                .unwrap(),
            enc.state(3)
        );
        assert_eq!(
            decoder_input(Some(Decision::Label(2)), None, s, &enc, &p).unwrap(),
            p.label_embeddings.row(2)
        );
        assert_eq!(decoder_input(None, None, s, &enc, &p).unwrap(), p.start.data);
        assert!(decoder_input(Some(Decision::CopyNext), Some(6), s, &enc, &p).is_err());
        assert!(decoder_input(Some(Decision::CopyNext), None, s, &enc, &p).is_err());
    }

    #[test]
    fn orthogonal_decoder_state_gives_uniform_distribution() {
        let c = cfg(1, 4, 3, 3);
        let p = TransducerParams::zeros(&c);
        let enc = EncoderStates {
            e: Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]),
        };
        let dt = [0.0, 0.0, 0.7, -0.2];
        let s = score_all(&dt, &enc, &p);
        assert_eq!(s.probs.len(), 2 + 3 + 1);
        for &y in &s.probs {
            assert!((y - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_softmax_oracle() {
        let c = cfg(1, 2, 2, 2);
        let mut p = TransducerParams::zeros(&c);
        p.label_head = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        p.copy_head = Matrix::from_rows(&[vec![0.5, 0.5]]);
        let enc = EncoderStates {
            e: Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]),
        };
        let dt = [0.5, 0.25];
        // logits by hand: s = [1.0, -0.5], l = [0.5, -0.25], c = 0.375
        let z: [f64; 5] = [1.0, -0.5, 0.5, -0.25, 0.375];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let s = score_all(&dt, &enc, &p);
        for k in 0..5 {
            assert!((s.probs[k] - z[k].exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_are_normalized_for_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000 {
            let n = rng.random_range(1..9);
            let l = rng.random_range(1..6);
            let c = cfg(1 + trial % 2, 4, 3, l);
            let p = random_params(&c, trial as u64, 1.0);
            let enc = encode(&EncoderInput::Vectors(random_vectors(n, 3, trial as u64)), &p).unwrap();
            let (_, s) = decode_step(&DecoderState::initial(&p), &p.start.data, &enc, &p);
            assert_eq!(s.probs.len(), n + l + 1);
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.probs.iter().all(|&y| y > 0.0));
        }
    }

    #[test]
    fn masked_log_prob_cases() {
        let c = cfg(1, 4, 3, 3);
        let p = TransducerParams::zeros(&c);
        let enc = EncoderStates { e: Matrix::zeros(6, 4) };
        let s = score_all(&[0.0; 4], &enc, &p);
        let all = DecisionMask::all(6, 3);
        let lp = masked_log_prob(&s, &all, Decision::Point(2)).unwrap();
        assert!((lp - (1.0f64 / 10.0).ln()).abs() < 1e-12);

        let mut four = DecisionMask::all(6, 3);
        four.legal.iter_mut().enumerate().for_each(|(k, b)| *b = k < 4);
        let lp = masked_log_prob(&s, &four, Decision::Point(1)).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
        assert!(masked_log_prob(&s, &four, Decision::CopyNext).is_err());
    }

    #[test]
    fn masked_log_prob_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..200 {
            let c = cfg(1, 4, 3, 3);
            let p = random_params(&c, trial, 2.0);
            let enc = encode(&EncoderInput::Vectors(random_vectors(5, 3, trial)), &p).unwrap();
            let s = score_all(&p.start.data, &enc, &p);
            let mut mask = DecisionMask::all(5, 3);
            mask.legal.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
            let Some(d) = mask.decisions().next() else { continue };
            let z: f64 = mask
                .legal
                .iter()
                .zip(&s.probs)
                .filter(|(ok, _)| **ok)
                .map(|(_, y)| y)
                .sum();
            let want = (s.prob(d) / z).ln();
            let got = masked_log_prob(&s, &mask, d).unwrap();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn legal_logits_agree_with_full_scores() {
        let c = cfg(1, 4, 3, 4);
        let p = random_params(&c, 8, 1.0);
        let enc = encode(&EncoderInput::Vectors(random_vectors(6, 3, 8)), &p).unwrap();
        let dt = p.label_embeddings.row(1).to_vec();
        let full = score_all(&dt, &enc, &p);
        let mut out = Vec::new();
        for scheme in Scheme::ALL {
            let mut states = vec![initial_state(scheme)];
            states.push(states[0].step(Decision::Point(2), 6, 4).unwrap());
            for st in states {
                legal_logits(&st, &dt, &enc, &p, &mut out);
                let mask = st.legal_mask(6, 4);
                let want: Vec<Decision> = mask.decisions().collect();
                let got: Vec<Decision> = out.iter().map(|(d, _)| *d).collect();
                assert_eq!(got, want);
                for (d, z) in &out {
                    assert!((z - full.logit(*d)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_model_loss_is_length_times_log_support() {
        let c = cfg(2, 4, 3, 3);
        let p = TransducerParams::zeros(&c);
        let seq = TargetSequence::new(vec![
            Decision::Point(1),
            Decision::CopyNext,
            Decision::Label(2),
            Decision::EOS,
        ]);
        let input = EncoderInput::Vectors(random_vectors(5, 3, 0));
        let r = sequence_loss(&input, &seq, &p, Scheme::CopyNextForward, None).unwrap();
        let want = 4.0 * ((5 + 3 + 1) as f64).ln();
        assert!((r.loss - want).abs() < 1e-12);
        assert_eq!(r.steps, 4);
    }

    #[test]
    fn confident_model_has_near_zero_loss() {
        // Only the EOS logit is large: the gold [EOS] costs ~0.
        let c = cfg(1, 2, 2, 2);
        let mut p = TransducerParams::zeros(&c);
        p.start = Matrix::from_rows(&[vec![1.0, 1.0]]);
        p.decoder[0].bias.data = vec![0.0, 0.0, 0.0, 0.0, 50.0, 50.0, 50.0, 50.0];
        p.label_head = Matrix::from_rows(&[vec![1000.0, 1000.0], vec![0.0, 0.0]]);
        let input = EncoderInput::Vectors(vec![vec![0.0, 0.0]; 3]);
        let r = sequence_loss(
            &input,
            &TargetSequence::new(vec![Decision::EOS]),
            &p,
            Scheme::CopyNextForward,
            None,
        )
        .unwrap();
        assert!(r.loss < 1e-12, "{}", r.loss);
    }

    #[test]
    fn loss_paths_agree() {
        let c = ModelConfig {
            vocab_size: Some(6),
            ..cfg(2, 6, 3, 3)
        };
        let p = random_params(&c, 21, 0.6);
        let seq = TargetSequence::new(vec![
            Decision::Point(0),
            Decision::CopyNext,
            Decision::Label(1),
            Decision::Point(2),
            Decision::Label(2),
            Decision::EOS,
        ]);
        let input = EncoderInput::Tokens(vec![1, 5, 2, 0]);
        let a = sequence_loss(&input, &seq, &p, Scheme::CopyNextForward, None)
            .unwrap()
            .loss;
        let b = sequence_nll(&input, &seq, &p, Scheme::CopyNextForward).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let c = ModelConfig {
            vocab_size: Some(5),
            ..cfg(2, 4, 3, 3)
        };
        let p = random_params(&c, 7, 0.5);
        let seq = TargetSequence::new(vec![
            Decision::Point(1),
            Decision::CopyNext,
            Decision::Label(2),
            Decision::Point(0),
            Decision::Label(1),
            Decision::EOS,
        ]);
        let input = EncoderInput::Tokens(vec![3, 1, 4]);
        let r = sequence_loss(&input, &seq, &p, Scheme::CopyNextForward, None).unwrap();
        let h = 1e-5;
        let mut q = p.clone();
        for k in 0..p.num_params() {
            let v = p.get_flat(k);
            q.set_flat(k, v + h);
            let lp = sequence_nll(&input, &seq, &q, Scheme::CopyNextForward).unwrap();
            q.set_flat(k, v - h);
            let lm = sequence_nll(&input, &seq, &q, Scheme::CopyNextForward).unwrap();
            q.set_flat(k, v);
            let fd = (lp - lm) / (2.0 * h);
            let an = r.grads.get_flat(k);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            assert!(rel < 1e-4, "{:?}: fd {fd} analytic {an}", p.locate_flat(k));
        }
    }

    #[test]
    fn reversing_input_and_swapping_directions_reverses_outputs() {
        for layers in [1, 2] {
            let c = cfg(layers, 6, 3, 2);
            let p = random_params(&c, 31 + layers as u64, 0.7);
            let xs = random_vectors(5, 3, 32);
            let enc = encode(&EncoderInput::Vectors(xs.clone()), &p).unwrap();

            let mut q = p.clone();
            for (j, layer) in q.encoder.iter_mut().enumerate() {
                std::mem::swap(&mut layer.fwd, &mut layer.bwd);
                if j > 0 {
                    // Upper layers see [bwd; fwd] halves, so swap input columns.
                    for cell in [&mut layer.fwd, &mut layer.bwd] {
                        let w = cell.w_ih.clone();
                        let half = w.cols / 2;
                        cell.w_ih = Matrix::from_fn(w.rows, w.cols, |r, col| {
                            w.row(r)[(col + half) % w.cols]
                        });
                    }
                }
            }
            let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
            let enc_r = encode(&EncoderInput::Vectors(rev), &q).unwrap();
            let n = xs.len();
            for i in 0..n {
                let a = enc.state(i);
                let b = enc_r.state(n - 1 - i);
                let swapped: Vec<f64> = b[3..].iter().chain(&b[..3]).copied().collect();
                for (u, v) in a.iter().zip(&swapped) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn model_rejects_odd_hidden() {
        let bad = cfg(1, 5, 3, 2);
        assert!(bad.validate().is_err());
    }
}
