//! Desk-scale stand-in for a fine-tuned language model.
//!
//! A synthetic four-task corpus and a one-hidden-layer next-token MLP over a
//! one-hot window of the last `W` tokens:
//!
//! ```text
//! x  = concat(onehot(t[-W]), ..., onehot(t[-1]))      (W*|V|)
//! h  = tanh(W1 x)                                      (hidden)
//! p  = softmax(W2 h)                                   (|V|)
//! ```
//!
//! The two weight matrices are exposed as modules `mlp1` and `mlp2`.
//! There are no biases, so every parameter gradient is an outer product of a
//! module input `a` and a pre-activation gradient `delta`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ekfac::{KfacStats, TokenSample};
use crate::error::{Error, Result};
use crate::steering::{Sign, SteeringVector};
use crate::store::{GradientSet, ModuleRegistry};

const SYMBOLS: [&str; 16] = [
    "A", "B", "C", "D", "x0", "x1", "x2", "x3", "x4", "x5", "x6", "x7", "→", "R", "L", "E",
];

/// Vocabulary index of a symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(u8);

impl Token {
    pub const ECHO: Token = Token(0);
    pub const REVERSE: Token = Token(1);
    pub const REFUSE: Token = Token(2);
    pub const LIST: Token = Token(3);
    pub const SEP: Token = Token(12);
    pub const R: Token = Token(13);
    pub const L: Token = Token(14);
    pub const E: Token = Token(15);

    pub fn data(i: usize) -> Token {
        assert!(i < Vocab::N_DATA, "data symbol x{i} out of range");
        Token(4 + i as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_index(i: usize) -> Option<Token> {
        (i < Vocab::SIZE).then_some(Token(i as u8))
    }

    pub fn is_data(self) -> bool {
        (4..12).contains(&self.0)
    }

    /// Index `i` of a data symbol `xi`.
    pub fn data_index(self) -> Option<usize> {
        self.is_data().then(|| self.0 as usize - 4)
    }

    pub fn symbol(self) -> &'static str {
        SYMBOLS[self.index()]
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Token> {
        let s = if s == "->" { "→" } else { s };
        SYMBOLS
            .iter()
            .position(|&sym| sym == s)
            .map(|i| Token(i as u8))
            .ok_or_else(|| Error::OutOfVocabulary(s.to_string()))
    }
}

/// The fixed toy vocabulary: task markers, data symbols, separator, and the
/// refusal/list/end tokens.
pub struct Vocab;

impl Vocab {
    pub const SIZE: usize = SYMBOLS.len();
    pub const N_DATA: usize = 8;

    pub fn tokens() -> impl Iterator<Item = Token> {
        (0..Self::SIZE).map(|i| Token(i as u8))
    }
}

pub fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    s.split_whitespace().map(Token::from_str).collect()
}

pub fn format_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.symbol())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Echo,
    Reverse,
    Refuse,
    List,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Echo, Task::Reverse, Task::Refuse, Task::List];

    pub fn marker(self) -> Token {
        match self {
            Task::Echo => Token::ECHO,
            Task::Reverse => Token::REVERSE,
            Task::Refuse => Token::REFUSE,
            Task::List => Token::LIST,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Echo => "echo",
            Task::Reverse => "reverse",
            Task::Refuse => "refuse",
            Task::List => "list",
        }
    }

    /// Builds a prompt for this task from random data symbols.
    pub fn sample_prompt<R: Rng>(self, rng: &mut R) -> Vec<Token> {
        let mut prompt = vec![self.marker()];
        match self {
            Task::List => {
                let n = rng.random_range(2..=5);
                prompt.push(Token::data(n));
            }
            _ => {
                let len = rng.random_range(PAYLOAD_MIN..=PAYLOAD_MAX);
                for _ in 0..len {
                    prompt.push(Token::data(rng.random_range(0..Vocab::N_DATA)));
                }
            }
        }
        prompt.push(Token::SEP);
        prompt
    }

    /// The correct response for a prompt of this task.
    pub fn respond(self, prompt: &[Token]) -> Vec<Token> {
        let payload = payload(prompt);
        let mut out = match self {
            Task::Echo => payload,
            Task::Reverse => payload.into_iter().rev().collect(),
            Task::Refuse => vec![Token::R],
            Task::List => {
                let n = payload.first().and_then(|t| t.data_index()).unwrap_or(0);
                vec![Token::L; n]
            }
        };
        out.push(Token::E);
        out
    }

    pub fn from_marker(t: Token) -> Option<Task> {
        Task::ALL.into_iter().find(|task| task.marker() == t)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown task {s:?}")))
    }
}

const PAYLOAD_MIN: usize = 1;
const PAYLOAD_MAX: usize = 3;

/// Data symbols of a prompt, in order.
pub fn payload(prompt: &[Token]) -> Vec<Token> {
    prompt.iter().copied().filter(|t| t.is_data()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub doc_id: String,
    pub task: Task,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

impl SyntheticDoc {
    /// Concatenated prompt and response.
    pub fn sequence(&self) -> Vec<Token> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.response);
        seq
    }
}

/// `4 * per_task_count` documents, grouped by task, deterministic in `seed`.
pub fn generate_corpus(seed: u64, per_task_count: usize) -> Vec<SyntheticDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(4 * per_task_count);
    for task in Task::ALL {
        for i in 0..per_task_count {
            let prompt = task.sample_prompt(&mut rng);
            let response = task.respond(&prompt);
            docs.push(SyntheticDoc {
                doc_id: format!("{}-{:04}", task.name(), i),
                task,
                prompt,
                response,
            });
        }
    }
    docs
}

/// One document per line: `doc_id<TAB>task<TAB>prompt<TAB>response`, tokens
/// space separated.
pub fn write_corpus(path: &Path, docs: &[SyntheticDoc]) -> Result<()> {
    let mut text = String::new();
    for d in docs {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            d.doc_id,
            d.task,
            format_tokens(&d.prompt),
            format_tokens(&d.response)
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<SyntheticDoc>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "{}:{}: expected 4 tab-separated fields, found {}",
                    path.display(),
                    n + 1,
                    fields.len()
                )));
            }
            Ok(SyntheticDoc {
                doc_id: fields[0].to_string(),
                task: fields[1].parse()?,
                prompt: parse_tokens(fields[2])?,
                response: parse_tokens(fields[3])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            learning_rate: 0.1,
            batch_size: 32,
            hidden: 16,
            window: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size < 1 || self.hidden < 1 || self.window < 1 {
            return Err(Error::Config(
                "batch_size, hidden and window must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub window: usize,
    pub hidden: usize,
    /// `hidden x (window * |V|)`
    pub w1: Array2<f64>,
    /// `|V| x hidden`
    pub w2: Array2<f64>,
}

/// Activations of one forward pass at one position.
struct Forward {
    active: Vec<usize>,
    hidden: Array1<f64>,
    probs: Array1<f64>,
}

impl ToyModelParams {
    pub fn init(window: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_dim = window * Vocab::SIZE;
        let n1 = Normal::new(0.0, 1.0 / (window as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, 0.01).unwrap();
        let w1 = Array2::from_shape_simple_fn((hidden, in_dim), || n1.sample(&mut rng));
        let w2 = Array2::from_shape_simple_fn((Vocab::SIZE, hidden), || n2.sample(&mut rng));
        ToyModelParams {
            window,
            hidden,
            w1,
            w2,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.window * Vocab::SIZE
    }

    pub fn registry(&self) -> ModuleRegistry {
        ModuleRegistry::from_shapes([
            ("mlp1", self.hidden, self.in_dim()),
            ("mlp2", Vocab::SIZE, self.hidden),
        ])
        .expect("toy registry is valid")
    }

    pub fn d(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    /// Parameters laid out per [`Self::registry`].
    pub fn flatten(&self) -> Array1<f64> {
        self.w1.iter().chain(self.w2.iter()).copied().collect()
    }

    pub fn from_flat(&self, flat: ArrayView1<'_, f64>) -> Result<Self> {
        if flat.len() != self.d() {
            return Err(Error::Registry(format!(
                "flat vector has length {} but model has d = {}",
                flat.len(),
                self.d()
            )));
        }
        let n1 = self.w1.len();
        let flat = flat.to_vec();
        Ok(ToyModelParams {
            window: self.window,
            hidden: self.hidden,
            w1: Array2::from_shape_vec(self.w1.raw_dim(), flat[..n1].to_vec()).unwrap(),
            w2: Array2::from_shape_vec(self.w2.raw_dim(), flat[n1..].to_vec()).unwrap(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(self.w2.iter()).all(|v| v.is_finite())
    }

    /// Indices of the active one-hot inputs for predicting position `t`.
    fn context(&self, seq: &[Token], t: usize) -> Vec<usize> {
        let w = self.window;
        (0..w)
            .filter_map(|slot| {
                let pos = t as isize - w as isize + slot as isize;
                (pos >= 0).then(|| slot * Vocab::SIZE + seq[pos as usize].index())
            })
            .collect()
    }

    fn forward(&self, active: Vec<usize>) -> Forward {
        let mut z = Array1::<f64>::zeros(self.hidden);
        for &j in &active {
            z += &self.w1.column(j);
        }
        let hidden = z.mapv(f64::tanh);
        let logits = self.w2.dot(&hidden);
        Forward {
            active,
            hidden,
            probs: softmax(logits.view()),
        }
    }

    pub fn input_vector(&self, active: &[usize]) -> Array1<f64> {
        let mut x = Array1::zeros(self.in_dim());
        for &j in active {
            x[j] = 1.0;
        }
        x
    }

    fn check_vocab(doc: &SyntheticDoc) -> Result<()> {
        // Token is a closed newtype, but a deserialized doc could carry a
        // raw index past the vocabulary.
        for t in doc.prompt.iter().chain(&doc.response) {
            if t.index() >= Vocab::SIZE {
                return Err(Error::OutOfVocabulary(format!("index {}", t.index())));
            }
        }
        Ok(())
    }

    /// Visits every response-token position of `doc` with its forward pass
    /// and the gradient of the token loss at both pre-activations.
    fn for_each_target<F>(&self, doc: &SyntheticDoc, mut f: F)
    where
        F: FnMut(&Forward, &Array1<f64>, &Array1<f64>, f64),
    {
        let seq = doc.sequence();
        for t in doc.prompt.len()..seq.len() {
            let fw = self.forward(self.context(&seq, t));
            let target = seq[t].index();
            let loss = -fw.probs[target].ln();
            let mut delta2 = fw.probs.clone();
            delta2[target] -= 1.0;
            let back = self.w2.t().dot(&delta2);
            let delta1 = &back * &fw.hidden.mapv(|h| 1.0 - h * h);
            f(&fw, &delta1, &delta2, loss);
        }
    }

    /// Summed response-token cross-entropy of one document.
    pub fn doc_loss(&self, doc: &SyntheticDoc) -> f64 {
        let mut total = 0.0;
        self.for_each_target(doc, |_, _, _, loss| total += loss);
        total
    }

    /// Mean response-token loss over a corpus.
    pub fn mean_token_loss(&self, docs: &[SyntheticDoc]) -> f64 {
        let (sum, count) = docs.iter().fold((0.0, 0usize), |(s, c), d| {
            (s + self.doc_loss(d), c + d.response.len())
        });
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Accumulates the summed-loss gradient of `doc` into `(g1, g2)`, returns
    /// the summed loss and the number of target tokens.
    fn accumulate_gradient(
        &self,
        doc: &SyntheticDoc,
        g1: &mut Array2<f64>,
        g2: &mut Array2<f64>,
    ) -> (f64, usize) {
        let mut loss_sum = 0.0;
        let mut count = 0;
        self.for_each_target(doc, |fw, delta1, delta2, loss| {
            for &j in &fw.active {
                let mut col = g1.column_mut(j);
                col += delta1;
            }
            for (i, &d2) in delta2.iter().enumerate() {
                let mut row = g2.row_mut(i);
                row.scaled_add(d2, &fw.hidden);
            }
            loss_sum += loss;
            count += 1;
        });
        (loss_sum, count)
    }
}

fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean token loss of each mini-batch, before its update.
    pub curve: Vec<f64>,
}

/// Mini-batch SGD on mean response-token cross-entropy.
///
/// Batches are drawn from a reshuffled pass over the corpus; everything is
/// driven by `config.seed`.
pub fn train(docs: &[SyntheticDoc], config: &TrainConfig) -> Result<(ToyModelParams, TrainReport)> {
    config.validate()?;
    if docs.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    for d in docs {
        ToyModelParams::check_vocab(d)?;
    }
    let mut params = ToyModelParams::init(config.window, config.hidden, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let initial_loss = params.mean_token_loss(docs);

    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut g1 = Array2::zeros(params.w1.raw_dim());
        let mut g2 = Array2::zeros(params.w2.raw_dim());
        let mut loss_sum = 0.0;
        let mut count = 0;
        for _ in 0..config.batch_size.min(docs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (l, c) = params.accumulate_gradient(&docs[order[cursor]], &mut g1, &mut g2);
            cursor += 1;
            loss_sum += l;
            count += c;
        }
        if count == 0 {
            curve.push(0.0);
            continue;
        }
        let loss = loss_sum / count as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.push(loss);
        let lr = config.learning_rate / count as f64;
        params.w1.scaled_add(-lr, &g1);
        params.w2.scaled_add(-lr, &g2);
    }
    let final_loss = params.mean_token_loss(docs);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: config.steps,
            loss: final_loss,
        });
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            final_loss,
            curve,
        },
    ))
}

/// Gradient of the summed response-token loss of `doc`, laid out per the
/// model registry.
pub fn per_document_gradient(params: &ToyModelParams, doc: &SyntheticDoc) -> Result<Array1<f64>> {
    ToyModelParams::check_vocab(doc)?;
    let mut g1 = Array2::zeros(params.w1.raw_dim());
    let mut g2 = Array2::zeros(params.w2.raw_dim());
    params.accumulate_gradient(doc, &mut g1, &mut g2);
    Ok(g1.iter().chain(g2.iter()).copied().collect())
}

/// Per-document gradients for a whole corpus as a [`GradientSet`].
pub fn gradient_set(params: &ToyModelParams, docs: &[SyntheticDoc]) -> Result<GradientSet> {
    let rows: Vec<Array1<f64>> = docs
        .par_iter()
        .map(|d| per_document_gradient(params, d))
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((docs.len(), params.d()));
    for (mut dst, row) in values.axis_iter_mut(Axis(0)).zip(&rows) {
        dst.assign(row);
    }
    GradientSet::new(
        params.registry(),
        values,
        docs.iter().map(|d| d.doc_id.clone()).collect(),
    )
}

/// Module inputs and pre-activation gradients at every response-token
/// position of the corpus, in corpus order.
pub fn token_samples(params: &ToyModelParams, docs: &[SyntheticDoc]) -> Result<Vec<TokenSample>> {
    let mut out = Vec::new();
    for doc in docs {
        ToyModelParams::check_vocab(doc)?;
        params.for_each_target(doc, |fw, delta1, delta2, _| {
            out.push(TokenSample {
                inputs: vec![params.input_vector(&fw.active), fw.hidden.clone()],
                grads: vec![delta1.clone(), delta2.clone()],
            });
        });
    }
    Ok(out)
}

/// Token-averaged KFAC statistics `A = E[a aᵀ]`, `S = E[δ δᵀ]` per module.
pub fn collect_kfac_stats(params: &ToyModelParams, docs: &[SyntheticDoc]) -> Result<KfacStats> {
    if docs.is_empty() {
        return Err(Error::Empty("corpus for KFAC statistics".into()));
    }
    let samples = token_samples(params, docs)?;
    KfacStats::from_samples(params.registry(), &samples)
}

/// Greedy decoding from `prompt` until `E` or `max_len` tokens.
///
/// Returns only the generated tokens. Ties in the argmax go to the lowest
/// token index.
pub fn forward_generate(params: &ToyModelParams, prompt: &[Token], max_len: usize) -> Vec<Token> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let fw = params.forward(params.context(&seq, seq.len()));
        let mut best = 0;
        for (i, &p) in fw.probs.iter().enumerate() {
            if p > fw.probs[best] {
                best = i;
            }
        }
        let tok = Token(best as u8);
        seq.push(tok);
        out.push(tok);
        if tok == Token::E {
            break;
        }
    }
    out
}

/// `θ + sign * scale * v`; the input parameters are left untouched.
pub fn apply_steering(
    params: &ToyModelParams,
    v: &SteeringVector,
    scale: f64,
    sign: Sign,
) -> Result<ToyModelParams> {
    let registry = params.registry();
    if v.registry_fingerprint != registry.fingerprint() || v.values.len() != registry.d {
        return Err(Error::Registry(format!(
            "steering vector (d = {}) does not match model registry (d = {})",
            v.values.len(),
            registry.d
        )));
    }
    let mut flat = params.flatten();
    flat.scaled_add(sign.factor() * scale, &v.values);
    params.from_flat(flat.view())
}
