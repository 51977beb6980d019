//! Label mapping, metrics, training loops with early stopping, multi-seed
//! reports, checkpoint evaluation and the ablation grid.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_rated, split, CorpusError, CorpusSplit, DEFAULT_FRACTIONS};
use crate::dialog::Conversation;
use crate::features::{extract, standardize, Lexicons, StandardizeError, StandardizeStats, N_FEATURES};
use crate::models::{
    EncoderConfig, Example, FlowClassifier, HeadConfig, LinearFitConfig, LinearKind, LinearModel, ModelError,
    ModelFamily, NeuralRater, TbRater,
};
use crate::numeric::checkpoint::{Checkpoint, CheckpointError};
use crate::numeric::{adam_step, AdamConfig, AdamState, Gradients, Graph, Mode, ParamStore, Tensor, TensorError};
use crate::serialize::{serialize_conversation, SerializationConfig, TokenSequence, VocabError, Vocabulary};
use crate::synth::sub_seed;

pub const DEFAULT_SEEDS: [u64; 3] = [13, 42, 77];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("rating {0} outside 1..=5")]
    Rating(u8),
    #[error("label {0} is not 0 or 1")]
    Label(usize),
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("training diverged at epoch {epoch} (seed {seed})")]
    Diverged { epoch: usize, seed: u64 },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bad checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Standardize(#[from] StandardizeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Ratings 1–3 map to 0 (unsatisfied), 4–5 to 1 (satisfied).
pub fn binarize(rating: u8) -> Result<usize, TrainError> {
    match rating {
        1..=3 => Ok(0),
        4 | 5 => Ok(1),
        other => Err(TrainError::Rating(other)),
    }
}

/// Binary classification scores with macro-averaged P/R/F1.
///
/// `confusion[label][prediction]`. A class that is never predicted has
/// precision 0; a class that never occurs has recall 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: [[usize; 2]; 2],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics, TrainError> {
    if predictions.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut confusion = [[0usize; 2]; 2];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p > 1 {
            return Err(TrainError::Label(p));
        }
        if l > 1 {
            return Err(TrainError::Label(l));
        }
        confusion[l][p] += 1;
    }
    let correct = confusion[0][0] + confusion[1][1];
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..2 {
        let tp = confusion[c][c];
        let predicted = confusion[0][c] + confusion[1][c];
        let actual = confusion[c][0] + confusion[c][1];
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    Ok(Metrics {
        accuracy: ratio(correct, labels.len()),
        precision: p_sum / 2.0,
        recall: r_sum / 2.0,
        f1: f_sum / 2.0,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-seed test metrics and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
    pub mean: MeanMetrics,
}

impl EvalReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let n = runs.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| runs.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let mean = MeanMetrics {
            accuracy: avg(|m| m.accuracy),
            precision: avg(|m| m.precision),
            recall: avg(|m| m.recall),
            f1: avg(|m| m.f1),
        };
        Self { runs, mean }
    }

    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }
}

/// Encoder sizes; vocabulary size and sequence length come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSize {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderSize {
    fn default() -> Self {
        let c = EncoderConfig::new(1, 1);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub min_turns: usize,
    pub split_seed: u64,
    pub fractions: [f64; 3],
    pub serialization: SerializationConfig,
    pub vocab_min_freq: usize,
    pub encoder: EncoderSize,
    pub heads: HeadConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Linear baselines; `linear.epochs` is their epoch cap.
    pub linear: LinearFitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            min_turns: 3,
            split_seed: 7,
            fractions: DEFAULT_FRACTIONS,
            serialization: SerializationConfig::default(),
            vocab_min_freq: 1,
            encoder: EncoderSize::default(),
            heads: HeadConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            clip_norm: 1.0,
            linear: LinearFitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.min_turns == 0 {
            return bad("min_turns must be at least 1");
        }
        if self.batch_size == 0 || self.linear.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_epochs == 0 || self.linear.epochs == 0 {
            return bad("epoch caps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(self.adam.lr > 0.0 && self.linear.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.linear.l2.is_nan() || self.linear.l2 < 0.0 {
            return bad("l2 must be non-negative");
        }
        if self.serialization.max_len < 4 {
            return bad("serialization.max_len must be at least 4");
        }
        Ok(())
    }

    fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.serialization.max_len,
            d_model: self.encoder.d_model,
            n_layers: self.encoder.n_layers,
            n_heads: self.encoder.n_heads,
            ffn_dim: self.encoder.ffn_dim,
            dropout: self.encoder.dropout,
        }
    }
}

/// A split corpus turned into model inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: CorpusSplit,
    pub vocab: Vocabulary,
    pub lexicons: Lexicons,
    pub stats: StandardizeStats,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

fn build_examples(
    convs: &[&Conversation],
    vocab: Option<&Vocabulary>,
    ser: &SerializationConfig,
    lexicons: &Lexicons,
    stats: Option<&StandardizeStats>,
) -> Result<(Vec<Example>, StandardizeStats), TrainError> {
    let raw: Vec<Vec<f64>> = crate::par::map(convs, |c| extract(c, lexicons).to_vec());
    let (features, stats) = standardize(&raw, stats)?;
    let seqs: Vec<TokenSequence> = match vocab {
        Some(v) => crate::par::map(convs, |c| serialize_conversation(c, ser, v)),
        None => vec![
            TokenSequence {
                ids: Vec::new(),
                attention_len: 0
            };
            convs.len()
        ],
    };
    let mut out = Vec::with_capacity(convs.len());
    for ((c, f), seq) in convs.iter().zip(features).zip(seqs) {
        let rating = c.rating.ok_or_else(|| TrainError::Metadata(format!("conversation {} is unrated", c.id)))?;
        out.push(Example {
            seq,
            features: f,
            label: binarize(rating)?,
        });
    }
    Ok((out, stats))
}

/// Filters rated conversations, splits them, builds the vocabulary on the
/// training part and standardizes features with training statistics.
pub fn prepare(corpus: &[Conversation], cfg: &TrainConfig, lexicons: &Lexicons) -> Result<Prepared, TrainError> {
    cfg.validate()?;
    let rated = filter_rated(corpus, cfg.min_turns);
    let split = split(&rated, cfg.split_seed, cfg.fractions)?;
    let [train, validation, test] = split.resolve(&rated);
    let vocab = Vocabulary::build(train.iter().copied(), &cfg.serialization, cfg.vocab_min_freq)?;
    let ser = &cfg.serialization;
    let (train_ex, stats) = build_examples(&train, Some(&vocab), ser, lexicons, None)?;
    let (val_ex, _) = build_examples(&validation, Some(&vocab), ser, lexicons, Some(&stats))?;
    let (test_ex, _) = build_examples(&test, Some(&vocab), ser, lexicons, Some(&stats))?;
    log::info!(
        "prepared {} train / {} validation / {} test conversations, vocabulary {}",
        train_ex.len(),
        val_ex.len(),
        test_ex.len(),
        vocab.len()
    );
    Ok(Prepared {
        split,
        vocab,
        lexicons: lexicons.clone(),
        stats,
        train: train_ex,
        validation: val_ex,
        test: test_ex,
    })
}

/// A fitted model of any family.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Linear(LinearModel),
    Flow(FlowClassifier),
    Tb(TbRater),
}

impl TrainedModel {
    pub fn family(&self) -> ModelFamily {
        match self {
            TrainedModel::Linear(m) => match m.kind {
                LinearKind::LogisticRegression => ModelFamily::LogisticRegression,
                LinearKind::LinearSvm => ModelFamily::LinearSvm,
            },
            TrainedModel::Flow(_) => ModelFamily::FlowOnly,
            TrainedModel::Tb(_) => ModelFamily::TbRater,
        }
    }

    pub fn predict(&self, ex: &Example) -> Result<usize, ModelError> {
        match self {
            TrainedModel::Linear(m) => Ok(m.predict(&ex.features)?.0),
            TrainedModel::Flow(m) => m.predict(ex),
            TrainedModel::Tb(m) => m.predict(ex),
        }
    }

    /// Predictions in input order; evaluated in parallel with read-only parameters.
    pub fn predict_all(&self, examples: &[Example]) -> Result<Vec<usize>, ModelError> {
        crate::par::map(examples, |ex| self.predict(ex)).into_iter().collect()
    }

    fn params(&self) -> ParamStore {
        match self {
            TrainedModel::Linear(m) => {
                let mut p = ParamStore::new();
                p.add(LINEAR_WEIGHTS, Tensor::row(m.weights.clone()));
                p.add(LINEAR_BIAS, Tensor::row(vec![m.bias]));
                p
            }
            TrainedModel::Flow(m) => m.params().clone(),
            TrainedModel::Tb(m) => m.params().clone(),
        }
    }
}

const LINEAR_WEIGHTS: &str = "linear.weights";
const LINEAR_BIAS: &str = "linear.bias";

fn labels(examples: &[Example]) -> Vec<usize> {
    examples.iter().map(|e| e.label).collect()
}

fn score(model: &TrainedModel, examples: &[Example]) -> Result<Metrics, TrainError> {
    metrics(&model.predict_all(examples)?, &labels(examples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_f1: f64,
}

/// One seed's training result.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub model: TrainedModel,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub test: Metrics,
}

/// Tracks the best validation score and when to stop.
struct EarlyStopping {
    patience: usize,
    best_f1: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    fn new(patience: usize) -> Self {
        Self {
            patience,
            best_f1: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns whether this epoch is a new best.
    fn observe(&mut self, epoch: usize, f1: f64) -> bool {
        if f1 > self.best_f1 {
            self.best_f1 = f1;
            self.best_epoch = epoch;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

fn check_splits(data: &Prepared) -> Result<(), TrainError> {
    for (name, part) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
        if part.is_empty() {
            return Err(TrainError::EmptySplit(name));
        }
    }
    Ok(())
}

fn fit_linear(
    kind: LinearKind,
    data: &Prepared,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LinearModel, usize, Vec<EpochLog>), TrainError> {
    let x: Vec<Vec<f64>> = data.train.iter().map(|e| e.features.clone()).collect();
    let y = labels(&data.train);
    let mut model = LinearModel::zeros(kind, N_FEATURES, cfg.linear.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.linear.epochs {
        model.fit_epoch(&x, &y, &cfg.linear, &mut rng).map_err(|e| match e {
            ModelError::Diverged => TrainError::Diverged { epoch, seed },
            other => other.into(),
        })?;
        let candidate = TrainedModel::Linear(model.clone());
        let f1 = score(&candidate, &data.validation)?.f1;
        history.push(EpochLog {
            epoch,
            train_loss: model.objective(&x, &y)?,
            validation_f1: f1,
        });
        if stop.observe(epoch, f1) {
            best = model.clone();
        } else if stop.should_stop() {
            break;
        }
    }
    Ok((best, stop.best_epoch, history))
}

fn fit_neural<M: NeuralRater + Clone>(
    model: &mut M,
    data: &Prepared,
    cfg: &TrainConfig,
    seed: u64,
    wrap: fn(M) -> TrainedModel,
) -> Result<(usize, Vec<EpochLog>), TrainError> {
    let mut state = AdamState::new(model.params());
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut best = model.params().clone();
    let mut history = Vec::new();
    let n = data.train.len();
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = sub_seed(seed, epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let dropout_seed = sub_seed(epoch_seed, u64::MAX);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let shared: &M = model;
            let results = crate::par::map(batch, |&i| -> Result<(Gradients, f64), ModelError> {
                let mut g = Graph::new(shared.params(), Mode::Train {
                    seed: sub_seed(dropout_seed, i as u64),
                });
                let loss = shared.loss(&mut g, &data.train[i])?;
                let value = g.scalar(loss);
                Ok((g.backward(loss)?, value))
            });
            let mut total = Gradients::zeros_like(model.params());
            for r in results {
                match r {
                    Ok((grads, value)) => {
                        total.add_assign(&grads);
                        loss_sum += value;
                    }
                    Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                        return Err(TrainError::Diverged { epoch, seed })
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            total.scale(1.0 / batch.len() as f64);
            if !total.global_norm().is_finite() {
                return Err(TrainError::Diverged { epoch, seed });
            }
            total.clip_norm(cfg.clip_norm);
            adam_step(model.params_mut(), &total, &mut state, &cfg.adam);
        }
        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, seed });
        }
        let f1 = score(&wrap(model.clone()), &data.validation)?.f1;
        log::info!("seed {seed} epoch {epoch}: train loss {train_loss:.4}, validation macro-F1 {f1:.4}");
        history.push(EpochLog {
            epoch,
            train_loss,
            validation_f1: f1,
        });
        if stop.observe(epoch, f1) {
            best = model.params().clone();
        } else if stop.should_stop() {
            break;
        }
    }
    *model.params_mut() = best;
    Ok((stop.best_epoch, history))
}

/// Trains one model with one seed, early-stopping on validation macro-F1,
/// and scores the best epoch on the test split.
pub fn train_seed(family: ModelFamily, data: &Prepared, cfg: &TrainConfig, seed: u64) -> Result<SeedRun, TrainError> {
    cfg.validate()?;
    check_splits(data)?;
    let (model, best_epoch, history) = match family {
        ModelFamily::LogisticRegression | ModelFamily::LinearSvm => {
            let kind = if family == ModelFamily::LogisticRegression {
                LinearKind::LogisticRegression
            } else {
                LinearKind::LinearSvm
            };
            let (m, best, hist) = fit_linear(kind, data, cfg, seed)?;
            (TrainedModel::Linear(m), best, hist)
        }
        ModelFamily::FlowOnly => {
            let mut m = FlowClassifier::new(cfg.encoder_config(data.vocab.len()), cfg.heads, seed)?;
            let (best, hist) = fit_neural(&mut m, data, cfg, seed, TrainedModel::Flow)?;
            (TrainedModel::Flow(m), best, hist)
        }
        ModelFamily::TbRater => {
            let mut m = TbRater::new(cfg.encoder_config(data.vocab.len()), cfg.heads, N_FEATURES, seed)?;
            let (best, hist) = fit_neural(&mut m, data, cfg, seed, TrainedModel::Tb)?;
            (TrainedModel::Tb(m), best, hist)
        }
    };
    let test = score(&model, &data.test)?;
    log::info!(
        "{family} seed {seed}: best epoch {best_epoch}, test accuracy {:.4}, macro-F1 {:.4}",
        test.accuracy,
        test.f1
    );
    Ok(SeedRun {
        seed,
        model,
        best_epoch,
        history,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub family: ModelFamily,
    pub runs: Vec<SeedRun>,
    pub report: EvalReport,
}

/// Trains one model per seed on the same split.
pub fn train(family: ModelFamily, data: &Prepared, cfg: &TrainConfig, seeds: &[u64]) -> Result<TrainOutcome, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("at least one seed is required".into()));
    }
    let runs = seeds
        .iter()
        .map(|&s| train_seed(family, data, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::from_runs(
        runs.iter()
            .map(|r| RunResult {
                seed: r.seed,
                best_epoch: r.best_epoch,
                metrics: r.test,
            })
            .collect(),
    );
    Ok(TrainOutcome { family, runs, report })
}

/// Everything needed to rebuild a model and its test inputs from a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub family: ModelFamily,
    pub seed: u64,
    pub best_epoch: usize,
    pub min_turns: usize,
    pub split_seed: u64,
    pub fractions: [f64; 3],
    pub serialization: SerializationConfig,
    pub encoder: Option<EncoderConfig>,
    pub heads: Option<HeadConfig>,
    pub vocabulary: Option<Vec<String>>,
    pub positive_lexicon: Vec<String>,
    pub negative_lexicon: Vec<String>,
    pub standardization: StandardizeStats,
    pub linear_kind: Option<LinearKind>,
    pub l2: Option<f64>,
}

pub fn checkpoint(run: &SeedRun, data: &Prepared, cfg: &TrainConfig) -> Checkpoint {
    let family = run.model.family();
    let neural = !family.is_linear();
    let (positive, negative) = data.lexicons.to_lists();
    let (linear_kind, l2) = match &run.model {
        TrainedModel::Linear(m) => (Some(m.kind), Some(m.l2)),
        _ => (None, None),
    };
    let meta = ModelMeta {
        family,
        seed: run.seed,
        best_epoch: run.best_epoch,
        min_turns: cfg.min_turns,
        split_seed: data.split.seed,
        fractions: data.split.fractions,
        serialization: cfg.serialization.clone(),
        encoder: neural.then(|| cfg.encoder_config(data.vocab.len())),
        heads: neural.then_some(cfg.heads),
        vocabulary: neural.then(|| data.vocab.tokens().to_vec()),
        positive_lexicon: positive,
        negative_lexicon: negative,
        standardization: data.stats.clone(),
        linear_kind,
        l2,
    };
    let json = serde_json::to_string(&meta).expect("metadata serializes");
    Checkpoint::from_params(family, json, &run.model.params())
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TrainedModel, ModelMeta), TrainError> {
    let meta: ModelMeta = serde_json::from_str(&ckpt.metadata).map_err(|e| TrainError::Metadata(e.to_string()))?;
    if meta.family != ckpt.family {
        return Err(TrainError::Metadata(format!(
            "header says {} but metadata says {}",
            ckpt.family, meta.family
        )));
    }
    let missing = |what: &str| TrainError::Metadata(format!("{what} missing for {}", meta.family));
    let model = match meta.family {
        ModelFamily::LogisticRegression | ModelFamily::LinearSvm => {
            let kind = meta.linear_kind.ok_or_else(|| missing("linear_kind"))?;
            let mut p = ParamStore::new();
            p.add(LINEAR_WEIGHTS, Tensor::zeros(&[1, N_FEATURES]));
            p.add(LINEAR_BIAS, Tensor::zeros(&[1, 1]));
            ckpt.load_into(&mut p)?;
            let weights = p.get(p.id(LINEAR_WEIGHTS).expect("registered")).data().to_vec();
            let bias = p.get(p.id(LINEAR_BIAS).expect("registered")).data()[0];
            TrainedModel::Linear(LinearModel {
                kind,
                weights,
                bias,
                l2: meta.l2.unwrap_or(0.0),
            })
        }
        ModelFamily::FlowOnly => {
            let enc = meta.encoder.clone().ok_or_else(|| missing("encoder"))?;
            let mut m = FlowClassifier::new(enc, meta.heads.ok_or_else(|| missing("heads"))?, 0)?;
            ckpt.load_into(m.params_mut())?;
            TrainedModel::Flow(m)
        }
        ModelFamily::TbRater => {
            let enc = meta.encoder.clone().ok_or_else(|| missing("encoder"))?;
            let mut m = TbRater::new(enc, meta.heads.ok_or_else(|| missing("heads"))?, N_FEATURES, 0)?;
            ckpt.load_into(m.params_mut())?;
            TrainedModel::Tb(m)
        }
    };
    Ok((model, meta))
}

/// Per-conversation output of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub conversation_id: String,
    pub label: usize,
    pub prediction: usize,
}

/// Re-derives the checkpoint's test split from `corpus` and scores the model on it.
pub fn evaluate(ckpt: &Checkpoint, corpus: &[Conversation]) -> Result<(Metrics, Vec<Prediction>), TrainError> {
    let (model, meta) = load_model(ckpt)?;
    let rated = filter_rated(corpus, meta.min_turns);
    let split = split(&rated, meta.split_seed, meta.fractions)?;
    let [_, _, test] = split.resolve(&rated);
    if test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let vocab = meta.vocabulary.as_ref().map(|t| Vocabulary::from_text(&t.join("\n"))).transpose()?;
    let lexicons = Lexicons::from_lists(&meta.positive_lexicon, &meta.negative_lexicon);
    let (examples, _) = build_examples(&test, vocab.as_ref(), &meta.serialization, &lexicons, Some(&meta.standardization))?;
    let predictions = model.predict_all(&examples)?;
    let m = metrics(&predictions, &labels(&examples))?;
    let rows = test
        .iter()
        .zip(&examples)
        .zip(&predictions)
        .map(|((c, e), &p)| Prediction {
            conversation_id: c.id.clone(),
            label: e.label,
            prediction: p,
        })
        .collect();
    Ok((m, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    WithoutBehavior,
    WithoutStepToken,
    WithoutAdditionalTokens,
    RightTruncation,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::WithoutBehavior,
        Ablation::WithoutStepToken,
        Ablation::WithoutAdditionalTokens,
        Ablation::RightTruncation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "TB-Rater",
            Ablation::WithoutBehavior => "w/o Behavior",
            Ablation::WithoutStepToken => "w/o Step Token",
            Ablation::WithoutAdditionalTokens => "w/o Additional Tokens",
            Ablation::RightTruncation => "Right Side Truncation",
        }
    }

    /// Model family and training config for this row.
    pub fn apply(self, base: &TrainConfig) -> (ModelFamily, TrainConfig) {
        let mut cfg = base.clone();
        let mut family = ModelFamily::TbRater;
        match self {
            Ablation::Full => {}
            Ablation::WithoutBehavior => family = ModelFamily::FlowOnly,
            Ablation::WithoutStepToken => cfg.serialization.use_step_token = false,
            Ablation::WithoutAdditionalTokens => cfg.serialization.use_additional_tokens = false,
            Ablation::RightTruncation => cfg.serialization.truncation_side = crate::serialize::TruncationSide::Right,
        }
        (family, cfg)
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub report: EvalReport,
}

/// Runs the five ablation configurations with the same split and seeds.
pub fn ablation_suite(
    corpus: &[Conversation],
    base: &TrainConfig,
    lexicons: &Lexicons,
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            log::info!("ablation: {}", ablation.label());
            let (family, cfg) = ablation.apply(base);
            let data = prepare(corpus, &cfg, lexicons)?;
            let outcome = train(family, &data, &cfg, seeds)?;
            Ok(AblationRow {
                ablation,
                report: outcome.report,
            })
        })
        .collect()
}

/// `name,n_runs,accuracy,precision,recall,f1` with mean values.
pub fn report_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "n_runs", "accuracy", "precision", "recall", "f1"])
        .expect("in-memory write");
    for (name, r) in rows {
        let m = r.mean;
        w.write_record([
            name.to_string(),
            r.n_runs().to_string(),
            m.accuracy.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Per-seed rows: `seed,best_epoch,accuracy,precision,recall,f1,tn,fp,fn,tp`.
pub fn runs_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "best_epoch", "accuracy", "precision", "recall", "f1", "tn", "fp", "fn", "tp"])
        .expect("in-memory write");
    for r in &report.runs {
        let m = &r.metrics;
        let c = m.confusion;
        w.write_record([
            r.seed.to_string(),
            r.best_epoch.to_string(),
            m.accuracy.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
            m.f1.to_string(),
            c[0][0].to_string(),
            c[0][1].to_string(),
            c[1][0].to_string(),
            c[1][1].to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Markdown table of mean metrics in percent.
pub fn report_markdown(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = String::from("| Model | Acc | P | R | F1 |\n|---|---|---|---|---|\n");
    for (name, r) in rows {
        let m = r.mean;
        let _ = writeln!(
            s,
            "| {name} | {:.1} | {:.1} | {:.1} | {:.1} |",
            100.0 * m.accuracy,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GeneratorConfig};
    use proptest::prelude::*;

    /// Brute-force reference: enumerate classes, count by filtering.
    fn oracle(pred: &[usize], lab: &[usize]) -> (f64, f64, f64, f64) {
        let n = lab.len() as f64;
        let acc = pred.iter().zip(lab).filter(|(p, l)| p == l).count() as f64 / n;
        let mut ps = Vec::new();
        let mut rs = Vec::new();
        let mut fs = Vec::new();
        for c in [0usize, 1] {
            let tp = (0..lab.len()).filter(|&i| pred[i] == c && lab[i] == c).count() as f64;
            let fp = (0..lab.len()).filter(|&i| pred[i] == c && lab[i] != c).count() as f64;
            let fnn = (0..lab.len()).filter(|&i| pred[i] != c && lab[i] == c).count() as f64;
            let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let r = if tp + fnn == 0.0 { 0.0 } else { tp / (tp + fnn) };
            ps.push(p);
            rs.push(r);
            fs.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
        (acc, (ps[0] + ps[1]) / 2.0, (rs[0] + rs[1]) / 2.0, (fs[0] + fs[1]) / 2.0)
    }

    #[test]
    fn binarize_boundaries() {
        assert_eq!(binarize(3).unwrap(), 0);
        assert_eq!(binarize(4).unwrap(), 1);
        assert_eq!(binarize(5).unwrap(), 1);
        assert_eq!(binarize(1).unwrap(), 0);
        assert!(matches!(binarize(0), Err(TrainError::Rating(0))));
        assert!(matches!(binarize(6), Err(TrainError::Rating(6))));
    }

    #[test]
    fn hand_worked_metrics() {
        let m = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.precision - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.recall, 0.75);
        assert!((m.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15);
        assert_eq!(m.confusion, [[1, 1], [0, 2]]);

        let perfect = metrics(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(metrics(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap().accuracy, 0.5);
        assert!(matches!(metrics(&[1], &[1, 0]), Err(TrainError::LengthMismatch { .. })));
        assert!(matches!(metrics(&[], &[]), Err(TrainError::Empty)));
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
            let (pred, lab): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = metrics(&pred, &lab).unwrap();
            prop_assert_eq!((m.accuracy, m.precision, m.recall, m.f1), oracle(&pred, &lab));
            prop_assert_eq!(m.confusion.iter().flatten().sum::<usize>(), lab.len());
        }
    }

    #[test]
    fn report_means_are_arithmetic_means() {
        let runs: Vec<RunResult> = [[0, 1, 1, 1], [0, 0, 1, 1], [1, 1, 1, 1]]
            .iter()
            .enumerate()
            .map(|(i, p)| RunResult {
                seed: i as u64,
                best_epoch: 1,
                metrics: metrics(p, &[0, 0, 1, 1]).unwrap(),
            })
            .collect();
        let r = EvalReport::from_runs(runs.clone());
        assert_eq!(r.n_runs(), 3);
        let acc = runs.iter().map(|r| r.metrics.accuracy).sum::<f64>() / 3.0;
        assert!((r.mean.accuracy - acc).abs() < 1e-12);
        let md = report_markdown(&[("LR", &r)]);
        assert!(md.contains("| LR | 75.0 |"), "{md}");
        assert_eq!(report_csv(&[("LR", &r)]).lines().count(), 2);
        assert_eq!(runs_csv(&r).lines().count(), 4);
    }

    #[test]
    fn early_stopping_keeps_the_best() {
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 0.5));
        assert!(!s.observe(2, 0.4));
        assert!(s.observe(3, 0.6));
        assert!(!s.observe(4, 0.6));
        assert!(!s.should_stop());
        assert!(!s.observe(5, 0.1));
        assert!(s.should_stop());
        assert_eq!((s.best_epoch, s.best_f1), (3, 0.6));
    }

    fn tiny_setup() -> (Vec<Conversation>, TrainConfig) {
        let corpus = generate(&GeneratorConfig {
            n_conversations: 60,
            turns: crate::synth::TurnCountDistribution {
                mean: 4.0,
                sd: 1.0,
                min: 3,
                max: 5,
            },
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            serialization: SerializationConfig {
                max_len: 32,
                ..Default::default()
            },
            encoder: EncoderSize {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 16,
                dropout: 0.1,
            },
            max_epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        (corpus, cfg)
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_evaluate_identically() {
        let (corpus, cfg) = tiny_setup();
        let data = prepare(&corpus, &cfg, &Lexicons::shipped()).unwrap();
        for family in ModelFamily::ALL {
            let a = train(family, &data, &cfg, &[1, 2]).unwrap();
            let b = train(family, &data, &cfg, &[1, 2]).unwrap();
            assert_eq!(a.report, b.report, "{family}");
            assert_eq!(a.report.n_runs(), 2);
            for run in &a.runs {
                let best = run.history.iter().map(|h| h.validation_f1).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(run.history[run.best_epoch - 1].validation_f1, best);
                let ckpt = checkpoint(run, &data, &cfg);
                let restored = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
                assert_eq!(restored, ckpt);
                let (m, preds) = evaluate(&restored, &corpus).unwrap();
                assert_eq!(m, run.test, "{family}");
                assert_eq!(preds.len(), data.test.len());
                assert_eq!(load_model(&restored).unwrap().0, run.model);
            }
        }
    }

    #[test]
    fn ablation_rows_apply_their_change() {
        let base = TrainConfig::default();
        let (f, c) = Ablation::WithoutBehavior.apply(&base);
        assert_eq!((f, &c), (ModelFamily::FlowOnly, &base));
        let (f, c) = Ablation::RightTruncation.apply(&base);
        assert_eq!(f, ModelFamily::TbRater);
        assert_eq!(c.serialization.truncation_side, crate::serialize::TruncationSide::Right);
        assert!(!Ablation::WithoutStepToken.apply(&base).1.serialization.use_step_token);
        assert!(!Ablation::WithoutAdditionalTokens.apply(&base).1.serialization.use_additional_tokens);
        assert_eq!(Ablation::ALL.len(), 5);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let (corpus, cfg) = tiny_setup();
        let data = prepare(&corpus, &cfg, &Lexicons::shipped()).unwrap();
        assert!(matches!(
            train(ModelFamily::LogisticRegression, &data, &cfg, &[]),
            Err(TrainError::Config(_))
        ));
    }
}
