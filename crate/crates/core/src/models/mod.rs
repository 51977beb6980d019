//! Model families: linear behavior-only baselines, a flow-only encoder
//! classifier and the fusion rater that combines both streams.

mod encoder;
mod linear;

pub use encoder::{Dense, EncoderConfig, FlowEncoder};
pub use linear::{coefficient_report, linear_fit, sigmoid, LinearFitConfig, LinearKind, LinearModel};

pub use crate::numeric::checkpoint::ModelFamily;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{Graph, Mode, NodeId, ParamStore, TensorError};
use crate::serialize::TokenSequence;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature vector has length {got}, model expects {expected}")]
    FeatureLength { got: usize, expected: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("no training data")]
    EmptyData,
    #[error("training diverged")]
    Diverged,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// One prepared conversation: serialized flow, standardized behavior vector, binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: TokenSequence,
    pub features: Vec<f64>,
    pub label: usize,
}

/// A neural model whose forward pass is recorded on a [`Graph`].
pub trait NeuralRater: Send + Sync {
    fn family(&self) -> ModelFamily;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// `[1, 2]` logits for one example. Only touches parameters through `g`,
    /// so the graph may be built over a perturbed copy of the parameters.
    fn logits(&self, g: &mut Graph, ex: &Example) -> Result<NodeId, ModelError>;

    /// Cross-entropy of one example.
    fn loss(&self, g: &mut Graph, ex: &Example) -> Result<NodeId, ModelError> {
        let logits = self.logits(g, ex)?;
        Ok(g.cross_entropy(logits, &[ex.label])?)
    }

    /// Eval-mode logits.
    fn predict_logits(&self, ex: &Example) -> Result<[f64; 2], ModelError> {
        let mut g = Graph::new(self.params(), Mode::Eval);
        let out = self.logits(&mut g, ex)?;
        let v = g.value(out).data();
        Ok([v[0], v[1]])
    }

    /// Argmax label; ties go to class 0.
    fn predict(&self, ex: &Example) -> Result<usize, ModelError> {
        let [a, b] = self.predict_logits(ex)?;
        Ok(usize::from(b > a))
    }
}

/// Widths of the three feed-forward networks of the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub flow_hidden: usize,
    pub behavior_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            flow_hidden: 32,
            behavior_hidden: 32,
        }
    }
}

/// Encoder, `ReLU(W_t·cls)` projection and a linear 2-way head.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowClassifier {
    pub encoder: FlowEncoder,
    pub flow: Dense,
    pub head: Dense,
    pub heads: HeadConfig,
    params: ParamStore,
}

impl FlowClassifier {
    pub fn new(config: EncoderConfig, heads: HeadConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = FlowEncoder::register(&mut params, "encoder", config, &mut rng)?;
        let d = encoder.config.d_model;
        let flow = Dense::register(&mut params, "ffnn_t", d, heads.flow_hidden, &mut rng);
        let head = Dense::register(&mut params, "head", heads.flow_hidden, 2, &mut rng);
        Ok(Self {
            encoder,
            flow,
            head,
            heads,
            params,
        })
    }
}

impl NeuralRater for FlowClassifier {
    fn family(&self) -> ModelFamily {
        ModelFamily::FlowOnly
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&self, g: &mut Graph, ex: &Example) -> Result<NodeId, ModelError> {
        let cls = self.encoder.forward(g, ex.seq.active())?;
        let t = self.flow.forward(g, cls)?;
        let t = g.relu(t)?;
        Ok(self.head.forward(g, t)?)
    }
}

/// Fusion rater: `FFNN_TB(FFNN_T(cls) ⊕ FFNN_B(behavior))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TbRater {
    pub encoder: FlowEncoder,
    pub flow: Dense,
    pub behavior: Dense,
    pub fusion: Dense,
    pub heads: HeadConfig,
    pub n_features: usize,
    params: ParamStore,
}

impl TbRater {
    pub fn new(config: EncoderConfig, heads: HeadConfig, n_features: usize, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = FlowEncoder::register(&mut params, "encoder", config, &mut rng)?;
        let d = encoder.config.d_model;
        let flow = Dense::register(&mut params, "ffnn_t", d, heads.flow_hidden, &mut rng);
        let behavior = Dense::register(&mut params, "ffnn_b", n_features, heads.behavior_hidden, &mut rng);
        let fusion = Dense::register(
            &mut params,
            "ffnn_tb",
            heads.flow_hidden + heads.behavior_hidden,
            2,
            &mut rng,
        );
        Ok(Self {
            encoder,
            flow,
            behavior,
            fusion,
            heads,
            n_features,
            params,
        })
    }
}

impl NeuralRater for TbRater {
    fn family(&self) -> ModelFamily {
        ModelFamily::TbRater
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&self, g: &mut Graph, ex: &Example) -> Result<NodeId, ModelError> {
        if ex.features.len() != self.n_features {
            return Err(ModelError::FeatureLength {
                got: ex.features.len(),
                expected: self.n_features,
            });
        }
        let cls = self.encoder.forward(g, ex.seq.active())?;
        let t = self.flow.forward(g, cls)?;
        let t = g.relu(t)?;
        let b_in = g.input(crate::numeric::Tensor::row(ex.features.clone()));
        let b = self.behavior.forward(g, b_in)?;
        let b = g.relu(b)?;
        let joined = g.concat_cols(&[t, b])?;
        Ok(self.fusion.forward(g, joined)?)
    }
}
