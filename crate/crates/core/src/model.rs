//! The full network: partition scheme, encoder and fusion head over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, NodeId, ParamStore, Tape, TapeError, Tensor};
use crate::encoder::{Encoder, EncoderConfig, EncoderError, EncoderParams};
use crate::fusion::{episode_loss_on_tape, FusionConfig, FusionError, FusionParams, FusionStrategy};
use crate::partition::{build_scheme_with_k, PartitionError, PartitionScheme};
use crate::skeleton::{JointTopology, SkeletonSequence, TopologyError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("episode needs at least one support and one query")]
    EmptyEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub topology: String,
    /// Number of part graphs `K`.
    pub parts: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            topology: "ntu25".into(),
            parts: 10,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            fusion: FusionConfig {
                embedding_dim: 32,
                ..FusionConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        let topology = JointTopology::by_name(&self.topology)?;
        build_scheme_with_k(&topology, self.parts)?;
        Ok(())
    }
}

/// Tape handles of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub embedding: NodeId,
    pub alpha: Option<NodeId>,
    pub part_vectors: Vec<NodeId>,
    pub attention: Vec<Vec<NodeId>>,
}

/// One support (index into the class list) or query sample of an episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeBatch<'a> {
    /// Support inputs, one per class, in class order.
    pub supports: &'a [&'a Tensor],
    /// Query inputs with the index of their class's support.
    pub queries: &'a [(&'a Tensor, usize)],
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    topology: JointTopology,
    scheme: PartitionScheme,
    store: ParamStore,
    encoder: Encoder,
    fusion: FusionParams,
}

impl Model {
    /// Builds and initializes a model; parameters are a pure function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let topology = JointTopology::by_name(&config.topology)?;
        let scheme = build_scheme_with_k(&topology, config.parts)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = scheme.k();
        let ep = EncoderParams::register(&mut store, &config.encoder, k, &mut rng)?;
        let fusion =
            FusionParams::register(&mut store, &config.fusion, k, config.encoder.d1(), &mut rng)?;
        let encoder = Encoder::new(config.encoder.clone(), ep, &topology, k)?;
        Ok(Self {
            config,
            topology,
            scheme,
            store,
            encoder,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &JointTopology {
        &self.topology
    }

    pub fn scheme(&self) -> &PartitionScheme {
        &self.scheme
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.fusion.output_dim(self.config.encoder.d1())
    }

    /// Records one sample's forward pass.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<SampleForward, ModelError> {
        let e = self.encoder.embed(tape, x, &self.scheme)?;
        let out = self
            .fusion
            .forward(tape, &e.part_vectors, self.config.fusion.strategy)?;
        Ok(SampleForward {
            embedding: out.embedding,
            alpha: out.alpha,
            part_vectors: e.part_vectors,
            attention: e.attention,
        })
    }

    /// Prototype embedding of a preprocessed sequence.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.store);
        let xn = tape.input(x.clone());
        let f = self.forward(&mut tape, xn)?;
        let e = tape.value(f.embedding).data().to_vec();
        if e.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("embedding"));
        }
        Ok(e)
    }

    pub fn embed(&self, seq: &SkeletonSequence) -> Result<Vec<f64>, ModelError> {
        self.embed_tensor(&sequence_tensor(seq))
    }

    /// Part weights `α` (all ones for strategies without attention).
    pub fn part_attention(&self, seq: &SkeletonSequence) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.store);
        let xn = tape.input(sequence_tensor(seq));
        let e = self.encoder.embed(&mut tape, xn, &self.scheme)?;
        match self.config.fusion.strategy {
            FusionStrategy::MlpAttention => {
                let a = self.fusion.compute_attention(&mut tape, &e.part_vectors)?;
                Ok(tape.value(a).data().to_vec())
            }
            _ => Ok(vec![1.0; self.scheme.k()]),
        }
    }

    /// Episode loss and its parameter gradients.
    ///
    /// Every sample gets its own tape (run in parallel on the current rayon
    /// pool); a small loss tape over the stacked embeddings provides the
    /// per-sample cotangents. Gradients are summed in sample order, so the
    /// result does not depend on the number of workers.
    pub fn loss_and_grads(&self, batch: EpisodeBatch) -> Result<(f64, Gradients), ModelError> {
        if batch.supports.is_empty() || batch.queries.is_empty() {
            return Err(ModelError::EmptyEpisode);
        }
        let inputs: Vec<&Tensor> = batch
            .supports
            .iter()
            .copied()
            .chain(batch.queries.iter().map(|(x, _)| *x))
            .collect();
        let forwards = inputs
            .par_iter()
            .map(|x| {
                let mut tape = Tape::new(&self.store);
                let xn = tape.input((*x).clone());
                let f = self.forward(&mut tape, xn)?;
                Ok((tape, f.embedding))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;

        let d = self.embedding_dim();
        let empty = ParamStore::new();
        let mut loss_tape = Tape::new(&empty);
        let nodes: Vec<NodeId> = forwards
            .iter()
            .map(|(t, e)| loss_tape.input_with_grad(t.value(*e).clone()))
            .collect();
        let ns = batch.supports.len();
        let s_cat = loss_tape.concat(&nodes[..ns]);
        let s = loss_tape.reshape(s_cat, vec![ns, d]);
        let q_cat = loss_tape.concat(&nodes[ns..]);
        let q = loss_tape.reshape(q_cat, vec![nodes.len() - ns, d]);
        let targets: Vec<usize> = batch.queries.iter().map(|(_, c)| *c).collect();
        let loss = episode_loss_on_tape(&mut loss_tape, q, s, &targets, self.config.fusion.temperature)?;
        let loss_value = loss_tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        let lg = loss_tape.backward(loss, 1.0)?;

        let per_sample = forwards
            .par_iter()
            .zip(&nodes)
            .map(|((tape, e), n)| {
                let seed = lg.input(*n).expect("registered with grad");
                Ok(tape.backward_with(*e, seed)?.params)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let mut grads = Gradients::zeros_like(&self.store);
        for g in &per_sample {
            grads.accumulate(g);
        }
        if !grads.is_finite() {
            return Err(ModelError::NonFinite("gradient"));
        }
        Ok((loss_value, grads))
    }

    /// Same loss recorded on a single tape; used to cross-check
    /// [`loss_and_grads`](Self::loss_and_grads).
    pub fn loss_single_tape(&self, batch: EpisodeBatch) -> Result<(f64, Gradients), ModelError> {
        if batch.supports.is_empty() || batch.queries.is_empty() {
            return Err(ModelError::EmptyEpisode);
        }
        let mut tape = Tape::new(&self.store);
        let mut embed = |x: &Tensor| -> Result<NodeId, ModelError> {
            let xn = tape.input(x.clone());
            Ok(self.forward(&mut tape, xn)?.embedding)
        };
        let sup = batch
            .supports
            .iter()
            .map(|x| embed(x))
            .collect::<Result<Vec<_>, _>>()?;
        let qs = batch
            .queries
            .iter()
            .map(|(x, _)| embed(x))
            .collect::<Result<Vec<_>, _>>()?;
        let d = self.embedding_dim();
        let s_cat = tape.concat(&sup);
        let s = tape.reshape(s_cat, vec![sup.len(), d]);
        let q_cat = tape.concat(&qs);
        let q = tape.reshape(q_cat, vec![qs.len(), d]);
        let targets: Vec<usize> = batch.queries.iter().map(|(_, c)| *c).collect();
        let loss = episode_loss_on_tape(&mut tape, q, s, &targets, self.config.fusion.temperature)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss, 1.0)?.params;
        Ok((value, grads))
    }

    /// Loss value only, without recording gradients for later use.
    pub fn loss_value(&self, batch: EpisodeBatch) -> Result<f64, ModelError> {
        Ok(self.loss_single_tape(batch)?.0)
    }
}

/// `[D, T, V]` tensor of a sequence's first body.
pub fn sequence_tensor(seq: &SkeletonSequence) -> Tensor {
    Tensor::new(
        vec![seq.dims(), seq.frames(), seq.joints()],
        seq.coords().to_vec(),
    )
}
