//! Cascaded embedding: an ST-GCN-style body stack over all joints followed by
//! non-local part networks over each part's joints.
//!
//! Body layer: `ReLU(LN(tconv(ReLU(LN(Σₛ Wₛ X Âₛ + b)))) + res(X))`.
//! Part layer: the same shape with the graph convolution replaced by
//! per-frame scaled dot-product self-attention over the part's joints.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::partition::{PartGraph, PartitionScheme};
use crate::skeleton::JointTopology;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input shape {found:?} does not match expected {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{frames} frames are not divisible by the total temporal stride {stride}")]
    Stride { frames: usize, stride: usize },
    #[error("scheme has {scheme} parts but the encoder was built for {encoder}")]
    PartCount { scheme: usize, encoder: usize },
    #[error("part input has {found} channels, part network expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
}

/// How the body adjacency is split for the spatial graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialStrategy {
    /// One normalized adjacency `Â`.
    #[default]
    Uniform,
    /// `Â` split by hop distance to the center joint into root,
    /// centripetal and centrifugal subsets, each with its own weights.
    ThreeSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Input coordinate dimension `D`.
    pub in_channels: usize,
    /// Output width of each body layer; the last is `d₀`.
    pub body_channels: Vec<usize>,
    pub temporal_strides: Vec<usize>,
    /// Odd temporal kernel size shared by both stages.
    pub temporal_kernel: usize,
    /// Output width of each part layer; the last is `d₁`.
    pub part_channels: Vec<usize>,
    pub head_count: usize,
    pub share_part_weights: bool,
    pub spatial_strategy: SpatialStrategy,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            body_channels: vec![64, 64, 128, 128, 128],
            temporal_strides: vec![1, 1, 2, 1, 2],
            temporal_kernel: 9,
            part_channels: vec![128; 5],
            head_count: 1,
            share_part_weights: true,
            spatial_strategy: SpatialStrategy::Uniform,
            norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Small configuration for desk-scale runs and tests.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            body_channels: vec![8, 8, 16],
            temporal_strides: vec![1, 2, 2],
            temporal_kernel: 3,
            part_channels: vec![16, 16],
            head_count: 1,
            share_part_weights: true,
            spatial_strategy: SpatialStrategy::Uniform,
            // Low-variance channels on small synthetic clips are blown up by a
            // tiny epsilon, which makes the loss surface very sharp.
            norm_eps: 0.1,
        }
    }

    pub fn d0(&self) -> usize {
        *self.body_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn d1(&self) -> usize {
        *self.part_channels.last().unwrap_or(&self.d0())
    }

    pub fn total_stride(&self) -> usize {
        self.temporal_strides.iter().product()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        if self.body_channels.is_empty() {
            return err("body_channels must list at least one layer".into());
        }
        if self.body_channels.len() != self.temporal_strides.len() {
            return err(format!(
                "temporal_strides has {} entries for {} body layers",
                self.temporal_strides.len(),
                self.body_channels.len()
            ));
        }
        if self.body_channels.iter().chain(&self.part_channels).any(|&c| c == 0) {
            return err("channel widths must be positive".into());
        }
        if self.temporal_strides.contains(&0) {
            return err("temporal strides must be at least 1".into());
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return err(format!("temporal_kernel {} must be odd", self.temporal_kernel));
        }
        if self.head_count == 0 {
            return err("head_count must be at least 1".into());
        }
        if let Some(c) = self.part_channels.iter().find(|&&c| c % self.head_count != 0) {
            return err(format!(
                "part width {c} is not divisible by head_count {}",
                self.head_count
            ));
        }
        if !self.norm_eps.is_finite() || self.norm_eps <= 0.0 {
            return err("norm_eps must be finite and positive".into());
        }
        Ok(())
    }

    /// Temporal length after the body stack, if `frames` is compatible.
    pub fn output_frames(&self, frames: usize) -> Result<usize, EncoderError> {
        let stride = self.total_stride();
        if frames == 0 || !frames.is_multiple_of(stride) {
            return Err(EncoderError::Stride { frames, stride });
        }
        Ok(frames / stride)
    }
}

/// `D^{-1/2}(A+I)D^{-1/2}` for a row-major `n×n` 0/1 adjacency.
pub fn normalize_adjacency(adjacency: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(adjacency.len(), n * n, "adjacency must be n×n");
    let mut a = adjacency.to_vec();
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

/// Splits `Â` by comparing hop distances to the center: entry `(i, j)` goes
/// to root when `j` is as far as `i`, centripetal when closer, centrifugal
/// when farther. The three parts sum to `Â`.
pub fn three_subset_adjacency(topology: &JointTopology) -> [Vec<f64>; 3] {
    let n = topology.joint_count();
    let a = normalize_adjacency(&topology.adjacency(), n);
    let hops: Vec<usize> = topology
        .hop_distances()
        .into_iter()
        .map(|h| h.expect("topology is connected"))
        .collect();
    let mut out = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    for i in 0..n {
        for j in 0..n {
            let s = match hops[j].cmp(&hops[i]) {
                std::cmp::Ordering::Equal => 0,
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Greater => 2,
            };
            out[s][i * n + j] = a[i * n + j];
        }
    }
    out
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn add(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }
}

/// Weight `[Co, Ci]` (or `[Co, Ci, k]`) plus bias `[Co]`.
#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn add<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, shape: &[usize]) -> Self {
        let fan_in = shape[1..].iter().product();
        Self {
            w: store.add(format!("{name}.weight"), uniform(rng, shape, fan_in)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&shape[..1])),
        }
    }
}

#[derive(Debug, Clone)]
struct BodyLayer {
    gcn: Vec<ParamId>,
    gcn_bias: ParamId,
    norm1: Norm,
    tcn: Affine,
    norm2: Norm,
    residual: Option<Affine>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct PartLayer {
    query: Affine,
    key: Affine,
    value: Affine,
    norm1: Norm,
    tcn: Affine,
    norm2: Norm,
    residual: Option<Affine>,
}

/// Parameter handles of both encoder stages, registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct EncoderParams {
    body: Vec<BodyLayer>,
    /// One entry when part weights are shared, otherwise one per part.
    parts: Vec<Vec<PartLayer>>,
}

impl EncoderParams {
    /// Registers freshly initialized encoder parameters for `k` parts.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        k: usize,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let subsets = match cfg.spatial_strategy {
            SpatialStrategy::Uniform => 1,
            SpatialStrategy::ThreeSubset => 3,
        };
        let kt = cfg.temporal_kernel;
        let mut body = Vec::new();
        let mut c_in = cfg.in_channels;
        for (l, (&c, &stride)) in cfg
            .body_channels
            .iter()
            .zip(&cfg.temporal_strides)
            .enumerate()
        {
            let p = format!("body.{l}");
            let gcn = (0..subsets)
                .map(|s| {
                    store.add(
                        format!("{p}.gcn.{s}.weight"),
                        uniform(rng, &[c, c_in], c_in * subsets),
                    )
                })
                .collect();
            let gcn_bias = store.add(format!("{p}.gcn.bias"), Tensor::zeros(&[c]));
            let norm1 = Norm::add(store, &format!("{p}.norm1"), c);
            let tcn = Affine::add(store, rng, &format!("{p}.tcn"), &[c, c, kt]);
            let norm2 = Norm::add(store, &format!("{p}.norm2"), c);
            let residual = (c != c_in || stride != 1)
                .then(|| Affine::add(store, rng, &format!("{p}.residual"), &[c, c_in, 1]));
            body.push(BodyLayer {
                gcn,
                gcn_bias,
                norm1,
                tcn,
                norm2,
                residual,
                stride,
            });
            c_in = c;
        }
        let records = if cfg.share_part_weights { 1 } else { k.max(1) };
        let parts = (0..records)
            .map(|r| {
                let prefix = if cfg.share_part_weights {
                    "part.shared".to_string()
                } else {
                    format!("part.{r}")
                };
                let mut c_in = cfg.d0();
                cfg.part_channels
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| {
                        let p = format!("{prefix}.{l}");
                        let layer = PartLayer {
                            query: Affine::add(store, rng, &format!("{p}.query"), &[c, c_in]),
                            key: Affine::add(store, rng, &format!("{p}.key"), &[c, c_in]),
                            value: Affine::add(store, rng, &format!("{p}.value"), &[c, c_in]),
                            norm1: Norm::add(store, &format!("{p}.norm1"), c),
                            tcn: Affine::add(store, rng, &format!("{p}.tcn"), &[c, c, kt]),
                            norm2: Norm::add(store, &format!("{p}.norm2"), c),
                            residual: (c != c_in).then(|| {
                                Affine::add(store, rng, &format!("{p}.residual"), &[c, c_in, 1])
                            }),
                        };
                        c_in = c;
                        layer
                    })
                    .collect()
            })
            .collect();
        Ok(Self { body, parts })
    }

    /// Number of distinct part-network parameter records.
    pub fn part_records(&self) -> usize {
        self.parts.len()
    }
}

/// Forward graph of the embedding module for one topology.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: EncoderParams,
    joints: usize,
    adjacency: Vec<Tensor>,
    parts: usize,
}

/// Tape handles produced by [`Encoder::embed`].
#[derive(Debug, Clone)]
pub struct Embedding {
    pub body: NodeId,
    pub part_maps: Vec<NodeId>,
    /// Pooled `d₁` vector per part, in scheme order.
    pub part_vectors: Vec<NodeId>,
    /// Attention nodes per part, one per part layer.
    pub attention: Vec<Vec<NodeId>>,
}

impl Encoder {
    pub fn new(
        cfg: EncoderConfig,
        params: EncoderParams,
        topology: &JointTopology,
        parts: usize,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        if !cfg.share_part_weights && params.parts.len() != parts {
            return Err(EncoderError::PartCount {
                scheme: parts,
                encoder: params.parts.len(),
            });
        }
        let v = topology.joint_count();
        let adjacency = match cfg.spatial_strategy {
            SpatialStrategy::Uniform => {
                vec![Tensor::new(vec![v, v], normalize_adjacency(&topology.adjacency(), v))]
            }
            SpatialStrategy::ThreeSubset => three_subset_adjacency(topology)
                .into_iter()
                .map(|a| Tensor::new(vec![v, v], a))
                .collect(),
        };
        Ok(Self {
            cfg,
            params,
            joints: v,
            adjacency,
            parts,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn part_count(&self) -> usize {
        self.parts
    }

    /// Body stage on `x: [D, T, V]`; returns `[d₀, T₀, V]`.
    pub fn body_forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, EncoderError> {
        let shape = tape.shape(x).to_vec();
        let frames = shape.get(1).copied().unwrap_or(0);
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || shape[2] != self.joints {
            return Err(EncoderError::InputShape {
                expected: vec![self.cfg.in_channels, frames, self.joints],
                found: shape,
            });
        }
        self.cfg.output_frames(frames)?;
        let adj: Vec<NodeId> = self.adjacency.iter().map(|a| tape.input(a.clone())).collect();
        let pad = (self.cfg.temporal_kernel - 1) / 2;
        let eps = self.cfg.norm_eps;
        let mut h = x;
        for layer in &self.params.body {
            let ws: Vec<NodeId> = layer.gcn.iter().map(|&w| tape.param(w)).collect();
            let b = tape.param(layer.gcn_bias);
            let s = spatial_graph_conv(tape, h, &ws, b, &adj);
            let s = norm(tape, s, layer.norm1, eps);
            let s = tape.relu(s);
            let t = temporal(tape, s, layer.tcn, layer.stride, pad);
            let t = norm(tape, t, layer.norm2, eps);
            let r = match layer.residual {
                Some(p) => temporal(tape, h, p, layer.stride, 0),
                None => h,
            };
            let sum = tape.add(t, r);
            h = tape.relu(sum);
        }
        Ok(h)
    }

    /// Part network on `[d₀, T₀, Vᵢ]`. Returns the `[d₁, T₀, Vᵢ]` output and
    /// the attention node of every layer.
    pub fn part_forward(
        &self,
        tape: &mut Tape,
        input: NodeId,
        part: usize,
    ) -> Result<(NodeId, Vec<NodeId>), EncoderError> {
        let c = tape.shape(input)[0];
        if c != self.cfg.d0() {
            return Err(EncoderError::ChannelMismatch {
                expected: self.cfg.d0(),
                found: c,
            });
        }
        let record = if self.params.parts.len() == 1 { 0 } else { part };
        let pad = (self.cfg.temporal_kernel - 1) / 2;
        let eps = self.cfg.norm_eps;
        let heads = self.cfg.head_count;
        let mut h = input;
        let mut attention = Vec::new();
        for layer in &self.params.parts[record] {
            let q = pointwise(tape, h, layer.query);
            let k = pointwise(tape, h, layer.key);
            let v = pointwise(tape, h, layer.value);
            let a = tape.attention(q, k, v, heads);
            attention.push(a);
            let s = norm(tape, a, layer.norm1, eps);
            let s = tape.relu(s);
            let t = temporal(tape, s, layer.tcn, 1, pad);
            let t = norm(tape, t, layer.norm2, eps);
            let r = match layer.residual {
                Some(p) => temporal(tape, h, p, 1, 0),
                None => h,
            };
            let sum = tape.add(t, r);
            h = tape.relu(sum);
        }
        Ok((h, attention))
    }

    /// Body stage, per-part gather, part networks, and average pooling.
    pub fn embed(
        &self,
        tape: &mut Tape,
        x: NodeId,
        scheme: &PartitionScheme,
    ) -> Result<Embedding, EncoderError> {
        if scheme.k() != self.parts {
            return Err(EncoderError::PartCount {
                scheme: scheme.k(),
                encoder: self.parts,
            });
        }
        let body = self.body_forward(tape, x)?;
        let mut part_maps = Vec::with_capacity(scheme.k());
        let mut part_vectors = Vec::with_capacity(scheme.k());
        let mut attention = Vec::with_capacity(scheme.k());
        for (i, part) in scheme.parts().iter().enumerate() {
            let g = gather(tape, body, part);
            let (out, attn) = self.part_forward(tape, g, i)?;
            part_vectors.push(tape.mean_channels(out));
            part_maps.push(out);
            attention.push(attn);
        }
        Ok(Embedding {
            body,
            part_maps,
            part_vectors,
            attention,
        })
    }
}

fn gather(tape: &mut Tape, body: NodeId, part: &PartGraph) -> NodeId {
    tape.gather_joints(body, part.joint_indices())
}

fn norm(tape: &mut Tape, x: NodeId, n: Norm, eps: f64) -> NodeId {
    let g = tape.param(n.gamma);
    let b = tape.param(n.beta);
    tape.channel_norm(x, g, b, eps)
}

fn temporal(tape: &mut Tape, x: NodeId, p: Affine, stride: usize, pad: usize) -> NodeId {
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    let y = tape.temporal_conv(x, w, stride, pad);
    tape.channel_bias(y, b)
}

/// 1×1 channel projection of `[Ci, T, V]`.
fn pointwise(tape: &mut Tape, x: NodeId, p: Affine) -> NodeId {
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    channel_map(tape, x, w, Some(b))
}

fn channel_map(tape: &mut Tape, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
    let (c, t, v) = tape.value(x).dims3();
    let co = tape.shape(w)[0];
    let flat = tape.reshape(x, vec![c, t * v]);
    let y = tape.matmul(w, false, flat, false);
    let y = tape.reshape(y, vec![co, t, v]);
    match b {
        Some(b) => tape.channel_bias(y, b),
        None => y,
    }
}

/// `Σₛ Wₛ · X · Âₛ + b` for `x: [Ci, T, V]`, `Wₛ: [Co, Ci]`, `Âₛ: [V, V]`.
pub fn spatial_graph_conv(
    tape: &mut Tape,
    x: NodeId,
    weights: &[NodeId],
    bias: NodeId,
    adjacency: &[NodeId],
) -> NodeId {
    assert_eq!(weights.len(), adjacency.len());
    let (_, t, v) = tape.value(x).dims3();
    let mut acc: Option<NodeId> = None;
    for (&w, &a) in weights.iter().zip(adjacency) {
        let co = tape.shape(w)[0];
        let y = channel_map(tape, x, w, None);
        let rows = tape.reshape(y, vec![co * t, v]);
        let mixed = tape.matmul(rows, false, a, false);
        let mixed = tape.reshape(mixed, vec![co, t, v]);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, mixed),
            None => mixed,
        });
    }
    tape.channel_bias(acc.expect("at least one subset"), bias)
}

/// Evaluates one spatial graph-convolution layer outside of training.
pub fn graph_conv_layer(x: &Tensor, weight: &Tensor, bias: &Tensor, a_hat: &Tensor) -> Tensor {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xn = tape.input(x.clone());
    let w = tape.input(weight.clone());
    let b = tape.input(bias.clone());
    let a = tape.input(a_hat.clone());
    let y = spatial_graph_conv(&mut tape, xn, &[w], b, &[a]);
    tape.value(y).clone()
}

/// `output[c] = mean over (t, v)` of a `[c, T, V]` map.
pub fn avg_pool_part(map: &Tensor) -> Tensor {
    let c = map.shape()[0];
    let n = map.len() / c;
    Tensor::from_vec(
        map.data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect(),
    )
}
