//! Attentional part fusion and cosine matching.
//!
//! Part vectors `γ₁..γ_K` are concatenated; a two-layer MLP with a sigmoid
//! head yields one weight `αᵢ ∈ (0, 1)` per part; each part is scaled by its
//! weight and a second MLP maps the concatenation to the prototype `ε`.
//! Queries are matched to supports by cosine similarity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, NodeId, ParamId, ParamStore, Tape, TapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("degenerate embedding (zero norm)")]
    DegenerateEmbedding,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("query label {0} is not among the episode classes")]
    UnknownLabel(String),
    #[error("at least one support is required")]
    NoSupports,
    #[error("invalid fusion config: {0}")]
    Config(String),
}

impl From<TapeError> for FusionError {
    fn from(e: TapeError) -> Self {
        match e {
            TapeError::ZeroNorm { .. } => FusionError::DegenerateEmbedding,
            other => FusionError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    MlpAttention,
    SelfAttentionPool,
    NoAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Logit temperature `τ`; logits are `cos / τ`.
    pub temperature: f64,
    /// Prototype width `d` (ignored by `self_attention_pool`, where `d = d₁`).
    pub embedding_dim: usize,
    /// Hidden width of the attention MLP; `None` means `max(1, K·d₁/4)`.
    pub attention_hidden: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::MlpAttention,
            temperature: 0.1,
            embedding_dim: 128,
            attention_hidden: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FusionError::Config("temperature must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(FusionError::Config("embedding_dim must be positive".into()));
        }
        if self.attention_hidden == Some(0) {
            return Err(FusionError::Config("attention_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden_width(&self, k: usize, d1: usize) -> usize {
        self.attention_hidden.unwrap_or((k * d1 / 4).max(1))
    }

    /// Width of the produced embedding.
    pub fn output_dim(&self, d1: usize) -> usize {
        match self.strategy {
            FusionStrategy::SelfAttentionPool => d1,
            _ => self.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn add<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, out: usize, inp: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![out, inp], w)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    /// `W x + b` for a flat vector node.
    fn apply(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let n = tape.value(x).len();
        let col = tape.reshape(x, vec![n, 1]);
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(w, false, col, false);
        let y = tape.channel_bias(y, b);
        let out = tape.shape(y)[0];
        tape.reshape(y, vec![out])
    }
}

/// Parameters of every fusion strategy. All are registered regardless of
/// the strategy in use; the unused ones receive zero gradient.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub attention1: Linear,
    pub attention2: Linear,
    pub fusion1: Linear,
    pub fusion2: Linear,
    pub self_query: Linear,
    pub self_key: Linear,
    pub self_value: Linear,
    k: usize,
    d1: usize,
}

impl FusionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        cfg: &FusionConfig,
        k: usize,
        d1: usize,
        rng: &mut R,
    ) -> Result<Self, FusionError> {
        cfg.validate()?;
        let kd = k * d1;
        let h = cfg.hidden_width(k, d1);
        let d = cfg.embedding_dim;
        Ok(Self {
            attention1: Linear::add(store, rng, "fusion.attention.0", h, kd),
            attention2: Linear::add(store, rng, "fusion.attention.1", k, h),
            fusion1: Linear::add(store, rng, "fusion.mlp.0", d, kd),
            fusion2: Linear::add(store, rng, "fusion.mlp.1", d, d),
            self_query: Linear::add(store, rng, "fusion.self.query", d1, d1),
            self_key: Linear::add(store, rng, "fusion.self.key", d1, d1),
            self_value: Linear::add(store, rng, "fusion.self.value", d1, d1),
            k,
            d1,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    fn check(&self, tape: &Tape, parts: &[NodeId]) -> Result<(), FusionError> {
        if parts.len() != self.k {
            return Err(FusionError::LengthMismatch {
                expected: self.k,
                found: parts.len(),
            });
        }
        for &p in parts {
            let n = tape.value(p).len();
            if n != self.d1 {
                return Err(FusionError::LengthMismatch {
                    expected: self.d1,
                    found: n,
                });
            }
        }
        Ok(())
    }

    /// `α = σ(MLP(γ₁ ⊕ … ⊕ γ_K))`, a `[K]` node.
    pub fn compute_attention(&self, tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId, FusionError> {
        self.check(tape, parts)?;
        let cat = tape.concat(parts);
        Ok(self.attention_from_concat(tape, cat))
    }

    fn attention_from_concat(&self, tape: &mut Tape, cat: NodeId) -> NodeId {
        let h = self.attention1.apply(tape, cat);
        let h = tape.relu(h);
        let a = self.attention2.apply(tape, h);
        tape.sigmoid(a)
    }

    /// Fusion MLP on a flat `K·d₁` node.
    pub fn fuse(&self, tape: &mut Tape, weighted: NodeId) -> Result<NodeId, FusionError> {
        let n = tape.value(weighted).len();
        if n != self.k * self.d1 {
            return Err(FusionError::LengthMismatch {
                expected: self.k * self.d1,
                found: n,
            });
        }
        let h = self.fusion1.apply(tape, weighted);
        let h = tape.relu(h);
        Ok(self.fusion2.apply(tape, h))
    }

    /// One self-attention layer over the `K` part tokens, then mean-pooling.
    /// Returns the `[d₁]` embedding and the attention node.
    pub fn self_attention_pool(
        &self,
        tape: &mut Tape,
        parts: &[NodeId],
    ) -> Result<(NodeId, NodeId), FusionError> {
        self.check(tape, parts)?;
        let (k, d1) = (self.k, self.d1);
        let cat = tape.concat(parts);
        let tokens = tape.reshape(cat, vec![k, d1]);
        let project = |tape: &mut Tape, lin: Linear| {
            let w = tape.param(lin.weight);
            let b = tape.param(lin.bias);
            let y = tape.matmul(w, false, tokens, true);
            let y = tape.channel_bias(y, b);
            tape.reshape(y, vec![d1, 1, k])
        };
        let q = project(tape, self.self_query);
        let kk = project(tape, self.self_key);
        let v = project(tape, self.self_value);
        let attn = tape.attention(q, kk, v, 1);
        Ok((tape.mean_channels(attn), attn))
    }

    /// Full fusion for the configured strategy.
    pub fn forward(
        &self,
        tape: &mut Tape,
        parts: &[NodeId],
        strategy: FusionStrategy,
    ) -> Result<FusionOutput, FusionError> {
        match strategy {
            FusionStrategy::MlpAttention => {
                let alpha = self.compute_attention(tape, parts)?;
                let cat = tape.concat(parts);
                let weighted = tape.block_scale(cat, alpha);
                let embedding = self.fuse(tape, weighted)?;
                Ok(FusionOutput {
                    embedding,
                    alpha: Some(alpha),
                })
            }
            FusionStrategy::NoAttention => {
                self.check(tape, parts)?;
                let cat = tape.concat(parts);
                let embedding = self.fuse(tape, cat)?;
                Ok(FusionOutput {
                    embedding,
                    alpha: None,
                })
            }
            FusionStrategy::SelfAttentionPool => {
                let (embedding, _) = self.self_attention_pool(tape, parts)?;
                Ok(FusionOutput {
                    embedding,
                    alpha: None,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub embedding: NodeId,
    /// Part weights, present for `mlp_attention`.
    pub alpha: Option<NodeId>,
}

/// `γ'ᵢ = αᵢ · γᵢ`.
pub fn apply_attention(parts: &[Vec<f64>], alpha: &[f64]) -> Result<Vec<Vec<f64>>, FusionError> {
    if parts.len() != alpha.len() {
        return Err(FusionError::LengthMismatch {
            expected: parts.len(),
            found: alpha.len(),
        });
    }
    Ok(parts
        .iter()
        .zip(alpha)
        .map(|(p, &a)| p.iter().map(|x| a * x).collect())
        .collect())
}

/// Cosine matching distance `−cos(q, s)`, in `[−1, 1]`.
pub fn distance(query: &[f64], support: &[f64]) -> Result<f64, FusionError> {
    if query.len() != support.len() {
        return Err(FusionError::LengthMismatch {
            expected: support.len(),
            found: query.len(),
        });
    }
    let nq = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ns = support.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nq == 0.0 || ns == 0.0 || !nq.is_finite() || !ns.is_finite() {
        return Err(FusionError::DegenerateEmbedding);
    }
    let dot: f64 = query.iter().zip(support).map(|(a, b)| a * b).sum();
    Ok((-(dot / (nq * ns))).clamp(-1.0, 1.0))
}

/// Softmax over `−distance / τ`; ties in the argmax go to the earliest
/// support.
pub fn classify_query(
    query: &[f64],
    supports: &[&[f64]],
    temperature: f64,
) -> Result<(usize, Vec<f64>), FusionError> {
    if supports.is_empty() {
        return Err(FusionError::NoSupports);
    }
    let mut logits = supports
        .iter()
        .map(|s| distance(query, s).map(|d| -d / temperature))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    softmax_in_place(&mut logits);
    Ok((best, logits))
}

/// Mean cross-entropy of the queries against cosine logits, evaluated
/// without a tape.
pub fn episode_loss(
    queries: &[(&[f64], &str)],
    supports: &[(&str, &[f64])],
    temperature: f64,
) -> Result<f64, FusionError> {
    if supports.is_empty() {
        return Err(FusionError::NoSupports);
    }
    let refs: Vec<&[f64]> = supports.iter().map(|(_, s)| *s).collect();
    let mut total = 0.0;
    for (q, label) in queries {
        let target = supports
            .iter()
            .position(|(c, _)| c == label)
            .ok_or_else(|| FusionError::UnknownLabel(label.to_string()))?;
        let logits = refs
            .iter()
            .map(|s| distance(q, s).map(|d| -d / temperature))
            .collect::<Result<Vec<_>, _>>()?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[target];
    }
    Ok(total / queries.len().max(1) as f64)
}

/// Records the cosine-softmax loss on a tape: rows of `queries` and
/// `supports` are embeddings, `targets[i]` indexes the support of query `i`.
pub fn episode_loss_on_tape(
    tape: &mut Tape,
    queries: NodeId,
    supports: NodeId,
    targets: &[usize],
    temperature: f64,
) -> Result<NodeId, FusionError> {
    let qn = tape.l2_normalize_rows(queries)?;
    let sn = tape.l2_normalize_rows(supports)?;
    let cos = tape.matmul(qn, false, sn, true);
    let logits = tape.scale(cos, 1.0 / temperature);
    Ok(tape.cross_entropy(logits, targets))
}

/// Per-sample attention summary used by `attention-report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample_id: String,
    pub true_class: Option<String>,
    pub attention: Vec<f64>,
    pub top3: Vec<String>,
}

/// Indices of the `n` largest weights; ties keep part order.
pub fn top_parts(attention: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attention.len()).collect();
    idx.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]));
    idx.truncate(n);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize, d1: usize, cfg: &FusionConfig) -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::register(&mut store, cfg, k, d1, &mut rng).unwrap();
        (store, p)
    }

    fn zero(store: &mut ParamStore, lin: Linear) {
        for id in [lin.weight, lin.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn parts(tape: &mut Tape, k: usize, d1: usize, seed: u64) -> Vec<NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| tape.input(Tensor::from_vec((0..d1).map(|_| rng.random_range(-1.0..1.0)).collect())))
            .collect()
    }

    #[test]
    fn zero_attention_mlp_gives_half() {
        let cfg = FusionConfig::default();
        let (mut store, p) = setup(4, 3, &cfg);
        zero(&mut store, p.attention1);
        zero(&mut store, p.attention2);
        let mut tape = Tape::new(&store);
        let ps = parts(&mut tape, 4, 3, 1);
        let a = p.compute_attention(&mut tape, &ps).unwrap();
        assert!(tape.value(a).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn attention_in_open_unit_interval_and_matches_hand_computation() {
        let cfg = FusionConfig {
            attention_hidden: Some(1),
            ..FusionConfig::default()
        };
        let (mut store, p) = setup(2, 2, &cfg);
        // hidden = relu(w·x), alpha_i = sigmoid(u_i * hidden)
        *store.get_mut(p.attention1.weight) = Tensor::new(vec![1, 4], vec![1.0, -0.5, 0.25, 2.0]);
        *store.get_mut(p.attention2.weight) = Tensor::new(vec![2, 1], vec![0.7, -1.3]);
        let mut tape = Tape::new(&store);
        let a = tape.input(Tensor::from_vec(vec![0.2, 0.4]));
        let b = tape.input(Tensor::from_vec(vec![-0.6, 0.3]));
        let alpha = p.compute_attention(&mut tape, &[a, b]).unwrap();
        let hidden: f64 = 0.2 - 0.5 * 0.4 + 0.25 * -0.6 + 2.0 * 0.3;
        let got = tape.value(alpha).data();
        assert!((got[0] - sigmoid(0.7 * hidden)).abs() < 1e-15);
        assert!((got[1] - sigmoid(-1.3 * hidden)).abs() < 1e-15);
        assert!(got.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn attention_rejects_wrong_part_count() {
        let (store, p) = setup(3, 2, &FusionConfig::default());
        let mut tape = Tape::new(&store);
        let ps = parts(&mut tape, 2, 2, 0);
        assert_eq!(
            p.compute_attention(&mut tape, &ps).unwrap_err(),
            FusionError::LengthMismatch { expected: 3, found: 2 }
        );
    }

    #[test]
    fn apply_attention_cases() {
        let ps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(apply_attention(&ps, &[1.0, 1.0]).unwrap(), ps);
        let z = apply_attention(&ps, &[0.0, 1.0]).unwrap();
        assert_eq!(z[0], vec![0.0, 0.0]);
        let h = apply_attention(&ps, &[0.5, 0.25]).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_eq!((norm(&h[0]), norm(&h[1])), (0.5, 0.25));
    }

    #[test]
    fn fuse_zero_identity_and_oracle() {
        let (k, d1) = (2, 2);
        let cfg = FusionConfig {
            embedding_dim: 4,
            ..FusionConfig::default()
        };
        let (mut store, p) = setup(k, d1, &cfg);
        {
            let mut tape = Tape::new(&store);
            let x = tape.input(Tensor::zeros(&[4]));
            let e = p.fuse(&mut tape, x).unwrap();
            assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
        }
        // random case against loops
        let x = vec![0.3, -0.1, 0.8, 0.05];
        let w1 = store.get(p.fusion1.weight).clone();
        let w2 = store.get(p.fusion2.weight).clone();
        let h: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| w1.data()[i * 4 + j] * x[j]).sum::<f64>().max(0.0))
            .collect();
        let expect: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| w2.data()[i * 4 + j] * h[j]).sum::<f64>())
            .collect();
        {
            let mut tape = Tape::new(&store);
            let xn = tape.input(Tensor::from_vec(x.clone()));
            let e = p.fuse(&mut tape, xn).unwrap();
            for (a, b) in tape.value(e).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // identity weights reproduce non-negative concatenations
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        *store.get_mut(p.fusion1.weight) = Tensor::new(vec![4, 4], eye.clone());
        *store.get_mut(p.fusion2.weight) = Tensor::new(vec![4, 4], eye);
        let mut tape = Tape::new(&store);
        let c = vec![0.1, 0.2, 0.3, 0.4];
        let xn = tape.input(Tensor::from_vec(c.clone()));
        let e = p.fuse(&mut tape, xn).unwrap();
        assert_eq!(tape.value(e).data(), c.as_slice());
        let short = tape.input(Tensor::zeros(&[3]));
        assert!(p.fuse(&mut tape, short).is_err());
    }

    #[test]
    fn no_attention_equals_all_ones_weighting() {
        let cfg = FusionConfig::default();
        let (store, p) = setup(3, 4, &cfg);
        let mut tape = Tape::new(&store);
        let ps = parts(&mut tape, 3, 4, 9);
        let plain = p.forward(&mut tape, &ps, FusionStrategy::NoAttention).unwrap();
        let ones = tape.input(Tensor::filled(&[3], 1.0));
        let cat = tape.concat(&ps);
        let w = tape.block_scale(cat, ones);
        let forced = p.fuse(&mut tape, w).unwrap();
        assert_eq!(tape.value(plain.embedding), tape.value(forced));
    }

    #[test]
    fn distance_cases() {
        let q = [0.3, -1.2, 2.0];
        assert!((distance(&q, &q).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(distance(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        assert!((distance(&q, &neg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            distance(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err(),
            FusionError::DegenerateEmbedding
        );
        assert_eq!(
            FusionError::DegenerateEmbedding.to_string(),
            "degenerate embedding (zero norm)"
        );
    }

    #[test]
    fn classify_cases() {
        let (c, p) = classify_query(&[0.4, 0.1], &[&[3.0, 1.0]], 0.1).unwrap();
        assert_eq!((c, p), (0, vec![1.0]));

        let q = [0.9, 0.1];
        let (c, _) = classify_query(&q, &[&[1.0, 0.0], &[0.0, 1.0]], 0.1).unwrap();
        assert_eq!(c, 0);
        let n = (0.82f64).sqrt();
        assert!((-distance(&q, &[1.0, 0.0]).unwrap() - 0.9 / n).abs() < 1e-12);
        assert!((0.9 / n - 0.9939).abs() < 1e-4 && (0.1 / n - 0.1104).abs() < 1e-4);

        let (c, p) = classify_query(&[1.0, 1.0], &[&[1.0, 0.0], &[0.0, 1.0]], 0.1).unwrap();
        assert_eq!(c, 0);
        assert_eq!(p[0], p[1]);
        assert_eq!(classify_query(&q, &[], 0.1).unwrap_err(), FusionError::NoSupports);
    }

    #[test]
    fn loss_cases() {
        let e1: &[f64] = &[1.0, 0.0];
        let e2: &[f64] = &[0.0, 1.0];
        let sup = [("a", e1), ("b", e2)];
        let tiny = episode_loss(&[(e1, "a")], &sup, 1e-3).unwrap();
        assert!(tiny < 1e-12);
        // equal logits
        let mid: &[f64] = &[1.0, 1.0];
        let l = episode_loss(&[(mid, "a")], &sup, 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        // hand computation, tau = 0.5: logits (2·0.6, 2·0.8)
        let q: &[f64] = &[0.6, 0.8];
        let l = episode_loss(&[(q, "a")], &sup, 0.5).unwrap();
        let expect = -(1.2f64.exp() / (1.2f64.exp() + 1.6f64.exp())).ln();
        assert!((l - expect).abs() < 1e-12);
        assert_eq!(
            episode_loss(&[(q, "z")], &sup, 0.5).unwrap_err(),
            FusionError::UnknownLabel("z".into())
        );
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let qv = vec![0.6, 0.8, -0.3, 0.2];
        let sv = vec![1.0, 0.1, 0.2, 1.5];
        let q = tape.input(Tensor::new(vec![2, 2], qv.clone()));
        let s = tape.input(Tensor::new(vec![2, 2], sv.clone()));
        let l = episode_loss_on_tape(&mut tape, q, s, &[1, 0], 0.2).unwrap();
        let plain = episode_loss(
            &[(&qv[..2], "b"), (&qv[2..], "a")],
            &[("a", &sv[..2]), ("b", &sv[2..])],
            0.2,
        )
        .unwrap();
        assert!((tape.value(l).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn self_attention_pool_single_token_is_value_projection() {
        let cfg = FusionConfig::default();
        let (store, p) = setup(1, 3, &cfg);
        let mut tape = Tape::new(&store);
        let x = vec![0.5, -0.2, 0.9];
        let part = tape.input(Tensor::from_vec(x.clone()));
        let (e, attn) = p.self_attention_pool(&mut tape, &[part]).unwrap();
        assert_eq!(tape.attention_weights(attn).unwrap().1, &[1.0]);
        let w = store.get(p.self_value.weight).data();
        for i in 0..3 {
            let expect: f64 = (0..3).map(|j| w[i * 3 + j] * x[j]).sum();
            assert!((tape.value(e).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_pool_matches_loop_oracle() {
        let (k, d) = (3, 2);
        let (store, p) = setup(k, d, &FusionConfig::default());
        let mut tape = Tape::new(&store);
        let ps = parts(&mut tape, k, d, 4);
        let xs: Vec<Vec<f64>> = ps.iter().map(|&n| tape.value(n).data().to_vec()).collect();
        let (e, attn) = p.self_attention_pool(&mut tape, &ps).unwrap();
        let proj = |lin: Linear| -> Vec<Vec<f64>> {
            let w = store.get(lin.weight).data();
            xs.iter()
                .map(|x| (0..d).map(|i| (0..d).map(|j| w[i * d + j] * x[j]).sum()).collect())
                .collect()
        };
        let (q, kk, v) = (proj(p.self_query), proj(p.self_key), proj(p.self_value));
        let mut out = vec![0.0; d];
        for qi in &q {
            let mut row: Vec<f64> = (0..k)
                .map(|j| (0..d).map(|c| qi[c] * kk[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            softmax_in_place(&mut row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..d {
                out[c] += (0..k).map(|j| row[j] * v[j][c]).sum::<f64>() / k as f64;
            }
        }
        let w = tape.attention_weights(attn).unwrap().1;
        assert!(w.chunks(k).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        for (a, b) in tape.value(e).data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_parts_breaks_ties_by_order() {
        assert_eq!(top_parts(&[0.5; 10], 3), vec![0, 1, 2]);
        assert_eq!(top_parts(&[0.1, 0.9, 0.5, 0.9], 3), vec![1, 3, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..12).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-10.0f64..10.0, n),
                    proptest::collection::vec(-10.0f64..10.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn distance_laws((q, s) in vecs(), a in 0.001f64..1000.0) {
                prop_assume!(q.iter().any(|v| *v != 0.0) && s.iter().any(|v| *v != 0.0));
                let d = distance(&q, &s).unwrap();
                prop_assert!((-1.0..=1.0).contains(&d));
                prop_assert!((d - distance(&s, &q).unwrap()).abs() <= 1e-12);
                let qa: Vec<f64> = q.iter().map(|v| v * a).collect();
                prop_assert!((d - distance(&qa, &s).unwrap()).abs() <= 1e-9);
            }

            #[test]
            fn classification_ignores_temperature_and_scale(
                q in proptest::collection::vec(-1.0f64..1.0, 4),
                sup in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..6),
                tau in 0.01f64..10.0,
                a in 0.01f64..100.0,
            ) {
                prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
                prop_assume!(sup.iter().all(|s| s.iter().any(|v| v.abs() > 1e-3)));
                let refs: Vec<&[f64]> = sup.iter().map(Vec::as_slice).collect();
                let (c1, _) = classify_query(&q, &refs, 0.1).unwrap();
                let (c2, _) = classify_query(&q, &refs, tau).unwrap();
                let scaled: Vec<f64> = q.iter().map(|v| v * a).collect();
                let (c3, p) = classify_query(&scaled, &refs, tau).unwrap();
                prop_assert_eq!(c1, c2);
                prop_assert_eq!(c1, c3);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
