use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::episode::{sample_episode, ClassIndex, EpisodeError};
use super::protocol::{ExemplarSource, ProtocolError, ProtocolSplit};
use crate::fusion::{classify_query, FusionError};
use crate::model::{Model, ModelError};
use crate::skeleton::SkeletonSequence;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the test pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Anything that maps a sequence to a fused embedding.
pub trait Embedder: Sync {
    fn embed(&self, seq: &SkeletonSequence) -> Result<Vec<f64>, ModelError>;
    fn temperature(&self) -> f64;
    /// Stable identifier recorded in reports.
    fn fingerprint(&self) -> String;
}

impl Embedder for Model {
    fn embed(&self, seq: &SkeletonSequence) -> Result<Vec<f64>, ModelError> {
        Model::embed(self, seq)
    }

    fn temperature(&self) -> f64 {
        self.config().fusion.temperature
    }

    /// Hash of the configuration and every parameter value.
    fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(self.config()).expect("config serializes");
        for (_, name, t) in self.params().iter() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fingerprint(&bytes)
    }
}

/// Lowercase hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    OneShot,
    Episodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`, or 0 for a class without test samples.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub test_sample_count: usize,
    pub ways: Option<usize>,
    pub episode_count: Option<usize>,
    pub config_fingerprint: String,
    pub exemplars: BTreeMap<String, String>,
    pub exemplar_source: Option<ExemplarSource>,
}

struct Tally {
    classes: Vec<String>,
    correct: Vec<usize>,
    total: Vec<usize>,
}

impl Tally {
    fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            correct: vec![0; n],
            total: vec![0; n],
        }
    }

    fn record(&mut self, class: usize, hit: bool) {
        self.total[class] += 1;
        self.correct[class] += usize::from(hit);
    }

    fn finish(self) -> (usize, usize, Vec<ClassAccuracy>) {
        let correct = self.correct.iter().sum();
        let total = self.total.iter().sum();
        let per_class = self
            .classes
            .into_iter()
            .zip(self.correct.iter().zip(&self.total))
            .map(|(class, (&c, &t))| ClassAccuracy {
                class,
                correct: c,
                total: t,
                accuracy: if t == 0 { 0.0 } else { c as f64 / t as f64 },
            })
            .collect();
        (correct, total, per_class)
    }
}

fn embed_all<E: Embedder + ?Sized>(
    embedder: &E,
    dataset: &[SkeletonSequence],
    positions: &[usize],
) -> Result<Vec<Vec<f64>>, ModelError> {
    positions
        .par_iter()
        .map(|&i| embedder.embed(&dataset[i]))
        .collect()
}

/// Classifies every test-pool sample against the exemplar of each
/// evaluation class.
pub fn evaluate_one_shot<E: Embedder + ?Sized>(
    embedder: &E,
    split: &ProtocolSplit,
    dataset: &[SkeletonSequence],
) -> Result<EvalReport, EvalError> {
    let exemplar_pos = split.exemplar_positions(dataset)?;
    let pool = split.test_pool(dataset);
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let prototypes = embed_all(embedder, dataset, &exemplar_pos)?;
    let queries = embed_all(embedder, dataset, &pool)?;
    let refs: Vec<&[f64]> = prototypes.iter().map(Vec::as_slice).collect();
    let mut tally = Tally::new(split.eval_classes.clone());
    for (&i, q) in pool.iter().zip(&queries) {
        let label = dataset[i].label.as_deref().expect("pool samples are labelled");
        let truth = split
            .eval_classes
            .iter()
            .position(|c| c == label)
            .expect("pool samples belong to evaluation classes");
        let (pred, _) = classify_query(q, &refs, embedder.temperature())?;
        tally.record(truth, pred == truth);
    }
    let (correct, total, per_class) = tally.finish();
    Ok(EvalReport {
        mode: EvalMode::OneShot,
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_class,
        test_sample_count: pool.len(),
        ways: Some(split.eval_classes.len()),
        episode_count: None,
        config_fingerprint: embedder.fingerprint(),
        exemplars: split.exemplars.clone(),
        exemplar_source: Some(split.exemplar_source),
    })
}

/// Mean query accuracy over `episode_count` sampled `ways`-way episodes
/// drawn from `classes`.
pub fn evaluate_episodic<E: Embedder + ?Sized>(
    embedder: &E,
    dataset: &[SkeletonSequence],
    classes: &[String],
    ways: usize,
    queries: usize,
    episode_count: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let index = ClassIndex::new(
        dataset.iter().map(|s| s.label.as_deref().unwrap_or("")),
        Some(classes),
    );
    evaluate_on_index(embedder, dataset, &index, ways, queries, episode_count, seed)
}

pub(crate) fn evaluate_on_index<E: Embedder + ?Sized>(
    embedder: &E,
    dataset: &[SkeletonSequence],
    index: &ClassIndex,
    ways: usize,
    queries: usize,
    episode_count: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = (0..episode_count)
        .map(|_| sample_episode(index, ways, queries, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    if episodes.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    // embedding is deterministic, so each sample is embedded once
    let mut used: Vec<usize> = (0..index.len())
        .flat_map(|c| index.members(c).iter().copied())
        .collect();
    used.sort_unstable();
    let embeddings = embed_all(embedder, dataset, &used)?;
    let lookup = |i: usize| -> &[f64] {
        &embeddings[used.binary_search(&i).expect("indexed sample")]
    };
    let mut tally = Tally::new(index.classes().to_vec());
    for ep in &episodes {
        let supports: Vec<&[f64]> = ep.support.iter().map(|&s| lookup(s)).collect();
        for &(q, c) in &ep.queries {
            let (pred, _) = classify_query(lookup(q), &supports, embedder.temperature())?;
            let class = index
                .classes()
                .iter()
                .position(|x| *x == ep.classes[c])
                .expect("episode class is indexed");
            tally.record(class, pred == c);
        }
    }
    let (correct, total, per_class) = tally.finish();
    Ok(EvalReport {
        mode: EvalMode::Episodic,
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_class,
        test_sample_count: used.len(),
        ways: Some(ways),
        episode_count: Some(episode_count),
        config_fingerprint: embedder.fingerprint(),
        exemplars: BTreeMap::new(),
        exemplar_source: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::protocol::{build_explicit_protocol, Catalog, Exemplars};
    use crate::skeleton::{generate_synthetic_dataset, JointTopology, SynthSpec};
    use rand::Rng;

    /// Embeds a sequence as its first few coordinates.
    struct Raw;

    impl Embedder for Raw {
        fn embed(&self, seq: &SkeletonSequence) -> Result<Vec<f64>, ModelError> {
            Ok(seq.coords()[..4].to_vec())
        }
        fn temperature(&self) -> f64 {
            0.1
        }
        fn fingerprint(&self) -> String {
            "raw".into()
        }
    }

    fn seq(id: &str, label: &str, v: [f64; 4]) -> SkeletonSequence {
        SkeletonSequence::new(id, Some(label.into()), 2, 1, 2, vec![v.to_vec()]).unwrap()
    }

    fn random_dataset(classes: usize, per_class: usize, seed: u64) -> Vec<SkeletonSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..classes * per_class)
            .map(|i| {
                let v = [(); 4].map(|_| rng.random_range(-1.0..1.0));
                seq(&format!("s{i:05}"), &format!("A{}", i % classes + 1), v)
            })
            .collect()
    }

    fn split_for(data: &[SkeletonSequence], classes: usize) -> ProtocolSplit {
        let cat = Catalog::from_sequences(data);
        let labels = cat.labels();
        let eval: Vec<String> = (1..=classes).map(|i| format!("A{i}")).collect();
        let train = vec!["T".to_string()];
        let mut all = labels.clone();
        all.push("T".into());
        build_explicit_protocol(&all, &train, &eval, Exemplars::SmallestId(&cat)).unwrap()
    }

    #[test]
    fn perfect_match_scores_one() {
        let dirs = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let data: Vec<_> = (0..12)
            .map(|i| seq(&format!("s{i:02}"), &format!("A{}", i % 3 + 1), dirs[i % 3]))
            .collect();
        let r = evaluate_one_shot(&Raw, &split_for(&data, 3), &data).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.total, 9);
        assert_eq!(r.exemplars["A1"], "s00");
    }

    #[test]
    fn random_embeddings_score_chance() {
        let data = random_dataset(20, 150, 11);
        let r = evaluate_one_shot(&Raw, &split_for(&data, 20), &data).unwrap();
        assert_eq!(r.total, 20 * 149);
        assert!((r.accuracy - 0.05).abs() < 0.02, "{}", r.accuracy);
    }

    #[test]
    fn per_class_accuracies_weight_to_overall() {
        let data = random_dataset(6, 13, 2);
        let r = evaluate_one_shot(&Raw, &split_for(&data, 6), &data).unwrap();
        let weighted: f64 = r
            .per_class
            .iter()
            .map(|c| c.accuracy * c.total as f64)
            .sum::<f64>()
            / r.total as f64;
        assert!((weighted - r.accuracy).abs() < 1e-12);
        assert_eq!(r.accuracy, r.correct as f64 / r.total as f64);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let data = vec![seq("a", "A1", [1.0, 0.0, 0.0, 0.0])];
        assert!(matches!(
            evaluate_one_shot(&Raw, &split_for(&data, 1), &data),
            Err(EvalError::EmptyPool)
        ));
    }

    #[test]
    fn single_way_episodes_are_always_right() {
        let data = random_dataset(4, 5, 3);
        let classes: Vec<String> = (1..=4).map(|i| format!("A{i}")).collect();
        let r = evaluate_episodic(&Raw, &data, &classes, 1, 1, 50, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn episodic_is_deterministic() {
        let data = random_dataset(8, 4, 5);
        let classes: Vec<String> = (1..=8).map(|i| format!("A{i}")).collect();
        let a = evaluate_episodic(&Raw, &data, &classes, 5, 5, 40, 9).unwrap();
        let b = evaluate_episodic(&Raw, &data, &classes, 5, 5, 40, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total, 200);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        // pure noise: no class signal at all
        let spec: SynthSpec = serde_json::from_value(serde_json::json!({
            "frames": 8, "samples_per_class": 6, "noise_std": 0.3,
            "classes": (1..=8).map(|i| serde_json::json!({"label": format!("A{i}"), "components": []}))
                .collect::<Vec<_>>()
        }))
        .unwrap();
        let data = generate_synthetic_dataset(&JointTopology::ntu25(), &spec, 4).unwrap();
        let model = Model::new(crate::model::ModelConfig::toy(), 1).unwrap();
        let classes: Vec<String> = (1..=8).map(|i| format!("A{i}")).collect();
        let r = evaluate_episodic(&model, &data, &classes, 5, 5, 1000, 2).unwrap();
        assert!((0.1..=0.3).contains(&r.accuracy), "{}", r.accuracy);
    }
}
