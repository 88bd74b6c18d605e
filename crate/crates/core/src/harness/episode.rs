use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use super::protocol::label_cmp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EpisodeError {
    #[error("episode needs {requested} classes but only {available} are available")]
    InsufficientClasses { requested: usize, available: usize },
    #[error("class {class} has {available} samples, episodes need {needed}")]
    InsufficientSamples {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("ways and queries must both be at least 1")]
    Empty,
}

/// Sample positions grouped by class, classes in natural label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    classes: Vec<String>,
    members: Vec<Vec<usize>>,
}

impl ClassIndex {
    /// Groups positions `0..labels.len()`; classes not in `keep` (when
    /// given) are dropped.
    pub fn new<'a>(labels: impl IntoIterator<Item = &'a str>, keep: Option<&[String]>) -> Self {
        let mut pairs: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, label) in labels.into_iter().enumerate() {
            if keep.is_some_and(|k| !k.iter().any(|c| c == label)) {
                continue;
            }
            match pairs.iter_mut().find(|(c, _)| c == label) {
                Some((_, m)) => m.push(i),
                None => pairs.push((label.to_string(), vec![i])),
            }
        }
        pairs.sort_by(|a, b| label_cmp(&a.0, &b.0));
        let (classes, members) = pairs.into_iter().unzip();
        Self { classes, members }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// One C-way one-shot task. Sample entries are positions in the dataset the
/// [`ClassIndex`] was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<String>,
    /// `support[i]` is the single support sample of `classes[i]`.
    pub support: Vec<usize>,
    /// `(sample, class position)` pairs.
    pub queries: Vec<(usize, usize)>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    pub fn sample_count(&self) -> usize {
        self.support.len() + self.queries.len()
    }
}

/// Queries assigned to episode class `i`: `queries` spread round-robin.
fn queries_for(i: usize, ways: usize, queries: usize) -> usize {
    queries / ways + usize::from(i < queries % ways)
}

/// Draws `ways` distinct classes, one support per class and `queries`
/// queries distributed round-robin over the classes, never reusing a
/// sample within the episode.
///
/// Every class in the index must hold enough samples for the largest
/// per-class draw, so the outcome never depends on which classes happen to
/// be picked.
pub fn sample_episode<R: Rng>(
    index: &ClassIndex,
    ways: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    if ways == 0 || queries == 0 {
        return Err(EpisodeError::Empty);
    }
    if index.len() < ways {
        return Err(EpisodeError::InsufficientClasses {
            requested: ways,
            available: index.len(),
        });
    }
    let needed = 1 + queries_for(0, ways, queries);
    for (c, m) in index.classes.iter().zip(&index.members) {
        if m.len() < needed {
            return Err(EpisodeError::InsufficientSamples {
                class: c.clone(),
                available: m.len(),
                needed,
            });
        }
    }
    let picked = index::sample(rng, index.len(), ways);
    let mut episode = Episode {
        classes: Vec::with_capacity(ways),
        support: Vec::with_capacity(ways),
        queries: Vec::with_capacity(queries),
    };
    for (pos, class) in picked.iter().enumerate() {
        let members = &index.members[class];
        let nq = queries_for(pos, ways, queries);
        let draw = index::sample(rng, members.len(), 1 + nq);
        let mut it = draw.iter().map(|i| members[i]);
        episode.classes.push(index.classes[class].clone());
        episode.support.push(it.next().expect("one support"));
        episode.queries.extend(it.map(|s| (s, pos)));
    }
    Ok(episode)
}
