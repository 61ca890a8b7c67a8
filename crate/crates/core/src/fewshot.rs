//! Episodic N-way K-shot machinery.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::Mask;
use crate::autodiff::softmax_row;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are treated as this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`.
    pub image: Tensor,
    pub mask: Option<Mask>,
    pub label: usize,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Option<Mask>, label: usize) -> Result<Self> {
        let id = id.into();
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!("sample {id} image"), &[1, 0, 0], shape));
        }
        if let Some(m) = &mask {
            if [m.height(), m.width()] != shape[1..] {
                return Err(Error::shape(
                    format!("sample {id} mask"),
                    &shape[1..],
                    &[m.height(), m.width()],
                ));
            }
        }
        Ok(Sample {
            id,
            image,
            mask,
            label,
        })
    }

    pub fn mask_or_err(&self) -> Result<&Mask> {
        self.mask
            .as_ref()
            .ok_or_else(|| Error::MissingMask(self.id.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Sorted by (label, id); labels are episode-local in `[0, n_way)`.
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// `classes[i]` is the pool label that episode label `i` stands for.
    pub classes: Vec<usize>,
    pub seed: u64,
}

/// Draws an episode: for each class, `k_shot + q_per_class` distinct samples
/// uniformly without replacement, the first `k_shot` going to the support set.
pub fn sample_episode(
    pool: &[Sample],
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    rng_seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config("episodes need n_way >= 1 and k_shot >= 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let needed = k_shot + q_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let classes: Vec<usize> = if by_class.len() <= n_way {
        for class in 0..n_way {
            let available = by_class.get(&class).map_or(0, Vec::len);
            if available < needed {
                return Err(Error::InsufficientClass {
                    class,
                    needed,
                    available,
                });
            }
        }
        (0..n_way).collect()
    } else {
        let eligible: Vec<usize> = by_class
            .iter()
            .filter(|(_, members)| members.len() >= needed)
            .map(|(&c, _)| c)
            .collect();
        if eligible.len() < n_way {
            let (&class, members) = by_class
                .iter()
                .find(|(_, m)| m.len() < needed)
                .expect("some class is short");
            return Err(Error::InsufficientClass {
                class,
                needed,
                available: members.len(),
            });
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n_way)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        picked.sort_unstable();
        picked
    };

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_per_class);
    for (local, class) in classes.iter().enumerate() {
        let members = &by_class[class];
        let draw = rand::seq::index::sample(&mut rng, members.len(), needed);
        for (rank, i) in draw.into_iter().enumerate() {
            let mut s = pool[members[i]].clone();
            s.label = local;
            if rank < k_shot {
                support.push(s);
            } else {
                query.push(s);
            }
        }
    }
    let order = |a: &Sample, b: &Sample| (a.label, &a.id).cmp(&(b.label, &b.id));
    support.sort_by(order);
    query.sort_by(order);
    Ok(Episode {
        support,
        query,
        n_way,
        k_shot,
        q_per_class,
        classes,
        seed: rng_seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn n_way(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Row-major `[N, d]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let flat = self.prototypes.iter().flatten().copied().collect();
        Tensor::new(&[self.n_way(), self.dim()], flat)
    }
}

/// Row indices per class, each group ordered by sample id. Both the value
/// path and the graph path sum in this order, so prototypes do not depend on
/// the order the support set arrives in.
pub fn prototype_groups(labels: &[usize], ids: &[&str], n_way: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != ids.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: ids.len(),
        });
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_way];
    for (i, &label) in labels.iter().enumerate() {
        if label >= n_way {
            return Err(Error::LabelOutOfRange {
                label,
                n_classes: n_way,
            });
        }
        groups[label].push(i);
    }
    for (class, group) in groups.iter_mut().enumerate() {
        if group.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        group.sort_by(|&a, &b| ids[a].cmp(ids[b]).then(a.cmp(&b)));
    }
    Ok(groups)
}

/// Class prototypes as the mean support embedding per class.
pub fn compute_prototypes(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    ids: &[&str],
    n_way: usize,
) -> Result<PrototypeSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            actual: embeddings.len(),
        });
    }
    let d = embeddings.first().map_or(0, Vec::len);
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            actual: bad.len(),
        });
    }
    let groups = prototype_groups(labels, ids, n_way)?;
    let prototypes = groups
        .iter()
        .map(|members| {
            let mut acc = vec![0.0; d];
            for &i in members {
                for (a, e) in acc.iter_mut().zip(&embeddings[i]) {
                    *a += e;
                }
            }
            let n = members.len() as f64;
            acc.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Ok(PrototypeSet { prototypes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    pub probs: Vec<f64>,
}

impl ProbVector {
    /// First index of the largest probability.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// `-‖q - c_k‖²` for every prototype.
pub fn prototype_logits(query: &[f64], prototypes: &PrototypeSet) -> Result<Vec<f64>> {
    prototypes
        .prototypes
        .iter()
        .map(|c| {
            if c.len() != query.len() {
                return Err(Error::Dimension {
                    expected: c.len(),
                    actual: query.len(),
                });
            }
            Ok(-query.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        })
        .collect()
}

/// Softmax over negative squared Euclidean distances to the prototypes.
pub fn classify_query(query_embedding: &[f64], prototypes: &PrototypeSet) -> Result<ProbVector> {
    let logits = prototype_logits(query_embedding, prototypes)?;
    Ok(ProbVector {
        probs: softmax_row(&logits),
    })
}

pub fn proto_loss(probs: &ProbVector, true_label: usize) -> Result<f64> {
    let p = probs.probs.get(true_label).ok_or(Error::LabelOutOfRange {
        label: true_label,
        n_classes: probs.probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}
