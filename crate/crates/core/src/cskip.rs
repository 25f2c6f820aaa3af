//! Class-wise skipping: per-image class subsets for the matching loss.
//! Classes are ranked once by similarity to the image; the top `r·M` ranks
//! are always kept and deeper ranks survive with probability
//! `exp(-λ·(rank - r·M))`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::error::{Error, Result};
use crate::objective::cosine;
use crate::rng::Rng;

/// Classes of one image ordered by descending cosine similarity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRanking {
    /// Class ids, closest first.
    order: Vec<usize>,
    /// `rank[c]` is the 1-based rank of class `c`.
    rank: Vec<usize>,
}

impl ClassRanking {
    /// From an explicit closest-first order of the ids `0..M`.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        if order.is_empty() {
            return Err(Error::EmptyClasses);
        }
        let mut rank = vec![0; order.len()];
        for (i, &c) in order.iter().enumerate() {
            if c >= order.len() || rank[c] != 0 {
                return Err(Error::Config(format!("ranking order is not a permutation (class {c})")));
            }
            rank[c] = i + 1;
        }
        Ok(Self { order, rank })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn rank_of(&self, class: usize) -> usize {
        self.rank[class]
    }
}

/// Ranks class `j` (the `j`-th feature) by descending cosine to the
/// image; ties go to the lower class id.
pub fn rank_classes(image_feature: &Array, class_features: &[Array]) -> Result<ClassRanking> {
    if class_features.is_empty() {
        return Err(Error::EmptyClasses);
    }
    let sims: Vec<f64> = class_features
        .iter()
        .map(|t| cosine(image_feature.data(), t.data()))
        .collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    ClassRanking::from_order(order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Exponential,
    /// Deterministic top `⌈r·M⌉`.
    TopK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub r: f64,
    pub lambda: f64,
    pub mode: SamplerMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            r: 0.5,
            lambda: 0.3,
            mode: SamplerMode::Exponential,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Config(format!("r must be in [0, 1], got {}", self.r)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Ranks kept unconditionally.
    pub fn keep_threshold(&self, m: usize) -> f64 {
        self.r * m as f64
    }
}

/// Inclusion probability of the class at 1-based `rank` among `m`.
pub fn sample_probability(rank: usize, m: usize, config: &SamplerConfig) -> f64 {
    debug_assert!(rank >= 1 && rank <= m);
    let t = config.keep_threshold(m);
    if rank as f64 <= t {
        1.0
    } else {
        (-config.lambda * (rank as f64 - t)).exp()
    }
}

/// Expected subset size before the true class is forced in.
pub fn expected_subset_size(m: usize, config: &SamplerConfig) -> f64 {
    match config.mode {
        SamplerMode::Exponential => (1..=m).map(|o| sample_probability(o, m, config)).sum(),
        SamplerMode::TopK => topk_size(m, config) as f64,
    }
}

fn topk_size(m: usize, config: &SamplerConfig) -> usize {
    (config.keep_threshold(m).ceil() as usize).clamp(1, m)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSubset {
    /// Selected class ids in rank order.
    pub classes: Vec<usize>,
    /// Whether the true class was added after losing its own draw.
    pub forced: bool,
}

impl ClassSubset {
    pub fn position_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

fn with_true_class(ranking: &ClassRanking, mut keep: Vec<bool>, true_class: usize) -> Result<ClassSubset> {
    if true_class >= ranking.len() {
        return Err(Error::LabelNotInSubset(true_class));
    }
    let forced = !keep[true_class];
    keep[true_class] = true;
    Ok(ClassSubset {
        classes: ranking.order.iter().copied().filter(|&c| keep[c]).collect(),
        forced,
    })
}

/// Draws one subset. One uniform number is consumed per class in rank
/// order, so the stream position does not depend on earlier outcomes.
pub fn sample_subset(
    ranking: &ClassRanking,
    config: &SamplerConfig,
    true_class: usize,
    rng: &mut Rng,
) -> Result<ClassSubset> {
    config.validate()?;
    if config.mode == SamplerMode::TopK {
        return topk_subset(ranking, topk_size(ranking.len(), config), true_class);
    }
    let m = ranking.len();
    let mut keep = vec![false; m];
    for (i, &c) in ranking.order.iter().enumerate() {
        let p = sample_probability(i + 1, m, config);
        let u: f64 = rng.gen();
        keep[c] = u < p;
    }
    with_true_class(ranking, keep, true_class)
}

/// The `k` closest classes plus the true class.
pub fn topk_subset(ranking: &ClassRanking, k: usize, true_class: usize) -> Result<ClassSubset> {
    if k == 0 || k > ranking.len() {
        return Err(Error::Config(format!("k must be in 1..={}, got {k}", ranking.len())));
    }
    let mut keep = vec![false; ranking.len()];
    for &c in &ranking.order[..k] {
        keep[c] = true;
    }
    with_true_class(ranking, keep, true_class)
}
