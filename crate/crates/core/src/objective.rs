//! Image-to-text matching probabilities and loss over an arbitrary class
//! subset. The softmax normalizer covers only the classes passed in: a
//! skipped class contributes nothing, since its text feature is never
//! computed.

use crate::diffcore::{Array, Graph, NodeId, Scope};
use crate::encoders::LOG_TAU;
use crate::error::{Error, Result};

/// Cosine of two unit vectors (their dot product).
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// One image's similarities to a list of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityRow {
    pub class_ids: Vec<usize>,
    pub cosines: Vec<f64>,
    pub temperature: f64,
}

impl SimilarityRow {
    pub fn new(class_ids: Vec<usize>, cosines: Vec<f64>, temperature: f64) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::EmptyClasses);
        }
        if class_ids.len() != cosines.len() {
            return Err(Error::shape(
                "similarity_row",
                format!("{} ids vs {} cosines", class_ids.len(), cosines.len()),
            ));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut sorted = class_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate class id in similarity row".into()));
        }
        Ok(Self {
            class_ids,
            cosines,
            temperature,
        })
    }

    pub fn position_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

/// `softmax(cosines / tau)` over the listed classes only.
pub fn itm_probabilities(row: &SimilarityRow) -> Result<Vec<f64>> {
    if row.cosines.is_empty() {
        return Err(Error::EmptyClasses);
    }
    let logits: Vec<f64> = row.cosines.iter().map(|c| c / row.temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-ln probs[label_position]`.
pub fn itm_loss(probs: &[f64], label_position: usize) -> Result<f64> {
    let p = probs
        .get(label_position)
        .ok_or(Error::LabelNotInSubset(label_position))?;
    Ok(-p.ln())
}

/// Loss for the true class `label` within `row`; errors if `label` was
/// skipped.
pub fn itm_loss_for(row: &SimilarityRow, label: usize) -> Result<f64> {
    let pos = row.position_of(label).ok_or(Error::LabelNotInSubset(label))?;
    let logits: Vec<f64> = row.cosines.iter().map(|c| c / row.temperature).collect();
    let active = vec![true; logits.len()];
    Ok(crate::diffcore::kernels::masked_logsumexp(&logits, &active) - logits[pos])
}

/// Graph form: `image` is a `[1, d]` unit feature, `texts` a `[m, d]` stack
/// of unit class features. Returns the logits node and the loss node.
pub fn build_itm_loss(g: &mut Graph, image: NodeId, texts: NodeId, label_position: usize) -> (NodeId, NodeId) {
    g.set_scope(Scope::new("head", None));
    let cos = g.matmul_nt(image, texts);
    let log_tau = g.param(LOG_TAU);
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(cos, inv_tau);
    let loss = g.cross_entropy(logits, label_position);
    (logits, loss)
}

/// Cosines of one image feature against each row of `texts`.
pub fn cosines_against(image: &Array, texts: &[Array]) -> Vec<f64> {
    texts.iter().map(|t| cosine(image.data(), t.data())).collect()
}
