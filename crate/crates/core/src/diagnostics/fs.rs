use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::encoders::{LayerActivations, LayerRange, ModelState, Side, TokenSequence};
use crate::error::{Error, Result};
use crate::par;

/// Per-layer feature sensitivity, index `l - 1` for layer `l`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FsProfile {
    pub vision: Vec<f64>,
    pub text: Vec<f64>,
}

impl FsProfile {
    pub fn side(&self, side: Side) -> &[f64] {
        match side {
            Side::Vision => &self.vision,
            Side::Text => &self.text,
        }
    }
}

fn per_layer(model: &ModelState, side: Side, acts: LayerActivations) -> Result<Vec<Array>> {
    let n = model.config.layers;
    Ok(model
        .layer_outputs(side, &acts, LayerRange::new(0, n))?
        .into_iter()
        .map(|a| a.values)
        .collect())
}

fn distances(before: &[Array], after: &[Array]) -> Result<Vec<f64>> {
    before.iter().zip(after).map(|(a, b)| a.distance(b)).collect()
}

fn mean_rows(rows: Vec<Vec<f64>>, n: usize) -> Vec<f64> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mut acc = vec![0.0; n];
    for r in &rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let k = rows.len() as f64;
    acc.into_iter().map(|a| a / k).collect()
}

/// Euclidean distance between each block's output (all positions
/// flattened) under the two models, averaged over the given images and
/// class texts. A side with no samples gets an empty profile.
pub fn feature_sensitivity(
    before: &ModelState,
    after: &ModelState,
    images: &[Array],
    texts: &[TokenSequence],
) -> Result<FsProfile> {
    if before.config != after.config {
        return Err(Error::ConfigMismatch);
    }
    let n = before.config.layers;
    let vision = par::try_map(images, |img| {
        let b = per_layer(before, Side::Vision, before.embed_image(img)?)?;
        let a = per_layer(after, Side::Vision, after.embed_image(img)?)?;
        distances(&b, &a)
    })?;
    let text = par::try_map(texts, |t| {
        let b = per_layer(before, Side::Text, before.embed_text(t)?)?;
        let a = per_layer(after, Side::Text, after.embed_text(t)?)?;
        distances(&b, &a)
    })?;
    Ok(FsProfile {
        vision: mean_rows(vision, n),
        text: mean_rows(text, n),
    })
}
