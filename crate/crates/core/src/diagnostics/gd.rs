use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, NodeId};
use crate::encoders::{build_project, LayerActivations, ModelState, Side};
use crate::error::{Error, Result};

const TOP: &str = "vision.top";
const TEXTS: &str = "texts";

fn check(m: usize, label: usize, removed: Option<usize>) -> Result<()> {
    if m == 0 {
        return Err(Error::EmptyClasses);
    }
    if label >= m {
        return Err(Error::LabelNotInSubset(label));
    }
    if let Some(c) = removed {
        if m < 2 {
            return Err(Error::Config("gradient dependence needs at least two classes".into()));
        }
        if c == label {
            return Err(Error::RemovesTrueClass(c));
        }
        if c >= m {
            return Err(Error::Config(format!(
                "class position {c} out of range for {m} classes"
            )));
        }
    }
    Ok(())
}

fn stack(text_features: &[Array]) -> Result<Array> {
    let rows: Vec<Vec<f64>> = text_features.iter().map(|t| t.data().to_vec()).collect();
    Array::from_rows(&rows)
}

/// Loss head over precomputed class features, with the depth-N vision
/// activations as a differentiable input. Class removal goes through the
/// cross-entropy mask of one stored graph.
pub struct GdProbe {
    graph: Graph,
    inputs: HashMap<String, Array>,
    ce: NodeId,
    label: usize,
    m: usize,
}

fn build_head(vision_top: &LayerActivations, texts: Array, label: usize) -> (Graph, HashMap<String, Array>, NodeId) {
    let mut g = Graph::new();
    let x = g.input(TOP);
    let rows = vision_top.values.rows();
    let f = build_project(&mut g, Side::Vision, x, rows);
    let t = g.input(TEXTS);
    let (_, ce) = crate::objective::build_itm_loss(&mut g, f, t, label);
    let inputs = HashMap::from([(TOP.to_string(), vision_top.values.clone()), (TEXTS.to_string(), texts)]);
    (g, inputs, ce)
}

impl GdProbe {
    pub fn new(vision_top: &LayerActivations, text_features: &[Array], label: usize) -> Result<Self> {
        check(text_features.len(), label, None)?;
        let (graph, inputs, ce) = build_head(vision_top, stack(text_features)?, label);
        Ok(Self {
            graph,
            inputs,
            ce,
            label,
            m: text_features.len(),
        })
    }

    /// Gradient of the loss at the depth-N vision features, optionally with
    /// class position `removed` masked out of the softmax.
    pub fn feature_gradient(&mut self, model: &ModelState, removed: Option<usize>) -> Result<Array> {
        check(self.m, self.label, removed)?;
        let mask = removed.map(|c| (0..self.m).map(|j| j != c).collect());
        self.graph.set_cross_entropy_mask(self.ce, mask);
        let eval = self.graph.evaluate(&self.inputs, &model.params)?;
        let wrt: BTreeSet<String> = [TOP.to_string()].into();
        let mut g = self.graph.backward(&eval, self.ce, &model.params, &wrt)?;
        self.graph.set_cross_entropy_mask(self.ce, None);
        Ok(g.grads.remove(TOP).expect("input gradient requested"))
    }

    pub fn gradient_dependence(&mut self, model: &ModelState, c: usize) -> Result<f64> {
        let full = self.feature_gradient(model, None)?;
        let without = self.feature_gradient(model, Some(c))?;
        full.distance(&without)
    }

    /// GD for every class except the true one, as `(position, gd)`.
    pub fn all(&mut self, model: &ModelState) -> Result<Vec<(usize, f64)>> {
        let full = self.feature_gradient(model, None)?;
        let mut out = Vec::with_capacity(self.m - 1);
        let (m, label) = (self.m, self.label);
        for c in (0..m).filter(|&c| c != label) {
            out.push((c, full.distance(&self.feature_gradient(model, Some(c))?)?));
        }
        Ok(out)
    }
}

/// Same gradient, from a loss graph rebuilt without class `removed`.
pub fn feature_gradient_rebuilt(
    model: &ModelState,
    vision_top: &LayerActivations,
    text_features: &[Array],
    label: usize,
    removed: Option<usize>,
) -> Result<Array> {
    check(text_features.len(), label, removed)?;
    let kept: Vec<Array> = text_features
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != removed)
        .map(|(_, t)| t.clone())
        .collect();
    let new_label = match removed {
        Some(c) if c < label => label - 1,
        _ => label,
    };
    let (g, inputs, ce) = build_head(vision_top, stack(&kept)?, new_label);
    let eval = g.evaluate(&inputs, &model.params)?;
    let wrt: BTreeSet<String> = [TOP.to_string()].into();
    let mut grads = g.backward(&eval, ce, &model.params, &wrt)?;
    Ok(grads.grads.remove(TOP).expect("input gradient requested"))
}

pub fn gradient_dependence_rebuilt(
    model: &ModelState,
    vision_top: &LayerActivations,
    text_features: &[Array],
    label: usize,
    c: usize,
) -> Result<f64> {
    let full = feature_gradient_rebuilt(model, vision_top, text_features, label, None)?;
    let without = feature_gradient_rebuilt(model, vision_top, text_features, label, Some(c))?;
    full.distance(&without)
}

/// Depth-N vision activations of one image.
pub fn vision_top(model: &ModelState, image: &Array) -> Result<LayerActivations> {
    let a = model.embed_image(image)?;
    model.run_layers(
        Side::Vision,
        &a,
        crate::encoders::LayerRange::new(0, model.config.layers),
    )
}

/// One GD value per (sample, class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdRecord {
    pub sample: usize,
    pub class: usize,
    pub gd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdHistogram {
    pub records: Vec<GdRecord>,
    /// Upper edges of equal-width bins over `[0, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GdHistogram {
    pub fn new(records: Vec<GdRecord>, bins: usize) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        let max = records.iter().map(|r| r.gd).fold(0.0, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let edges = (1..=bins).map(|i| width * i as f64).collect();
        let mut counts = vec![0; bins];
        for r in &records {
            let b = ((r.gd / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { records, edges, counts }
    }

    /// Share of records in the lowest bin.
    pub fn lowest_bin_fraction(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.counts[0] as f64 / total as f64
    }
}
