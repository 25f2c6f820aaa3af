//! One training image's matching-loss graph. Each side starts either from
//! raw input (depth 0, through the embedding front-end) or from stored
//! activations at some depth, and runs only the remaining blocks. Full
//! fine-tuning and cached tuning share this builder, so the deep-stage
//! computation is literally the same graph in both.

use std::collections::{BTreeSet, HashMap};

use crate::diagnostics::CostCounters;
use crate::diffcore::{Array, Graph, NodeId, ParamStore};
use crate::encoders::{
    build_embed_image, build_embed_text, build_layers, build_project, patchify, EncoderConfig, LayerActivations,
    LayerRange, Side, TokenSequence,
};
use crate::error::{Error, Result};
use crate::objective::build_itm_loss;

#[derive(Clone, Copy, Debug)]
pub enum VisionSource<'a> {
    Image(&'a Array),
    Cached(&'a LayerActivations),
}

#[derive(Clone, Copy, Debug)]
pub enum TextSource<'a> {
    Tokens(&'a TokenSequence),
    Cached(&'a LayerActivations),
}

pub struct StepGraph {
    pub graph: Graph,
    pub inputs: HashMap<String, Array>,
    pub loss: NodeId,
    pub logits: NodeId,
    /// Depth-N vision activations (pre-projection).
    pub vision_top: NodeId,
}

fn cached_leaf(
    g: &mut Graph,
    inputs: &mut HashMap<String, Array>,
    name: String,
    acts: &LayerActivations,
    layers: usize,
) -> Result<(NodeId, usize)> {
    if acts.depth > layers {
        return Err(Error::InvalidRange {
            start: acts.depth,
            end: layers,
            depth: acts.depth,
            layers,
        });
    }
    let id = g.input(&name);
    inputs.insert(name, acts.values.clone());
    Ok((id, acts.depth))
}

/// Loss graph for one image against `texts` (one entry per class in the
/// subset, in subset order); `label_position` indexes the true class.
pub fn build_step(
    cfg: &EncoderConfig,
    vision: VisionSource<'_>,
    texts: &[TextSource<'_>],
    label_position: usize,
) -> Result<StepGraph> {
    if texts.is_empty() {
        return Err(Error::EmptyClasses);
    }
    if label_position >= texts.len() {
        return Err(Error::LabelNotInSubset(label_position));
    }
    let n = cfg.layers;
    let mut g = Graph::new();
    let mut inputs = HashMap::new();

    let (v0, v_depth) = match vision {
        VisionSource::Image(image) => {
            let patches = patchify(cfg, image)?;
            let p = g.input("patches");
            inputs.insert("patches".to_string(), patches);
            (build_embed_image(&mut g, p), 0)
        }
        VisionSource::Cached(acts) => cached_leaf(&mut g, &mut inputs, "vision.cached".into(), acts, n)?,
    };
    let v_top = build_layers(&mut g, cfg, Side::Vision, LayerRange::new(v_depth, n), v0);
    let v_feat = build_project(&mut g, Side::Vision, v_top, cfg.vision_len());

    let mut t_feats = Vec::with_capacity(texts.len());
    for (j, t) in texts.iter().enumerate() {
        let (x, depth, len) = match *t {
            TextSource::Tokens(tokens) => (build_embed_text(&mut g, cfg, tokens)?, 0, tokens.len()),
            TextSource::Cached(acts) => {
                let (id, d) = cached_leaf(&mut g, &mut inputs, format!("text.cached.{j}"), acts, n)?;
                (id, d, acts.values.rows())
            }
        };
        let top = build_layers(&mut g, cfg, Side::Text, LayerRange::new(depth, n), x);
        t_feats.push(build_project(&mut g, Side::Text, top, len));
    }
    let texts_node = if t_feats.len() == 1 {
        t_feats[0]
    } else {
        g.concat_rows(t_feats)
    };
    let (logits, loss) = build_itm_loss(&mut g, v_feat, texts_node, label_position);
    g.mark_output("loss", loss);
    Ok(StepGraph {
        graph: g,
        inputs,
        loss,
        logits,
        vision_top: v_top,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: std::collections::BTreeMap<String, Array>,
    pub cost: CostCounters,
}

/// Forward and backward over every trainable parameter the graph touches.
pub fn run_step(step: &StepGraph, params: &ParamStore) -> Result<StepOutput> {
    let start = std::time::Instant::now();
    let wrt: BTreeSet<String> = step
        .graph
        .param_names()
        .filter(|n| params.is_trainable(n))
        .map(str::to_string)
        .collect();
    let eval = step.graph.evaluate(&step.inputs, params)?;
    let loss = eval.value(step.loss).item();
    let grads = step.graph.backward(&eval, step.loss, params, &wrt)?;
    let mut cost = CostCounters::from_passes(&eval.counters, Some(&grads.counters));
    cost.wall = start.elapsed();
    Ok(StepOutput {
        loss,
        grads: grads.grads,
        cost,
    })
}

/// Forward only; returns the loss and forward counters.
pub fn run_forward(step: &StepGraph, params: &ParamStore) -> Result<(f64, CostCounters)> {
    let eval = step.graph.evaluate(&step.inputs, params)?;
    Ok((
        eval.value(step.loss).item(),
        CostCounters::from_passes(&eval.counters, None),
    ))
}
