use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::world::{world_class_name, world_image, WORLD_CLASSES};
use crate::diffcore::{Array, Graph, ParamStore};
use crate::encoders::{
    build_embed_image, build_embed_text, build_layers, build_project, encode_class_names, patchify, CharTokenizer,
    LayerRange, ModelState, Side,
};
use crate::error::{Error, Result};
use crate::objective::build_itm_loss;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Distinct classes (one image each) per contrastive batch.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub template: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            template: "[CLS]".into(),
        }
    }
}

/// Adam over a name-keyed parameter set.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Default::default()
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut update = BTreeMap::new();
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut dir = g.clone();
            for (i, (d, &gi)) in dir.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                *d = (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
            update.insert(name.clone(), dir);
        }
        params.sgd_step(&update, self.lr)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

/// Contrastive alignment on an endless stream of world images: each step
/// draws `batch` distinct classes, one fresh image per class, and matches
/// every image against the batch's class texts.
pub fn pretrain(model: &ModelState, config: &PretrainConfig) -> Result<(ModelState, PretrainLog)> {
    if config.steps == 0 || config.batch < 2 || config.batch > WORLD_CLASSES || !(config.lr > 0.0) {
        return Err(Error::Config(format!("invalid pretraining config {config:?}")));
    }
    let cfg = model.config.clone();
    let tok = CharTokenizer::new(cfg.max_text_len);
    let names: Vec<String> = (0..WORLD_CLASSES).map(world_class_name).collect();
    let tokens = encode_class_names(&names, &config.template, &tok)?;
    let mut state = model.clone();
    state.params.set_trainable_by(|_| true);
    let mut opt = Adam::new(config.lr);
    let mut log = PretrainLog::default();
    let n = cfg.layers;
    for step in 0..config.steps {
        let mut classes: Vec<usize> = (0..WORLD_CLASSES).collect();
        classes.shuffle(&mut rng::stream(config.seed, "pretrain/batch", &[step as u64]));
        classes.truncate(config.batch);

        let mut g = Graph::new();
        let mut inputs = std::collections::HashMap::new();
        let mut text_feats = Vec::with_capacity(classes.len());
        for &c in &classes {
            let x = build_embed_text(&mut g, &cfg, &tokens[c])?;
            let top = build_layers(&mut g, &cfg, Side::Text, LayerRange::new(0, n), x);
            text_feats.push(build_project(&mut g, Side::Text, top, tokens[c].len()));
        }
        let texts = g.concat_rows(text_feats);
        let mut losses = Vec::with_capacity(classes.len());
        for (i, &c) in classes.iter().enumerate() {
            let name = format!("patches.{i}");
            let img = world_image(config.seed, c, "pretrain", step);
            inputs.insert(name.clone(), patchify(&cfg, &img)?);
            let p = g.input(&name);
            let x = build_embed_image(&mut g, p);
            let top = build_layers(&mut g, &cfg, Side::Vision, LayerRange::new(0, n), x);
            let f = build_project(&mut g, Side::Vision, top, cfg.vision_len());
            losses.push(build_itm_loss(&mut g, f, texts, i).1);
        }
        let total = losses
            .into_iter()
            .reduce(|a, b| g.add(a, b))
            .expect("batch is non-empty");
        let loss = g.scale(total, 1.0 / classes.len() as f64);

        let wrt: BTreeSet<String> = g.param_names().map(str::to_string).collect();
        let diverged = || Error::Diverged {
            context: format!("pretraining step {step} (seed {}, config {config:?})", config.seed),
        };
        let eval = g.evaluate(&inputs, &state.params).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(),
            e => e,
        })?;
        let value = eval.value(loss).item();
        if !value.is_finite() {
            return Err(diverged());
        }
        let grads = g.backward(&eval, loss, &state.params, &wrt)?;
        opt.step(&mut state.params, &grads.grads)?;
        state.clamp_temperature();
        log.losses.push(value);
    }
    Ok((state, log))
}
