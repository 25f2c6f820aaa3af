use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::world::{Sample, Split, SyntheticTask};
use crate::cskip::{expected_subset_size, rank_classes, sample_subset, ClassRanking, SamplerConfig, SamplerMode};
use crate::diagnostics::{block_costs, predict_cost, CostCounters, CostPrediction};
use crate::diffcore::Array;
use crate::encoders::{encode_class_names, CharTokenizer, ModelState, TokenSequence};
use crate::error::{Error, Result};
use crate::lskip::{CacheProvenance, CachedStepper, FeatureCache};
use crate::objective::cosine;
use crate::par;
use crate::rng;
use crate::step::{build_step, run_step, StepOutput, TextSource, VisionSource};

/// Base learning rate; the effective rate is `lr * lr_multiplier`.
pub const BASE_LR: f64 = 2e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_multiplier: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub omega: usize,
    pub r: f64,
    pub lambda: f64,
    pub lskip: bool,
    pub cskip: bool,
    /// Deterministic top-k instead of exponential sampling when `cskip`.
    pub topk: bool,
    /// Without `lskip`: still freeze blocks `1..=omega` but run them live.
    pub freeze_shallow: bool,
    pub seed: u64,
    pub template: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: BASE_LR,
            lr_multiplier: 1.0,
            batch_size: 4,
            epochs: 20,
            omega: 6,
            r: 0.5,
            lambda: 0.3,
            lskip: false,
            cskip: false,
            topk: false,
            freeze_shallow: false,
            seed: 0,
            template: "[CLS]".into(),
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_multiplier
    }

    /// Depth whose blocks stay frozen.
    pub fn frozen_depth(&self) -> usize {
        if self.lskip || self.freeze_shallow {
            self.omega
        } else {
            0
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            r: if self.cskip { self.r } else { 1.0 },
            lambda: self.lambda,
            mode: if self.topk {
                SamplerMode::TopK
            } else {
                SamplerMode::Exponential
            },
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.effective_lr() > 0.0 && self.effective_lr().is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.effective_lr()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.omega >= layers {
            return bad(format!("omega {} must be < N = {layers}", self.omega));
        }
        self.sampler().validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub mean_subset_size: f64,
    pub forced_true_class: usize,
    pub counters: CostCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub base: f64,
    pub new: f64,
    pub h: f64,
}

impl Accuracy {
    pub fn new(base: f64, new: f64) -> Self {
        Self {
            base,
            new,
            h: harmonic_mean(base, new),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub task: String,
    pub zero_shot: Accuracy,
    pub tuned: Accuracy,
    pub epochs: Vec<EpochLog>,
    /// Multiply-adds per optimizer step, averaged over the run.
    pub mean_step_macs: f64,
    pub mean_step_body_macs: f64,
    pub predicted: CostPrediction,
    pub block_costs: crate::diagnostics::BlockCosts,
    pub expected_subset_size: f64,
    pub model_fingerprint: String,
    pub cache: Option<CacheProvenance>,
    pub step_losses: Vec<f64>,
    #[serde(skip)]
    pub elapsed: std::time::Duration,
}

/// `2·b·n / (b + n)`, or 0 when both are 0.
pub fn harmonic_mean(base: f64, new: f64) -> f64 {
    if base + new > 0.0 {
        2.0 * base * new / (base + new)
    } else {
        0.0
    }
}

pub fn class_tokens(task: &SyntheticTask, template: &str, max_len: usize) -> Result<Vec<TokenSequence>> {
    encode_class_names(&task.names, template, &CharTokenizer::new(max_len))
}

/// Zero-shot accuracy (%) on the split's test images: argmax cosine over
/// the split's class texts, ties to the lower class id.
pub fn evaluate(model: &ModelState, task: &SyntheticTask, split: Split, template: &str) -> Result<f64> {
    let tokens = class_tokens(task, template, model.config.max_text_len)?;
    let classes: Vec<usize> = task.classes(split).collect();
    let feats = par::try_map(&classes, |&c| model.encode_text(&tokens[c]))?;
    let test = task.test_split(split);
    if test.is_empty() {
        return Err(Error::EmptyClasses);
    }
    let hits = par::try_map(&test, |s| -> Result<bool> {
        let f = model.encode_image(&s.image)?;
        let best = (0..classes.len()).map(|j| (j, cosine(f.data(), feats[j].data()))).fold(
            (0, f64::NEG_INFINITY),
            |acc, (j, c)| if c > acc.1 { (j, c) } else { acc },
        );
        Ok(classes[best.0] == s.class)
    })?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / test.len() as f64)
}

pub fn evaluate_both(model: &ModelState, task: &SyntheticTask, template: &str) -> Result<Accuracy> {
    Ok(Accuracy::new(
        evaluate(model, task, Split::Base, template)?,
        evaluate(model, task, Split::New, template)?,
    ))
}

/// Per-sample class rankings from the untuned model's features.
pub fn rank_training_samples(
    model: &ModelState,
    samples: &[&Sample],
    tokens: &[TokenSequence],
    classes: &[usize],
) -> Result<BTreeMap<usize, ClassRanking>> {
    let feats = par::try_map(classes, |&c| model.encode_text(&tokens[c]))?;
    let ranks = par::try_map(samples, |s| {
        let f = model.encode_image(&s.image)?;
        Ok::<_, Error>((s.id, rank_classes(&f, &feats)?))
    })?;
    Ok(ranks.into_iter().collect())
}

fn average(outs: &[StepOutput]) -> BTreeMap<String, Array> {
    let mut acc: BTreeMap<String, Array> = BTreeMap::new();
    for o in outs {
        for (name, g) in &o.grads {
            match acc.get_mut(name) {
                Some(a) => a.add_assign(g),
                None => {
                    acc.insert(name.clone(), g.clone());
                }
            }
        }
    }
    let k = 1.0 / outs.len() as f64;
    for a in acc.values_mut() {
        a.scale_in_place(k);
    }
    acc
}

/// Fine-tunes on the base split's training images with plain SGD. With
/// `lskip` the steps read depth-ω activations from `cache`; with `cskip`
/// each image is matched against a sampled subset of the base classes.
pub fn tune(
    model: &ModelState,
    task: &SyntheticTask,
    cache: Option<&FeatureCache>,
    config: &TrainConfig,
) -> Result<(ModelState, RunReport)> {
    let start = std::time::Instant::now();
    let cfg = &model.config;
    config.validate(cfg.layers)?;
    let mut state = model.clone();
    state.freeze_through(config.frozen_depth());

    let stepper = if config.lskip {
        let cache = cache.ok_or_else(|| Error::Config("layer skipping needs a feature cache".into()))?;
        if cache.omega() != config.omega {
            return Err(Error::Config(format!(
                "cache depth {} does not match omega {}",
                cache.omega(),
                config.omega
            )));
        }
        let prov = cache.provenance();
        if prov.task != task.fingerprint() || prov.template != config.template {
            return Err(Error::Provenance {
                expected: format!("task {} template {:?}", prov.task, prov.template),
                actual: format!("task {} template {:?}", task.fingerprint(), config.template),
            });
        }
        Some(CachedStepper::new(cache, &state)?)
    } else {
        None
    };

    let tokens = class_tokens(task, &config.template, cfg.max_text_len)?;
    let base: Vec<usize> = task.classes(Split::Base).collect();
    let train = task.train_split(Split::Base);
    let sampler = config.sampler();
    let rankings = if config.cskip {
        rank_training_samples(model, &train, &tokens, &base)?
    } else {
        BTreeMap::new()
    };
    let zero_shot = evaluate_both(model, task, &config.template)?;
    let blocks = block_costs(model, tokens.iter().map(|t| t.len()).max().unwrap_or(1))?;
    let m_expected = if config.cskip {
        expected_subset_size(base.len(), &sampler)
    } else {
        base.len() as f64
    };
    let predicted = predict_cost(
        cfg.layers,
        config.frozen_depth(),
        base.len(),
        m_expected,
        blocks.c_v,
        blocks.c_t,
    )?;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut total = CostCounters::default();
    let mut total_steps = 0usize;
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng::stream(config.seed, "data", &[epoch as u64]));
        let mut log = EpochLog {
            epoch,
            ..Default::default()
        };
        let mut subset_total = 0usize;
        for batch in order.chunks(config.batch_size) {
            let outs = par::try_map(batch, |s| -> Result<(StepOutput, usize, bool)> {
                let (subset, forced) = if config.cskip {
                    let mut r = rng::stream(config.seed, "sampler", &[epoch as u64, s.id as u64]);
                    let sub = sample_subset(&rankings[&s.id], &sampler, s.class, &mut r)?;
                    (sub.classes, sub.forced)
                } else {
                    (base.clone(), false)
                };
                let out = match &stepper {
                    Some(st) => st.step(&state.params, s.id, s.class, &subset)?,
                    None => {
                        let texts: Vec<TextSource> = subset.iter().map(|&c| TextSource::Tokens(&tokens[c])).collect();
                        let pos = subset
                            .iter()
                            .position(|&c| c == s.class)
                            .ok_or(Error::LabelNotInSubset(s.class))?;
                        run_step(
                            &build_step(cfg, VisionSource::Image(&s.image), &texts, pos)?,
                            &state.params,
                        )?
                    }
                };
                Ok((out, subset.len(), forced))
            })
            .map_err(|e| match e {
                Error::NonFinite { node } => Error::Diverged {
                    context: format!("epoch {epoch}, node {node} (seed {}, config {config:?})", config.seed),
                },
                e => e,
            })?;
            let mut step_cost = CostCounters::default();
            let mut steps = Vec::with_capacity(outs.len());
            for (out, size, forced) in outs {
                if !out.loss.is_finite() {
                    return Err(Error::Diverged {
                        context: format!("epoch {epoch} (seed {}, config {config:?})", config.seed),
                    });
                }
                step_losses.push(out.loss);
                log.loss += out.loss;
                subset_total += size;
                log.forced_true_class += forced as usize;
                step_cost.accumulate(&out.cost);
                steps.push(out);
            }
            let grads = average(&steps);
            state.params.sgd_step(&grads, config.effective_lr())?;
            state.clamp_temperature();
            log.counters.accumulate(&step_cost);
            log.steps += 1;
        }
        log.loss /= order.len() as f64;
        log.mean_subset_size = subset_total as f64 / order.len() as f64;
        total.accumulate(&log.counters);
        total_steps += log.steps;
        epochs.push(log);
    }

    let tuned = evaluate_both(&state, task, &config.template)?;
    let report = RunReport {
        config: config.clone(),
        task: task.fingerprint(),
        zero_shot,
        tuned,
        epochs,
        mean_step_macs: total.total_macs() as f64 / total_steps as f64,
        mean_step_body_macs: total.body_macs() as f64 / total_steps as f64,
        predicted,
        block_costs: blocks,
        expected_subset_size: m_expected,
        model_fingerprint: state.fingerprint(),
        cache: stepper.map(|s| s.cache().provenance().clone()),
        step_losses,
        elapsed: start.elapsed(),
    };
    Ok((state, report))
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    loss: f64,
    steps: usize,
    mean_subset_size: f64,
    forward_macs: u64,
    backward_macs: u64,
    vision_body_macs: u64,
    text_body_macs: u64,
    peak_live_elements: u64,
}

#[derive(Serialize)]
struct Timing {
    elapsed_seconds: f64,
    epoch_wall_seconds: Vec<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `run_report.json`, `metrics.csv` and `timing.json` in `dir`.
    /// Wall-clock numbers go only to `timing.json`, so the report itself
    /// is a pure function of seed and config.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run_report.json"), self.to_json()?)?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv")).map_err(|e| Error::Format(e.to_string()))?;
        for e in &self.epochs {
            w.serialize(MetricsRow {
                epoch: e.epoch,
                loss: e.loss,
                steps: e.steps,
                mean_subset_size: e.mean_subset_size,
                forward_macs: e.counters.forward_macs,
                backward_macs: e.counters.backward_macs,
                vision_body_macs: e.counters.vision_body_macs,
                text_body_macs: e.counters.text_body_macs,
                peak_live_elements: e.counters.peak_live_elements,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        let timing = Timing {
            elapsed_seconds: self.elapsed.as_secs_f64(),
            epoch_wall_seconds: self.epochs.iter().map(|e| e.counters.wall.as_secs_f64()).collect(),
        };
        std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(
            dir.join("run_report.json"),
        )?)?)
    }
}
