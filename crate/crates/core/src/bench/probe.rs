use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::train::class_tokens;
use super::world::{Split, SyntheticTask};
use crate::diagnostics::{
    block_costs, feature_sensitivity, predict_cost, vision_top, CostRow, FsProfile, GdProbe, GdRecord,
};
use crate::diffcore::Array;
use crate::encoders::{ModelState, TokenSequence};
use crate::error::{Error, Result};
use crate::lskip::{build_cache, CachedStepper};
use crate::par;
use crate::rng;
use crate::step::{build_step, run_step, TextSource, VisionSource};

/// One point of the cost grid: analytic and counted body-MAC ratios of a
/// full step over `m_total` classes against a cached step over `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub omega: usize,
    pub m: usize,
    pub m_total: usize,
    pub predicted: f64,
    pub measured: f64,
}

impl CostPoint {
    pub fn relative_gap(&self) -> f64 {
        (self.measured - self.predicted).abs() / self.predicted
    }

    pub fn row(&self) -> CostRow {
        CostRow {
            config: format!("omega={},m={}/{}", self.omega, self.m, self.m_total),
            predicted: self.predicted,
            measured: self.measured,
        }
    }
}

/// Counts one step of every grid configuration on a single image.
/// `fractions` are turned into `m = round(f·M)`, at least one.
pub fn cost_grid(
    model: &ModelState,
    image: &Array,
    tokens: &[TokenSequence],
    omegas: &[usize],
    fractions: &[f64],
) -> Result<Vec<CostPoint>> {
    let cfg = &model.config;
    let m_total = tokens.len();
    if m_total == 0 {
        return Err(Error::EmptyClasses);
    }
    let text_len = tokens[0].len();
    let bc = block_costs(model, text_len)?;

    let mut ft = model.clone();
    ft.freeze_through(0);
    let full: Vec<TextSource> = tokens.iter().map(TextSource::Tokens).collect();
    let baseline = run_step(&build_step(cfg, VisionSource::Image(image), &full, 0)?, &ft.params)?;
    let base_macs = baseline.cost.body_macs() as f64;

    let classes: Vec<(usize, TokenSequence)> = tokens.iter().cloned().enumerate().collect();
    let mut out = Vec::new();
    for &omega in omegas {
        let mut frozen = model.clone();
        frozen.freeze_through(omega);
        let cache = build_cache(&frozen, &[(0, image.clone())], &classes, omega, "", "")?;
        let stepper = CachedStepper::new(&cache, &frozen)?;
        for &f in fractions {
            let m = ((f * m_total as f64).round() as usize).clamp(1, m_total);
            let subset: Vec<usize> = (0..m).collect();
            let step = stepper.step(&frozen.params, 0, 0, &subset)?;
            let predicted = predict_cost(cfg.layers, omega, m_total, m as f64, bc.c_v, bc.c_t)?.ratio;
            out.push(CostPoint {
                omega,
                m,
                m_total,
                predicted,
                measured: base_macs / step.cost.body_macs() as f64,
            });
        }
    }
    Ok(out)
}

/// Seeded choice of up to `count` base training samples.
pub fn probe_samples(task: &SyntheticTask, count: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = task.train_split(Split::Base).iter().map(|s| s.id).collect();
    ids.shuffle(&mut rng::stream(seed, "diagnose", &[]));
    ids.truncate(count);
    ids.sort_unstable();
    ids
}

/// Layer sensitivity between two checkpoints over the chosen training
/// images and the base class texts.
pub fn fs_profile(
    before: &ModelState,
    after: &ModelState,
    task: &SyntheticTask,
    samples: &[usize],
    template: &str,
) -> Result<FsProfile> {
    let images: Vec<Array> = samples.iter().map(|&i| task.train[i].image.clone()).collect();
    let tokens = class_tokens(task, template, before.config.max_text_len)?;
    let texts: Vec<TokenSequence> = task.classes(Split::Base).map(|c| tokens[c].clone()).collect();
    feature_sensitivity(before, after, &images, &texts)
}

/// Gradient dependence of every non-true base class for each chosen
/// training image.
pub fn gd_records(
    model: &ModelState,
    task: &SyntheticTask,
    samples: &[usize],
    template: &str,
) -> Result<Vec<GdRecord>> {
    let tokens = class_tokens(task, template, model.config.max_text_len)?;
    let base: Vec<usize> = task.classes(Split::Base).collect();
    let feats = par::try_map(&base, |&c| model.encode_text(&tokens[c]))?;
    let per_sample = par::try_map(samples, |&id| {
        let s = &task.train[id];
        let label = base
            .iter()
            .position(|&c| c == s.class)
            .ok_or(Error::LabelNotInSubset(s.class))?;
        let mut probe = GdProbe::new(&vision_top(model, &s.image)?, &feats, label)?;
        Ok::<_, Error>(
            probe
                .all(model)?
                .into_iter()
                .map(|(j, gd)| GdRecord {
                    sample: id,
                    class: base[j],
                    gd,
                })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_sample.into_iter().flatten().collect())
}
