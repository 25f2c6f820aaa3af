//! Layer-wise skipping: run the frozen shallow blocks `1..=ω` once per
//! training image and class text, keep the depth-ω activations, and train
//! against them so every later step only traverses blocks `ω+1..=N`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, TensorRef};
use crate::diffcore::{Array, ParamStore};
use crate::encoders::{EncoderConfig, LayerActivations, LayerRange, ModelState, Side, TokenSequence};
use crate::error::{Error, Result};
use crate::par;
use crate::step::{build_step, run_step, StepGraph, StepOutput, TextSource, VisionSource};

pub const CACHE_KIND: &str = "feature_cache";

/// What the cached activations were computed from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheProvenance {
    /// Fingerprint of the embeddings and blocks `1..=ω` of the source model.
    pub model: String,
    pub template: String,
    /// Free-form identifier of the data the entries belong to.
    pub task: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    omega: usize,
    config: EncoderConfig,
    vision: BTreeMap<usize, LayerActivations>,
    text: BTreeMap<usize, LayerActivations>,
    provenance: CacheProvenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheMeta {
    omega: usize,
    config: EncoderConfig,
    provenance: CacheProvenance,
}

fn unique(ids: impl Iterator<Item = usize>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateSample(id));
        }
    }
    Ok(())
}

/// Forward-only pass of every sample and class text through the embedding
/// and blocks `1..=omega`.
pub fn build_cache(
    model: &ModelState,
    samples: &[(usize, Array)],
    classes: &[(usize, TokenSequence)],
    omega: usize,
    template: &str,
    task: &str,
) -> Result<FeatureCache> {
    let n = model.config.layers;
    if omega >= n {
        return Err(Error::InvalidRange {
            start: 0,
            end: omega,
            depth: 0,
            layers: n,
        });
    }
    unique(samples.iter().map(|(id, _)| *id))?;
    unique(classes.iter().map(|(id, _)| *id))?;
    let range = LayerRange::new(0, omega);
    let vision = par::try_map(samples, |(id, img)| {
        let a = model.embed_image(img)?;
        Ok::<_, Error>((*id, model.run_layers(Side::Vision, &a, range)?))
    })?;
    let text = par::try_map(classes, |(id, tokens)| {
        let a = model.embed_text(tokens)?;
        Ok::<_, Error>((*id, model.run_layers(Side::Text, &a, range)?))
    })?;
    Ok(FeatureCache {
        omega,
        config: model.config.clone(),
        vision: vision.into_iter().collect(),
        text: text.into_iter().collect(),
        provenance: CacheProvenance {
            model: model.shallow_fingerprint(omega),
            template: template.to_string(),
            task: task.to_string(),
        },
    })
}

impl FeatureCache {
    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn provenance(&self) -> &CacheProvenance {
        &self.provenance
    }

    pub fn num_samples(&self) -> usize {
        self.vision.len()
    }

    pub fn num_classes(&self) -> usize {
        self.text.len()
    }

    pub fn vision(&self, sample: usize) -> Result<&LayerActivations> {
        self.vision
            .get(&sample)
            .ok_or_else(|| Error::CacheMiss(format!("sample {sample}")))
    }

    pub fn text(&self, class: usize) -> Result<&LayerActivations> {
        self.text
            .get(&class)
            .ok_or_else(|| Error::CacheMiss(format!("class {class}")))
    }

    /// Errors unless `model` has the same config and the same embeddings
    /// and shallow blocks as the model the cache was built from.
    pub fn verify(&self, model: &ModelState) -> Result<()> {
        if model.config != self.config {
            return Err(Error::ConfigMismatch);
        }
        let actual = model.shallow_fingerprint(self.omega);
        if actual != self.provenance.model {
            return Err(Error::Provenance {
                expected: self.provenance.model.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names: Vec<(String, &Array)> = self
            .vision
            .iter()
            .map(|(id, a)| (format!("vision/{id}"), &a.values))
            .chain(self.text.iter().map(|(id, a)| (format!("text/{id}"), &a.values)))
            .collect();
        let tensors: Vec<TensorRef> = names
            .iter()
            .map(|(name, value)| TensorRef {
                name: name.clone(),
                value,
                trainable: None,
            })
            .collect();
        let meta = CacheMeta {
            omega: self.omega,
            config: self.config.clone(),
            provenance: self.provenance.clone(),
        };
        container::encode(CACHE_KIND, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors): (CacheMeta, _) = container::decode(bytes, CACHE_KIND)?;
        let mut vision = BTreeMap::new();
        let mut text = BTreeMap::new();
        for (entry, values) in tensors {
            let (side, id) = entry
                .name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad cache entry name `{}`", entry.name)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("bad cache entry id `{}`", entry.name)))?;
            let acts = LayerActivations {
                depth: meta.omega,
                values,
            };
            let map = match side {
                "vision" => &mut vision,
                "text" => &mut text,
                _ => return Err(Error::Format(format!("bad cache entry side `{}`", entry.name))),
            };
            if map.insert(id, acts).is_some() {
                return Err(Error::DuplicateSample(id));
            }
        }
        Ok(Self {
            omega: meta.omega,
            config: meta.config,
            vision,
            text,
            provenance: meta.provenance,
        })
    }

    /// SHA-256 of the serialized cache.
    pub fn checksum(&self) -> Result<String> {
        Ok(container::sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Cached-step executor for one cache, checked against a model once.
pub struct CachedStepper<'a> {
    cache: &'a FeatureCache,
}

impl<'a> CachedStepper<'a> {
    pub fn new(cache: &'a FeatureCache, model: &ModelState) -> Result<Self> {
        cache.verify(model)?;
        Ok(Self { cache })
    }

    pub fn cache(&self) -> &FeatureCache {
        self.cache
    }

    /// Loss graph over blocks `ω+1..=N` for `sample` against the classes in
    /// `subset`; `label` is the true class id and must be in the subset.
    pub fn build(&self, sample: usize, label: usize, subset: &[usize]) -> Result<StepGraph> {
        let pos = subset
            .iter()
            .position(|&c| c == label)
            .ok_or(Error::LabelNotInSubset(label))?;
        let v = self.cache.vision(sample)?;
        let texts = subset
            .iter()
            .map(|&c| self.cache.text(c).map(TextSource::Cached))
            .collect::<Result<Vec<_>>>()?;
        build_step(&self.cache.config, VisionSource::Cached(v), &texts, pos)
    }

    pub fn step(&self, params: &ParamStore, sample: usize, label: usize, subset: &[usize]) -> Result<StepOutput> {
        run_step(&self.build(sample, label, subset)?, params)
    }
}

/// One cached training step: loss and gradients of every trainable
/// parameter in blocks `ω+1..=N`, the projections and the temperature.
pub fn cached_step(
    cache: &FeatureCache,
    model: &ModelState,
    sample: usize,
    label: usize,
    subset: &[usize],
) -> Result<StepOutput> {
    CachedStepper::new(cache, model)?.step(&model.params, sample, label, subset)
}
