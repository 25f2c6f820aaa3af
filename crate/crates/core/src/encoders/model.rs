use std::collections::HashMap;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use super::config::{EncoderConfig, Side};
use super::tokenizer::TokenSequence;
use crate::diffcore::{Array, Graph, NodeId, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::rng;

pub const LOG_TAU: &str = "log_tau";
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Per-position features at a given depth. Depth 0 is the embedding output;
/// depth N is the last block's output, before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub depth: usize,
    pub values: Array,
}

/// Moves activations from depth `from` to depth `to` by running blocks
/// `from + 1 ..= to`. `from == to` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRange {
    pub from: usize,
    pub to: usize,
}

impl LayerRange {
    pub fn new(from: usize, to: usize) -> Self {
        Self { from, to }
    }

    pub fn layers(self) -> std::ops::RangeInclusive<usize> {
        self.from + 1..=self.to
    }
}

pub fn layer_param(side: Side, layer: usize, suffix: &str) -> String {
    format!("{side}.layer.{layer}.{suffix}")
}

/// Block index encoded in a parameter name, if it belongs to a block.
pub fn layer_of(name: &str) -> Option<usize> {
    let rest = name.split_once(".layer.")?.1;
    rest.split('.').next()?.parse().ok()
}

/// True for the embedding front-end of either encoder.
pub fn is_embedding(name: &str) -> bool {
    name.contains(".embed.")
}

/// No key bias: it shifts every score in a row equally and cancels in the
/// softmax.
const BLOCK_PARAMS: [&str; 15] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

/// All encoder parameters plus the log-temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl ModelState {
    /// Fresh weights: Xavier-uniform linears, zero biases, unit layer-norm
    /// gains, N(0, 0.02) embeddings, `tau = 0.07`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut ps = ParamStore::new();
        let xavier = |name: &str, fan_in: usize, fan_out: usize| {
            let mut r = rng::stream(seed, &format!("init/{name}"), &[]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| r.gen_range(-limit..limit)).collect();
            Array::matrix(fan_in, fan_out, data).expect("non-empty")
        };
        let normal = |name: &str, rows: usize, cols: usize| {
            let mut r = rng::stream(seed, &format!("init/{name}"), &[]);
            Array::matrix(rows, cols, rng::normal_vec(&mut r, rows * cols, 0.02)).expect("non-empty")
        };
        let d = c.d_model;

        ps.insert(
            "vision.embed.patch_w",
            xavier("vision.embed.patch_w", c.patch_dim(), d),
            true,
        )?;
        ps.insert("vision.embed.patch_b", Array::zeros(&[1, d]), true)?;
        ps.insert("vision.embed.cls", normal("vision.embed.cls", 1, d), true)?;
        ps.insert("vision.embed.pos", normal("vision.embed.pos", c.vision_len(), d), true)?;
        ps.insert("text.embed.tok", normal("text.embed.tok", c.vocab, d), true)?;
        ps.insert("text.embed.pos", normal("text.embed.pos", c.max_text_len, d), true)?;

        for side in Side::BOTH {
            for l in 1..=c.layers {
                for suffix in BLOCK_PARAMS {
                    let name = layer_param(side, l, suffix);
                    let value = match suffix {
                        "ln1.g" | "ln2.g" => Array::filled(&[1, d], 1.0),
                        "ln1.b" | "ln2.b" | "attn.bq" | "attn.bv" | "attn.bo" | "mlp.b2" => Array::zeros(&[1, d]),
                        "mlp.b1" => Array::zeros(&[1, c.d_ff]),
                        "mlp.w1" => xavier(&name, d, c.d_ff),
                        "mlp.w2" => xavier(&name, c.d_ff, d),
                        _ => xavier(&name, d, d),
                    };
                    ps.insert(name, value, true)?;
                }
            }
            let proj = format!("{side}.proj");
            ps.insert(proj.clone(), xavier(&proj, d, c.d_proj), true)?;
        }
        ps.insert(LOG_TAU, Array::scalar(TAU_INIT.ln()), true)?;
        Ok(Self { config, params: ps })
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(LOG_TAU).map_or(TAU_INIT, |a| a.item().exp())
    }

    /// Keeps `tau` inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) {
        if let Some(t) = self.params.get_mut(LOG_TAU) {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        }
    }

    /// Trainable mask for tuning everything past depth `omega`: blocks
    /// `omega + 1 ..= N`, both projections and the temperature. Embeddings
    /// and blocks `1 ..= omega` are frozen.
    pub fn freeze_through(&mut self, omega: usize) {
        self.params.set_trainable_by(|name| match layer_of(name) {
            Some(l) => l > omega,
            None => !is_embedding(name),
        });
    }

    /// SHA-256 over the config and every parameter (names, shapes, bits).
    pub fn fingerprint(&self) -> String {
        self.fingerprint_where(|_| true)
    }

    /// Fingerprint of the parameters that determine depth-`omega`
    /// activations: embeddings and blocks `1 ..= omega`.
    pub fn shallow_fingerprint(&self, omega: usize) -> String {
        self.fingerprint_where(|name| is_embedding(name) || layer_of(name).is_some_and(|l| l <= omega))
    }

    fn fingerprint_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, a) in self.params.iter().filter(|(n, _)| keep(n)) {
            h.update(name.as_bytes());
            for s in a.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            h.update(a.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn embed_image(&self, image: &Array) -> Result<LayerActivations> {
        let patches = patchify(&self.config, image)?;
        let mut g = Graph::new();
        let p = g.input(PATCHES);
        let x = build_embed_image(&mut g, p);
        let inputs = HashMap::from([(PATCHES.to_string(), patches)]);
        let values = g.evaluate(&inputs, &self.params)?.into_value(x);
        Ok(LayerActivations { depth: 0, values })
    }

    pub fn embed_text(&self, tokens: &TokenSequence) -> Result<LayerActivations> {
        let mut g = Graph::new();
        let x = build_embed_text(&mut g, &self.config, tokens)?;
        let values = g.evaluate(&HashMap::new(), &self.params)?.into_value(x);
        Ok(LayerActivations { depth: 0, values })
    }

    pub fn run_layers(&self, side: Side, acts: &LayerActivations, range: LayerRange) -> Result<LayerActivations> {
        self.check_range(acts, range)?;
        if range.from == range.to {
            return Ok(acts.clone());
        }
        let mut g = Graph::new();
        let x = g.input(ACTS);
        let y = build_layers(&mut g, &self.config, side, range, x);
        let inputs = HashMap::from([(ACTS.to_string(), acts.values.clone())]);
        let values = g.evaluate(&inputs, &self.params)?.into_value(y);
        Ok(LayerActivations {
            depth: range.to,
            values,
        })
    }

    /// Outputs of every block in `range`, in order.
    pub fn layer_outputs(
        &self,
        side: Side,
        acts: &LayerActivations,
        range: LayerRange,
    ) -> Result<Vec<LayerActivations>> {
        self.check_range(acts, range)?;
        let mut g = Graph::new();
        let mut x = g.input(ACTS);
        let mut ids = Vec::new();
        for l in range.layers() {
            x = build_layer(&mut g, &self.config, side, l, x);
            ids.push((l, x));
        }
        let inputs = HashMap::from([(ACTS.to_string(), acts.values.clone())]);
        let eval = g.evaluate(&inputs, &self.params)?;
        Ok(ids
            .into_iter()
            .map(|(l, id)| LayerActivations {
                depth: l,
                values: eval.value(id).clone(),
            })
            .collect())
    }

    fn check_range(&self, acts: &LayerActivations, range: LayerRange) -> Result<()> {
        if acts.depth != range.from || range.from > range.to || range.to > self.config.layers {
            return Err(Error::InvalidRange {
                start: range.from,
                end: range.to,
                depth: acts.depth,
                layers: self.config.layers,
            });
        }
        Ok(())
    }

    /// Unit-norm `[1, d_proj]` feature from depth-N activations.
    pub fn project(&self, side: Side, acts: &LayerActivations) -> Result<Array> {
        if acts.depth != self.config.layers {
            return Err(Error::InvalidRange {
                start: acts.depth,
                end: self.config.layers,
                depth: acts.depth,
                layers: self.config.layers,
            });
        }
        let mut g = Graph::new();
        let x = g.input(ACTS);
        let y = build_project(&mut g, side, x, acts.values.rows());
        let inputs = HashMap::from([(ACTS.to_string(), acts.values.clone())]);
        Ok(g.evaluate(&inputs, &self.params)?.into_value(y))
    }

    pub fn encode_image(&self, image: &Array) -> Result<Array> {
        let a = self.embed_image(image)?;
        let top = self.run_layers(Side::Vision, &a, LayerRange::new(0, self.config.layers))?;
        self.project(Side::Vision, &top)
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Array> {
        let a = self.embed_text(tokens)?;
        let top = self.run_layers(Side::Text, &a, LayerRange::new(0, self.config.layers))?;
        self.project(Side::Text, &top)
    }
}

const PATCHES: &str = "patches";
const ACTS: &str = "acts";

/// `[grid, grid, channels]` image to `[patches, patch·patch·channels]` rows,
/// patches in row-major order.
pub fn patchify(c: &EncoderConfig, image: &Array) -> Result<Array> {
    let expected = [c.image_grid, c.image_grid, c.channels];
    if image.shape() != expected {
        return Err(Error::shape(
            "embed_image",
            format!("image {:?}, expected {expected:?}", image.shape()),
        ));
    }
    let per_side = c.image_grid / c.patch;
    let mut data = Vec::with_capacity(image.len());
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..c.patch {
                for x in 0..c.patch {
                    let row = py * c.patch + y;
                    let col = px * c.patch + x;
                    let base = (row * c.image_grid + col) * c.channels;
                    data.extend_from_slice(&image.data()[base..base + c.channels]);
                }
            }
        }
    }
    Array::matrix(c.n_patches(), c.patch_dim(), data)
}

pub fn build_embed_image(g: &mut Graph, patches: NodeId) -> NodeId {
    g.set_scope(Scope::new("vision", None));
    let w = g.param("vision.embed.patch_w");
    let b = g.param("vision.embed.patch_b");
    let h = g.matmul(patches, w);
    let h = g.add_row(h, b);
    let cls = g.param("vision.embed.cls");
    let seq = g.concat_rows(vec![cls, h]);
    let pos = g.param("vision.embed.pos");
    g.add(seq, pos)
}

pub fn build_embed_text(g: &mut Graph, c: &EncoderConfig, tokens: &TokenSequence) -> Result<NodeId> {
    let len = tokens.len();
    if len == 0 || len > c.max_text_len {
        return Err(Error::TextTooLong {
            len,
            max: c.max_text_len,
        });
    }
    if let Some(&bad) = tokens.ids().iter().find(|&&t| t >= c.vocab) {
        return Err(Error::shape(
            "embed_text",
            format!("token id {bad} >= vocab {}", c.vocab),
        ));
    }
    g.set_scope(Scope::new("text", None));
    let table = g.param("text.embed.tok");
    let tok = g.embedding(table, tokens.ids().to_vec());
    let pos_table = g.param("text.embed.pos");
    let pos = g.slice_rows(pos_table, 0, len);
    Ok(g.add(tok, pos))
}

/// One pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(.))`.
pub fn build_layer(g: &mut Graph, c: &EncoderConfig, side: Side, layer: usize, x: NodeId) -> NodeId {
    g.set_scope(Scope::new(side.as_str(), Some(layer)));
    let p = |g: &mut Graph, s: &str| g.param(&layer_param(side, layer, s));

    let (g1, b1) = (p(g, "ln1.g"), p(g, "ln1.b"));
    let h = g.layer_norm(x, g1, b1);
    let proj = |g: &mut Graph, w: &str, b: Option<&str>| {
        let w = p(g, w);
        let y = g.matmul(h, w);
        match b {
            Some(b) => {
                let b = p(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    };
    let q = proj(g, "attn.wq", Some("attn.bq"));
    let k = proj(g, "attn.wk", None);
    let v = proj(g, "attn.wv", Some("attn.bv"));
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(c.n_heads);
    for head in 0..c.n_heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        heads.push(g.matmul(a, vh));
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(heads)
    };
    let (wo, bo) = (p(g, "attn.wo"), p(g, "attn.bo"));
    let o = g.matmul(cat, wo);
    let o = g.add_row(o, bo);
    let x1 = g.add(x, o);

    let (g2, b2) = (p(g, "ln2.g"), p(g, "ln2.b"));
    let h2 = g.layer_norm(x1, g2, b2);
    let (w1, bb1) = (p(g, "mlp.w1"), p(g, "mlp.b1"));
    let m = g.matmul(h2, w1);
    let m = g.add_row(m, bb1);
    let m = g.gelu(m);
    let (w2, bb2) = (p(g, "mlp.w2"), p(g, "mlp.b2"));
    let m = g.matmul(m, w2);
    let m = g.add_row(m, bb2);
    g.add(x1, m)
}

pub fn build_layers(g: &mut Graph, c: &EncoderConfig, side: Side, range: LayerRange, x: NodeId) -> NodeId {
    range.layers().fold(x, |x, l| build_layer(g, c, side, l, x))
}

/// Aggregation position (vision: first token, text: terminal token of a
/// `seq_len`-row sequence), linear projection, L2 normalization.
pub fn build_project(g: &mut Graph, side: Side, x: NodeId, seq_len: usize) -> NodeId {
    g.set_scope(Scope::new("head", None));
    let row = match side {
        Side::Vision => g.slice_rows(x, 0, 1),
        Side::Text => g.slice_rows(x, seq_len - 1, seq_len),
    };
    let w = g.param(&format!("{side}.proj"));
    let y = g.matmul(row, w);
    g.normalize(y)
}
