use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, BackwardCounters, Graph, OpCounters, Scope};
use crate::encoders::{build_layer, EncoderConfig, ModelState, Side};
use crate::error::{Error, Result};

/// Measured cost of one step (or a sum of steps). Equality ignores wall
/// time.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CostCounters {
    pub forward_macs: u64,
    pub backward_macs: u64,
    /// Forward plus backward multiply-adds inside encoder blocks.
    pub vision_body_macs: u64,
    pub text_body_macs: u64,
    /// Forward activations held at the end of the forward pass plus the
    /// largest gradient working set during backward.
    pub peak_live_elements: u64,
    /// Nodes recorded per `(side, layer)`.
    #[serde(skip)]
    pub layer_nodes: BTreeMap<(String, usize), u64>,
    #[serde(skip)]
    pub wall: Duration,
}

impl PartialEq for CostCounters {
    fn eq(&self, o: &Self) -> bool {
        self.forward_macs == o.forward_macs
            && self.backward_macs == o.backward_macs
            && self.vision_body_macs == o.vision_body_macs
            && self.text_body_macs == o.text_body_macs
            && self.peak_live_elements == o.peak_live_elements
            && self.layer_nodes == o.layer_nodes
    }
}

impl CostCounters {
    pub fn from_passes(fwd: &OpCounters, bwd: Option<&BackwardCounters>) -> Self {
        let mut c = CostCounters {
            forward_macs: fwd.forward_macs,
            peak_live_elements: fwd.forward_live_elements,
            ..Default::default()
        };
        let mut body = |scope: &Scope, macs: u64| match (scope.group, scope.layer) {
            ("vision", Some(_)) => c.vision_body_macs += macs,
            ("text", Some(_)) => c.text_body_macs += macs,
            _ => {}
        };
        for (scope, count) in &fwd.by_scope {
            body(scope, count.forward_macs);
        }
        if let Some(b) = bwd {
            for (scope, count) in &b.by_scope {
                body(scope, count.backward_macs);
            }
        }
        for (scope, count) in &fwd.by_scope {
            if let Some(l) = scope.layer {
                *c.layer_nodes.entry((scope.group.to_string(), l)).or_default() += count.nodes;
            }
        }
        if let Some(b) = bwd {
            c.backward_macs = b.backward_macs;
            c.peak_live_elements += b.peak_grad_elements;
        }
        c
    }

    pub fn total_macs(&self) -> u64 {
        self.forward_macs + self.backward_macs
    }

    pub fn body_macs(&self) -> u64 {
        self.vision_body_macs + self.text_body_macs
    }

    /// Layers (per side) that contributed at least one node.
    pub fn layers_touched(&self) -> BTreeSet<(String, usize)> {
        self.layer_nodes
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Sums counters; peak memory takes the maximum.
    pub fn accumulate(&mut self, other: &CostCounters) {
        self.forward_macs += other.forward_macs;
        self.backward_macs += other.backward_macs;
        self.vision_body_macs += other.vision_body_macs;
        self.text_body_macs += other.text_body_macs;
        self.peak_live_elements = self.peak_live_elements.max(other.peak_live_elements);
        for (k, v) in &other.layer_nodes {
            *self.layer_nodes.entry(k.clone()).or_default() += v;
        }
        self.wall += other.wall;
    }
}

/// Counters of an instrumented step closure; the closure is expected to
/// return the step's own counters, which start from zero on every call.
pub fn measure_step<F>(step: F) -> Result<CostCounters>
where
    F: FnOnce() -> Result<CostCounters>,
{
    let start = std::time::Instant::now();
    let mut c = step()?;
    if c.wall.is_zero() {
        c.wall = start.elapsed();
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPrediction {
    pub baseline: f64,
    pub skip: f64,
    /// `baseline / skip`.
    pub ratio: f64,
}

/// Analytic propagation-flow cost: `N·(C_V + C_T·M)` against
/// `(N − ω)·(C_V + C_T·m)`. The one-time cache build is not included.
pub fn predict_cost(
    n: usize,
    omega: usize,
    m_total: usize,
    m_expected: f64,
    c_v: f64,
    c_t: f64,
) -> Result<CostPrediction> {
    if omega >= n {
        return Err(Error::Config(format!("omega {omega} must be < N = {n}")));
    }
    if !(m_expected > 0.0 && m_expected <= m_total as f64) {
        return Err(Error::Config(format!("m {m_expected} outside (0, {m_total}]")));
    }
    if !(c_v > 0.0 && c_t > 0.0) {
        return Err(Error::Config("block costs must be positive".into()));
    }
    let baseline = n as f64 * (c_v + c_t * m_total as f64);
    let skip = (n - omega) as f64 * (c_v + c_t * m_expected);
    Ok(CostPrediction {
        baseline,
        skip,
        ratio: baseline / skip,
    })
}

/// Per-block cost of one image (`C_V`) and one class text (`C_T`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCosts {
    pub c_v: f64,
    pub c_t: f64,
}

/// Counts forward plus backward multiply-adds of a single block on each
/// side, with gradients flowing to the block input as they do for any
/// block that is not the first trainable one.
pub fn block_costs(model: &ModelState, text_len: usize) -> Result<BlockCosts> {
    let cfg: &EncoderConfig = &model.config;
    let one = |side: Side, rows: usize| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = build_layer(&mut g, cfg, side, 1, x);
        g.set_scope(Scope::default());
        let root = g.mean(y);
        let inputs = HashMap::from([("x".to_string(), Array::filled(&[rows, cfg.d_model], 0.1))]);
        let mut wrt: BTreeSet<String> = g.param_names().map(str::to_string).collect();
        wrt.insert("x".into());
        let mut params = model.params.clone();
        params.set_trainable_by(|_| true);
        let eval = g.evaluate(&inputs, &params)?;
        let grads = g.backward(&eval, root, &params, &wrt)?;
        let c = CostCounters::from_passes(&eval.counters, Some(&grads.counters));
        Ok(c.body_macs() as f64)
    };
    Ok(BlockCosts {
        c_v: one(Side::Vision, cfg.vision_len())?,
        c_t: one(Side::Text, text_len)?,
    })
}
