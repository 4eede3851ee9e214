//! Parameter handles for the transformer building blocks and their forward passes.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{normal_tensor, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `weight` is stored `in × out` so the forward pass is `x · W + b`.
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), normal_tensor(&[fan_in, fan_out], std, rng), ParamGroup::Weight);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamGroup::NoDecay);
        Self { weight, bias }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.insert(format!("{name}.gain"), Tensor::ones(&[dim]), ParamGroup::NoDecay);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamGroup::NoDecay);
        Self { gain, bias }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Query/key/value/output projections of one multi-head attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, std, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, std, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, std, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, std, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.query, self.key, self.value, self.output]
            .iter()
            .flat_map(Linear::ids)
            .collect()
    }

    /// Full (ungrouped) attention of `queries` over `keys_values`. Returns the
    /// projected output and the per-head probability matrices.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        queries: Var,
        keys_values: Var,
        heads: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let (ctx, probs) = heads_attend(g, q, k, v, heads)?;
        Ok((self.output.forward(g, ctx)?, probs))
    }

    /// Self-attention restricted to row groups: row `i` of group `j` only
    /// attends to rows of group `j`. Returns one context block per group,
    /// before the output projection.
    pub fn grouped_context<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        groups: &[Vec<usize>],
        heads: usize,
    ) -> Result<Vec<Var>> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let mut out = Vec::with_capacity(groups.len());
        for rows in groups {
            let qg = g.gather_rows(q, rows)?;
            let kg = g.gather_rows(k, rows)?;
            let vg = g.gather_rows(v, rows)?;
            out.push(heads_attend(g, qg, kg, vg, heads)?.0);
        }
        Ok(out)
    }
}

/// Scaled dot-product attention split over `heads` column blocks.
fn heads_attend<F: Float>(g: &mut Graph<'_, F>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let dim = g.dims(q).1;
    let dh = dim / heads;
    let temp = F::from_f64((dh as f64).sqrt());
    let mut ctx = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let p = g.softmax(scores, 1, temp)?;
        ctx.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
    Ok((joined, probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, std, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, std, rng),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.up.ids().into_iter().chain(self.down.ids()).collect()
    }
}

/// Copy every tensor of `src` into `dst` (same shapes).
pub(crate) fn copy_linear<F: Float>(store: &mut ParamStore<F>, src: &Linear, dst: &Linear) -> Result<()> {
    let w = store.get(src.weight).clone();
    let b = store.get(src.bias).clone();
    store.set(dst.weight, w)?;
    store.set(dst.bias, b)
}
