//! Non-parametric text-dependent pooling and the ablation pooling modes.
//!
//! `V_ft` averages each frame's patch tokens, `V_fs` averages each spatial
//! position over frames; the [CLS] row of `V_L` takes part in neither. In
//! text-dependent mode both are reweighted by a softmax over their cosine
//! similarity to the text [CLS] output, scaled by the row count so the total
//! weight equals that of plain concatenation.

use crate::autodiff::{Graph, Var};
use crate::config::PoolingMode;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Float;

/// Graph nodes produced by pooling one `V_L`.
#[derive(Debug, Clone, Copy)]
pub struct PooledBundle {
    /// `T × D`
    pub v_ft: Var,
    /// `S × D`
    pub v_fs: Var,
    pub reweighted: Option<Reweighted>,
    /// Assembled features handed to the grounded encoder.
    pub v_f: Var,
    pub mode: PoolingMode,
}

/// Text-dependent weights and reweighted features.
#[derive(Debug, Clone, Copy)]
pub struct Reweighted {
    /// `T × 1`, sums to one.
    pub g_t: Var,
    /// `S × 1`, sums to one.
    pub g_s: Var,
    /// `T × D`, row `t` is `T·g_t[t]·V_ft[t]`.
    pub v_ft: Var,
    /// `S × D`, row `s` is `S·g_s[s]·V_fs[s]`.
    pub v_fs: Var,
}

/// Frame means and spatial-position means of the patch rows of `V_L`.
pub fn mean_pools<F: Float>(g: &mut Graph<'_, F>, v_l: Var, frames: usize, patches: usize) -> Result<(Var, Var)> {
    let rows = g.dims(v_l).0;
    if rows != 1 + frames * patches {
        return shape_err("mean_pools", format!("V_L has {rows} rows, expected {}", 1 + frames * patches));
    }
    let mut per_frame = Vec::with_capacity(frames);
    for t in 0..frames {
        let block = g.slice_rows(v_l, 1 + t * patches, 1 + (t + 1) * patches)?;
        per_frame.push(g.mean_axis(block, 0)?);
    }
    let mut per_position = Vec::with_capacity(patches);
    for s in 0..patches {
        let idx: Vec<usize> = (0..frames).map(|t| 1 + t * patches + s).collect();
        let column = g.gather_rows(v_l, &idx)?;
        per_position.push(g.mean_axis(column, 0)?);
    }
    Ok((g.concat_rows(&per_frame)?, g.concat_rows(&per_position)?))
}

fn reweight_one<F: Float>(g: &mut Graph<'_, F>, feats: Var, text_dir: Var, tau: F) -> Result<(Var, Var)> {
    let n = g.dims(feats).0;
    let dirs = g.l2_normalize_rows(feats)?;
    let tt = g.transpose(text_dir)?;
    let sims = g.matmul(dirs, tt)?; // n × 1
    let weights = g.softmax(sims, 0, tau)?;
    let scaled = g.scale(weights, F::from_f64(n as f64))?;
    Ok((weights, g.mul_rows(feats, scaled)?))
}

/// `g = softmax(norm(V)·norm(t)/τ)` and `Ṽ = n·g ⊙ V` for both pooled sets.
pub fn text_dependent_reweight<F: Float>(
    g: &mut Graph<'_, F>,
    v_ft: Var,
    v_fs: Var,
    t_cls_full: Var,
    tau: F,
) -> Result<Reweighted> {
    if !(tau > F::zero()) {
        return Err(Error::InvalidArgument(format!("pooling temperature {tau} must be > 0")));
    }
    let d = g.dims(v_ft).1;
    if g.dims(t_cls_full) != (1, d) || g.dims(v_fs).1 != d {
        return shape_err("text_dependent_reweight", "text and video widths differ");
    }
    let text_dir = g.l2_normalize_rows(t_cls_full)?;
    let (g_t, ft) = reweight_one(g, v_ft, text_dir, tau)?;
    let (g_s, fs) = reweight_one(g, v_fs, text_dir, tau)?;
    Ok(Reweighted { g_t, g_s, v_ft: ft, v_fs: fs })
}

/// Row-concatenate `[temporal part, spatial part, V_L]` with the parts `mode` includes.
pub fn assemble_features<F: Float>(
    g: &mut Graph<'_, F>,
    mode: PoolingMode,
    v_l: Var,
    v_ft: Var,
    v_fs: Var,
    reweighted: Option<&Reweighted>,
) -> Result<Var> {
    let (ft, fs) = match (mode, reweighted) {
        (PoolingMode::TextDependent, Some(r)) => (r.v_ft, r.v_fs),
        (PoolingMode::TextDependent, None) => {
            return Err(Error::InvalidArgument("text-dependent mode needs reweighted features".into()))
        }
        _ => (v_ft, v_fs),
    };
    let mut parts = Vec::with_capacity(3);
    if mode.has_temporal() {
        parts.push(ft);
    }
    if mode.has_spatial() {
        parts.push(fs);
    }
    if parts.is_empty() {
        return Ok(v_l);
    }
    parts.push(v_l);
    g.concat_rows(&parts)
}

/// Full pooling pipeline for one video/text pair. `t_cls_full` is only read in
/// text-dependent mode.
pub fn pool<F: Float>(
    g: &mut Graph<'_, F>,
    mode: PoolingMode,
    v_l: Var,
    t_cls_full: Var,
    frames: usize,
    patches: usize,
    tau: F,
) -> Result<PooledBundle> {
    let (v_ft, v_fs) = mean_pools(g, v_l, frames, patches)?;
    let reweighted = if mode == PoolingMode::TextDependent {
        Some(text_dependent_reweight(g, v_ft, v_fs, t_cls_full, tau)?)
    } else {
        None
    };
    let v_f = assemble_features(g, mode, v_l, v_ft, v_fs, reweighted.as_ref())?;
    Ok(PooledBundle { v_ft, v_fs, reweighted, v_f, mode })
}

/// Mean over all rows of `[Ṽ_ft ; Ṽ_fs]`: a single `1 × D` summary for
/// dual-encoder use.
pub fn pool_weighted_average<F: Float>(g: &mut Graph<'_, F>, reweighted: &Reweighted) -> Result<Var> {
    let stacked = g.concat_rows(&[reweighted.v_ft, reweighted.v_fs])?;
    g.mean_axis(stacked, 0)
}
