//! Training objectives: symmetric InfoNCE (VTC), matching with mined hard
//! negatives (VTM), their sum for retrieval, and answer classification (QA).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::tensor::{Float, Tensor};

/// VTM label of a matched pair; unmatched pairs use `0`.
pub const MATCHED: usize = 1;
pub const UNMATCHED: usize = 0;

const NORM_TOLERANCE: f64 = 1e-4;

/// Row-normalized video and text embeddings (`B × D_p` each) and the
/// contrastive temperature, held in log-space so `τ_c = exp(log_tau_c) > 0`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch {
    pub v_cls: Var,
    pub t_cls: Var,
    pub log_tau_c: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct VtcLoss {
    pub v2t: Var,
    pub t2v: Var,
    pub total: Var,
    /// `v_cls · t_clsᵀ / τ_c`
    pub logits: Var,
}

fn check_unit_rows<F: Float>(t: &Tensor<F>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = Tensor::dot(t.row(r), t.row(r)).as_f64().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// `½ (L_v2t + L_t2v)` with the diagonal pairs as positives.
pub fn vtc_loss<F: Float>(g: &mut Graph<'_, F>, batch: &ContrastiveBatch) -> Result<VtcLoss> {
    let (b, d) = g.dims(batch.v_cls);
    if g.dims(batch.t_cls) != (b, d) || b == 0 {
        return shape_err("vtc_loss", format!("{:?} vs {:?}", g.shape(batch.v_cls), g.shape(batch.t_cls)));
    }
    check_unit_rows(g.value(batch.v_cls), "v_cls")?;
    check_unit_rows(g.value(batch.t_cls), "t_cls")?;
    if g.value(batch.log_tau_c).len() != 1 {
        return shape_err("vtc_loss", "temperature must be a scalar");
    }
    let tt = g.transpose(batch.t_cls)?;
    let sim = g.matmul(batch.v_cls, tt)?;
    let neg = g.scale(batch.log_tau_c, -F::one())?;
    let inv_tau = g.exp(neg)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let labels: Vec<usize> = (0..b).collect();
    let v2t = g.cross_entropy(logits, &labels)?;
    let lt = g.transpose(logits)?;
    let t2v = g.cross_entropy(lt, &labels)?;
    let sum = g.add(v2t, t2v)?;
    let total = g.scale(sum, F::from_f64(0.5))?;
    Ok(VtcLoss { v2t, t2v, total, logits })
}

/// Sampled in-batch negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegatives {
    /// For text `k`: index of a non-matching video.
    pub video_neg: Vec<usize>,
    /// For video `k`: index of a non-matching text.
    pub text_neg: Vec<usize>,
}

/// Sample one negative per row and per column of the `B × B` logit matrix
/// (rows = videos, columns = texts) with probability proportional to
/// `softmax` over the off-diagonal entries.
pub fn mine_hard_negatives<F: Float, R: Rng + ?Sized>(logits: &Tensor<F>, rng: &mut R) -> Result<HardNegatives> {
    let (b, c) = logits.dims2();
    if b != c {
        return shape_err("mine_hard_negatives", format!("{b}x{c} is not square"));
    }
    if b < 2 {
        return Err(Error::InvalidArgument("hard-negative mining needs at least 2 pairs".into()));
    }
    let sample = |vals: Vec<f64>, skip: usize, rng: &mut R| -> Result<usize> {
        let m = vals
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != skip)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| if i == skip { 0.0 } else { (v - m).exp() })
            .collect();
        let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(format!("negative sampling: {e}")))?;
        Ok(dist.sample(rng))
    };
    let mut text_neg = Vec::with_capacity(b);
    for k in 0..b {
        let row: Vec<f64> = logits.row(k).iter().map(|v| v.as_f64()).collect();
        text_neg.push(sample(row, k, rng)?);
    }
    let mut video_neg = Vec::with_capacity(b);
    for k in 0..b {
        let col: Vec<f64> = (0..b).map(|i| logits.at(i, k).as_f64()).collect();
        video_neg.push(sample(col, k, rng)?);
    }
    Ok(HardNegatives { video_neg, text_neg })
}

/// Grounded outputs (`1 × D` each) for B positives and 2B mined negatives.
#[derive(Debug, Clone)]
pub struct VtmBatch {
    pub positives: Vec<Var>,
    pub video_negatives: Vec<Var>,
    pub text_negatives: Vec<Var>,
}

/// Two-class cross-entropy over all 3B examples with a linear head.
pub fn vtm_loss<F: Float>(g: &mut Graph<'_, F>, head: &Linear, batch: &VtmBatch) -> Result<Var> {
    let b = batch.positives.len();
    if batch.video_negatives.len() != b || batch.text_negatives.len() != b || b == 0 {
        return Err(Error::InvalidArgument(format!(
            "VTM batch needs B positives and 2B negatives, got {}/{}/{}",
            b,
            batch.video_negatives.len(),
            batch.text_negatives.len()
        )));
    }
    let rows: Vec<Var> = batch
        .positives
        .iter()
        .chain(&batch.video_negatives)
        .chain(&batch.text_negatives)
        .copied()
        .collect();
    let stacked = g.concat_rows(&rows)?;
    let logits = head.forward(g, stacked)?;
    let labels: Vec<usize> = (0..3 * b).map(|i| if i < b { MATCHED } else { UNMATCHED }).collect();
    g.cross_entropy(logits, &labels)
}

/// `L_vtc + L_vtm`.
pub fn retrieval_loss<F: Float>(g: &mut Graph<'_, F>, vtc: Var, vtm: Var) -> Result<Var> {
    g.add(vtc, vtm)
}

/// Two-layer MLP answer head, `D → D → K` with GELU between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QaHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl QaHead {
    pub fn logits<F: Float>(&self, g: &mut Graph<'_, F>, t_enc: Var) -> Result<Var> {
        let h = self.hidden.forward(g, t_enc)?;
        let h = g.gelu(h)?;
        self.out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct QaBatch {
    pub t_enc: Vec<Var>,
    pub answers: Vec<usize>,
}

/// K-class cross-entropy averaged over the batch.
pub fn vqa_loss<F: Float>(g: &mut Graph<'_, F>, head: &QaHead, batch: &QaBatch) -> Result<Var> {
    if batch.t_enc.len() != batch.answers.len() || batch.t_enc.is_empty() {
        return Err(Error::InvalidArgument("QA batch needs one answer per example".into()));
    }
    let stacked = g.concat_rows(&batch.t_enc)?;
    let logits = head.logits(g, stacked)?;
    g.cross_entropy(logits, &batch.answers)
}
