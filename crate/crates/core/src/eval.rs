//! Text-to-video retrieval scoring, R@k / MdR metrics and two-stage reranking.
//!
//! Score matrices are `N × N` with rows indexing videos and columns indexing
//! texts; the ground-truth video of text `j` is video `j`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticPair;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::objectives::MATCHED;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Median rank; the mean of the two middle ranks for an even count.
    pub mdr: f64,
    pub direction: String,
    pub queries: usize,
}

fn check_square(s: &Tensor<f64>) -> Result<usize> {
    let (r, c) = s.dims2();
    if s.rank() != 2 || r != c || r == 0 {
        return shape_err("eval_retrieval", format!("score matrix {:?} is not square", s.shape()));
    }
    Ok(r)
}

/// `true` when candidate `a` ranks before `b` (higher score, then lower index).
fn before(sa: f64, a: usize, sb: f64, b: usize) -> bool {
    sa > sb || (sa == sb && a < b)
}

fn rank_order(sa: f64, a: usize, sb: f64, b: usize) -> std::cmp::Ordering {
    sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
}

/// 1-based rank of video `j` for text query `j`, for every `j`.
pub fn text_to_video_ranks(s: &Tensor<f64>) -> Result<Vec<usize>> {
    let n = check_square(s)?;
    Ok((0..n)
        .map(|j| {
            let target = s.at(j, j);
            1 + (0..n).filter(|&i| i != j && before(s.at(i, j), i, target, j)).count()
        })
        .collect())
}

pub fn metrics_from_ranks(ranks: &[usize]) -> RetrievalMetrics {
    let n = ranks.len();
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mdr = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    RetrievalMetrics { r1: recall(1), r5: recall(5), r10: recall(10), mdr, direction: "text_to_video".into(), queries: n }
}

pub fn eval_retrieval(s: &Tensor<f64>) -> Result<RetrievalMetrics> {
    Ok(metrics_from_ranks(&text_to_video_ranks(s)?))
}

/// Per-clip and per-caption encodings reused by every pairwise score.
pub struct ScoringCache<'m, F> {
    model: &'m Model<F>,
    v_l: Vec<Tensor<F>>,
    v_cls: Vec<Tensor<F>>,
    t_full: Vec<Tensor<F>>,
    t_cls: Vec<Tensor<F>>,
    captions: Vec<crate::text::TokenSequence>,
}

impl<'m, F: Float> ScoringCache<'m, F> {
    pub fn new(model: &'m Model<F>, corpus: &[SyntheticPair]) -> Result<Self> {
        let n = model.frames();
        let videos: Vec<_> = corpus
            .par_iter()
            .map(|p| -> Result<(Tensor<F>, Tensor<F>)> {
                let video = if p.video.frames == n {
                    p.video.clone()
                } else {
                    let idx = crate::data::sample_frames(
                        p.video.frames,
                        n,
                        crate::data::SampleMode::Eval,
                        &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
                    )?;
                    p.video.select_frames(&idx)?
                };
                let mut g = model.inference_graph();
                let e = model.encode_video(&mut g, &video)?;
                Ok((g.value(e.tokens).clone(), g.value(e.cls).clone()))
            })
            .collect::<Result<_>>()?;
        let texts: Vec<_> = corpus
            .par_iter()
            .map(|p| -> Result<(Tensor<F>, Tensor<F>)> {
                let mut g = model.inference_graph();
                let e = model.encode_text(&mut g, &p.caption)?;
                Ok((g.value(e.cls_full).clone(), g.value(e.cls).clone()))
            })
            .collect::<Result<_>>()?;
        let (v_l, v_cls) = videos.into_iter().unzip();
        let (t_full, t_cls) = texts.into_iter().unzip();
        Ok(Self { model, v_l, v_cls, t_full, t_cls, captions: corpus.iter().map(|p| p.caption.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.v_l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_l.is_empty()
    }

    /// `S_vtc[i][j] = v_cls(i) · t_cls(j)`.
    pub fn vtc_matrix(&self) -> Tensor<f64> {
        let n = self.len();
        let mut data = Vec::with_capacity(n * n);
        for v in &self.v_cls {
            for t in &self.t_cls {
                data.push(Tensor::dot(v.data(), t.data()).as_f64());
            }
        }
        Tensor::new(vec![n, n], data).expect("n×n")
    }

    /// Matched-class log-probability of the grounded encoder on (video `i`, text `j`).
    pub fn vtm(&self, i: usize, j: usize) -> Result<f64> {
        let mut g = self.model.inference_graph();
        let v_l = g.constant(self.v_l[i].clone());
        let t = g.constant(self.t_full[j].clone());
        let m = self.model.match_forward(&mut g, v_l, t, &self.captions[j])?;
        let row = g.value(m.logits).row(0);
        let (a, b) = (row[0].as_f64(), row[1].as_f64());
        let mx = a.max(b);
        let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
        Ok(row[MATCHED].as_f64() - lse)
    }

    pub fn vtm_matrix(&self) -> Result<Tensor<f64>> {
        let n = self.len();
        let data: Vec<f64> = (0..n * n).into_par_iter().map(|c| self.vtm(c / n, c % n)).collect::<Result<_>>()?;
        Tensor::new(vec![n, n], data)
    }
}

#[derive(Debug, Clone)]
pub struct Scores {
    pub vtc: Tensor<f64>,
    pub vtm: Tensor<f64>,
}

/// Both full score matrices. Cells are evaluated in parallel; each is a pure
/// function of the model, so the result is deterministic.
pub fn score_all<F: Float>(model: &Model<F>, corpus: &[SyntheticPair]) -> Result<Scores> {
    let cache = ScoringCache::new(model, corpus)?;
    Ok(Scores { vtc: cache.vtc_matrix(), vtm: cache.vtm_matrix()? })
}

/// Ranks after reranking each query's VTC top-`k` by `scorer`; the remaining
/// candidates follow in VTC order. Returns the ranks and the number of
/// scorer calls (always `N·k`).
pub fn two_stage_ranks<S>(s_vtc: &Tensor<f64>, k: usize, scorer: S) -> Result<(Vec<usize>, usize)>
where
    S: Fn(usize, usize) -> Result<f64> + Sync,
{
    let n = check_square(s_vtc)?;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    let calls = AtomicUsize::new(0);
    let ranks = (0..n)
        .into_par_iter()
        .map(|j| -> Result<usize> {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rank_order(s_vtc.at(a, j), a, s_vtc.at(b, j), b));
            let mut head = order[..k]
                .iter()
                .map(|&i| scorer(i, j).map(|s| (i, s)))
                .collect::<Result<Vec<_>>>()?;
            calls.fetch_add(k, Ordering::Relaxed);
            head.sort_by(|&(a, sa), &(b, sb)| rank_order(sa, a, sb, b));
            let pos = head
                .iter()
                .map(|&(i, _)| i)
                .chain(order[k..].iter().copied())
                .position(|i| i == j)
                .expect("target present");
            Ok(pos + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ranks, calls.into_inner()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub metrics: RetrievalMetrics,
    pub k: usize,
    pub vtm_calls: usize,
}

/// VTC filtering followed by VTM reranking of the top `k` per query.
pub fn eval_two_stage<F: Float>(model: &Model<F>, corpus: &[SyntheticPair], k: usize) -> Result<TwoStageResult> {
    let cache = ScoringCache::new(model, corpus)?;
    let (ranks, vtm_calls) = two_stage_ranks(&cache.vtc_matrix(), k, |i, j| cache.vtm(i, j))?;
    Ok(TwoStageResult { metrics: metrics_from_ranks(&ranks), k, vtm_calls })
}
