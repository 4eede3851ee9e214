//! Retrieval and VideoQA training loops.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{epoch_order, sample_frames, SampleMode, SyntheticPair};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::params::ParamStore;
use crate::tensor::Float;
use crate::text::TokenSequence;
use crate::video::VideoTensor;

/// One optimizer step of a retrieval run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLog {
    pub step: usize,
    pub l_vtc: f64,
    pub l_vtm: f64,
    pub loss: f64,
    pub lr: f64,
}

impl RetrievalLog {
    pub const CSV_HEADER: &'static str = "step,l_vtc,l_vtm,loss,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_vtc, self.l_vtm, self.loss, self.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub steps: Vec<RetrievalLog>,
    /// Mean loss of each (possibly partial) epoch.
    pub epoch_losses: Vec<f64>,
}

impl RetrievalReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Seed stream used for shuffling, frame sampling and negative mining; kept
/// apart from the weight-init stream of the same seed.
fn run_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn require_seed(cfg: &TrainConfig) -> Result<u64> {
    cfg.seed.ok_or_else(|| Error::Config("training requires a seed".into()))
}

fn batches_per_epoch(n: usize, batch: usize, min: usize) -> usize {
    n / batch + usize::from(n % batch >= min)
}

fn total_steps(cfg: &TrainConfig, n: usize, min_batch: usize) -> Result<usize> {
    let total = cfg.steps.unwrap_or(cfg.epochs * batches_per_epoch(n, cfg.batch_size, min_batch));
    if total == 0 {
        return Err(Error::Config(format!("no full batch: {n} examples with batch size {}", cfg.batch_size)));
    }
    Ok(total)
}

/// Clip frames the encoder sees for one example.
fn frames_for<F: Float>(model: &Model<F>, video: &VideoTensor, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<VideoTensor> {
    let n = model.frames();
    if video.frames == n {
        return Ok(video.clone());
    }
    let idx = sample_frames(video.frames, n, mode, rng)?;
    video.select_frames(&idx)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged { step, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

fn check_frames<F: Float>(model: &Model<F>, cfg: &TrainConfig) -> Result<()> {
    if cfg.frames_train != model.frames() || cfg.frames_eval != model.frames() {
        return Err(Error::Config(format!(
            "frames_train/frames_eval ({}/{}) must equal the encoder's frame count {}",
            cfg.frames_train,
            cfg.frames_eval,
            model.frames()
        )));
    }
    Ok(())
}

/// Train `model` on `L_vtc + L_vtm` over `corpus`. Batches smaller than two
/// pairs are dropped; `cfg.steps`, when set, overrides the epoch count.
pub fn train_retrieval<F: Float>(
    model: &mut Model<F>,
    corpus: &[SyntheticPair],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    check_frames(model, cfg)?;
    let seed = require_seed(cfg)?;
    model.pooling_mode = cfg.pooling_mode;
    let total = total_steps(cfg, corpus.len(), 2)?;
    let sched = LrSchedule::new(cfg.learning_rate, cfg.warmup_ratio, total, cfg.schedule);
    let mut opt = AdamW::new(AdamWConfig::from(cfg), &model.params);
    let mut rng = run_rng(seed);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", RetrievalLog::CSV_HEADER)?;
    }

    let mut steps = Vec::with_capacity(total);
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    while step < total {
        let order = epoch_order(corpus.len(), &mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 || step >= total {
                continue;
            }
            let videos = chunk
                .iter()
                .map(|&i| frames_for(model, &corpus[i].video, SampleMode::Train, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let vrefs: Vec<&VideoTensor> = videos.iter().collect();
            let crefs: Vec<&TokenSequence> = chunk.iter().map(|&i| &corpus[i].caption).collect();
            let lr = sched.at(step);
            let (entry, grads) = {
                let mut g = model.graph();
                let out = model.retrieval_step(&mut g, &vrefs, &crefs, &mut rng).map_err(diverged(step))?;
                let entry = RetrievalLog {
                    step,
                    l_vtc: g.value(out.vtc).item().as_f64(),
                    l_vtm: g.value(out.vtm).item().as_f64(),
                    loss: g.value(out.total).item().as_f64(),
                    lr,
                };
                (entry, g.backward(out.total).map_err(diverged(step))?)
            };
            if !entry.loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {}", entry.loss) });
            }
            opt.step(&mut model.params, &grads, lr);
            if !model.params.ids().all(|id| model.params.get(id).all_finite()) {
                return Err(Error::Diverged { step, detail: "non-finite parameter after update".into() });
            }
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", entry.csv_row())?;
            }
            epoch_sum += entry.loss;
            epoch_n += 1;
            steps.push(entry);
            step += 1;
        }
        if epoch_n > 0 {
            epoch_losses.push(epoch_sum / epoch_n as f64);
        }
    }
    Ok(RetrievalReport { steps, epoch_losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqaLog {
    pub step: usize,
    pub l_vqa: f64,
    pub lr: f64,
}

impl VqaLog {
    pub const CSV_HEADER: &'static str = "step,l_vqa,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.l_vqa, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub step: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaReport {
    pub steps: Vec<VqaLog>,
    pub curve: Vec<EpochAccuracy>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Percentage of examples whose argmax answer is correct.
pub fn vqa_accuracy<F: Float>(model: &Model<F>, examples: &[SyntheticPair]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut rng = run_rng(0);
    let mut correct = 0;
    for p in examples {
        let answer = p
            .qa_answer
            .ok_or_else(|| Error::InvalidArgument(format!("pair {} has no answer", p.pair_id)))?;
        let video = frames_for(model, &p.video, SampleMode::Eval, &mut rng)?;
        let mut g = model.inference_graph();
        let (logits, _) = model.qa_forward(&mut g, &video, &p.question())?;
        let row = g.value(logits).row(0);
        let pred = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
        correct += usize::from(pred == answer);
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Train the answer head and both encoders on `L_VideoQA`. After every epoch
/// the validation accuracy is measured; on return `model` holds the parameters
/// of the best epoch (earliest on ties).
pub fn train_vqa<F: Float>(
    model: &mut Model<F>,
    train: &[SyntheticPair],
    val: &[SyntheticPair],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<VqaReport> {
    cfg.validate()?;
    check_frames(model, cfg)?;
    let seed = require_seed(cfg)?;
    model.pooling_mode = cfg.pooling_mode;
    let answers = train
        .iter()
        .map(|p| p.qa_answer.ok_or_else(|| Error::InvalidArgument(format!("pair {} has no answer", p.pair_id))))
        .collect::<Result<Vec<_>>>()?;
    let total = total_steps(cfg, train.len(), 1)?;
    let sched = LrSchedule::new(cfg.learning_rate, cfg.warmup_ratio, total, cfg.schedule);
    let mut opt = AdamW::new(AdamWConfig::from(cfg), &model.params);
    let mut rng = run_rng(seed);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", VqaLog::CSV_HEADER)?;
    }

    let mut steps = Vec::with_capacity(total);
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<F>)> = None;
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let order = epoch_order(train.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let videos = chunk
                .iter()
                .map(|&i| frames_for(model, &train[i].video, SampleMode::Train, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let vrefs: Vec<&VideoTensor> = videos.iter().collect();
            let questions: Vec<TokenSequence> = chunk.iter().map(|&i| train[i].question()).collect();
            let qrefs: Vec<&TokenSequence> = questions.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| answers[i]).collect();
            let lr = sched.at(step);
            let (loss, grads) = {
                let mut g = model.graph();
                let loss = model.qa_step(&mut g, &vrefs, &qrefs, &labels).map_err(diverged(step))?;
                (g.value(loss).item().as_f64(), g.backward(loss).map_err(diverged(step))?)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {loss}") });
            }
            opt.step(&mut model.params, &grads, lr);
            let entry = VqaLog { step, l_vqa: loss, lr };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", entry.csv_row())?;
            }
            steps.push(entry);
            step += 1;
        }
        let point = EpochAccuracy {
            epoch,
            step,
            train_accuracy: vqa_accuracy(model, train)?,
            val_accuracy: vqa_accuracy(model, val)?,
        };
        if best.as_ref().is_none_or(|b| point.val_accuracy > b.1) {
            best = Some((epoch, point.val_accuracy, model.params.clone()));
        }
        curve.push(point);
        epoch += 1;
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(VqaReport { steps, curve, best_epoch, best_val_accuracy })
}
