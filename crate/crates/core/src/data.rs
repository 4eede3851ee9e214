//! Synthetic video-caption corpus with a planted, caption-determined signal
//! frame, plus train/eval frame sampling.
//!
//! Every caption is `[object, motion]`. Each word owns a fixed random patch
//! pattern (`S × D_in`); the signal frame of a clip carries the sum of its
//! caption's two patterns plus noise, every other frame is noise only.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::text::{Mode, TokenSequence, Vocabulary};
use crate::video::VideoTensor;

/// Standard deviation of the background noise.
pub const NOISE_STD: f64 = 0.1;

const PATTERN_STREAM: u64 = 0x5eed_0f7a_77e2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub video: VideoTensor,
    /// `[CLS] object motion`
    pub caption: TokenSequence,
    pub pair_id: usize,
    pub signal_frame: usize,
    pub qa_answer: Option<usize>,
}

impl SyntheticPair {
    pub fn object(&self) -> usize {
        self.caption.words()[0]
    }

    pub fn motion(&self) -> usize {
        self.caption.words()[1]
    }

    /// VQA question: the motion word alone, so the answer (a function of the
    /// object) has to be read from the video.
    pub fn question(&self) -> TokenSequence {
        TokenSequence::new(Mode::Cls, &[self.motion()])
    }
}

/// The fixed patch pattern of word `token` under corpus seed `seed`.
pub fn token_pattern(seed: u64, token: usize, patches: usize, patch_dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PATTERN_STREAM);
    rng.set_stream(token as u64 + 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..patches * patch_dim).map(|_| normal.sample(&mut rng) as f32).collect()
}

/// Answer class of an object word.
pub fn answer_for_object(vocab: &Vocabulary, object: usize, answer_count: usize) -> usize {
    (object - vocab.object_ids().start) % answer_count.max(1)
}

/// `n_pairs` clips with distinct captions, deterministic in `seed`.
pub fn generate_synthetic_corpus(seed: u64, n_pairs: usize, cfg: &ModelConfig, with_qa: bool) -> Result<Vec<SyntheticPair>> {
    cfg.validate()?;
    if n_pairs < 2 {
        return Err(Error::InvalidArgument(format!("corpus needs >= 2 pairs, got {n_pairs}")));
    }
    let vocab = Vocabulary::synthetic(cfg.vocab_size);
    let objects: Vec<usize> = vocab.object_ids().collect();
    let motions: Vec<usize> = vocab.motion_ids().collect();
    let combos = objects.len() * motions.len();
    if n_pairs > combos {
        return Err(Error::InvalidArgument(format!(
            "{n_pairs} pairs requested but the vocabulary only has {combos} distinct captions"
        )));
    }
    if cfg.max_text_len < 3 {
        return Err(Error::Config("max_text_len must fit [CLS] object motion".into()));
    }
    let (t_len, s_len, d_in) = (cfg.frames, cfg.patches_per_frame(), cfg.patch_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, combos, n_pairs);
    let normal = Normal::new(0.0, NOISE_STD).expect("finite std");
    let patterns: Vec<Vec<f32>> = (0..vocab.len()).map(|w| token_pattern(seed, w, s_len, d_in)).collect();

    let mut pairs = Vec::with_capacity(n_pairs);
    for (pair_id, combo) in chosen.into_iter().enumerate() {
        let object = objects[combo / motions.len()];
        let motion = motions[combo % motions.len()];
        let signal_frame = rng.random_range(0..t_len);
        let mut values: Vec<f32> = (0..t_len * s_len * d_in).map(|_| normal.sample(&mut rng) as f32).collect();
        let frame = &mut values[signal_frame * s_len * d_in..(signal_frame + 1) * s_len * d_in];
        for ((v, a), b) in frame.iter_mut().zip(&patterns[object]).zip(&patterns[motion]) {
            *v += a + b;
        }
        pairs.push(SyntheticPair {
            video: VideoTensor::new(t_len, s_len, d_in, values)?,
            caption: TokenSequence::new(Mode::Cls, &[object, motion]),
            pair_id,
            signal_frame,
            qa_answer: with_qa.then(|| answer_for_object(&vocab, object, cfg.answer_count)),
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Eval,
}

/// Frame indices to keep from a clip of `total` frames.
///
/// Train: `n/2` distinct indices from each half, ascending. Eval: the centers
/// `⌊(i + ½)·total/n⌋`.
pub fn sample_frames<R: Rng + ?Sized>(total: usize, n: usize, mode: SampleMode, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 || total < n {
        return Err(Error::InvalidArgument(format!("cannot sample {n} frames from {total}")));
    }
    match mode {
        SampleMode::Eval => Ok((0..n).map(|i| ((2 * i + 1) * total) / (2 * n)).collect()),
        SampleMode::Train => {
            if n % 2 != 0 {
                return Err(Error::InvalidArgument(format!("train sampling needs an even frame count, got {n}")));
            }
            let half = total / 2;
            let upper = total - half;
            if half < n / 2 || upper < n / 2 {
                return Err(Error::InvalidArgument(format!("cannot take {} frames from each half of {total}", n / 2)));
            }
            let mut idx: Vec<usize> = index::sample(rng, half, n / 2).into_iter().collect();
            idx.extend(index::sample(rng, upper, n / 2).into_iter().map(|i| half + i));
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Shuffled order of `0..n` for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64 - ma, y as f64 - mb);
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn deterministic_and_distinct() {
        let cfg = ModelConfig::toy();
        let a = generate_synthetic_corpus(7, 32, &cfg, false).unwrap();
        let b = generate_synthetic_corpus(7, 32, &cfg, false).unwrap();
        assert_eq!(a, b);
        let mut caps: Vec<_> = a.iter().map(|p| p.caption.ids().to_vec()).collect();
        caps.sort();
        caps.dedup();
        assert_eq!(caps.len(), 32);
        let vocab = Vocabulary::synthetic(cfg.vocab_size);
        for p in &a {
            assert!(vocab.object_ids().contains(&p.object()));
            assert!(vocab.motion_ids().contains(&p.motion()));
            assert!(p.signal_frame < cfg.frames);
            p.caption.validate(cfg.vocab_size, cfg.max_text_len).unwrap();
        }
        assert_ne!(a, generate_synthetic_corpus(8, 32, &cfg, false).unwrap());
    }

    #[test]
    fn planted_signal_correlates_with_caption() {
        let cfg = ModelConfig::toy();
        let seed = 3;
        let corpus = generate_synthetic_corpus(seed, 64, &cfg, false).unwrap();
        let (s, d) = (cfg.patches_per_frame(), cfg.patch_dim());
        let mut wins = 0;
        for p in &corpus {
            let pa = token_pattern(seed, p.object(), s, d);
            let pb = token_pattern(seed, p.motion(), s, d);
            let sig: Vec<f32> = pa.iter().zip(&pb).map(|(a, b)| a + b).collect();
            let scores: Vec<f64> = (0..cfg.frames).map(|t| corr(p.video.frame(t), &sig)).collect();
            let best_noise = (0..cfg.frames)
                .filter(|&t| t != p.signal_frame)
                .map(|t| scores[t])
                .fold(f64::NEG_INFINITY, f64::max);
            wins += usize::from(scores[p.signal_frame] > best_noise);
        }
        assert!(wins * 100 >= 95 * corpus.len(), "{wins}/{}", corpus.len());
    }

    #[test]
    fn too_many_pairs_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.vocab_size = 6; // 2 objects × 2 motions
        assert!(generate_synthetic_corpus(0, 4, &cfg, false).is_ok());
        assert!(generate_synthetic_corpus(0, 5, &cfg, false).is_err());
        assert!(generate_synthetic_corpus(0, 1, &cfg, false).is_err());
    }

    #[test]
    fn qa_answers_follow_object() {
        let cfg = ModelConfig::toy();
        let corpus = generate_synthetic_corpus(1, 40, &cfg, true).unwrap();
        let vocab = Vocabulary::synthetic(cfg.vocab_size);
        for p in &corpus {
            let a = p.qa_answer.unwrap();
            assert!(a < cfg.answer_count);
            assert_eq!(a, answer_for_object(&vocab, p.object(), cfg.answer_count));
            assert_eq!(p.question().words(), &[p.motion()]);
        }
    }

    #[test]
    fn eval_sampling_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frames(16, 4, SampleMode::Eval, &mut rng).unwrap(), vec![2, 6, 10, 14]);
        assert_eq!(sample_frames(5, 5, SampleMode::Eval, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_frames(3, 4, SampleMode::Eval, &mut rng).is_err());
    }

    #[test]
    fn train_sampling_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let idx = sample_frames(10, 4, SampleMode::Train, &mut rng).unwrap();
            assert_eq!(idx.iter().filter(|&&i| i < 5).count(), 2);
            assert_eq!(idx.iter().filter(|&&i| i >= 5).count(), 2);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(sample_frames(4, 4, SampleMode::Train, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert!(sample_frames(10, 3, SampleMode::Train, &mut rng).is_err());
    }
}
