//! The full video-language model: video encoder, shared text encoders,
//! pooling, and the matching / answer heads, all reading one [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_params, GradCheckReport, Graph, Var};
use crate::config::{ModelConfig, PoolingMode};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::objectives::{
    mine_hard_negatives, retrieval_loss, vqa_loss, vtc_loss, vtm_loss, ContrastiveBatch, HardNegatives, QaBatch,
    QaHead, VtmBatch,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::pooling::{pool, PooledBundle};
use crate::tensor::{Float, Tensor};
use crate::text::{EncodedText, GroundedOutput, Mode, TextEncoder, TokenSequence};
use crate::video::{EncodedVideo, TemporalPath, VideoEncoder, VideoTensor};

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub vtm_head: Linear,
    pub qa_head: QaHead,
    /// `log τ_c`, a scalar.
    pub log_tau_c: ParamId,
    pub pooling_mode: PoolingMode,
    pub temporal_path: TemporalPath,
}

/// Graph nodes of one grounded forward pass.
#[derive(Debug, Clone)]
pub struct MatchForward {
    pub pooled: PooledBundle,
    pub grounded: GroundedOutput,
    /// `1 × 2` VTM logits.
    pub logits: Var,
}

/// Loss nodes of one retrieval step.
#[derive(Debug, Clone)]
pub struct RetrievalStep {
    pub vtc: Var,
    pub vtm: Var,
    pub total: Var,
    pub negatives: HardNegatives,
}

impl<F: Float> Model<F> {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::with_rng(config, &mut rng))
    }

    pub fn with_rng<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let video = VideoEncoder::new(&config, &mut params, rng);
        let text = TextEncoder::new(&config, &mut params, rng);
        let d = config.hidden_dim;
        let std = config.init_std;
        let vtm_head = Linear::new(&mut params, "head.vtm", d, 2, std, rng);
        let qa_head = QaHead {
            hidden: Linear::new(&mut params, "head.qa.hidden", d, d, std, rng),
            out: Linear::new(&mut params, "head.qa.out", d, config.answer_count, std, rng),
        };
        let log_tau_c = params.insert(
            "log_tau_c",
            Tensor::scalar(F::from_f64(config.contrastive_temperature_init.ln())),
            ParamGroup::NoDecay,
        );
        Self {
            config,
            params,
            video,
            text,
            vtm_head,
            qa_head,
            log_tau_c,
            pooling_mode: PoolingMode::TextDependent,
            temporal_path: TemporalPath::Scaled,
        }
    }

    /// Same structure, parameters cast to another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            video: self.video.clone(),
            text: self.text.clone(),
            vtm_head: self.vtm_head,
            qa_head: self.qa_head,
            log_tau_c: self.log_tau_c,
            pooling_mode: self.pooling_mode,
            temporal_path: self.temporal_path,
        }
    }

    pub fn graph(&self) -> Graph<'_, F> {
        Graph::with_params(&self.params)
    }

    pub fn inference_graph(&self) -> Graph<'_, F> {
        Graph::with_params(&self.params).no_grad()
    }

    pub fn tau_c(&self) -> f64 {
        self.params.get(self.log_tau_c).item().as_f64().exp()
    }

    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn patches(&self) -> usize {
        self.config.patches_per_frame()
    }

    pub fn encode_video(&self, g: &mut Graph<'_, F>, video: &VideoTensor) -> Result<EncodedVideo> {
        self.video.encode(g, video, self.temporal_path)
    }

    /// Unimodal encoding of a caption; the mode token is forced to [CLS].
    pub fn encode_text(&self, g: &mut Graph<'_, F>, caption: &TokenSequence) -> Result<EncodedText> {
        self.text.encode_text(g, &caption.with_mode(Mode::Cls))
    }

    /// Pool `v_l` against `t_cls_full`, run the grounded encoder on `caption`
    /// (re-prefixed with [Encode]) and apply the VTM head.
    pub fn match_forward(
        &self,
        g: &mut Graph<'_, F>,
        v_l: Var,
        t_cls_full: Var,
        caption: &TokenSequence,
    ) -> Result<MatchForward> {
        let pooled = pool(
            g,
            self.pooling_mode,
            v_l,
            t_cls_full,
            self.frames(),
            self.patches(),
            F::from_f64(self.config.pooling_temperature),
        )?;
        let grounded = self.text.encode_grounded(g, &caption.with_mode(Mode::Encode), pooled.v_f)?;
        let logits = self.vtm_head.forward(g, grounded.t_enc)?;
        Ok(MatchForward { pooled, grounded, logits })
    }

    /// `L_vtc + L_vtm` for a batch of matched pairs; negatives are mined from
    /// the detached contrastive logits with `rng`.
    pub fn retrieval_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, F>,
        videos: &[&VideoTensor],
        captions: &[&TokenSequence],
        rng: &mut R,
    ) -> Result<RetrievalStep> {
        let b = videos.len();
        if captions.len() != b || b < 2 {
            return Err(Error::InvalidArgument(format!(
                "retrieval batch needs >= 2 matched pairs, got {} videos / {} captions",
                b,
                captions.len()
            )));
        }
        let vids = videos.iter().map(|v| self.encode_video(g, v)).collect::<Result<Vec<_>>>()?;
        let texts = captions.iter().map(|c| self.encode_text(g, c)).collect::<Result<Vec<_>>>()?;
        let v_cls = g.concat_rows(&vids.iter().map(|v| v.cls).collect::<Vec<_>>())?;
        let t_cls = g.concat_rows(&texts.iter().map(|t| t.cls).collect::<Vec<_>>())?;
        let log_tau_c = g.param(self.log_tau_c);
        let vtc = vtc_loss(g, &ContrastiveBatch { v_cls, t_cls, log_tau_c })?;

        let logits = g.value(vtc.logits).clone();
        let negatives = mine_hard_negatives(&logits, rng)?;

        let mut batch = VtmBatch { positives: Vec::with_capacity(b), video_negatives: Vec::with_capacity(b), text_negatives: Vec::with_capacity(b) };
        for k in 0..b {
            batch.positives.push(self.match_forward(g, vids[k].tokens, texts[k].cls_full, captions[k])?.grounded.t_enc);
        }
        for k in 0..b {
            let j = negatives.video_neg[k];
            batch
                .video_negatives
                .push(self.match_forward(g, vids[j].tokens, texts[k].cls_full, captions[k])?.grounded.t_enc);
        }
        for k in 0..b {
            let j = negatives.text_neg[k];
            batch
                .text_negatives
                .push(self.match_forward(g, vids[k].tokens, texts[j].cls_full, captions[j])?.grounded.t_enc);
        }
        let vtm = vtm_loss(g, &self.vtm_head, &batch)?;
        let total = retrieval_loss(g, vtc.total, vtm)?;
        Ok(RetrievalStep { vtc: vtc.total, vtm, total, negatives })
    }

    /// Answer logits (`1 × K`) for one video/question pair.
    pub fn qa_forward(&self, g: &mut Graph<'_, F>, video: &VideoTensor, question: &TokenSequence) -> Result<(Var, MatchForward)> {
        let v = self.encode_video(g, video)?;
        let t = self.encode_text(g, question)?;
        let m = self.match_forward(g, v.tokens, t.cls_full, question)?;
        let logits = self.qa_head.logits(g, m.grounded.t_enc)?;
        Ok((logits, m))
    }

    /// Mean K-class cross-entropy for a batch of (video, question, answer).
    pub fn qa_step(&self, g: &mut Graph<'_, F>, videos: &[&VideoTensor], questions: &[&TokenSequence], answers: &[usize]) -> Result<Var> {
        let mut t_enc = Vec::with_capacity(videos.len());
        for (v, q) in videos.iter().zip(questions) {
            let ev = self.encode_video(g, v)?;
            let et = self.encode_text(g, q)?;
            t_enc.push(self.match_forward(g, ev.tokens, et.cls_full, q)?.grounded.t_enc);
        }
        vqa_loss(g, &self.qa_head, &QaBatch { t_enc, answers: answers.to_vec() })
    }

    /// Every parameter id read by the model, ordered.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }
}

impl Model<f64> {
    /// Finite-difference check of `L_vtc + L_vtm` with respect to every
    /// parameter. Negatives are mined with a freshly seeded generator on every
    /// evaluation so all perturbed losses see the same pairs.
    pub fn grad_check_retrieval(&self, videos: &[&VideoTensor], captions: &[&TokenSequence], h: f64) -> Result<GradCheckReport> {
        grad_check_params(
            &self.params,
            None,
            |g| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                Ok(self.retrieval_step(g, videos, captions, &mut rng)?.total)
            },
            h,
        )
    }

    /// Finite-difference check of `L_VideoQA` with respect to every parameter.
    pub fn grad_check_vqa(
        &self,
        videos: &[&VideoTensor],
        questions: &[&TokenSequence],
        answers: &[usize],
        h: f64,
    ) -> Result<GradCheckReport> {
        grad_check_params(&self.params, None, |g| self.qa_step(g, videos, questions, answers), h)
    }
}
