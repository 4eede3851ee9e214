//! Patch-based video transformer with divided space-time attention and
//! per-layer, per-frame temporal scaling `α = tanh(γ) + 1`.
//!
//! Token layout throughout: row 0 is the video [CLS] token, followed by the
//! `T·S` patch tokens in frame-major order (row `1 + t·S + s`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, TemporalOutInit};
use crate::error::{shape_err, Error, Result};
use crate::nn::{copy_linear, Attention, FeedForward, LayerNorm, Linear};
use crate::params::{normal_tensor, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Pre-flattened patches of one clip, `T × S × D_in`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTensor {
    pub frames: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub values: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, patches: usize, patch_dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * patches * patch_dim {
            return shape_err(
                "VideoTensor::new",
                format!("{frames}x{patches}x{patch_dim} needs {} values, got {}", frames * patches * patch_dim, values.len()),
            );
        }
        Ok(Self { frames, patches, patch_dim, values })
    }

    pub fn patch(&self, t: usize, s: usize) -> &[f32] {
        let off = (t * self.patches + s) * self.patch_dim;
        &self.values[off..off + self.patch_dim]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.patches * self.patch_dim;
        &self.values[t * n..(t + 1) * n]
    }

    /// Keep only the listed frames, in the given order.
    pub fn select_frames(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.patches * self.patch_dim);
        for &t in idx {
            if t >= self.frames {
                return Err(Error::InvalidArgument(format!("frame {t} of {}", self.frames)));
            }
            values.extend_from_slice(self.frame(t));
        }
        Self::new(idx.len(), self.patches, self.patch_dim, values)
    }

    /// `(T·S) × D_in` patch matrix in frame-major order.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::new(
            vec![self.frames * self.patches, self.patch_dim],
            self.values.iter().map(|&v| F::from_f64(v as f64)).collect(),
        )
        .expect("sized by construction")
    }
}

/// Raw frames `T × C × H × W` (square frames, H = W = resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub frames: usize,
    pub channels: usize,
    pub resolution: usize,
    pub values: Vec<f32>,
}

/// Cut each frame into non-overlapping `patch × patch` tiles in raster order.
/// Each tile flattens channel-major, then row, then column.
pub fn patchify(stack: &FrameStack, patch: usize) -> Result<VideoTensor> {
    let res = stack.resolution;
    if patch == 0 || res % patch != 0 {
        return Err(Error::InvalidArgument(format!("resolution {res} not divisible by patch size {patch}")));
    }
    if stack.values.len() != stack.frames * stack.channels * res * res {
        return shape_err("patchify", "frame stack size does not match its dimensions");
    }
    let side = res / patch;
    let patch_dim = patch * patch * stack.channels;
    let mut values = Vec::with_capacity(stack.values.len());
    for t in 0..stack.frames {
        for py in 0..side {
            for px in 0..side {
                for c in 0..stack.channels {
                    for y in 0..patch {
                        let row = ((t * stack.channels + c) * res + py * patch + y) * res + px * patch;
                        values.extend_from_slice(&stack.values[row..row + patch]);
                    }
                }
            }
        }
    }
    VideoTensor::new(stack.frames, side * side, patch_dim, values)
}

/// `α = tanh(γ) + 1`, in (0, 2) for finite γ.
pub fn temporal_scale(gamma: f64) -> f64 {
    gamma.tanh() + 1.0
}

/// Which form of the temporal sub-layer a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalPath {
    /// Temporal attention output multiplied by `α_{l,t}` before the residual.
    Scaled,
    /// Plain divided space-time block (α fixed at 1).
    Unscaled,
    /// Temporal sub-layer removed: a per-frame image transformer.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DividedBlock {
    pub norm_temporal: LayerNorm,
    pub temporal: Attention,
    pub norm_spatial: LayerNorm,
    pub spatial: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEncoder {
    pub frames: usize,
    pub patches: usize,
    pub heads: usize,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub spatial_pos: ParamId,
    pub temporal_pos: ParamId,
    /// Temporal scaling bank γ, `L × T`, zero-initialized.
    pub gamma: ParamId,
    pub blocks: Vec<DividedBlock>,
    pub norm_final: LayerNorm,
    pub proj: Linear,
    temporal_out_init: TemporalOutInit,
}

/// Output of [`VideoEncoder::encode`] as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVideo {
    /// `V_L`, `(1 + S·T) × D`.
    pub tokens: Var,
    /// l2-normalized projection of the [CLS] row, `1 × D_p`.
    pub cls: Var,
}

impl VideoEncoder {
    pub fn new<F: Float, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        let s = cfg.patches_per_frame();
        let std = cfg.init_std;
        let patch_embed = Linear::new(store, "video.patch_embed", cfg.patch_dim(), d, std, rng);
        let cls = store.insert("video.cls", normal_tensor(&[1, d], std, rng), ParamGroup::NoDecay);
        let spatial_pos = store.insert("video.spatial_pos", normal_tensor(&[s, d], std, rng), ParamGroup::NoDecay);
        let temporal_pos = store.insert("video.temporal_pos", Tensor::zeros(&[cfg.frames, d]), ParamGroup::NoDecay);
        let gamma = store.insert("video.gamma", Tensor::zeros(&[cfg.num_layers, cfg.frames]), ParamGroup::Scaling);
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("video.blocks.{l}");
                DividedBlock {
                    norm_temporal: LayerNorm::new(store, &format!("{p}.norm_temporal"), d),
                    temporal: Attention::new(store, &format!("{p}.temporal"), d, std, rng),
                    norm_spatial: LayerNorm::new(store, &format!("{p}.norm_spatial"), d),
                    spatial: Attention::new(store, &format!("{p}.spatial"), d, std, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, std, rng),
                }
            })
            .collect();
        let norm_final = LayerNorm::new(store, "video.norm_final", d);
        let proj = Linear::new(store, "video.proj", d, cfg.projection_dim, std, rng);
        let enc = Self {
            frames: cfg.frames,
            patches: s,
            heads: cfg.num_heads,
            patch_embed,
            cls,
            spatial_pos,
            temporal_pos,
            gamma,
            blocks,
            norm_final,
            proj,
            temporal_out_init: cfg.temporal_out_init,
        };
        enc.init_temporal_from_spatial(store).expect("matching shapes");
        enc
    }

    /// Overwrite every temporal attention module with a value-copy of the
    /// spatial one in the same block. With [`TemporalOutInit::Zero`] the output
    /// projection is zeroed instead of copied.
    pub fn init_temporal_from_spatial<F: Float>(&self, store: &mut ParamStore<F>) -> Result<()> {
        for b in &self.blocks {
            copy_linear(store, &b.spatial.query, &b.temporal.query)?;
            copy_linear(store, &b.spatial.key, &b.temporal.key)?;
            copy_linear(store, &b.spatial.value, &b.temporal.value)?;
            match self.temporal_out_init {
                TemporalOutInit::Copy => copy_linear(store, &b.spatial.output, &b.temporal.output)?,
                TemporalOutInit::Zero => {
                    let w = Tensor::zeros(store.get(b.temporal.output.weight).shape());
                    let bias = Tensor::zeros(store.get(b.temporal.output.bias).shape());
                    store.set(b.temporal.output.weight, w)?;
                    store.set(b.temporal.output.bias, bias)?;
                }
            }
        }
        Ok(())
    }

    /// Per-row α weights (`T·S × 1`, frame-major) for layer `layer`.
    fn alpha_rows<F: Float>(&self, g: &mut Graph<'_, F>, layer: usize) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let row = g.gather_rows(gamma, &[layer])?;
        let col = g.transpose(row)?;
        let t = g.tanh(col)?;
        let alpha = g.add_scalar(t, F::one())?;
        let per_patch: Vec<usize> = (0..self.frames * self.patches).map(|i| i / self.patches).collect();
        g.gather_rows(alpha, &per_patch)
    }

    /// One divided space-time block on `(1 + S·T) × D` tokens.
    pub fn divided_block<F: Float>(&self, g: &mut Graph<'_, F>, tokens: Var, layer: usize, path: TemporalPath) -> Result<Var> {
        let (t, s) = (self.frames, self.patches);
        let (rows, _) = g.dims(tokens);
        if rows != 1 + s * t {
            return shape_err("divided_block", format!("expected {} tokens, got {rows}", 1 + s * t));
        }
        let block = &self.blocks[layer];
        let cls = g.slice_rows(tokens, 0, 1)?;
        let mut patches = g.slice_rows(tokens, 1, rows)?;

        // Temporal attention: each spatial position attends across frames; [CLS] excluded.
        if path != TemporalPath::Disabled {
            let h = block.norm_temporal.forward(g, patches)?;
            let groups: Vec<Vec<usize>> = (0..s).map(|sp| (0..t).map(|fr| fr * s + sp).collect()).collect();
            let ctx = block.temporal.grouped_context(g, h, &groups, self.heads)?;
            let stacked = g.concat_rows(&ctx)?; // position-major: row sp·T + fr
            let back: Vec<usize> = (0..t * s).map(|i| (i % s) * t + i / s).collect();
            let ctx = g.gather_rows(stacked, &back)?;
            let mut out = block.temporal.output.forward(g, ctx)?;
            if path == TemporalPath::Scaled {
                let alpha = self.alpha_rows(g, layer)?;
                out = g.mul_rows(out, alpha)?;
            }
            patches = g.add(patches, out)?;
        }

        // Spatial attention within each frame, with [CLS] replicated into every frame.
        let x = g.concat_rows(&[cls, patches])?;
        let h = block.norm_spatial.forward(g, x)?;
        let groups: Vec<Vec<usize>> = (0..t)
            .map(|fr| std::iter::once(0).chain((0..s).map(|sp| 1 + fr * s + sp)).collect())
            .collect();
        let ctx = block.spatial.grouped_context(g, h, &groups, self.heads)?;
        let stacked = g.concat_rows(&ctx)?; // frame-major, S+1 rows per frame
        let cls_rows: Vec<usize> = (0..t).map(|fr| fr * (s + 1)).collect();
        let cls_ctx = g.gather_rows(stacked, &cls_rows)?;
        let cls_ctx = g.mean_axis(cls_ctx, 0)?;
        let patch_rows: Vec<usize> = (0..t * s).map(|i| (i / s) * (s + 1) + 1 + i % s).collect();
        let patch_ctx = g.gather_rows(stacked, &patch_rows)?;
        let ctx = g.concat_rows(&[cls_ctx, patch_ctx])?;
        let out = block.spatial.output.forward(g, ctx)?;
        let x = g.add(x, out)?;

        let h = block.norm_ffn.forward(g, x)?;
        let out = block.ffn.forward(g, h)?;
        g.add(x, out)
    }

    /// Patch embedding, positions and [CLS], the block stack, final norm and projection.
    pub fn encode<F: Float>(&self, g: &mut Graph<'_, F>, video: &VideoTensor, path: TemporalPath) -> Result<EncodedVideo> {
        let input = g.constant(video.to_tensor());
        self.encode_input(g, input, video.frames, video.patches, path)
    }

    /// As [`encode`](Self::encode), from a `(T·S) × D_in` patch node.
    pub fn encode_input<F: Float>(
        &self,
        g: &mut Graph<'_, F>,
        input: Var,
        frames: usize,
        patches: usize,
        path: TemporalPath,
    ) -> Result<EncodedVideo> {
        if frames != self.frames || patches != self.patches {
            return shape_err(
                "encode_video",
                format!("video is {frames}x{patches}, encoder expects {}x{}", self.frames, self.patches),
            );
        }
        let x = self.patch_embed.forward(g, input)?;
        let sp = g.param(self.spatial_pos);
        let tp = g.param(self.temporal_pos);
        let sp_idx: Vec<usize> = (0..frames * patches).map(|i| i % patches).collect();
        let tp_idx: Vec<usize> = (0..frames * patches).map(|i| i / patches).collect();
        let sp = g.gather_rows(sp, &sp_idx)?;
        let tp = g.gather_rows(tp, &tp_idx)?;
        let x = g.add(x, sp)?;
        let x = g.add(x, tp)?;
        let cls = g.param(self.cls);
        let mut tokens = g.concat_rows(&[cls, x])?;
        for layer in 0..self.blocks.len() {
            tokens = self.divided_block(g, tokens, layer, path)?;
        }
        let tokens = self.norm_final.forward(g, tokens)?;
        let cls_row = g.slice_rows(tokens, 0, 1)?;
        let proj = self.proj.forward(g, cls_row)?;
        let cls = g.l2_normalize_rows(proj)?;
        Ok(EncodedVideo { tokens, cls })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, VideoEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = VideoEncoder::new(cfg, &mut store, &mut rng);
        (store, enc)
    }

    fn random_video(cfg: &ModelConfig, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.frames * cfg.patches_per_frame() * cfg.patch_dim();
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        VideoTensor::new(cfg.frames, cfg.patches_per_frame(), cfg.patch_dim(), values).unwrap()
    }

    #[test]
    fn patchify_shapes_and_raster_order() {
        // 16×16 frame, patch 8, one channel: 4 patches of 64 values.
        let values: Vec<f32> = (0..4 * 256).map(|i| i as f32).collect();
        let stack = FrameStack { frames: 4, channels: 1, resolution: 16, values };
        let v = patchify(&stack, 8).unwrap();
        assert_eq!((v.frames, v.patches, v.patch_dim), (4, 4, 64));
        // second patch of frame 0 starts at column 8 of row 0
        assert_eq!(v.patch(0, 1)[0], 8.0);
        // third patch starts at row 8
        assert_eq!(v.patch(0, 2)[0], 128.0);
        assert_eq!(v.patch(0, 2)[8], 144.0);
        assert_eq!(v.patch(1, 0)[0], 256.0);

        let flat = FrameStack { frames: 1, channels: 1, resolution: 16, values: vec![0.25; 256] };
        let v = patchify(&flat, 8).unwrap();
        for s in 1..4 {
            assert_eq!(v.patch(0, s), v.patch(0, 0));
        }
        let bad = FrameStack { frames: 1, channels: 1, resolution: 16, values: vec![0.0; 256] };
        assert!(patchify(&bad, 5).is_err());
    }

    #[test]
    fn temporal_scale_values() {
        assert_eq!(temporal_scale(0.0), 1.0);
        assert!((temporal_scale(10.0) - 1.999_999_995_877_692).abs() < 1e-12);
        assert!((temporal_scale(-10.0) - 4.122_307_e-9).abs() < 1e-12);
    }

    #[test]
    fn init_copies_spatial_weights_and_is_idempotent() {
        let cfg = ModelConfig::grad_check_toy();
        let (mut store, enc) = setup(&cfg, 1);
        let b = &enc.blocks[0];
        assert_eq!(store.get(b.temporal.query.weight), store.get(b.spatial.query.weight));
        assert_eq!(store.get(b.temporal.output.weight), store.get(b.spatial.output.weight));
        store.get_mut(b.temporal.query.weight).data_mut()[0] += 0.5;
        assert_ne!(store.get(b.temporal.query.weight), store.get(b.spatial.query.weight));
        enc.init_temporal_from_spatial(&mut store).unwrap();
        assert_eq!(store.get(b.temporal.query.weight), store.get(b.spatial.query.weight));
    }

    #[test]
    fn zero_output_init_option() {
        let cfg = ModelConfig { temporal_out_init: TemporalOutInit::Zero, ..ModelConfig::grad_check_toy() };
        let (store, enc) = setup(&cfg, 1);
        let b = &enc.blocks[1];
        assert!(store.get(b.temporal.output.weight).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.get(b.temporal.key.weight), store.get(b.spatial.key.weight));
    }

    #[test]
    fn single_frame_temporal_path_is_value_then_output_projection() {
        let cfg = ModelConfig { frames: 1, ..ModelConfig::grad_check_toy() };
        let (store, enc) = setup(&cfg, 5);
        let video = random_video(&cfg, 9);
        let mut g = Graph::with_params(&store);
        let input = g.constant(video.to_tensor());
        let x = enc.patch_embed.forward(&mut g, input).unwrap();
        let cls = g.param(enc.cls);
        let tokens = g.concat_rows(&[cls, x]).unwrap();
        let full = enc.divided_block(&mut g, tokens, 0, TemporalPath::Scaled).unwrap();

        // Direct evaluation: softmax over one key is 1, so the temporal context is V·LN(x).
        let b = &enc.blocks[0];
        let patches = g.slice_rows(tokens, 1, 1 + enc.patches).unwrap();
        let h = b.norm_temporal.forward(&mut g, patches).unwrap();
        let v = b.temporal.value.forward(&mut g, h).unwrap();
        let o = b.temporal.output.forward(&mut g, v).unwrap();
        let patches = g.add(patches, o).unwrap();
        let cls = g.slice_rows(tokens, 0, 1).unwrap();
        let manual_in = g.concat_rows(&[cls, patches]).unwrap();
        // Feed the manually updated tokens through the spatial-only path of the block.
        let manual = enc.divided_block(&mut g, manual_in, 0, TemporalPath::Disabled).unwrap();
        assert!(g.value(full).max_abs_diff(g.value(manual)).unwrap() < 1e-12);
    }

    #[test]
    fn gamma_row_controls_scaling() {
        let cfg = ModelConfig::grad_check_toy();
        let (mut store, enc) = setup(&cfg, 2);
        let video = random_video(&cfg, 4);
        let out = |store: &ParamStore<f64>, path| {
            let mut g = Graph::with_params(store);
            let e = enc.encode(&mut g, &video, path).unwrap();
            g.value(e.tokens).clone()
        };
        // γ = 0 ⇒ α = 1 exactly
        assert_eq!(out(&store, TemporalPath::Scaled), out(&store, TemporalPath::Unscaled));
        store.set(enc.gamma, Tensor::full(&[2, 2], -1e6)).unwrap();
        let d = out(&store, TemporalPath::Scaled).max_abs_diff(&out(&store, TemporalPath::Disabled)).unwrap();
        assert!(d < 1e-6, "{d}");
        assert_eq!(g_len_rows(&out(&store, TemporalPath::Scaled)), 1 + 4 * 2);
    }

    fn g_len_rows(t: &Tensor<f64>) -> usize {
        t.rows()
    }

    #[test]
    fn rejects_wrong_token_count() {
        let cfg = ModelConfig::grad_check_toy();
        let (store, enc) = setup(&cfg, 2);
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[4, 8]));
        assert!(enc.divided_block(&mut g, x, 0, TemporalPath::Scaled).is_err());
        let wrong = random_video(&ModelConfig { frames: 3, ..cfg.clone() }, 1);
        assert!(enc.encode(&mut g, &wrong, TemporalPath::Scaled).is_err());
    }
}
