//! Exports for inspecting a trained model: temporal scalings, text-dependent
//! pooling weights and Grad-CAM relevance over the cross-attention maps.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PoolingMode;
use crate::data::SyntheticPair;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::MATCHED;
use crate::tensor::{Float, Tensor};
use crate::text::Mode;
use crate::video::temporal_scale;

/// γ bank of the video encoder with derived α and per-layer means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    /// `L × T`
    pub gamma: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub layer_means: Vec<f64>,
}

impl ScalingReport {
    pub fn from_model<F: Float>(model: &Model<F>) -> Result<Self> {
        let bank = model.params.by_name("video.gamma")?;
        let (layers, frames) = bank.dims2();
        let gamma: Vec<Vec<f64>> = (0..layers).map(|l| bank.row(l).iter().map(|v| v.as_f64()).collect()).collect();
        let alpha = gamma.iter().map(|row| row.iter().map(|&g| temporal_scale(g)).collect()).collect();
        let layer_means = gamma.iter().map(|row| row.iter().sum::<f64>() / frames as f64).collect();
        Ok(Self { gamma, alpha, layer_means })
    }

    pub fn rows(&self) -> usize {
        self.gamma.iter().map(Vec::len).sum()
    }

    /// `layer,frame,gamma,alpha` rows followed by `layer,mean,<mean>` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "layer,frame,gamma,alpha")?;
        for (l, (g, a)) in self.gamma.iter().zip(&self.alpha).enumerate() {
            for (t, (g, a)) in g.iter().zip(a).enumerate() {
                writeln!(w, "{l},{t},{g},{a}")?;
            }
        }
        for (l, m) in self.layer_means.iter().enumerate() {
            writeln!(w, "{l},mean,{m},")?;
        }
        Ok(())
    }
}

/// Pooling weights exactly as used in one forward pass, plus the inputs they
/// were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalWeights {
    pub g_t: Vec<f64>,
    pub g_s: Vec<f64>,
    /// `T × D` frame means.
    pub v_ft: Vec<Vec<f64>>,
    pub t_cls_full: Vec<f64>,
    pub tau: f64,
}

impl TemporalWeights {
    pub fn argmax_frame(&self) -> usize {
        argmax(&self.g_t)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "frame,weight")?;
        for (t, v) in self.g_t.iter().enumerate() {
            writeln!(w, "{t},{v}")?;
        }
        Ok(())
    }
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

fn column<F: Float>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn export_temporal_weights<F: Float>(model: &Model<F>, pair: &SyntheticPair) -> Result<TemporalWeights> {
    if model.pooling_mode != PoolingMode::TextDependent {
        return Err(Error::InvalidArgument(format!(
            "temporal weights need text_dependent pooling, model uses {}",
            model.pooling_mode
        )));
    }
    let mut g = model.inference_graph();
    let v = model.encode_video(&mut g, &pair.video)?;
    let t = model.encode_text(&mut g, &pair.caption)?;
    let m = model.match_forward(&mut g, v.tokens, t.cls_full, &pair.caption)?;
    let r = m.pooled.reweighted.expect("text-dependent pooling reweights");
    let v_ft = g.value(m.pooled.v_ft);
    Ok(TemporalWeights {
        g_t: column(g.value(r.g_t)),
        g_s: column(g.value(r.g_s)),
        v_ft: (0..v_ft.rows()).map(|i| v_ft.row(i).iter().map(|x| x.as_f64()).collect()).collect(),
        t_cls_full: column(g.value(t.cls_full)),
        tau: model.config.pooling_temperature,
    })
}

/// Non-negative `T × S` relevance grid for one text position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub layer: usize,
    pub token: usize,
    /// Row `t`, column `s`; max-normalized to 1 unless all zero.
    pub grid: Vec<Vec<f64>>,
}

impl RelevanceMap {
    pub fn row_sums(&self) -> Vec<f64> {
        self.grid.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn strongest_frame(&self) -> usize {
        argmax(&self.row_sums())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "frame,patch,relevance")?;
        for (t, row) in self.grid.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                writeln!(w, "{t},{s},{v}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCamOptions {
    pub layer: usize,
    /// Text position whose cross-attention row is explained (0 = [Encode]).
    pub token: usize,
    /// Cut the gradient between the grounded encoder and the VTM head.
    pub detach_head: bool,
}

impl GradCamOptions {
    /// Last layer, [Encode] position.
    pub fn for_model<F>(model: &Model<F>) -> Self {
        Self { layer: model.config.num_layers - 1, token: 0, detach_head: false }
    }
}

/// Grad-CAM over the cross-attention of the grounded encoder for the matched
/// class. `A` is the head-averaged attention of the chosen query row over the
/// patch keys of `V_L`, `G` the head-averaged gradient of the matched VTM logit
/// with respect to those probabilities; the map is `max(0, G ⊙ A)`.
pub fn gradcam<F: Float>(model: &Model<F>, pair: &SyntheticPair, opts: GradCamOptions) -> Result<RelevanceMap> {
    let cfg = &model.config;
    if opts.layer >= cfg.num_layers {
        return Err(Error::InvalidArgument(format!("layer {} of {}", opts.layer, cfg.num_layers)));
    }
    let caption = pair.caption.with_mode(Mode::Encode);
    if opts.token >= caption.len() {
        return Err(Error::InvalidArgument(format!("token {} of {}", opts.token, caption.len())));
    }
    let (frames, patches) = (model.frames(), model.patches());
    let v_l_value = {
        let mut g = model.inference_graph();
        let v = model.encode_video(&mut g, &pair.video)?;
        g.value(v.tokens).clone()
    };
    let mut g = model.inference_graph();
    let v_l = g.leaf(v_l_value, true);
    let t = model.encode_text(&mut g, &pair.caption)?;
    let m = model.match_forward(&mut g, v_l, t.cls_full, &pair.caption)?;
    let logits = if opts.detach_head {
        let frozen = g.detach(m.grounded.t_enc);
        model.vtm_head.forward(&mut g, frozen)?
    } else {
        m.logits
    };
    let matched = g.slice_cols(logits, MATCHED, MATCHED + 1)?;
    let grads = g.backward(matched)?;

    let probs = &m.grounded.cross_probs[opts.layer];
    let heads = probs.len() as f64;
    let offset = model.pooling_mode.feature_rows(frames, patches) - frames * patches;
    let mut grid = vec![vec![0.0; patches]; frames];
    for (t_idx, row) in grid.iter_mut().enumerate() {
        for (s, cell) in row.iter_mut().enumerate() {
            let key = offset + t_idx * patches + s;
            let (mut a, mut gsum) = (0.0, 0.0);
            for &p in probs {
                a += g.value(p).at(opts.token, key).as_f64();
                gsum += grads.wrt(p).map_or(0.0, |d| d.at(opts.token, key).as_f64());
            }
            *cell = ((gsum / heads) * (a / heads)).max(0.0);
        }
    }
    let peak = grid.iter().flatten().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        grid.iter_mut().flatten().for_each(|v| *v /= peak);
    }
    Ok(RelevanceMap { layer: opts.layer, token: opts.token, grid })
}

/// Pixels per grid cell edge in rendered heatmaps.
pub const CELL: usize = 16;

/// Binary PGM (P5, maxval 255) with one `CELL × CELL` block per cell; values
/// are clamped to `[0, 1]`.
pub fn render_heatmap(grid: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let (w, h) = (cols * CELL, rows * CELL);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = grid[y / CELL][x / CELL].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Width, height and pixels of a binary PGM with maxval 255.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut fields = Vec::new();
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PGM header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PGM header {fields:?}")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let mut pixels = Vec::new();
    r.read_to_end(&mut pixels)?;
    if pixels.len() != w * h {
        return Err(Error::Format(format!("PGM has {} pixels, expected {}", pixels.len(), w * h)));
    }
    Ok((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::generate_synthetic_corpus;

    #[test]
    fn fresh_scalings() {
        let model = Model::<f32>::new(ModelConfig::toy(), 0).unwrap();
        let r = ScalingReport::from_model(&model).unwrap();
        assert_eq!(r.rows(), 16);
        assert!(r.layer_means.iter().all(|&m| m == 0.0));
        assert!(r.alpha.iter().flatten().all(|&a| a == 1.0));
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 16 + 4);
    }

    #[test]
    fn hand_set_scalings() {
        let mut model = Model::<f64>::new(ModelConfig::grad_check_toy(), 0).unwrap();
        let mut cfg = ModelConfig::grad_check_toy();
        cfg.num_layers = 3;
        let mut model3 = Model::<f64>::new(cfg, 0).unwrap();
        let id = model3.params.id("video.gamma").unwrap();
        model3.params.set(id, Tensor::from_f64(&[3, 2], &[0.0, 0.0, 0.0, 0.0, 1.0, -1.0]).unwrap()).unwrap();
        let r = ScalingReport::from_model(&model3).unwrap();
        assert_eq!(r.layer_means[2], 0.0);
        assert!((r.alpha[2][0] - 1.7616).abs() < 1e-4);
        assert!((r.alpha[2][1] - 0.2384).abs() < 1e-4);
        let id = model.params.id("video.gamma").unwrap();
        model.params.set(id, Tensor::full(&[2, 2], 0.5)).unwrap();
        assert_eq!(ScalingReport::from_model(&model).unwrap().gamma, vec![vec![0.5; 2]; 2]);
    }

    #[test]
    fn weights_sum_to_one_and_need_text_dependent_mode() {
        let cfg = ModelConfig::grad_check_toy();
        let corpus = generate_synthetic_corpus(0, 2, &cfg, false).unwrap();
        let mut model = Model::<f64>::new(cfg, 1).unwrap();
        let w = export_temporal_weights(&model, &corpus[0]).unwrap();
        assert!((w.g_t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w.v_ft.len(), 2);
        model.pooling_mode = PoolingMode::Vanilla;
        assert!(export_temporal_weights(&model, &corpus[0]).is_err());
    }

    #[test]
    fn gradcam_shape_range_and_detach() {
        let cfg = ModelConfig::grad_check_toy();
        let corpus = generate_synthetic_corpus(0, 2, &cfg, false).unwrap();
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let opts = GradCamOptions::for_model(&model);
        let map = gradcam(&model, &corpus[0], opts).unwrap();
        assert_eq!((map.grid.len(), map.grid[0].len()), (2, 4));
        assert!(map.grid.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        let zero = gradcam(&model, &corpus[0], GradCamOptions { detach_head: true, ..opts }).unwrap();
        assert!(zero.grid.iter().flatten().all(|&v| v == 0.0));
        assert!(gradcam(&model, &corpus[0], GradCamOptions { layer: 2, ..opts }).is_err());
        assert!(gradcam(&model, &corpus[0], GradCamOptions { token: 3, ..opts }).is_err());
    }

    #[test]
    fn heatmap_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        render_heatmap(&[vec![0.0, 1.0, 0.5], vec![0.0, 0.0, 0.0]], &path).unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (48, 32));
        assert_eq!(px[CELL], 255);
        assert_eq!(px[0], 0);
        assert_eq!(px[2 * CELL], 128);
        render_heatmap(&vec![vec![0.0; 2]; 2], &path).unwrap();
        assert!(read_pgm(&path).unwrap().2.iter().all(|&p| p == 0));
    }
}
