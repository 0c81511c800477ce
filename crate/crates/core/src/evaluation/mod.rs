//! Dice scoring, significance testing, temporal synthesis, factor panels and
//! evaluation reports.

mod report;
mod stats;
mod temporal;

use std::path::Path;

use image::GrayImage;
use sdtnet_tensor::{Float, Graph, Parallelism, ParamStore, Tensor};

use crate::data::{Class, Frame, LabelMap, NUM_CLASSES};
use crate::networks::{image_batch, Networks};
use crate::{Error, Result};

pub use report::{compare_reports, evaluate, read_metrics_csv, score_predictions, ClassSummary, DiceRow, EvaluationReport};
pub use stats::{average_ranks, spearman, wilcoxon_normal, wilcoxon_paired, EXACT_MAX_N};
pub use temporal::{factor_dice, lv_area_trend, transformer_consistency, LvTrend};

/// Per-class Dice `2|A n B| / (|A| + |B|)` for LV, MYO and RV; a class absent
/// from both maps scores 1.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap) -> Result<[f64; 3]> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
            "dice of {}x{} and {}x{} maps",
            pred.height, pred.width, gt.height, gt.width
        ))));
    }
    let mut out = [0.0; 3];
    for (slot, class) in out.iter_mut().zip(Class::FOREGROUND) {
        let c = class as u8;
        let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            a += (p == c) as usize;
            b += (g == c) as usize;
            both += (p == c && g == c) as usize;
        }
        *slot = if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 };
    }
    Ok(out)
}

/// Argmax label maps of a `[N, C, H, W]` probability tensor.
pub fn label_maps<F: Float>(probs: &Tensor<F>) -> Result<Vec<LabelMap>> {
    let (n, _, h, w) = probs.dims4()?;
    let arg = probs.argmax_channels()?;
    arg.chunks(h * w)
        .take(n)
        .map(|c| LabelMap::new(h, w, c.to_vec()))
        .collect()
}

/// Anatomy factors and posterior-mean modality code of one frame.
pub fn encode_frame<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    frame: &Frame,
    par: Parallelism,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let g = Graph::inference(par);
    let cx = nets.bind(&g, params);
    let x = g.input(image_batch(&[frame])?);
    let s = cx.anatomy_encode(x)?.hard;
    let z = cx.modality_encode(x, s, None)?.mean;
    Ok(((*g.value(s)).clone(), (*g.value(z)).clone()))
}

/// Frames decoded from `s0` advanced to `k / (n - 1)` of the contraction,
/// all with code `code(k)`.
pub fn synthesize_from<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    s0: &Tensor<F>,
    code: impl Fn(usize) -> Tensor<F>,
    n_frames: usize,
    par: Parallelism,
) -> Result<Vec<Frame>> {
    if n_frames < 2 {
        return Err(Error::Precondition(format!("need at least 2 frames, got {n_frames}")));
    }
    let (_, _, h, w) = s0.dims4()?;
    let mut out = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let g = Graph::inference(par);
        let cx = nets.bind(&g, params);
        let s = g.input(s0.clone());
        let s = if k == 0 {
            s
        } else {
            cx.transform(s, &[0.0], &[k as f64 / (n_frames - 1) as f64])?.hard
        };
        let img = cx.decode(s, g.input(code(k)))?;
        let data = g.value(img).data().iter().map(|v| v.as_f64() as f32).collect();
        out.push(Frame::new(h, w, data)?);
    }
    Ok(out)
}

/// Synthesises a contraction from an ED frame: factors are advanced by the
/// transformer while the modality code of the ED frame is kept fixed.
pub fn synthesize_sequence<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    ed: &Frame,
    n_frames: usize,
    par: Parallelism,
) -> Result<Vec<Frame>> {
    let (s0, z0) = encode_frame(nets, params, ed, par)?;
    synthesize_from(nets, params, &s0, |_| z0.clone(), n_frames, par)
}

fn to_gray(frame: &Frame) -> Vec<u8> {
    let (lo, hi) = frame
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    frame
        .data
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u8)
        .collect()
}

/// Horizontal strip of equally sized grayscale tiles.
pub fn tile_strip(tiles: &[Vec<u8>], h: usize, w: usize) -> Result<GrayImage> {
    if tiles.iter().any(|t| t.len() != h * w) {
        return Err(Error::Precondition("tile size mismatch".into()));
    }
    let n = tiles.len();
    let mut img = GrayImage::new((n * w) as u32, h as u32);
    for (i, t) in tiles.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                img.put_pixel((i * w + c) as u32, r as u32, image::Luma([t[r * w + c]]));
            }
        }
    }
    Ok(img)
}

/// PNG panel: the input image followed by one black/white tile per factor channel.
pub fn render_factors<F: Float>(image: &Frame, factors: &Tensor<F>, path: &Path) -> Result<()> {
    let (n, c, h, w) = factors.dims4()?;
    if n != 1 || (h, w) != (image.height, image.width) {
        return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
            "factors {:?} for a {}x{} image",
            factors.shape(),
            image.height,
            image.width
        ))));
    }
    let mut tiles = vec![to_gray(image)];
    for k in 0..c {
        let ch = &factors.data()[k * h * w..(k + 1) * h * w];
        tiles.push(ch.iter().map(|v| if v.as_f64() > 0.5 { 255 } else { 0 }).collect());
    }
    let img = tile_strip(&tiles, h, w)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Writes frames as an 8-bit PNG strip, each frame scaled by the sequence range.
pub fn render_sequence(frames: &[Frame], path: &Path) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Precondition("no frames".into()))?;
    let (h, w) = (first.height, first.width);
    let (lo, hi) = frames
        .iter()
        .flat_map(|f| f.data.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let tiles: Vec<Vec<u8>> = frames
        .iter()
        .map(|f| f.data.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8).collect())
        .collect();
    let img = tile_strip(&tiles, h, w)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Writes one frame as an 8-bit PNG scaled by its own range.
pub fn save_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(frame.width as u32, frame.height as u32, to_gray(frame))
        .expect("buffer matches frame size");
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Colour overlay of a label map on a frame: LV red, MYO green, RV blue.
pub fn overlay(frame: &Frame, labels: &LabelMap) -> Result<image::RgbImage> {
    if (frame.height, frame.width) != (labels.height, labels.width) {
        return Err(Error::Precondition("overlay frame and labels differ in size".into()));
    }
    let gray = to_gray(frame);
    let mut img = image::RgbImage::new(frame.width as u32, frame.height as u32);
    const COLOURS: [[u8; 3]; NUM_CLASSES] = [[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]];
    for (i, (&g, &l)) in gray.iter().zip(&labels.data).enumerate() {
        let px = if l == 0 {
            [g, g, g]
        } else {
            let c = COLOURS[l as usize];
            [0, 1, 2].map(|j| ((g as u16 + c[j] as u16) / 2) as u8)
        };
        img.put_pixel((i % frame.width) as u32, (i / frame.width) as u32, image::Rgb(px));
    }
    Ok(img)
}
