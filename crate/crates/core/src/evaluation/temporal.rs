use sdtnet_tensor::{Float, Graph, Parallelism, ParamStore, Tensor};

use super::{label_maps, spearman, synthesize_sequence};
use crate::data::{split_cardiac_cycle, CineSequence, Class, Frame};
use crate::networks::{image_batch, Networks};
use crate::training::predict_masks;
use crate::Result;

/// Dice between two binary `[C, P]` factor maps, averaged over the channels
/// whose target is nonempty. `None` when every target channel is empty.
pub fn factor_dice(pred: &[f64], target: &[f64], channels: usize) -> Option<f64> {
    let p = target.len() / channels;
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..channels {
        let (a, b) = (&pred[c * p..(c + 1) * p], &target[c * p..(c + 1) * p]);
        let tb: f64 = b.iter().sum();
        if tb == 0.0 {
            continue;
        }
        let ta: f64 = a.iter().sum();
        let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        sum += 2.0 * inter / (ta + tb);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean factor dice between `transform(f_A(x_i), t, dt)` and `f_A(x_j)` over
/// every ordered pair `i < j` of every contraction half of `subjects`.
pub fn transformer_consistency<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    subjects: &[&CineSequence],
    par: Parallelism,
) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for seq in subjects {
        let frames: Vec<&Frame> = seq.frames.iter().collect();
        let factors = {
            let g = Graph::inference(par);
            let cx = nets.bind(&g, params);
            let s = cx.anatomy_encode(g.input(image_batch(&frames)?))?.hard;
            (*g.value(s)).clone()
        };
        let (_, c, h, w) = factors.dims4()?;
        let per = c * h * w;
        let all = factors.to_f64_vec();
        for half in split_cardiac_cycle(seq)?.halves() {
            let len = half.len();
            let mut src = Vec::new();
            let (mut ts, mut dts, mut targets) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..len {
                for j in i + 1..len {
                    let (si, ti) = (half.frame_indices[i], half.frame_indices[j]);
                    src.extend_from_slice(&factors.data()[si * per..(si + 1) * per]);
                    ts.push(i as f64 / (len - 1) as f64);
                    dts.push((j - i) as f64 / (len - 1) as f64);
                    targets.push(ti);
                }
            }
            if targets.is_empty() {
                continue;
            }
            let g = Graph::inference(par);
            let cx = nets.bind(&g, params);
            let s = g.input(Tensor::new(&[targets.len(), c, h, w], src)?);
            let pred = g.value(cx.transform(s, &ts, &dts)?.hard).to_f64_vec();
            for (k, &ti) in targets.iter().enumerate() {
                if let Some(d) = factor_dice(&pred[k * per..(k + 1) * per], &all[ti * per..(ti + 1) * per], c) {
                    scores.push(d);
                }
            }
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// LV areas of the segmented frames of a synthesised contraction.
#[derive(Clone, Debug, PartialEq)]
pub struct LvTrend {
    pub areas: Vec<usize>,
    /// Spearman correlation of area with frame index; `None` for constant areas.
    pub spearman: Option<f64>,
    pub non_increasing: bool,
}

/// Synthesises `n_frames` from `ed`, segments each frame and measures the
/// LV cavity area.
pub fn lv_area_trend<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    ed: &Frame,
    n_frames: usize,
    par: Parallelism,
) -> Result<LvTrend> {
    let frames = synthesize_sequence(nets, params, ed, n_frames, par)?;
    let refs: Vec<&Frame> = frames.iter().collect();
    let probs = predict_masks(nets, params, &image_batch(&refs)?, par)?;
    let areas: Vec<usize> = label_maps(&probs)?
        .iter()
        .map(|m| m.count(Class::LeftVentricle))
        .collect();
    let idx: Vec<f64> = (0..areas.len()).map(|k| k as f64).collect();
    let af: Vec<f64> = areas.iter().map(|&a| a as f64).collect();
    Ok(LvTrend {
        spearman: spearman(&idx, &af).ok(),
        non_increasing: areas.windows(2).all(|w| w[1] <= w[0]),
        areas,
    })
}
