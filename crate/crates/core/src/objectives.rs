//! Loss terms and their weighted composition.
//!
//! Every term is a plain function over `f64` slices that returns its value
//! together with the analytic gradient, so the terms can be checked against
//! finite differences in isolation and then spliced into an autodiff graph.
//! Mask-shaped inputs use the `[batch][class][pixel]` layout.

use serde::{Deserialize, Serialize};
use sdtnet_tensor::ShapeError;

use crate::data::Class;

pub const DICE_SMOOTH: f64 = 1e-6;
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Supervised segmentation term.
    pub lambda0: f64,
    /// Unsupervised reconstruction term.
    pub lambda1: f64,
    /// Adversarial (generator side) term.
    pub lambda2: f64,
    /// Temporal transformer term.
    pub lambda3: f64,
    pub lambda_kl: f64,
    /// Weight of cross-entropy next to Dice inside the supervised term.
    pub ce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 10.0,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 1.0,
            lambda_kl: 0.1,
            ce_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_kl", self.lambda_kl),
            ("ce_weight", self.ce_weight),
        ];
        for (k, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{k} must be a non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Every logged loss quantity of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    /// Generator-side adversarial loss.
    pub adversarial: f64,
    /// Critic loss of the discriminator step.
    pub adversarial_critic: f64,
    pub transformer: f64,
    pub dice: f64,
    pub ce: f64,
    pub l1: f64,
    pub kl: f64,
    /// Mutual-information surrogate `-mean ||z_hat - z||^2` (non-positive).
    pub mi: f64,
    /// Whether the supervised term was part of this step.
    pub labelled: bool,
    pub gan_collapse_warning: bool,
}

impl LossReport {
    /// Recomputes the total from the sub-terms.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        total_loss(self.supervised, self.unsupervised, self.adversarial, self.transformer, w, self.labelled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskDims {
    pub batch: usize,
    pub classes: usize,
    pub pixels: usize,
}

impl MaskDims {
    pub fn new(batch: usize, classes: usize, pixels: usize) -> Self {
        Self { batch, classes, pixels }
    }

    pub fn len(&self) -> usize {
        self.batch * self.classes * self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, what: &str, v: &[f64]) -> Result<(), ShapeError> {
        if v.len() != self.len() {
            return Err(ShapeError::new(format!(
                "{what}: {} values for {}x{}x{}",
                v.len(),
                self.batch,
                self.classes,
                self.pixels
            )));
        }
        Ok(())
    }

    fn class_slices<'a>(&self, v: &'a [f64], k: usize) -> impl Iterator<Item = &'a [f64]> + 'a {
        let (c, p) = (self.classes, self.pixels);
        (0..self.batch).map(move |b| &v[(b * c + k) * p..(b * c + k + 1) * p])
    }
}

/// Soft Dice loss `1 - mean_k (2 sum(y p) + eps) / (sum y + sum p + eps)`
/// over `classes`, summing over batch and pixels. Returns the loss and its
/// gradient with respect to `pred`.
pub fn dice_loss(
    target: &[f64],
    pred: &[f64],
    dims: MaskDims,
    classes: &[usize],
) -> Result<(f64, Vec<f64>), ShapeError> {
    dims.check("dice target", target)?;
    dims.check("dice prediction", pred)?;
    if classes.is_empty() || classes.iter().any(|&k| k >= dims.classes) {
        return Err(ShapeError::new(format!("dice classes {classes:?} for {} channels", dims.classes)));
    }
    let mut grad = vec![0.0; pred.len()];
    let mut mean = 0.0;
    let nk = classes.len() as f64;
    for &k in classes {
        let (mut inter, mut ys, mut ps) = (0.0, 0.0, 0.0);
        for (ty, tp) in dims.class_slices(target, k).zip(dims.class_slices(pred, k)) {
            for (&a, &b) in ty.iter().zip(tp) {
                inter += a * b;
                ys += a;
                ps += b;
            }
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = ys + ps + DICE_SMOOTH;
        mean += num / den / nk;
        let (c, p) = (dims.classes, dims.pixels);
        for b in 0..dims.batch {
            let base = (b * c + k) * p;
            for i in base..base + p {
                grad[i] -= (2.0 * target[i] * den - num) / (den * den) / nk;
            }
        }
    }
    Ok((1.0 - mean, grad))
}

/// Class weights `1 / (count + 1)` from the target, normalised to sum to one
/// over the classes present in the batch.
pub fn class_weights(target: &[f64], dims: MaskDims) -> Vec<f64> {
    let counts: Vec<f64> = (0..dims.classes)
        .map(|k| dims.class_slices(target, k).flat_map(|s| s.iter()).sum())
        .collect();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| if n > 0.0 { 1.0 / (n + 1.0) } else { 0.0 })
        .collect();
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.iter().map(|w| w / s).collect()
    } else {
        raw
    }
}

/// Class-weighted cross-entropy, normalised by the total target weight.
/// Predictions are floored at `1e-7`.
pub fn weighted_cross_entropy(target: &[f64], pred: &[f64], dims: MaskDims) -> Result<(f64, Vec<f64>), ShapeError> {
    dims.check("ce target", target)?;
    dims.check("ce prediction", pred)?;
    let w = class_weights(target, dims);
    let (c, p) = (dims.classes, dims.pixels);
    let mut num = 0.0;
    let mut den = 0.0;
    for b in 0..dims.batch {
        for (k, &wk) in w.iter().enumerate() {
            let base = (b * c + k) * p;
            for i in base..base + p {
                let wy = wk * target[i];
                num -= wy * pred[i].clamp(PROB_FLOOR, 1.0).ln();
                den += wy;
            }
        }
    }
    let mut grad = vec![0.0; pred.len()];
    if den <= 0.0 {
        return Ok((0.0, grad));
    }
    for b in 0..dims.batch {
        for (k, &wk) in w.iter().enumerate() {
            let base = (b * c + k) * p;
            for i in base..base + p {
                if pred[i] > PROB_FLOOR && pred[i] <= 1.0 {
                    grad[i] = -wk * target[i] / pred[i] / den;
                }
            }
        }
    }
    Ok((num / den, grad))
}

pub struct SupervisedTerms {
    pub value: f64,
    pub dice: f64,
    pub ce: f64,
    pub grad: Vec<f64>,
}

/// Dice over the foreground classes plus `ce_weight` times the weighted
/// cross-entropy over all four classes.
pub fn supervised_loss(target: &[f64], pred: &[f64], dims: MaskDims, ce_weight: f64) -> Result<SupervisedTerms, ShapeError> {
    let fg: Vec<usize> = Class::FOREGROUND.iter().map(|c| c.index()).collect();
    let (dice, gd) = dice_loss(target, pred, dims, &fg)?;
    let (ce, gc) = weighted_cross_entropy(target, pred, dims)?;
    let grad = gd.iter().zip(&gc).map(|(a, b)| a + ce_weight * b).collect();
    Ok(SupervisedTerms {
        value: dice + ce_weight * ce,
        dice,
        ce,
        grad,
    })
}

/// `0.5 * mean_b sum_i (mu^2 + exp(lv) - 1 - lv)`; returns the value and the
/// gradients with respect to the mean and the log-variance.
pub fn kl_divergence(mean: &[f64], log_var: &[f64], batch: usize) -> Result<(f64, Vec<f64>, Vec<f64>), ShapeError> {
    if mean.len() != log_var.len() || batch == 0 || !mean.len().is_multiple_of(batch) {
        return Err(ShapeError::new(format!(
            "kl: mean {} / log-variance {} values for batch {batch}",
            mean.len(),
            log_var.len()
        )));
    }
    let inv_b = 1.0 / batch as f64;
    let mut v = 0.0;
    let mut gm = Vec::with_capacity(mean.len());
    let mut gl = Vec::with_capacity(mean.len());
    for (&m, &l) in mean.iter().zip(log_var) {
        let e = l.exp();
        v += m * m + e - 1.0 - l;
        gm.push(m * inv_b);
        gl.push(0.5 * (e - 1.0) * inv_b);
    }
    Ok((0.5 * v * inv_b, gm, gl))
}

/// Mean absolute error and its gradient with respect to `recon`.
pub fn mean_absolute_error(recon: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), ShapeError> {
    if recon.len() != target.len() || recon.is_empty() {
        return Err(ShapeError::new(format!("mae: {} vs {} values", recon.len(), target.len())));
    }
    let inv = 1.0 / recon.len() as f64;
    let mut v = 0.0;
    let grad = recon
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let d = a - b;
            v += d.abs();
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((v * inv, grad))
}

/// Variational mutual-information surrogate: the Gaussian log-likelihood of
/// the code under the estimator with unit variance, constants dropped, i.e.
/// `-mean_b ||z_hat - z||^2`. Returns the surrogate and the gradient of the
/// penalty `-surrogate` with respect to `z_hat`.
pub fn mi_surrogate(z_hat: &[f64], z: &[f64], batch: usize) -> Result<(f64, Vec<f64>), ShapeError> {
    if z_hat.len() != z.len() || batch == 0 || !z.len().is_multiple_of(batch) {
        return Err(ShapeError::new(format!("mi: {} vs {} values for batch {batch}", z_hat.len(), z.len())));
    }
    let inv_b = 1.0 / batch as f64;
    let mut sq = 0.0;
    let grad = z_hat
        .iter()
        .zip(z)
        .map(|(&a, &b)| {
            sq += (a - b) * (a - b);
            2.0 * (a - b) * inv_b
        })
        .collect();
    Ok((-sq * inv_b, grad))
}

pub struct UnsupervisedTerms {
    pub value: f64,
    pub l1: f64,
    pub kl: f64,
    pub mi: f64,
    pub grad_recon: Vec<f64>,
    pub grad_mean: Vec<f64>,
    pub grad_log_var: Vec<f64>,
    pub grad_z_hat: Vec<f64>,
}

/// `MAE(x_rec, x) + lambda_kl * KL - MI`, with the MI surrogate above.
#[allow(clippy::too_many_arguments)]
pub fn unsupervised_loss(
    image: &[f64],
    recon: &[f64],
    mean: &[f64],
    log_var: &[f64],
    z: &[f64],
    z_hat: &[f64],
    batch: usize,
    lambda_kl: f64,
) -> Result<UnsupervisedTerms, ShapeError> {
    let (l1, grad_recon) = mean_absolute_error(recon, image)?;
    let (kl, gm, gl) = kl_divergence(mean, log_var, batch)?;
    let (mi, grad_z_hat) = mi_surrogate(z_hat, z, batch)?;
    Ok(UnsupervisedTerms {
        value: l1 + lambda_kl * kl - mi,
        l1,
        kl,
        mi,
        grad_recon,
        grad_mean: gm.iter().map(|g| g * lambda_kl).collect(),
        grad_log_var: gl.iter().map(|g| g * lambda_kl).collect(),
        grad_z_hat,
    })
}

pub struct LsganTerms {
    pub critic: f64,
    pub generator: f64,
    pub critic_grad_real: Vec<f64>,
    pub critic_grad_fake: Vec<f64>,
    pub generator_grad_fake: Vec<f64>,
}

/// Least-squares GAN losses with targets 0 (fake) and 1 (real):
/// critic `0.5 mean((d_real - 1)^2) + 0.5 mean(d_fake^2)`, generator
/// `0.5 mean((d_fake - 1)^2)`.
pub fn lsgan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<LsganTerms, ShapeError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(ShapeError::new("lsgan: empty score tensor"));
    }
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let real: f64 = d_real.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / nr;
    let fake: f64 = d_fake.iter().map(|d| d * d).sum::<f64>() / nf;
    let gen: f64 = d_fake.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / nf;
    Ok(LsganTerms {
        critic: 0.5 * real + 0.5 * fake,
        generator: 0.5 * gen,
        critic_grad_real: d_real.iter().map(|d| (d - 1.0) / nr).collect(),
        critic_grad_fake: d_fake.iter().map(|d| d / nf).collect(),
        generator_grad_fake: d_fake.iter().map(|d| (d - 1.0) / nf).collect(),
    })
}

/// Dice loss between predicted (soft) and target anatomy factors over every
/// channel. The target enters as a constant.
pub fn transformer_loss(pred_soft: &[f64], target: &[f64], dims: MaskDims) -> Result<(f64, Vec<f64>), ShapeError> {
    let all: Vec<usize> = (0..dims.classes).collect();
    dice_loss(target, pred_soft, dims, &all)
}

/// `lambda0 L_S + lambda1 L_US + lambda2 L_ADV + lambda3 L_TR`; the supervised
/// term is dropped for batches without labels.
pub fn total_loss(
    supervised: f64,
    unsupervised: f64,
    adversarial: f64,
    transformer: f64,
    w: &LossWeights,
    labelled: bool,
) -> f64 {
    let sup = if labelled { w.lambda0 * supervised } else { 0.0 };
    sup + w.lambda1 * unsupervised + w.lambda2 * adversarial + w.lambda3 * transformer
}

/// Graph glue: each term becomes a scalar node whose backward pass uses the
/// analytic gradients above.
pub mod graph {
    use sdtnet_tensor::{Float, Graph, ShapeError, Tensor, Var};

    use super::*;

    fn mask_dims(t: &Tensor<impl Float>) -> Result<MaskDims, ShapeError> {
        let (n, c, h, w) = t.dims4()?;
        Ok(MaskDims::new(n, c, h * w))
    }

    fn like<F: Float>(t: &Tensor<F>, g: &[f64]) -> Tensor<F> {
        Tensor::new(t.shape(), g.iter().map(|&v| F::from_f64(v)).collect()).expect("gradient matches input")
    }

    pub struct Supervised {
        pub loss: Var,
        pub dice: f64,
        pub ce: f64,
    }

    /// `target` is a one-hot mask, `pred` the segmentor's softmax output.
    pub fn supervised<F: Float>(g: &Graph<F>, target: Var, pred: Var, ce_weight: f64) -> Result<Supervised, ShapeError> {
        let mut parts = (0.0, 0.0);
        let loss = g.scalar_fn(&[pred], |v| {
            let t = g.value(target);
            if t.shape() != v[0].shape() {
                return Err(ShapeError::new(format!("target {:?} vs prediction {:?}", t.shape(), v[0].shape())));
            }
            let terms = supervised_loss(&t.to_f64_vec(), &v[0].to_f64_vec(), mask_dims(v[0])?, ce_weight)?;
            parts = (terms.dice, terms.ce);
            Ok((terms.value, vec![like(v[0], &terms.grad)]))
        })?;
        Ok(Supervised {
            loss,
            dice: parts.0,
            ce: parts.1,
        })
    }

    pub struct Unsupervised {
        pub loss: Var,
        pub l1: f64,
        pub kl: f64,
        pub mi: f64,
    }

    /// The code `z` is treated as a constant target of the estimator.
    #[allow(clippy::too_many_arguments)]
    pub fn unsupervised<F: Float>(
        g: &Graph<F>,
        image: Var,
        recon: Var,
        mean: Var,
        log_var: Var,
        z: Var,
        z_hat: Var,
        lambda_kl: f64,
    ) -> Result<Unsupervised, ShapeError> {
        let mut parts = (0.0, 0.0, 0.0);
        let loss = g.scalar_fn(&[recon, mean, log_var, z_hat], |v| {
            let x = g.value(image);
            let zv = g.value(z);
            let batch = v[1].batch();
            let t = unsupervised_loss(
                &x.to_f64_vec(),
                &v[0].to_f64_vec(),
                &v[1].to_f64_vec(),
                &v[2].to_f64_vec(),
                &zv.to_f64_vec(),
                &v[3].to_f64_vec(),
                batch,
                lambda_kl,
            )?;
            parts = (t.l1, t.kl, t.mi);
            Ok((
                t.value,
                vec![
                    like(v[0], &t.grad_recon),
                    like(v[1], &t.grad_mean),
                    like(v[2], &t.grad_log_var),
                    like(v[3], &t.grad_z_hat),
                ],
            ))
        })?;
        Ok(Unsupervised {
            loss,
            l1: parts.0,
            kl: parts.1,
            mi: parts.2,
        })
    }

    /// Generator-side least-squares loss on critic scores of fake masks.
    pub fn adversarial_generator<F: Float>(g: &Graph<F>, d_fake: Var) -> Result<Var, ShapeError> {
        g.scalar_fn(&[d_fake], |v| {
            let d = v[0].to_f64_vec();
            let t = lsgan_losses(&[1.0], &d)?;
            Ok((t.generator, vec![like(v[0], &t.generator_grad_fake)]))
        })
    }

    pub fn adversarial_critic<F: Float>(g: &Graph<F>, d_real: Var, d_fake: Var) -> Result<Var, ShapeError> {
        g.scalar_fn(&[d_real, d_fake], |v| {
            let t = lsgan_losses(&v[0].to_f64_vec(), &v[1].to_f64_vec())?;
            Ok((
                t.critic,
                vec![like(v[0], &t.critic_grad_real), like(v[1], &t.critic_grad_fake)],
            ))
        })
    }

    /// Dice between the transformer's soft output and the (constant) target
    /// anatomy factor.
    pub fn transformer<F: Float>(g: &Graph<F>, pred_soft: Var, target: Var) -> Result<Var, ShapeError> {
        g.scalar_fn(&[pred_soft], |v| {
            let t = g.value(target);
            if t.shape() != v[0].shape() {
                return Err(ShapeError::new(format!("target {:?} vs prediction {:?}", t.shape(), v[0].shape())));
            }
            let (val, grad) = transformer_loss(&v[0].to_f64_vec(), &t.to_f64_vec(), mask_dims(v[0])?)?;
            Ok((val, vec![like(v[0], &grad)]))
        })
    }
}
