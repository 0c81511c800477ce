use rand::Rng;
use sdtnet_tensor::{Float, Graph, Parallelism, ParamStore, Tensor, Var};

use super::optim::{ema_update, Adam, AdamConfig};
use crate::networks::{Component, Networks};
use crate::objectives::{graph as loss, total_loss, LossReport, LossWeights};
use crate::{Error, Result};

/// Consecutive steps with a near-zero critic loss that raise the collapse flag.
pub const GAN_COLLAPSE_STEPS: usize = 100;
pub const GAN_COLLAPSE_THRESHOLD: f64 = 1e-4;

pub struct LabelledBatch<F> {
    /// `[B, 1, H, W]`
    pub images: Tensor<F>,
    /// One-hot `[B, 4, H, W]`
    pub masks: Tensor<F>,
}

pub struct PairBatch<F> {
    pub sources: Tensor<F>,
    pub targets: Tensor<F>,
    pub t: Vec<f64>,
    pub dt: Vec<f64>,
}

#[derive(Default)]
pub struct StepBatches<F> {
    pub labelled: Option<LabelledBatch<F>>,
    pub unlabelled: Option<Tensor<F>>,
    pub pairs: Option<PairBatch<F>>,
}

/// Raw and averaged parameters, optimiser moments and loop counters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<F> {
    pub raw: ParamStore<F>,
    pub ema: ParamStore<F>,
    pub adam: Adam<F>,
    pub step: u64,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub evals_without_improvement: usize,
    pub critic_low_streak: usize,
}

impl<F: Float> TrainingState<F> {
    pub fn new(params: ParamStore<F>, adam: AdamConfig) -> Self {
        Self {
            ema: params.clone(),
            adam: Adam::new(&params, adam),
            raw: params,
            step: 0,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            evals_without_improvement: 0,
            critic_low_streak: 0,
        }
    }
}

pub struct StepSettings {
    pub weights: LossWeights,
    pub lr: f64,
    pub ema_decay: f64,
    pub parallelism: Parallelism,
}

fn is_critic(store_names: &[bool], id: sdtnet_tensor::ParamId) -> bool {
    store_names[id.0]
}

/// Critic scores need both real masks and segmentor outputs.
fn adversarial_active<F>(b: &StepBatches<F>, w: &LossWeights) -> bool {
    w.lambda2 > 0.0 && b.labelled.is_some() && b.unlabelled.is_some()
}

/// One discriminator update followed by one update of every other network
/// and an update of the parameter average.
pub fn train_step<F: Float, R: Rng + ?Sized>(
    nets: &Networks,
    state: &mut TrainingState<F>,
    batches: &StepBatches<F>,
    settings: &StepSettings,
    rng: &mut R,
) -> Result<LossReport> {
    let w = &settings.weights;
    let par = settings.parallelism;
    let critic_mask: Vec<bool> = state
        .raw
        .iter()
        .map(|(_, name, _)| Component::of(name) == Some(Component::Discriminator))
        .collect();
    let mut report = LossReport {
        labelled: batches.labelled.is_some(),
        ..LossReport::default()
    };
    let adversarial = adversarial_active(batches, w);

    if adversarial {
        let (Some(lab), Some(unl)) = (&batches.labelled, &batches.unlabelled) else {
            unreachable!()
        };
        let fake = {
            let g = Graph::inference(par);
            let cx = nets.bind(&g, &state.raw);
            let s = cx.anatomy_encode(g.input(unl.clone()))?.hard;
            (*g.value(cx.segment(s)?)).clone()
        };
        let mask = critic_mask.clone();
        let g = Graph::with_trainable(par, move |id| is_critic(&mask, id));
        let cx = nets.bind(&g, &state.raw);
        let d_real = cx.discriminate(g.input(lab.masks.clone()))?;
        let d_fake = cx.discriminate(g.input(fake))?;
        let critic = loss::adversarial_critic(&g, d_real, d_fake)?;
        report.adversarial_critic = g.value(critic).data()[0].as_f64();
        let grads = g.backward(critic);
        state.adam.step(&mut state.raw, &grads, settings.lr);
        if report.adversarial_critic < GAN_COLLAPSE_THRESHOLD {
            state.critic_low_streak += 1;
        } else {
            state.critic_low_streak = 0;
        }
        if state.critic_low_streak >= GAN_COLLAPSE_STEPS {
            report.gan_collapse_warning = true;
            if state.critic_low_streak == GAN_COLLAPSE_STEPS {
                log::warn!(
                    "critic loss below {GAN_COLLAPSE_THRESHOLD} for {GAN_COLLAPSE_STEPS} consecutive steps"
                );
            }
        }
    }

    let pairs = batches.pairs.as_ref().filter(|_| w.lambda3 > 0.0);
    let recon = w.lambda1 > 0.0;
    let pair_targets = match pairs {
        Some(p) => {
            let g = Graph::inference(par);
            let cx = nets.bind(&g, &state.raw);
            let s = cx.anatomy_encode(g.input(p.targets.clone()))?.hard;
            Some((*g.value(s)).clone())
        }
        None => None,
    };

    let mask = critic_mask;
    let g = Graph::with_trainable(par, move |id| !is_critic(&mask, id));
    let cx = nets.bind(&g, &state.raw);
    let mut parts: Vec<(usize, Tensor<F>)> = Vec::new();
    if let Some(l) = &batches.labelled {
        parts.push((0, l.images.clone()));
    }
    if let Some(u) = batches.unlabelled.as_ref().filter(|_| recon || adversarial) {
        parts.push((1, u.clone()));
    }
    if let Some(p) = pairs {
        parts.push((2, p.sources.clone()));
    }
    if parts.is_empty() {
        return Err(Error::Precondition("a training step needs at least one active batch".into()));
    }
    let inputs: Vec<Var> = parts.iter().map(|(_, t)| g.input(t.clone())).collect();
    let x_all = if inputs.len() == 1 { inputs[0] } else { g.concat_batch(&inputs)? };
    let s_all = cx.anatomy_encode(x_all)?.hard;
    let mut offset = 0;
    let mut slices = [None; 3];
    for (k, (slot, t)) in parts.iter().enumerate() {
        let n = t.batch();
        let s = g.narrow_batch(s_all, offset, n)?;
        slices[*slot] = Some((inputs[k], s));
        offset += n;
    }

    let mut terms: Vec<Var> = Vec::new();
    if let (Some(l), Some((_, s))) = (&batches.labelled, slices[0]) {
        let y = cx.segment(s)?;
        let sup = loss::supervised(&g, g.constant(l.masks.clone()), y, w.ce_weight)?;
        report.dice = sup.dice;
        report.ce = sup.ce;
        report.supervised = sup.dice + w.ce_weight * sup.ce;
        terms.push(g.scale(sup.loss, w.lambda0));
    }
    if recon {
        let present: Vec<(Var, Var)> = slices[..2].iter().flatten().copied().collect();
        let (xs, ss): (Vec<Var>, Vec<Var>) = present.into_iter().unzip();
        let x = if xs.len() == 1 { xs[0] } else { g.concat_batch(&xs)? };
        let s = if ss.len() == 1 { ss[0] } else { g.concat_batch(&ss)? };
        let n = g.shape(x)[0];
        let nz = nets.config().n_z;
        let mut eps = Tensor::zeros(&[n, nz]);
        for v in eps.data_mut() {
            *v = F::from_f64(rng.sample(rand_distr::StandardNormal));
        }
        let code = cx.modality_encode(x, s, Some(eps))?;
        let rec = cx.decode(s, code.sample)?;
        let z_hat = cx.estimate_mi_code(rec)?;
        let us = loss::unsupervised(&g, x, rec, code.mean, code.log_var, code.sample, z_hat, w.lambda_kl)?;
        report.l1 = us.l1;
        report.kl = us.kl;
        report.mi = us.mi;
        report.unsupervised = us.l1 + w.lambda_kl * us.kl - us.mi;
        terms.push(g.scale(us.loss, w.lambda1));
    }
    if adversarial {
        let (_, s) = slices[1].expect("unlabelled slice present when adversarial");
        let d_fake = cx.discriminate(cx.segment(s)?)?;
        let adv = loss::adversarial_generator(&g, d_fake)?;
        report.adversarial = g.value(adv).data()[0].as_f64();
        terms.push(g.scale(adv, w.lambda2));
    }
    if let (Some(p), Some((_, s)), Some(target)) = (pairs, slices[2], pair_targets) {
        let out = cx.transform(s, &p.t, &p.dt)?;
        let tr = loss::transformer(&g, out.soft, g.constant(target))?;
        report.transformer = g.value(tr).data()[0].as_f64();
        terms.push(g.scale(tr, w.lambda3));
    }
    if terms.is_empty() {
        return Err(Error::Precondition("every loss term of this step has zero weight or no data".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let grads = g.backward(total);
    state.adam.step(&mut state.raw, &grads, settings.lr);
    ema_update(&mut state.ema, &state.raw, settings.ema_decay)?;
    state.step += 1;
    report.total = total_loss(
        report.supervised,
        report.unsupervised,
        report.adversarial,
        report.transformer,
        w,
        report.labelled,
    );
    Ok(report)
}
