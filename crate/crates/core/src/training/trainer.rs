use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtnet_tensor::{Float, Graph, Parallelism, ParamStore, Tensor};

use super::checkpoint::{save_checkpoint, save_weights, Manifest};
use super::config::TrainingConfig;
use super::optim::{triangular_lr, AdamConfig};
use super::step::{train_step, LabelledBatch, PairBatch, StepBatches, StepSettings, TrainingState};
use crate::data::cycle::sample_phase_pair_with;
use crate::data::{augment_pair, split_cardiac_cycle, AugmentRanges, CineSequence, ContractionSequence, DatasetSplit, Frame, LabelMap};
use crate::networks::{image_batch, mask_batch, NetworkBundle, Networks};
use crate::objectives::{supervised_loss, LossReport, LossWeights, MaskDims};
use crate::{Error, Result};

pub const LOG_HEADER: &str = "step,epoch,total,sup,unsup,adv_g,adv_d,tr,dice,ce,l1,kl,mi";

/// Root for run directories: `$SDTNET_RUNS_DIR`, else `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("SDTNET_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn parallelism(parallel: bool) -> Parallelism {
    if parallel {
        Parallelism::Rayon
    } else {
        Parallelism::Sequential
    }
}

/// Labelled frames of a subject: its ED and ES frames when annotated.
pub fn annotated_phases(seq: &CineSequence) -> Vec<(&'static str, usize)> {
    [("ED", seq.ed_index), ("ES", seq.es_index)]
        .into_iter()
        .filter(|(_, k)| seq.labels.contains_key(k))
        .collect()
}

fn subjects_in<'a>(subjects: &'a [CineSequence], ids: &BTreeSet<String>) -> Vec<&'a CineSequence> {
    subjects.iter().filter(|s| ids.contains(&s.subject_id)).collect()
}

/// Cycles through a list in freshly shuffled order.
struct Cycler<T> {
    items: Vec<T>,
    pos: usize,
}

impl<T: Clone> Cycler<T> {
    fn new(items: Vec<T>) -> Self {
        let pos = items.len();
        Self { items, pos }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> T {
        if self.pos >= self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1].clone()
    }
}

/// Draws augmented labelled, unlabelled and pair batches from the training pool.
pub struct BatchSampler<'a> {
    subjects: Vec<&'a CineSequence>,
    labelled: Cycler<(usize, usize)>,
    frames: Cycler<(usize, usize)>,
    halves: Cycler<(usize, ContractionSequence)>,
    batch: usize,
    augment: AugmentRanges,
}

impl<'a> BatchSampler<'a> {
    pub fn new(subjects: &'a [CineSequence], split: &DatasetSplit, batch: usize, augment: AugmentRanges) -> Result<Self> {
        let pool = subjects_in(subjects, &split.training_pool());
        if pool.is_empty() {
            return Err(Error::Data("no training subjects found in the dataset".into()));
        }
        let mut labelled = Vec::new();
        let mut frames = Vec::new();
        let mut halves = Vec::new();
        for (i, s) in pool.iter().enumerate() {
            if split.labelled_subjects.contains(&s.subject_id) {
                labelled.extend(annotated_phases(s).into_iter().map(|(_, k)| (i, k)));
            }
            frames.extend((0..s.frames.len()).map(|k| (i, k)));
            let cycle = split_cardiac_cycle(s)?;
            halves.extend(cycle.halves().map(|h| (i, h.clone())));
        }
        Ok(Self {
            subjects: pool,
            labelled: Cycler::new(labelled),
            frames: Cycler::new(frames),
            halves: Cycler::new(halves),
            batch,
            augment,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.items.len()
    }

    pub fn num_labelled(&self) -> usize {
        self.labelled.items.len()
    }

    pub fn sample<F: Float, R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        labelled: bool,
        unlabelled: bool,
        pairs: bool,
    ) -> Result<StepBatches<F>> {
        let mut out = StepBatches::default();
        if labelled && self.num_labelled() > 0 {
            let mut imgs = Vec::new();
            let mut masks = Vec::new();
            for _ in 0..self.batch {
                let (i, k) = self.labelled.next(rng);
                let s = self.subjects[i];
                let tf = self.augment.sample(rng);
                imgs.push(tf.apply_frame(&s.frames[k]));
                masks.push(tf.apply_labels(&s.labels[&k]));
            }
            out.labelled = Some(LabelledBatch {
                images: image_batch(&imgs.iter().collect::<Vec<_>>())?,
                masks: mask_batch(&masks.iter().collect::<Vec<&LabelMap>>())?,
            });
        }
        if unlabelled {
            let imgs: Vec<Frame> = (0..self.batch)
                .map(|_| {
                    let (i, k) = self.frames.next(rng);
                    self.augment.sample(rng).apply_frame(&self.subjects[i].frames[k])
                })
                .collect();
            out.unlabelled = Some(image_batch(&imgs.iter().collect::<Vec<_>>())?);
        }
        if pairs {
            let mut src = Vec::new();
            let mut tgt = Vec::new();
            let (mut t, mut dt) = (Vec::new(), Vec::new());
            for _ in 0..self.batch {
                let (i, half) = self.halves.next(rng);
                let pair = sample_phase_pair_with(self.subjects[i], &half, rng)?;
                let (pair, _) = augment_pair(&pair, None, rng.random(), &self.augment)?;
                t.push(pair.t);
                dt.push(pair.dt);
                src.push(pair.source_frame);
                tgt.push(pair.target_frame);
            }
            out.pairs = Some(PairBatch {
                sources: image_batch(&src.iter().collect::<Vec<_>>())?,
                targets: image_batch(&tgt.iter().collect::<Vec<_>>())?,
                t,
                dt,
            });
        }
        Ok(out)
    }
}

/// Labelled ED/ES frames of `subjects` as image and one-hot mask tensors.
pub fn labelled_frames<F: Float>(subjects: &[&CineSequence]) -> Result<Option<(Tensor<F>, Tensor<F>)>> {
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for s in subjects {
        for (_, k) in annotated_phases(s) {
            frames.push(&s.frames[k]);
            labels.push(&s.labels[&k]);
        }
    }
    if frames.is_empty() {
        return Ok(None);
    }
    Ok(Some((image_batch(&frames)?, mask_batch(&labels)?)))
}

/// Segmentor probabilities `h(f_A(x))` for an image batch, in chunks.
pub fn predict_masks<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    images: &Tensor<F>,
    par: Parallelism,
) -> Result<Tensor<F>> {
    const CHUNK: usize = 16;
    let n = images.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let g = Graph::inference(par);
        let cx = nets.bind(&g, params);
        let s = cx.anatomy_encode(g.input(images.narrow_batch(start, len)?))?.hard;
        parts.push((*g.value(cx.segment(s)?)).clone());
    }
    Ok(Tensor::stack_batch(&parts.iter().collect::<Vec<_>>())?)
}

/// Supervised loss (Dice + weighted CE) of the segmentation path over a set
/// of labelled frames.
pub fn segmentation_loss<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    images: &Tensor<F>,
    masks: &Tensor<F>,
    ce_weight: f64,
    par: Parallelism,
) -> Result<f64> {
    let pred = predict_masks(nets, params, images, par)?;
    let (n, c, h, w) = masks.dims4()?;
    let t = supervised_loss(&masks.to_f64_vec(), &pred.to_f64_vec(), MaskDims::new(n, c, h * w), ce_weight)?;
    Ok(t.value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub val_loss: f64,
    pub improved: bool,
    pub mean_total: f64,
}

pub struct TrainOutcome {
    /// Best averaged weights.
    pub bundle: NetworkBundle<f32>,
    pub manifest: Manifest,
    pub state: TrainingState<f32>,
    pub history: Vec<EpochSummary>,
    /// `(step, epoch, report)` per optimiser step.
    pub log: Vec<(u64, usize, LossReport)>,
    pub stopped_early: bool,
    pub run_dir: Option<PathBuf>,
}

pub fn log_row(step: u64, epoch: usize, r: &LossReport) -> String {
    format!(
        "{step},{epoch},{},{},{},{},{},{},{},{},{},{},{}",
        r.total, r.supervised, r.unsupervised, r.adversarial, r.adversarial_critic, r.transformer, r.dice, r.ce, r.l1, r.kl, r.mi
    )
}

/// Trains every network on the training pool of `split`, selecting the
/// averaged weights with the lowest validation segmentation loss. With
/// `run_dir`, writes `config.txt`, `split.json`, `log.csv`, `best/` and `last/`.
pub fn train(
    subjects: &[CineSequence],
    split: &DatasetSplit,
    cfg: &TrainingConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate()?;
    let first = subjects
        .first()
        .ok_or_else(|| Error::Data("empty dataset".into()))?;
    let mut net_cfg = cfg.network.clone();
    net_cfg.height = first.height();
    net_cfg.width = first.width();
    if subjects.iter().any(|s| (s.height(), s.width()) != (net_cfg.height, net_cfg.width)) {
        return Err(Error::Data("subjects differ in image size".into()));
    }
    let val_subjects = subjects_in(subjects, &split.validation_subjects);
    let (val_images, val_masks) = labelled_frames::<f32>(&val_subjects)?
        .ok_or_else(|| Error::Config("validation set has no labelled frames".into()))?;
    let par = parallelism(cfg.parallel);
    let w = cfg.weights;
    let (nets, params) = Networks::new::<f32>(net_cfg.clone(), cfg.seed)?;
    let mut state = TrainingState::new(
        params,
        AdamConfig {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
    );
    let mut sampler = BatchSampler::new(subjects, split, cfg.batch_size, cfg.augment)?;
    if sampler.num_labelled() == 0 && w.lambda0 > 0.0 {
        return Err(Error::Data("no labelled training frames".into()));
    }
    let want_unlabelled = w.lambda1 > 0.0 || w.lambda2 > 0.0;
    let want_pairs = w.lambda3 > 0.0;
    let steps_per_epoch = if cfg.steps_per_epoch > 0 {
        cfg.steps_per_epoch
    } else {
        sampler.num_frames().div_ceil(cfg.batch_size)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);

    let mut manifest = Manifest::new(&net_cfg, w, cfg.ema_decay, true);
    let mut best = state.ema.clone();
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut stopped_early = false;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("split.json");
        let text = serde_json::to_string_pretty(split).map_err(|e| Error::json(&p, e))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    log::info!(
        "training on {} frames ({} labelled), {steps_per_epoch} steps per epoch",
        sampler.num_frames(),
        sampler.num_labelled()
    );

    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        let mut sum_total = 0.0;
        for s in 0..steps_per_epoch {
            let e = epoch as f64 + s as f64 / steps_per_epoch as f64;
            let ramp = if cfg.adv_warmup_epochs > 0.0 { (e / cfg.adv_warmup_epochs).min(1.0) } else { 1.0 };
            let settings = StepSettings {
                weights: LossWeights { lambda2: w.lambda2 * ramp, ..w },
                lr: triangular_lr(e, cfg.lr_max, cfg.lr_min, cfg.lr_period_epochs),
                ema_decay: cfg.ema_decay,
                parallelism: par,
            };
            let batches = sampler.sample::<f32, _>(&mut rng, true, want_unlabelled, want_pairs)?;
            let report = train_step(&nets, &mut state, &batches, &settings, &mut rng)?;
            if !report.total.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at step {}", state.step)));
            }
            sum_total += report.total;
            log.push((state.step, epoch, report));
        }
        let val_loss = segmentation_loss(&nets, &state.ema, &val_images, &val_masks, w.ce_weight, par)?;
        let improved = val_loss < state.best_val_loss;
        if improved {
            state.best_val_loss = val_loss;
            state.evals_without_improvement = 0;
            best = state.ema.clone();
            manifest.step = state.step;
            manifest.epoch = epoch;
        } else {
            state.evals_without_improvement += 1;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.4}, validation loss {val_loss:.4}{}",
            sum_total / steps_per_epoch as f64,
            if improved { " (best)" } else { "" }
        );
        history.push(EpochSummary {
            epoch,
            val_loss,
            improved,
            mean_total: sum_total / steps_per_epoch as f64,
        });
        if state.evals_without_improvement >= cfg.patience_evals {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    if let Some(dir) = run_dir {
        let mut csv = String::from(LOG_HEADER);
        csv.push('\n');
        for (step, epoch, r) in &log {
            let _ = writeln!(csv, "{}", log_row(*step, *epoch, r));
        }
        let p = dir.join("log.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        save_weights(&dir.join("best"), &manifest, &best)?;
        save_checkpoint(&dir.join("last"), &manifest, &state)?;
    }
    Ok(TrainOutcome {
        bundle: NetworkBundle {
            nets,
            params: best,
        },
        manifest,
        state,
        history,
        log,
        stopped_early,
        run_dir: run_dir.map(Path::to_path_buf),
    })
}
