//! Criteria that need trained models. The nine runs (three variants, three
//! seeds) are trained once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use sdtnet::data::{generate_phantom, partition_subjects, CineSequence};
use sdtnet::evaluation::{evaluate, lv_area_trend, transformer_consistency};
use sdtnet::training::{parallelism, train, TrainingConfig};

use crate::Verdict;

const SEEDS: [u64; 3] = [0, 1, 2];
const SIZE: usize = 64;
const BUDGET_S: f64 = 4.0 * 3600.0;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Variant {
    Supervised,
    NoTransformer,
    Full,
}

struct Run {
    variant: Variant,
    test_dice: f64,
    consistency: Option<f64>,
    /// Fraction of test subjects whose synthesised LV area falls with frame index.
    falling: Option<f64>,
}

struct Study {
    runs: Vec<Run>,
    seconds: f64,
}

pub fn desk_config(seed: u64) -> TrainingConfig {
    let mut cfg = TrainingConfig::desk(SIZE);
    cfg.seed = seed;
    cfg.parallel = false;
    for (k, v) in [
        ("lr_max", "1e-3"),
        ("lr_min", "1e-4"),
        ("steps_per_epoch", "50"),
        ("max_epochs", "30"),
        ("ema_decay", "0.99"),
        ("patience_evals", "30"),
        ("adv_warmup_epochs", "4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn run(subjects: &[CineSequence], variant: Variant, seed: u64) -> Run {
    let ids: Vec<String> = subjects.iter().map(|s| s.subject_id.clone()).collect();
    let split = partition_subjects(&ids, 20, 20, 0.05, seed).unwrap();
    let mut cfg = desk_config(seed);
    match variant {
        Variant::Supervised => {
            cfg.weights.lambda1 = 0.0;
            cfg.weights.lambda2 = 0.0;
            cfg.weights.lambda3 = 0.0;
        }
        Variant::NoTransformer => cfg.weights.lambda3 = 0.0,
        Variant::Full => {}
    }
    let out = train(subjects, &split, &cfg, None).unwrap();
    let (nets, params) = (&out.bundle.nets, &out.bundle.params);
    let par = parallelism(false);
    let report = evaluate(nets, params, subjects, &split.test_subjects, None, par).unwrap();
    let test: Vec<&CineSequence> = subjects.iter().filter(|s| split.test_subjects.contains(&s.subject_id)).collect();
    let (mut consistency, mut falling) = (None, None);
    if variant == Variant::Full {
        consistency = transformer_consistency(nets, params, &test, par).unwrap();
        let ok = test
            .iter()
            .filter(|s| {
                let t = lv_area_trend(nets, params, &s.frames[s.ed_index], 7, par).unwrap();
                t.spearman.is_some_and(|r| r <= -0.8)
            })
            .count();
        falling = Some(ok as f64 / test.len() as f64);
    }
    println!(
        "  {variant:?} seed {seed}: test dice {:.4}, transformer dice {consistency:?}, falling LV {falling:?}",
        report.mean
    );
    Run { variant, test_dice: report.mean, consistency, falling }
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let t0 = Instant::now();
        let subjects = generate_phantom(100, 10, SIZE, SIZE, 1).unwrap();
        let mut runs = Vec::new();
        for seed in SEEDS {
            for v in [Variant::Supervised, Variant::NoTransformer, Variant::Full] {
                runs.push(run(&subjects, v, seed));
            }
        }
        Study { runs, seconds: t0.elapsed().as_secs_f64() }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn values(s: &Study, variant: Variant, f: impl Fn(&Run) -> Option<f64>) -> Vec<f64> {
    s.runs.iter().filter(|r| r.variant == variant).filter_map(f).collect()
}

pub fn criterion_6() -> Verdict {
    let s = study();
    let d = |v| median(values(s, v, |r| Some(r.test_dice)));
    let (sup, sd, full) = (d(Variant::Supervised), d(Variant::NoTransformer), d(Variant::Full));
    let pass = full >= sup + 0.03 && full >= sd + 0.01 && s.seconds <= BUDGET_S;
    Verdict::new(
        pass,
        format!(
            "median test dice over {} seeds: full {full:.4}, no transformer {sd:.4}, supervised {sup:.4}; \
             need +3 and +1 points; {:.0} min CPU",
            SEEDS.len(),
            s.seconds / 60.0
        ),
    )
}

pub fn criterion_7() -> Verdict {
    let v = values(study(), Variant::Full, |r| r.consistency);
    if v.len() != SEEDS.len() {
        return Verdict::new(false, "a run had no nonempty transformer targets");
    }
    let m = median(v.clone());
    Verdict::new(m >= 0.85, format!("median held-out transformer dice {m:.4} (per seed {v:.4?}), need >= 0.85"))
}

pub fn criterion_8() -> Verdict {
    let v = values(study(), Variant::Full, |r| r.falling);
    let m = median(v.clone());
    Verdict::new(
        m >= 0.8,
        format!("median fraction of test subjects with LV area rho <= -0.8: {m:.2} (per seed {v:.2?}), need >= 0.80"),
    )
}
