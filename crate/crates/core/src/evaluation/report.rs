use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sdtnet_tensor::{Float, Parallelism, ParamStore};
use serde::{Deserialize, Serialize};

use super::{dice_score, label_maps, overlay, wilcoxon_paired};
use crate::data::{CineSequence, Class, LabelMap};
use crate::networks::{image_batch, Networks};
use crate::training::{annotated_phases, predict_masks};
use crate::{Error, Result};

const MEAN: &str = "mean";

/// Dice of one class on one annotated phase of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceRow {
    pub subject: String,
    pub phase: String,
    pub class: Class,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub mean: f64,
    /// Standard deviation over subjects.
    pub std: f64,
}

/// Dice table and its aggregates. Phases are averaged first, then classes,
/// then subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<DiceRow>,
    /// Phase-averaged dice per subject, indexed LV, MYO, RV.
    pub per_subject: BTreeMap<String, [f64; 3]>,
    pub per_class: [ClassSummary; 3],
    pub mean: f64,
    /// Standard deviation of the per-subject means.
    pub std_subjects: f64,
    pub p_values: Option<BTreeMap<String, f64>>,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    n_subjects: usize,
    mean: f64,
    std_subjects: f64,
    classes: BTreeMap<String, ClassSummary>,
    p_values: Option<BTreeMap<String, f64>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvaluationReport {
    pub fn from_rows(rows: Vec<DiceRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no labelled evaluation frames".into()));
        }
        let mut acc: BTreeMap<&str, [(f64, usize); 3]> = BTreeMap::new();
        for r in &rows {
            if !(0.0..=1.0).contains(&r.dice) {
                return Err(Error::Precondition(format!("dice {} outside [0, 1]", r.dice)));
            }
            let k = r.class.index() - 1;
            let e = &mut acc.entry(&r.subject).or_default()[k];
            e.0 += r.dice;
            e.1 += 1;
        }
        let mut per_subject = BTreeMap::new();
        for (s, a) in &acc {
            if a.iter().any(|(_, n)| *n == 0) {
                return Err(Error::Data(format!("subject {s} lacks rows for some class")));
            }
            per_subject.insert(s.to_string(), a.map(|(sum, n)| sum / n as f64));
        }
        let per_class = [0, 1, 2].map(|k| {
            let v: Vec<f64> = per_subject.values().map(|d| d[k]).collect();
            let (mean, std) = mean_std(&v);
            ClassSummary { mean, std }
        });
        let subject_means: Vec<f64> = per_subject.values().map(|d| d.iter().sum::<f64>() / 3.0).collect();
        let (mean, std_subjects) = mean_std(&subject_means);
        Ok(Self {
            rows,
            per_subject,
            per_class,
            mean,
            std_subjects,
            p_values: None,
        })
    }

    /// Phase rows, then per-subject class rows (`phase = mean`), per-subject
    /// rows (`class = mean`) and the overall row (`subject = mean`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,phase,class,dice\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.subject, r.phase, r.class.name(), r.dice);
        }
        for (s, d) in &self.per_subject {
            for (class, v) in Class::FOREGROUND.iter().zip(d) {
                let _ = writeln!(out, "{s},{MEAN},{},{v}", class.name());
            }
        }
        for (s, d) in &self.per_subject {
            let _ = writeln!(out, "{s},{MEAN},{MEAN},{}", d.iter().sum::<f64>() / 3.0);
        }
        let _ = writeln!(out, "{MEAN},{MEAN},{MEAN},{}", self.mean);
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let summary = Summary {
            n_subjects: self.per_subject.len(),
            mean: self.mean,
            std_subjects: self.std_subjects,
            classes: Class::FOREGROUND
                .iter()
                .zip(&self.per_class)
                .map(|(c, s)| (c.name().to_string(), s.clone()))
                .collect(),
            p_values: self.p_values.clone(),
        };
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Parses `metrics.csv` back into a report; aggregate rows must agree with
/// the phase rows.
pub fn read_metrics_csv(text: &str) -> Result<EvaluationReport> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("subject,phase,class,dice") {
        return Err(Error::Data("metrics.csv header mismatch".into()));
    }
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("metrics.csv line {}: {line:?}", i + 2));
        if f.len() != 4 {
            return Err(bad());
        }
        let dice: f64 = f[3].parse().map_err(|_| bad())?;
        if f[1] == MEAN {
            aggregates.push((f[0].to_string(), f[2].to_string(), dice));
            continue;
        }
        rows.push(DiceRow {
            subject: f[0].to_string(),
            phase: f[1].to_string(),
            class: Class::from_name(f[2]).filter(|c| *c != Class::Background).ok_or_else(bad)?,
            dice,
        });
    }
    let report = EvaluationReport::from_rows(rows)?;
    for (subject, class, v) in aggregates {
        let expected = match (subject.as_str(), class.as_str()) {
            (MEAN, _) => Some(report.mean),
            (s, MEAN) => report.per_subject.get(s).map(|d| d.iter().sum::<f64>() / 3.0),
            (s, c) => Class::from_name(c)
                .filter(|c| *c != Class::Background)
                .and_then(|c| report.per_subject.get(s).map(|d| d[c.index() - 1])),
        };
        if expected != Some(v) {
            return Err(Error::Data(format!("aggregate row {subject},{class} = {v} disagrees with phase rows")));
        }
    }
    Ok(report)
}

/// Dice rows for predicted label maps, keyed by `(subject, phase)`.
pub fn score_predictions(
    subjects: &[&CineSequence],
    mut predict: impl FnMut(&CineSequence, usize) -> Result<LabelMap>,
) -> Result<EvaluationReport> {
    let mut rows = Vec::new();
    for s in subjects {
        for (phase, k) in annotated_phases(s) {
            let pred = predict(s, k)?;
            let d = dice_score(&pred, &s.labels[&k])?;
            for (class, dice) in Class::FOREGROUND.into_iter().zip(d) {
                rows.push(DiceRow {
                    subject: s.subject_id.clone(),
                    phase: phase.to_string(),
                    class,
                    dice,
                });
            }
        }
    }
    EvaluationReport::from_rows(rows)
}

/// Segments every annotated ED/ES frame of the selected subjects and scores
/// it. With `out_dir`, writes `metrics.csv`, `summary.json` and overlay PNGs.
pub fn evaluate<F: Float>(
    nets: &Networks,
    params: &ParamStore<F>,
    subjects: &[CineSequence],
    ids: &BTreeSet<String>,
    out_dir: Option<&Path>,
    par: Parallelism,
) -> Result<EvaluationReport> {
    let chosen: Vec<&CineSequence> = subjects.iter().filter(|s| ids.contains(&s.subject_id)).collect();
    let mut predictions: BTreeMap<(String, usize), LabelMap> = BTreeMap::new();
    for s in &chosen {
        let phases = annotated_phases(s);
        if phases.is_empty() {
            continue;
        }
        let frames: Vec<_> = phases.iter().map(|(_, k)| &s.frames[*k]).collect();
        let probs = predict_masks(nets, params, &image_batch(&frames)?, par)?;
        for ((_, k), map) in phases.iter().zip(label_maps(&probs)?) {
            predictions.insert((s.subject_id.clone(), *k), map);
        }
    }
    let report = score_predictions(&chosen, |s, k| {
        Ok(predictions[&(s.subject_id.clone(), k)].clone())
    })?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
        let od = dir.join("overlays");
        fs::create_dir_all(&od).map_err(|e| Error::io(&od, e))?;
        for s in &chosen {
            for (phase, k) in annotated_phases(s) {
                let img = overlay(&s.frames[k], &predictions[&(s.subject_id.clone(), k)])?;
                let p = od.join(format!("{}_{phase}.png", s.subject_id));
                img.save(&p).map_err(|e| Error::image(&p, e))?;
            }
        }
    }
    Ok(report)
}

/// Paired per-class and overall Wilcoxon p-values over subjects common to
/// both reports. Entries with fewer than 5 nonzero differences are left out.
pub fn compare_reports(a: &EvaluationReport, b: &EvaluationReport) -> BTreeMap<String, f64> {
    let common: Vec<&String> = a.per_subject.keys().filter(|s| b.per_subject.contains_key(*s)).collect();
    let score = |r: &EvaluationReport, s: &str, k: Option<usize>| {
        let d = r.per_subject[s];
        k.map_or(d.iter().sum::<f64>() / 3.0, |k| d[k])
    };
    let mut out = BTreeMap::new();
    let names = Class::FOREGROUND.iter().map(|c| c.name()).chain([MEAN]);
    for (k, name) in names.enumerate() {
        let k = (k < 3).then_some(k);
        let x: Vec<f64> = common.iter().map(|s| score(a, s, k)).collect();
        let y: Vec<f64> = common.iter().map(|s| score(b, s, k)).collect();
        match wilcoxon_paired(&x, &y) {
            Ok(p) => {
                out.insert(name.to_string(), p);
            }
            Err(e) => log::warn!("no {name} comparison: {e}"),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;

    fn row(s: &str, p: &str, c: Class, d: f64) -> DiceRow {
        DiceRow {
            subject: s.into(),
            phase: p.into(),
            class: c,
            dice: d,
        }
    }

    fn sample() -> EvaluationReport {
        let mut rows = Vec::new();
        for (i, s) in ["a", "b"].iter().enumerate() {
            for p in ["ED", "ES"] {
                for (k, c) in Class::FOREGROUND.into_iter().enumerate() {
                    rows.push(row(s, p, c, 0.1 * (i + k) as f64 + if p == "ED" { 0.05 } else { 0.3 }));
                }
            }
        }
        EvaluationReport::from_rows(rows).unwrap()
    }

    #[test]
    fn aggregation_order() {
        let r = sample();
        // subject a: classes (0.175, 0.275, 0.375) -> 0.275; b: 0.375
        assert!((r.per_subject["a"][0] - 0.175).abs() < 1e-12);
        assert!((r.mean - 0.325).abs() < 1e-12);
        assert!((r.std_subjects - 0.05).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let back = read_metrics_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        let last = csv.lines().last().unwrap();
        let tampered = csv.replace(last, "mean,mean,mean,0.4");
        assert!(read_metrics_csv(&tampered).is_err());
    }

    #[test]
    fn oracle_predictions_score_one() {
        let subjects = generate_phantom(3, 6, 32, 32, 4).unwrap();
        let refs: Vec<&CineSequence> = subjects.iter().collect();
        let r = score_predictions(&refs, |s, k| Ok(s.labels[&k].clone())).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_subject.len(), 3);
        let subject_class_rows = r.to_csv().lines().filter(|l| l.split(',').nth(1) == Some(MEAN) && !l.ends_with(",mean,mean,1") && !l.starts_with("mean")).count();
        assert_eq!(subject_class_rows, 3 * 3);
    }

    #[test]
    fn no_labelled_frames_is_an_error() {
        assert!(score_predictions(&[], |s, k| Ok(s.labels[&k].clone())).is_err());
    }

    #[test]
    fn comparison_of_clearly_better_model() {
        let mk = |bias: f64| {
            let rows = (0..8)
                .flat_map(|i| {
                    Class::FOREGROUND.into_iter().map(move |c| row(&format!("s{i}"), "ED", c, 0.5 + 0.01 * i as f64 + bias))
                })
                .collect();
            EvaluationReport::from_rows(rows).unwrap()
        };
        let p = compare_reports(&mk(0.2), &mk(0.0));
        assert!((p["LV"] - 2.0 / 256.0).abs() < 1e-12);
    }
}
