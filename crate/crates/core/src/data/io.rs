//! On-disk dataset layout:
//!
//! ```text
//! root/<subject_id>/frame_000.png   16-bit grayscale intensities
//! root/<subject_id>/label_000.png   8-bit labels in 0..=3 (labelled frames only)
//! root/<subject_id>/meta.json       {"ed_index": .., "es_index": .., "n_frames": ..}
//! ```
//!
//! Intensities are stored as a per-subject linear rescaling to the full
//! 16-bit range and re-normalised with [`normalize_volume`] when read.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{normalize_volume, CineSequence, Frame, LabelMap};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub ed_index: usize,
    pub es_index: usize,
    pub n_frames: usize,
}

fn frame_name(k: usize) -> String {
    format!("frame_{k:03}.png")
}

fn label_name(k: usize) -> String {
    format!("label_{k:03}.png")
}

pub fn write_subject(root: &Path, seq: &CineSequence) -> Result<()> {
    seq.validate()?;
    let dir = root.join(&seq.subject_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (h, w) = (seq.height() as u32, seq.width() as u32);
    let (lo, hi) = seq
        .frames
        .iter()
        .flat_map(|f| f.data.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    for (k, f) in seq.frames.iter().enumerate() {
        let px: Vec<u16> = f
            .data
            .iter()
            .map(|&v| (((v - lo) as f64 / span) * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w, h, px).expect("buffer matches frame size");
        let path = dir.join(frame_name(k));
        img.save(&path).map_err(|e| Error::image(&path, e))?;
    }
    for (&k, l) in &seq.labels {
        let img = GrayImage::from_raw(w, h, l.data.clone()).expect("buffer matches label size");
        let path = dir.join(label_name(k));
        img.save(&path).map_err(|e| Error::image(&path, e))?;
    }
    let meta = SubjectMeta {
        ed_index: seq.ed_index,
        es_index: seq.es_index,
        n_frames: seq.frames.len(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn write_dataset(root: &Path, subjects: &[CineSequence]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    subjects.iter().try_for_each(|s| write_subject(root, s))
}

/// Reads a grayscale PNG (8- or 16-bit; colour images are converted to luma)
/// as raw intensities.
pub fn read_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    Frame::new(h as usize, w as usize, gray.into_raw().into_iter().map(f32::from).collect())
}

fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    LabelMap::new(h as usize, w as usize, gray.into_raw())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_subject(dir: &Path) -> Result<CineSequence> {
    let subject_id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("bad subject directory {}", dir.display())))?
        .to_string();
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SubjectMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    let mut raw = Vec::new();
    let mut size = None;
    for k in 0..meta.n_frames {
        let f = read_frame_png(&dir.join(frame_name(k)))?;
        if *size.get_or_insert((f.height, f.width)) != (f.height, f.width) {
            return Err(Error::Data(format!("{subject_id}: frame {k} differs in size")));
        }
        raw.extend(f.data);
    }
    let (h, w) = size.ok_or_else(|| Error::Data(format!("{subject_id}: no frames")))?;
    let norm = normalize_volume(&raw)?;
    let frames = norm
        .chunks(h * w)
        .map(|c| Frame::new(h, w, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut labels = BTreeMap::new();
    for k in 0..meta.n_frames {
        let p = dir.join(label_name(k));
        if p.exists() {
            labels.insert(k, read_labels(&p)?);
        }
    }
    let seq = CineSequence {
        subject_id,
        frames,
        ed_index: meta.ed_index,
        es_index: meta.es_index,
        labels,
    };
    seq.validate()?;
    Ok(seq)
}

/// Every subject directory under `root`, in lexicographic order.
pub fn read_dataset(root: &Path) -> Result<Vec<CineSequence>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if e.path().join("meta.json").is_file() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no subjects found under {}", root.display())));
    }
    dirs.iter().map(|d| read_subject(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;

    #[test]
    fn phantom_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = generate_phantom(2, 4, 32, 32, 5).unwrap();
        write_dataset(dir.path(), &subjects).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in subjects.iter().zip(&back) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!((a.ed_index, a.es_index), (b.ed_index, b.es_index));
            assert_eq!(a.labels, b.labels);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                let err = fa.data.iter().zip(&fb.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
                assert!(err < 0.05, "max intensity error {err}");
            }
        }
    }

    #[test]
    fn missing_meta_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data(_))));
        let sub = dir.path().join("x");
        fs::create_dir_all(&sub).unwrap();
        assert!(matches!(read_subject(&sub), Err(Error::Io { .. })));
    }
}
