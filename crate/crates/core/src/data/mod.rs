//! Dataset ingestion, preprocessing, temporal pairing, augmentation and the
//! synthetic contracting-heart phantom.

mod augment;
pub(crate) mod cycle;
mod io;
mod normalize;
mod phantom;
mod split;

use std::collections::BTreeMap;

pub use augment::{augment_pair, AffineTransform, AugmentRanges};
pub use cycle::{sample_phase_pair, split_cardiac_cycle, CycleSplit, PhasePair};
pub use io::{read_dataset, read_frame_png, read_subject, write_dataset, write_subject, SubjectMeta};
pub use normalize::{normalize_volume, percentile};
pub use phantom::{generate_phantom, PhantomParams};
pub use split::{partition_subjects, subsample_labels, DatasetSplit};

use crate::{Error, Result};

/// Number of segmentation classes: background, LV, MYO, RV.
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    LeftVentricle = 1,
    Myocardium = 2,
    RightVentricle = 3,
}

impl Class {
    pub const FOREGROUND: [Class; 3] = [Class::LeftVentricle, Class::Myocardium, Class::RightVentricle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "BG",
            Class::LeftVentricle => "LV",
            Class::Myocardium => "MYO",
            Class::RightVentricle => "RV",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Class::Background, Class::LeftVentricle, Class::Myocardium, Class::RightVentricle]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

/// Single-channel 2D intensity image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "frame {height}x{width} with {} values",
                data.len()
            ))));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }
}

/// Per-pixel class labels in `{0, 1, 2, 3}`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "label map {height}x{width} with {} values",
                data.len()
            ))));
        }
        if let Some(v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label value {v} outside {{0,1,2,3}}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn count(&self, class: Class) -> usize {
        self.data.iter().filter(|&&v| v == class as u8).count()
    }
}

/// A cine acquisition of one subject: ordered frames plus ED/ES instants.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub subject_id: String,
    pub frames: Vec<Frame>,
    pub ed_index: usize,
    pub es_index: usize,
    pub labels: BTreeMap<usize, LabelMap>,
}

impl CineSequence {
    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if !(self.ed_index < self.es_index && self.es_index < n) {
            return Err(Error::Data(format!(
                "{}: need 0 <= ed ({}) < es ({}) < frames ({n})",
                self.subject_id, self.ed_index, self.es_index
            )));
        }
        let (h, w) = (self.height(), self.width());
        if self.frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Data(format!("{}: frames differ in size", self.subject_id)));
        }
        for (&k, l) in &self.labels {
            if k >= n {
                return Err(Error::Data(format!("{}: label for missing frame {k}", self.subject_id)));
            }
            if l.height != h || l.width != w {
                return Err(Error::Data(format!("{}: label {k} differs in size", self.subject_id)));
            }
            if l.data.iter().any(|&v| v as usize >= NUM_CLASSES) {
                return Err(Error::Data(format!("{}: label {k} has values outside 0-3", self.subject_id)));
            }
        }
        Ok(())
    }
}

/// Frame indices of one contraction, ordered from most dilated to end-systole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractionSequence {
    pub source_subject: String,
    pub frame_indices: Vec<usize>,
}

impl ContractionSequence {
    pub fn len(&self) -> usize {
        self.frame_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_indices.is_empty()
    }
}

pub(crate) fn check_size_multiple_of_16(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Parameter(format!(
            "image size {h}x{w} must be a positive multiple of 16"
        )));
    }
    Ok(())
}
