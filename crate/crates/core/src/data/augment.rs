use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, LabelMap, PhasePair};
use crate::{Error, Result};

/// Sampling ranges for random similarity transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Rotations are drawn from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Shifts are drawn from `[-max, max]` times the image height/width.
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translation: 0.1,
            min_scale: 0.9,
            max_scale: 1.1,
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            max_translation: 0.0,
            min_scale: 1.0,
            max_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.max_rotation_deg, self.max_translation, self.min_scale, self.max_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.max_rotation_deg < 0.0 || self.max_translation < 0.0 {
            return Err(Error::Parameter(format!("invalid augmentation ranges {self:?}")));
        }
        if self.max_translation >= 1.0 {
            return Err(Error::Parameter(
                "translations of a full image size or more leave an empty field of view".into(),
            ));
        }
        if self.min_scale <= 0.0 || self.max_scale < self.min_scale {
            return Err(Error::Parameter(format!(
                "scale range [{}, {}] must be positive and ordered",
                self.min_scale, self.max_scale
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineTransform {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(rng, self.max_rotation_deg);
        let shift_y = sym(rng, self.max_translation);
        let shift_x = sym(rng, self.max_translation);
        let scale = if self.max_scale > self.min_scale {
            rng.random_range(self.min_scale..=self.max_scale)
        } else {
            self.min_scale
        };
        AffineTransform {
            rotation_deg,
            shift_y,
            shift_x,
            scale,
        }
    }
}

/// Similarity transform about the image centre. Shifts are fractions of the
/// image height/width. Rotation maps row/column offsets `(dr, dc)` to
/// `(cos*dr - sin*dc, sin*dr + cos*dc)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub scale: f64,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_y: 0.0,
            shift_x: 0.0,
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Source coordinate sampled by output pixel `(r, c)`.
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let dr = r as f64 - cy - self.shift_y * h as f64;
        let dc = c as f64 - cx - self.shift_x * w as f64;
        let (s, co) = self.rotation_deg.to_radians().sin_cos();
        // inverse rotation, then inverse scale
        let sr = (co * dr + s * dc) / self.scale;
        let sc = (-s * dr + co * dc) / self.scale;
        (sr + cy, sc + cx)
    }

    /// Bilinear resampling; samples outside the image take the frame minimum.
    pub fn apply_frame(&self, f: &Frame) -> Frame {
        if self.is_identity() {
            return f.clone();
        }
        let fill = f.data.iter().copied().fold(f32::INFINITY, f32::min);
        let (h, w) = (f.height, f.width);
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                fill as f64
            } else {
                f.data[y as usize * w + x as usize] as f64
            }
        };
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (y, x) = self.source(r, c, h, w);
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1) * (1.0 - fy) * fx
                    + at(y0 + 1, x0) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1) * fy * fx;
                out.push(v as f32);
            }
        }
        Frame {
            height: h,
            width: w,
            data: out,
        }
    }

    /// Nearest-neighbour resampling; samples outside the image are background.
    pub fn apply_labels(&self, l: &LabelMap) -> LabelMap {
        if self.is_identity() {
            return l.clone();
        }
        let (h, w) = (l.height, l.width);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (y, x) = self.source(r, c, h, w);
                let (y, x) = (y.round(), x.round());
                let v = if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                    0
                } else {
                    l.data[y as usize * w + x as usize]
                };
                out.push(v);
            }
        }
        LabelMap {
            height: h,
            width: w,
            data: out,
        }
    }
}

/// Applies one random transform identically to both frames of a pair and to
/// their label maps, when given.
pub fn augment_pair(
    pair: &PhasePair,
    labels: Option<(&LabelMap, &LabelMap)>,
    rng_seed: u64,
    ranges: &AugmentRanges,
) -> Result<(PhasePair, Option<(LabelMap, LabelMap)>)> {
    ranges.validate()?;
    let (h, w) = (pair.source_frame.height, pair.source_frame.width);
    if (pair.target_frame.height, pair.target_frame.width) != (h, w) {
        return Err(Error::Precondition("pair frames differ in size".into()));
    }
    if let Some((a, b)) = labels {
        if (a.height, a.width) != (h, w) || (b.height, b.width) != (h, w) {
            return Err(Error::Precondition("labels differ in size from the frames".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tf = ranges.sample(&mut rng);
    let mut out = pair.clone();
    out.source_frame = tf.apply_frame(&pair.source_frame);
    out.target_frame = tf.apply_frame(&pair.target_frame);
    let labels = labels.map(|(a, b)| (tf.apply_labels(a), tf.apply_labels(b)));
    Ok((out, labels))
}
