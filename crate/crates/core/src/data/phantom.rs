//! Synthetic cine sequences of a contracting left ventricle.
//!
//! Each subject is a body ellipse containing a bright distractor blob and a
//! heart: an LV blood-pool disk whose radius shrinks linearly from ED to ES,
//! a myocardial ring of constant area around it, and an RV crescent pressed
//! against the ring. Appearance (structure levels, gain, bias field, noise)
//! varies per subject; labels follow analytically from the geometry.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sdtnet_tensor::Parallelism;

use super::{check_size_multiple_of_16, normalize_volume, CineSequence, Frame, LabelMap};
use crate::{Error, Result};

/// Ranges of per-subject shape and appearance parameters. Lengths are
/// fractions of the smaller image side.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub lv_radius: (f64, f64),
    pub contraction: (f64, f64),
    pub myo_thickness: (f64, f64),
    pub rv_radius: (f64, f64),
    pub center_jitter: f64,
    pub noise_std: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            lv_radius: (0.12, 0.17),
            contraction: (0.3, 0.45),
            myo_thickness: (0.045, 0.07),
            rv_radius: (0.13, 0.18),
            center_jitter: 0.06,
            noise_std: 0.05,
        }
    }
}

/// Geometry of one phantom subject in pixel units (row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectGeometry {
    pub center: (f64, f64),
    pub lv_radius_ed: f64,
    pub contraction: f64,
    /// `R^2 - r^2` of the myocardial ring, constant over the cycle.
    pub ring_area_term: f64,
    pub rv_radius_ed: f64,
    /// Unit direction from the LV centre towards the RV.
    pub rv_direction: (f64, f64),
    pub n_frames: usize,
}

impl SubjectGeometry {
    fn phase(&self, k: usize) -> f64 {
        k as f64 / (self.n_frames - 1) as f64
    }

    pub fn lv_radius(&self, k: usize) -> f64 {
        self.lv_radius_ed * (1.0 - self.contraction * self.phase(k))
    }

    pub fn epi_radius(&self, k: usize) -> f64 {
        (self.lv_radius(k).powi(2) + self.ring_area_term).sqrt()
    }

    pub fn rv_radius(&self, k: usize) -> f64 {
        self.rv_radius_ed * (1.0 - 0.5 * self.contraction * self.phase(k))
    }

    pub fn rv_center(&self, k: usize) -> (f64, f64) {
        let d = self.epi_radius(k) + 0.35 * self.rv_radius(k);
        (
            self.center.0 + d * self.rv_direction.0,
            self.center.1 + d * self.rv_direction.1,
        )
    }

    /// Analytic label of the pixel centred at `(r, c)` in frame `k`.
    pub fn label_at(&self, k: usize, r: f64, c: f64) -> u8 {
        let d2 = (r - self.center.0).powi(2) + (c - self.center.1).powi(2);
        if d2 < self.lv_radius(k).powi(2) {
            return 1;
        }
        if d2 < self.epi_radius(k).powi(2) {
            return 2;
        }
        let rc = self.rv_center(k);
        if (r - rc.0).powi(2) + (c - rc.1).powi(2) < self.rv_radius(k).powi(2) {
            return 3;
        }
        0
    }
}

struct Appearance {
    background: f64,
    body: f64,
    lv: f64,
    myo: f64,
    rv: f64,
    blob: f64,
    gain: f64,
    bias: (f64, f64),
    body_axes: (f64, f64),
    blob_disk: Option<(f64, f64, f64)>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sample_subject<R: Rng + ?Sized>(
    p: &PhantomParams,
    n_frames: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(SubjectGeometry, Appearance)> {
    let size = h.min(w) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let jitter = p.center_jitter * size;
    let inside = |y: f64, x: f64, rad: f64| {
        y - rad >= 0.0 && x - rad >= 0.0 && y + rad <= h as f64 - 1.0 && x + rad <= w as f64 - 1.0
    };
    // rejection sampling: hearts that leave the field of view are redrawn
    let mut fitted = None;
    for _ in 0..100 {
        let center = (
            cy + uniform(rng, (-jitter, jitter)),
            cx + uniform(rng, (-jitter, jitter)),
        );
        let r0 = uniform(rng, p.lv_radius) * size;
        let thickness = uniform(rng, p.myo_thickness) * size;
        let epi0 = r0 + thickness;
        // RV sits to the image left of the LV, give or take 30 degrees
        let angle = std::f64::consts::PI + uniform(rng, (-0.5, 0.5));
        let geom = SubjectGeometry {
            center,
            lv_radius_ed: r0,
            contraction: uniform(rng, p.contraction),
            ring_area_term: epi0 * epi0 - r0 * r0,
            rv_radius_ed: uniform(rng, p.rv_radius) * size,
            rv_direction: (angle.sin(), angle.cos()),
            n_frames,
        };
        let rvc = geom.rv_center(0);
        if inside(center.0, center.1, epi0) && inside(rvc.0, rvc.1, geom.rv_radius_ed) {
            fitted = Some((geom, epi0));
            break;
        }
    }
    let (geom, epi0) = fitted.ok_or_else(|| {
        Error::Parameter(format!("phantom heart does not fit a {h}x{w} image with the given parameters"))
    })?;
    let center = geom.center;

    let body_axes = (0.44 * h as f64, 0.47 * w as f64);
    // a bright blob inside the body, clear of the heart
    let mut blob_disk = None;
    let heart_extent = epi0 + 2.0 * geom.rv_radius_ed;
    for _ in 0..64 {
        let rad = uniform(rng, (0.05, 0.08)) * size;
        let y = uniform(rng, (cy - 0.3 * h as f64, cy + 0.3 * h as f64));
        let x = uniform(rng, (cx - 0.3 * w as f64, cx + 0.3 * w as f64));
        let d = ((y - center.0).powi(2) + (x - center.1).powi(2)).sqrt();
        let in_body = ((y - cy) / (body_axes.0 - rad)).powi(2) + ((x - cx) / (body_axes.1 - rad)).powi(2) < 1.0;
        if d > heart_extent + rad + 1.0 && in_body {
            blob_disk = Some((y, x, rad));
            break;
        }
    }

    let app = Appearance {
        background: uniform(rng, (0.0, 0.1)),
        body: uniform(rng, (0.35, 0.55)),
        lv: uniform(rng, (0.75, 1.0)),
        myo: uniform(rng, (0.12, 0.3)),
        rv: uniform(rng, (0.6, 0.95)),
        blob: uniform(rng, (0.65, 1.0)),
        gain: uniform(rng, (0.5, 2.0)),
        bias: (uniform(rng, (-0.15, 0.15)), uniform(rng, (-0.15, 0.15))),
        body_axes,
        blob_disk,
    };
    Ok((geom, app))
}

fn render_frame<R: Rng + ?Sized>(
    geom: &SubjectGeometry,
    app: &Appearance,
    k: usize,
    h: usize,
    w: usize,
    noise_std: f64,
    rng: &mut R,
) -> (Vec<f32>, Vec<u8>) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut img = Vec::with_capacity(h * w);
    let mut lab = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64, c as f64);
            let label = geom.label_at(k, y, x);
            let base = match label {
                1 => app.lv,
                2 => app.myo,
                3 => app.rv,
                _ => {
                    let in_blob = app
                        .blob_disk
                        .is_some_and(|(by, bx, br)| (y - by).powi(2) + (x - bx).powi(2) < br * br);
                    let in_body = ((y - cy) / app.body_axes.0).powi(2) + ((x - cx) / app.body_axes.1).powi(2) < 1.0;
                    if in_blob {
                        app.blob
                    } else if in_body {
                        app.body
                    } else {
                        app.background
                    }
                }
            };
            let field = 1.0 + app.bias.0 * (y - cy) / h as f64 + app.bias.1 * (x - cx) / w as f64;
            let e: f64 = StandardNormal.sample(rng);
            img.push((app.gain * (base * field + noise_std * e)) as f32);
            lab.push(label);
        }
    }
    (img, lab)
}

/// Phantom subjects together with their analytic geometry.
pub fn generate_phantom_with_geometry(
    n_subjects: usize,
    n_frames: usize,
    height: usize,
    width: usize,
    seed: u64,
    params: &PhantomParams,
) -> Result<Vec<(CineSequence, SubjectGeometry)>> {
    if n_frames < 4 {
        return Err(Error::Parameter(format!("need at least 4 frames, got {n_frames}")));
    }
    check_size_multiple_of_16(height, width)?;
    let build = |i: usize| -> Result<(CineSequence, SubjectGeometry)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (geom, app) = sample_subject(params, n_frames, height, width, &mut rng)?;
        let mut raw = Vec::with_capacity(n_frames * height * width);
        let mut labels = BTreeMap::new();
        for k in 0..n_frames {
            let (img, lab) = render_frame(&geom, &app, k, height, width, params.noise_std, &mut rng);
            raw.extend(img);
            labels.insert(k, LabelMap::new(height, width, lab)?);
        }
        let norm = normalize_volume(&raw)?;
        let frames = norm
            .chunks(height * width)
            .map(|c| Frame::new(height, width, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let seq = CineSequence {
            subject_id: format!("phantom_{i:03}"),
            frames,
            ed_index: 0,
            es_index: n_frames - 1,
            labels,
        };
        Ok((seq, geom))
    };
    Parallelism::default()
        .map(n_subjects, build)
        .into_iter()
        .collect()
}

/// Fully labelled phantom cine sequences with ED at frame 0 and ES at the last frame.
pub fn generate_phantom(
    n_subjects: usize,
    n_frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<CineSequence>> {
    Ok(generate_phantom_with_geometry(n_subjects, n_frames, height, width, seed, &PhantomParams::default())?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}
