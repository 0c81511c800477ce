use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CineSequence, ContractionSequence, Frame};
use crate::{Error, Result};

/// Output of [`split_cardiac_cycle`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleSplit {
    /// ED..=ES in acquisition order.
    pub systole: ContractionSequence,
    /// Last frame down to ES (reversed), when it has at least two frames.
    pub reversed_diastole: Option<ContractionSequence>,
    /// Set when the reversed half was dropped for being shorter than two frames.
    pub dropped_second_half: bool,
}

impl CycleSplit {
    pub fn halves(&self) -> impl Iterator<Item = &ContractionSequence> {
        std::iter::once(&self.systole).chain(self.reversed_diastole.as_ref())
    }
}

/// Splits a cine sequence into two contractions that both end at ES: the
/// ED-to-ES frames, and the frames after ES taken in reverse order.
pub fn split_cardiac_cycle(seq: &CineSequence) -> Result<CycleSplit> {
    seq.validate()?;
    let n = seq.frames.len();
    let systole = ContractionSequence {
        source_subject: seq.subject_id.clone(),
        frame_indices: (seq.ed_index..=seq.es_index).collect(),
    };
    let second: Vec<usize> = (seq.es_index..n).rev().collect();
    let dropped = second.len() < 2;
    if dropped {
        log::warn!(
            "{}: ES is the last frame, dropping the reversed half",
            seq.subject_id
        );
    }
    Ok(CycleSplit {
        systole,
        reversed_diastole: (!dropped).then(|| ContractionSequence {
            source_subject: seq.subject_id.clone(),
            frame_indices: second,
        }),
        dropped_second_half: dropped,
    })
}

/// Two frames of one contraction with their normalised temporal positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePair {
    pub subject_id: String,
    /// Position of the source frame in `[0, 1]`.
    pub t: f64,
    /// Forward offset in `(0, 1]`, with `t + dt <= 1`.
    pub dt: f64,
    /// Frame indices into the parent sequence.
    pub source_index: usize,
    pub target_index: usize,
    pub source_frame: Frame,
    pub target_frame: Frame,
}

/// Draws positions `i < j` of a contraction uniformly over all pairs.
/// Returns `(i, j)`.
pub fn sample_positions<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::Precondition(format!(
            "a contraction needs at least 2 frames to form a pair, got {len}"
        )));
    }
    let pairs = len * (len - 1) / 2;
    let mut k = rng.random_range(0..pairs);
    for i in 0..len - 1 {
        let row = len - 1 - i;
        if k < row {
            return Ok((i, i + 1 + k));
        }
        k -= row;
    }
    unreachable!("pair index within range")
}

/// Normalised `(t, dt)` for positions `i < j` of a contraction of length `len`.
pub fn phase_scalars(i: usize, j: usize, len: usize) -> (f64, f64) {
    let span = (len - 1) as f64;
    (i as f64 / span, (j - i) as f64 / span)
}

/// Samples a `(source, target)` pair from one contraction of `seq`.
pub fn sample_phase_pair(
    seq: &CineSequence,
    half: &ContractionSequence,
    rng_seed: u64,
) -> Result<PhasePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_phase_pair_with(seq, half, &mut rng)
}

pub(crate) fn sample_phase_pair_with<R: Rng + ?Sized>(
    seq: &CineSequence,
    half: &ContractionSequence,
    rng: &mut R,
) -> Result<PhasePair> {
    if half.source_subject != seq.subject_id {
        return Err(Error::Precondition(format!(
            "contraction of {} paired with sequence {}",
            half.source_subject, seq.subject_id
        )));
    }
    let (i, j) = sample_positions(half.len(), rng)?;
    let (t, dt) = phase_scalars(i, j, half.len());
    let (si, ti) = (half.frame_indices[i], half.frame_indices[j]);
    let frame = |k: usize| {
        seq.frames
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("{}: frame {k} missing", seq.subject_id)))
    };
    Ok(PhasePair {
        subject_id: seq.subject_id.clone(),
        t,
        dt,
        source_index: si,
        target_index: ti,
        source_frame: frame(si)?,
        target_frame: frame(ti)?,
    })
}
