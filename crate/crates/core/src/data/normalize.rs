use crate::{Error, Result};

/// Linear-interpolation percentile (`q` in `[0, 100]`) of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty slice");
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Clips a volume to its 5th-95th percentile range, then centres it on the
/// median and scales by the interquartile range of the clipped values.
pub fn normalize_volume(raw: &[f32]) -> Result<Vec<f32>> {
    if raw.is_empty() {
        return Err(Error::Precondition("cannot normalize an empty volume".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("volume contains non-finite values".into()));
    }
    let mut sorted: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, 5.0);
    let hi = percentile(&sorted, 95.0);
    // clipping is monotone, so the sorted order survives it
    for v in &mut sorted {
        *v = v.clamp(lo, hi);
    }
    let median = percentile(&sorted, 50.0);
    let iqr = percentile(&sorted, 75.0) - percentile(&sorted, 25.0);
    if iqr <= 0.0 {
        return Err(Error::Degenerate(
            "interquartile range is zero (constant volume)".into(),
        ));
    }
    Ok(raw
        .iter()
        .map(|&v| (((v as f64).clamp(lo, hi) - median) / iqr) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(v: &[f32]) -> (f64, f64) {
        let mut s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        s.sort_by(f64::total_cmp);
        (percentile(&s, 50.0), percentile(&s, 75.0) - percentile(&s, 25.0))
    }

    #[test]
    fn ramp_zero_to_hundred() {
        let raw: Vec<f32> = (0..=100).map(|v| v as f32).collect();
        let out = normalize_volume(&raw).unwrap();
        // clip to [5, 95]; median 50, IQR 75 - 25 = 50
        for (i, &o) in out.iter().enumerate() {
            let expected = ((i as f64).clamp(5.0, 95.0) - 50.0) / 50.0;
            assert!((o as f64 - expected).abs() < 1e-7, "{i}: {o} vs {expected}");
        }
        let (m, iqr) = stats(&out);
        assert!(m.abs() < 1e-6 && (iqr - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        assert!(matches!(normalize_volume(&[7.0; 30]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn empty_volume_is_rejected() {
        assert!(matches!(normalize_volume(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn already_normalized_only_loses_its_tails() {
        // v has median 0 (mean of -0.1 and 0.1) and IQR 1.8 (q25 at index 4.75:
        // -1.1 + 0.75*0.2 = -0.95; q75 at 14.25: 0.8 + 0.25*0.2 = 0.85).
        let v = [
            -4.0, -2.5, -1.9, -1.4, -1.1, -0.9, -0.7, -0.45, -0.3, -0.1, 0.1, 0.35, 0.5, 0.6,
            0.8, 1.0, 1.3, 1.8, 2.6, 5.0,
        ];
        let input: Vec<f32> = v.iter().map(|x| (x / 1.8) as f32).collect();
        // p5 at index 0.95: -4 + 0.95*1.5 = -2.575; p95 at 18.05: 2.6 + 0.05*2.4 = 2.72.
        // Only elements 0 and 19 lie outside; quartiles and median are unchanged.
        let mut expected: Vec<f64> = v.iter().map(|x| x / 1.8).collect();
        expected[0] = -2.575 / 1.8;
        expected[19] = 2.72 / 1.8;
        let out = normalize_volume(&input).unwrap();
        for (o, e) in out.iter().zip(&expected) {
            assert!((*o as f64 - e).abs() < 1e-6, "{o} vs {e}");
        }
    }

    #[test]
    fn second_pass_keeps_median_zero_and_unit_iqr() {
        let raw: Vec<f32> = (0..500).map(|i| ((i * 7919) % 613) as f32 * 0.37 + (i % 13) as f32).collect();
        let once = normalize_volume(&raw).unwrap();
        let twice = normalize_volume(&once).unwrap();
        for v in [&once, &twice] {
            let (m, iqr) = stats(v);
            assert!(m.abs() < 1e-6, "median {m}");
            assert!((iqr - 1.0).abs() < 1e-6, "iqr {iqr}");
        }
    }
}
