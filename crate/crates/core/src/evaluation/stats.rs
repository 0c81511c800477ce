use crate::{Error, Result};

/// Largest sample size for which the signed-rank null distribution is enumerated.
pub const EXACT_MAX_N: usize = 12;

/// Ranks `1..=n` with ties receiving their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test. Zero differences are dropped;
/// the null distribution is enumerated over all sign assignments for
/// `n <= 12` and approximated otherwise by a normal with tie and continuity
/// corrections. Returns 1
/// when every difference is zero.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    wilcoxon_with(a, b, |n| n <= EXACT_MAX_N)
}

/// As [`wilcoxon_paired`], always using the normal approximation.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<f64> {
    wilcoxon_with(a, b, |_| false)
}

fn wilcoxon_with(a: &[f64], b: &[f64], exact: impl Fn(usize) -> bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("paired samples must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    let n = d.len();
    if n < 5 {
        return Err(Error::Precondition(format!("need at least 5 nonzero differences, got {n}")));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    if exact(n) {
        // doubled ranks are integers even with ties
        let r2: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = r2.iter().sum();
        let mut counts = vec![0u64; max + 1];
        counts[0] = 1;
        for &r in &r2 {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let stat = (w_plus.min(total - w_plus) * 2.0).round() as usize;
        let tail: u64 = counts[..=stat].iter().sum();
        let p = 2.0 * tail as f64 / (1u64 << n) as f64;
        return Ok(p.min(1.0));
    }
    let mean = total / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    // continuity correction
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok((2.0 * normal_sf(z)).min(1.0))
}

/// Standard normal upper tail.
fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Precondition(format!("spearman needs two equal samples of at least 2, got {} and {}", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("spearman correlation of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
