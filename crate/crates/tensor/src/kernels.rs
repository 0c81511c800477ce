//! Raw NCHW kernels over slices. The autodiff graph calls these; the benches
//! exercise them directly under both execution policies.

use crate::{Float, Parallelism};

/// Geometry of a batch of images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.item()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (h*w)` column matrix for a
/// stride-1, same-padded `k x k` convolution.
pub fn im2col<F: Float>(x: &[F], c: usize, h: usize, w: usize, k: usize, cols: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // valid output columns satisfy 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(F::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(F::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub fn col2im<F: Float>(cols: &[F], c: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1, same-padded convolution. `weight` is `cout x (cin*k*k)`.
pub fn conv2d_forward<F: Float>(
    par: Parallelism,
    x: &[F],
    dims: Dims,
    weight: &[F],
    bias: Option<&[F]>,
    cout: usize,
    k: usize,
) -> Vec<F> {
    let hw = dims.plane();
    let ckk = dims.c * k * k;
    assert_eq!(weight.len(), cout * ckk, "conv weight size");
    let mut out = vec![F::zero(); dims.n * cout * hw];
    par.for_each_chunk(&mut out, cout * hw, |b, y| {
        let xb = &x[b * dims.item()..(b + 1) * dims.item()];
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        if k == 1 {
            F::gemm(cout, ckk, hw, F::one(), weight, ckk as isize, 1, xb, hw as isize, 1, beta, y, hw as isize, 1);
        } else {
            let mut cols = vec![F::zero(); ckk * hw];
            im2col(xb, dims.c, dims.h, dims.w, k, &mut cols);
            F::gemm(cout, ckk, hw, F::one(), weight, ckk as isize, 1, &cols, hw as isize, 1, beta, y, hw as isize, 1);
        }
    });
    out
}

pub struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dweight: Vec<F>,
    pub dbias: Vec<F>,
}

/// Backward pass of [`conv2d_forward`] given the output gradient `dy`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Float>(
    par: Parallelism,
    x: &[F],
    dims: Dims,
    weight: &[F],
    cout: usize,
    k: usize,
    dy: &[F],
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<F> {
    let hw = dims.plane();
    let ckk = dims.c * k * k;
    let per_item = par.map(dims.n, |b| {
        let xb = &x[b * dims.item()..(b + 1) * dims.item()];
        let dyb = &dy[b * cout * hw..(b + 1) * cout * hw];
        let mut dw = Vec::new();
        if need_dw {
            let cols_owned;
            let cols: &[F] = if k == 1 {
                xb
            } else {
                let mut c = vec![F::zero(); ckk * hw];
                im2col(xb, dims.c, dims.h, dims.w, k, &mut c);
                cols_owned = c;
                &cols_owned
            };
            dw = vec![F::zero(); cout * ckk];
            // dW = dY * cols^T
            F::gemm(cout, hw, ckk, F::one(), dyb, hw as isize, 1, cols, 1, hw as isize, F::zero(), &mut dw, ckk as isize, 1);
        }
        let db: Vec<F> = (0..cout).map(|o| dyb[o * hw..(o + 1) * hw].iter().copied().sum()).collect();
        let dx = need_dx.then(|| {
            let mut dcols = vec![F::zero(); ckk * hw];
            // dcols = W^T * dY
            F::gemm(ckk, cout, hw, F::one(), weight, 1, ckk as isize, dyb, hw as isize, 1, F::zero(), &mut dcols, hw as isize, 1);
            if k == 1 {
                dcols
            } else {
                let mut dxb = vec![F::zero(); dims.item()];
                col2im(&dcols, dims.c, dims.h, dims.w, k, &mut dxb);
                dxb
            }
        });
        (dw, db, dx)
    });
    let mut dweight = if need_dw { vec![F::zero(); cout * ckk] } else { Vec::new() };
    let mut dbias = vec![F::zero(); cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(dims.len()));
    for (dw, db, dxb) in per_item {
        for (a, b) in dweight.iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in dbias.iter_mut().zip(db) {
            *a += b;
        }
        if let (Some(dx), Some(dxb)) = (dx.as_mut(), dxb) {
            dx.extend_from_slice(&dxb);
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// 2x2 max pooling. Returns the pooled values and, for each output, the flat
/// index of the winning input element.
pub fn maxpool2_forward<F: Float>(par: Parallelism, x: &[F], dims: Dims) -> (Vec<F>, Vec<u32>) {
    let (oh, ow) = (dims.h / 2, dims.w / 2);
    let out_item = dims.c * oh * ow;
    let items = par.map(dims.n, |b| {
        let mut vals = Vec::with_capacity(out_item);
        let mut idx = Vec::with_capacity(out_item);
        let base = b * dims.item();
        for ch in 0..dims.c {
            let pbase = base + ch * dims.plane();
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = pbase + 2 * y * dims.w + 2 * xo;
                    let mut best = x[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = pbase + (2 * y + dy) * dims.w + 2 * xo + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                    vals.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
        (vals, idx)
    });
    let mut vals = Vec::with_capacity(dims.n * out_item);
    let mut idx = Vec::with_capacity(dims.n * out_item);
    for (v, i) in items {
        vals.extend(v);
        idx.extend(i);
    }
    (vals, idx)
}

pub fn maxpool2_backward<F: Float>(dy: &[F], idx: &[u32], input_len: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<F: Float>(par: Parallelism, x: &[F], dims: Dims) -> Vec<F> {
    let (oh, ow) = (dims.h * 2, dims.w * 2);
    let mut out = vec![F::zero(); dims.n * dims.c * oh * ow];
    par.for_each_chunk(&mut out, dims.c * oh * ow, |b, o| {
        for ch in 0..dims.c {
            let src = &x[b * dims.item() + ch * dims.plane()..][..dims.plane()];
            let dst = &mut o[ch * oh * ow..(ch + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / 2) * dims.w..(y / 2 + 1) * dims.w];
                for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
    });
    out
}

/// Gradient of [`upsample2_forward`]; `dims` describes the (small) input.
pub fn upsample2_backward<F: Float>(par: Parallelism, dy: &[F], dims: Dims) -> Vec<F> {
    let (oh, ow) = (dims.h * 2, dims.w * 2);
    let mut dx = vec![F::zero(); dims.len()];
    par.for_each_chunk(&mut dx, dims.item(), |b, d| {
        for ch in 0..dims.c {
            let src = &dy[(b * dims.c + ch) * oh * ow..][..oh * ow];
            let dst = &mut d[ch * dims.plane()..(ch + 1) * dims.plane()];
            for y in 0..oh {
                for xo in 0..ow {
                    dst[(y / 2) * dims.w + xo / 2] += src[y * ow + xo];
                }
            }
        }
    });
    dx
}

/// Softmax across the channel axis of an NCHW tensor.
pub fn softmax_channels<F: Float>(x: &[F], dims: Dims) -> Vec<F> {
    let p = dims.plane();
    let mut out = vec![F::zero(); x.len()];
    for b in 0..dims.n {
        let base = b * dims.item();
        for i in 0..p {
            let mut m = F::neg_infinity();
            for k in 0..dims.c {
                m = m.max(x[base + k * p + i]);
            }
            let mut s = F::zero();
            for k in 0..dims.c {
                let e = (x[base + k * p + i] - m).exp();
                out[base + k * p + i] = e;
                s += e;
            }
            for k in 0..dims.c {
                out[base + k * p + i] /= s;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<F: Float>(y: &[F], dy: &[F], dims: Dims) -> Vec<F> {
    let p = dims.plane();
    let mut dx = vec![F::zero(); y.len()];
    for b in 0..dims.n {
        let base = b * dims.item();
        for i in 0..p {
            let mut dot = F::zero();
            for k in 0..dims.c {
                dot += y[base + k * p + i] * dy[base + k * p + i];
            }
            for k in 0..dims.c {
                let j = base + k * p + i;
                dx[j] = y[j] * (dy[j] - dot);
            }
        }
    }
    dx
}

/// Per-pixel one-hot of the channel argmax (ties go to the lowest channel).
pub fn one_hot_argmax<F: Float>(x: &[F], dims: Dims) -> Vec<F> {
    let p = dims.plane();
    let mut out = vec![F::zero(); x.len()];
    for b in 0..dims.n {
        let base = b * dims.item();
        for i in 0..p {
            let mut best = 0;
            for k in 1..dims.c {
                if x[base + k * p + i] > x[base + best * p + i] {
                    best = k;
                }
            }
            out[base + best * p + i] = F::one();
        }
    }
    out
}
