//! Raw numeric kernels over row-major slices. Shapes are validated by callers.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the buffer `a` holds a `k×m` matrix; with `trans_b` the
/// buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if stride == 0 || span_h < k || span_w < k {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (span_h - k) / stride + 1,
            w_out: (span_w - k) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = g.src(oh, ki, g.h);
                    for ow in 0..g.w_out {
                        dst[oh * g.w_out + ow] = match (ih, g.src(ow, kj, g.w)) {
                            (Some(ih), Some(iw)) => x[(c * g.h + ih) * g.w + iw],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let Some(ih) = g.src(oh, ki, g.h) else { continue };
                    for ow in 0..g.w_out {
                        if let Some(iw) = g.src(ow, kj, g.w) {
                            dx[(c * g.h + ih) * g.w + iw] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution of a batch `[n, c_in, h, w]` with `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = c_out * g.out_pixels();
    let mut out = vec![0.0; n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.cols_rows() * g.out_pixels()]
    };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(g.out_pixels()).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(c_out, g.cols_rows(), g.out_pixels(), weight, false, src, false, ob, beta);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw, dbias)`; each is only
/// computed when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    c_out: usize,
    g: &ConvGeom,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.c_in * g.h * g.w;
    let p = g.out_pixels();
    let out_len = c_out * p;
    let mut dx = want_dx.then(|| vec![0.0; n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; c_out * g.cols_rows()]);
    let db = want_db.then(|| {
        let mut db = vec![0.0; c_out];
        for b in 0..n {
            for (co, chunk) in dy[b * out_len..(b + 1) * out_len].chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; g.cols_rows() * p];
    for b in 0..n {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(c_out, p, g.cols_rows(), dyb, false, src, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(g.cols_rows(), c_out, p, weight, true, dyb, false, dxb, 1.0);
            } else {
                // dcols = Wᵀ · dY
                gemm(g.cols_rows(), c_out, p, weight, true, dyb, false, &mut cols, 0.0);
                col2im_add(&cols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution: weight `[c, 1, k, k]`, one filter per channel.
pub(crate) fn depthwise_forward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let c = g.c_in;
    let kk = g.k * g.k;
    let mut out = vec![0.0; n * c * g.out_pixels()];
    for b in 0..n {
        for ch in 0..c {
            let xs = &x[(b * c + ch) * g.h * g.w..(b * c + ch + 1) * g.h * g.w];
            let ws = &weight[ch * kk..(ch + 1) * kk];
            let base = (b * c + ch) * g.out_pixels();
            let b0 = bias.map_or(0.0, |bias| bias[ch]);
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let mut acc = b0;
                    for ki in 0..g.k {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        for kj in 0..g.k {
                            if let Some(iw) = g.src(ow, kj, g.w) {
                                acc += ws[ki * g.k + kj] * xs[ih * g.w + iw];
                            }
                        }
                    }
                    out[base + oh * g.w_out + ow] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    g: &ConvGeom,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = g.c_in;
    let kk = g.k * g.k;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; c * kk]);
    let mut db = want_db.then(|| vec![0.0; c]);
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * g.h * g.w;
            let base = (b * c + ch) * g.out_pixels();
            for oh in 0..g.h_out {
                for ow in 0..g.w_out {
                    let d = dy[base + oh * g.w_out + ow];
                    if let Some(db) = db.as_mut() {
                        db[ch] += d;
                    }
                    for ki in 0..g.k {
                        let Some(ih) = g.src(oh, ki, g.h) else { continue };
                        for kj in 0..g.k {
                            let Some(iw) = g.src(ow, kj, g.w) else { continue };
                            let xi = plane + ih * g.w + iw;
                            if let Some(dw) = dw.as_mut() {
                                dw[ch * kk + ki * g.k + kj] += d * x[xi];
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += d * weight[ch * kk + ki * g.k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// One bilinear source tap: `(low index, high index, weight of high)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Align-corners-false sampling positions for resizing `src` to `dst`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    ((i * src) / dst).min(src - 1)
}

/// Visits every `(out_index, in_index, weight)` triple of a resize from
/// `[planes, h, w]` to `[planes, h2, w2]`.
pub(crate) fn for_each_resize_weight(
    planes: usize,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
    bilinear: bool,
    mut f: impl FnMut(usize, usize, f64),
) {
    if bilinear {
        let rows = bilinear_taps(h, h2);
        let cols = bilinear_taps(w, w2);
        for p in 0..planes {
            let ib = p * h * w;
            let ob = p * h2 * w2;
            for (i, r) in rows.iter().enumerate() {
                for (j, c) in cols.iter().enumerate() {
                    let o = ob + i * w2 + j;
                    f(o, ib + r.lo * w + c.lo, (1.0 - r.frac) * (1.0 - c.frac));
                    f(o, ib + r.lo * w + c.hi, (1.0 - r.frac) * c.frac);
                    f(o, ib + r.hi * w + c.lo, r.frac * (1.0 - c.frac));
                    f(o, ib + r.hi * w + c.hi, r.frac * c.frac);
                }
            }
        }
    } else {
        for p in 0..planes {
            for i in 0..h2 {
                let si = nearest_index(i, h, h2);
                for j in 0..w2 {
                    let sj = nearest_index(j, w, w2);
                    f(p * h2 * w2 + i * w2 + j, p * h * w + si * w + sj, 1.0);
                }
            }
        }
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[..] = x[..]` with axes reordered so output axis `i` is input axis
/// `perm[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = shape.len();
    if rank == 0 {
        return (out_shape, x.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&src_strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
