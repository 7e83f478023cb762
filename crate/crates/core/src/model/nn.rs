//! Dense kernels over row-major slices.

/// `out = W x + b` for `W` of shape `out.len() x x.len()`.
#[inline]
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(cols)).zip(b) {
        *o = bias + dot(row, x);
    }
}

/// `out += W x`.
#[inline]
pub fn affine_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize without reassociation
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Backward pass of `y = W x (+ b)`: `gW += dy x^T`, `gb += dy`,
/// `dx += W^T dy`.
#[inline]
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let cols = x.len();
    for (g_row, &d) in gw.chunks_exact_mut(cols).zip(dy) {
        if d != 0.0 {
            axpy(d, x, g_row);
        }
    }
    if let Some(gb) = gb {
        for (g, d) in gb.iter_mut().zip(dy) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        for (row, &d) in w.chunks_exact(cols).zip(dy) {
            if d != 0.0 {
                axpy(d, row, dx);
            }
        }
    }
}

/// `y += a x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with the max subtracted; writes into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
