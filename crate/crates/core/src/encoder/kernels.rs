//! Dense numeric kernels for the autoencoder: GEMM, im2col and the
//! per-layer forward/backward passes. All tensors are row-major `f64`
//! slices in NCHW order.

/// `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is `m x k` and
/// `op(B)` is `k x n`, all row-major. `ta`/`tb` select the transpose of the
/// stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose lengths are asserted.
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

/// Geometry of a strided convolution from `(channels, h, w)` to `(ho, wo)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { channels, h, w, k, stride, pad, ho, wo }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let s = (o * self.stride + kk) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < limit).then_some(s as usize)
    }
}

/// `col[(c, ki, kj), (oy, ox)] = input[c, oy*s - p + ki, ox*s - p + kj]`.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * cols;
                let dst = &mut col[row..row + cols];
                for oy in 0..g.ho {
                    match g.source(oy, ki, g.h) {
                        Some(iy) => {
                            for ox in 0..g.wo {
                                dst[oy * g.wo + ox] = match g.source(ox, kj, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => 0.0,
                                };
                            }
                        }
                        None => dst[oy * g.wo..(oy + 1) * g.wo].fill(0.0),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `out`.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], out: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * cols;
                let src = &col[row..row + cols];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution, `weight: [cout, cin, k, k]`, optional `bias: [cout]`.
/// Input `g.channels x g.h x g.w` per sample, output `cout x ho x wo`.
pub(crate) fn conv_forward(
    g: &ConvGeom,
    cout: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    x: &[f64],
    n: usize,
) -> Vec<f64> {
    let (in_len, out_len) = (g.channels * g.h * g.w, cout * g.col_cols());
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let mut y = vec![0.0; n * out_len];
    for s in 0..n {
        im2col(g, &x[s * in_len..(s + 1) * in_len], &mut col);
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        gemm(cout, g.col_rows(), g.col_cols(), weight, false, &col, false, 0.0, ys);
        if let Some(b) = bias {
            add_channel_bias(ys, b);
        }
    }
    y
}

/// Returns `dx`; accumulates into `dw` (and `db` when present).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    cout: usize,
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    n: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let (in_len, out_len) = (g.channels * g.h * g.w, cout * g.col_cols());
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dcol = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dx = vec![0.0; n * in_len];
    for s in 0..n {
        let dys = &dy[s * out_len..(s + 1) * out_len];
        im2col(g, &x[s * in_len..(s + 1) * in_len], &mut col);
        gemm(cout, g.col_cols(), g.col_rows(), dys, false, &col, true, 1.0, dw);
        gemm(g.col_rows(), cout, g.col_cols(), weight, true, dys, false, 0.0, &mut dcol);
        col2im(g, &dcol, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    if let Some(db) = db {
        accumulate_channel_sums(dy, cout, g.col_cols(), db);
    }
    dx
}

/// Transposed convolution, the adjoint of [`conv_forward`] with geometry `g`
/// describing the *output* side: input is `cin x g.ho x g.wo`, output is
/// `g.channels x g.h x g.w`. `weight: [cin, cout, k, k]`.
pub(crate) fn deconv_forward(
    g: &ConvGeom,
    cin: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    x: &[f64],
    n: usize,
) -> Vec<f64> {
    let (in_len, out_len) = (cin * g.col_cols(), g.channels * g.h * g.w);
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let mut y = vec![0.0; n * out_len];
    for s in 0..n {
        gemm(g.col_rows(), cin, g.col_cols(), weight, true, &x[s * in_len..(s + 1) * in_len], false, 0.0, &mut col);
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        col2im(g, &col, ys);
        if let Some(b) = bias {
            add_channel_bias(ys, b);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv_backward(
    g: &ConvGeom,
    cin: usize,
    weight: &[f64],
    x: &[f64],
    dy: &[f64],
    n: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let (in_len, out_len) = (cin * g.col_cols(), g.channels * g.h * g.w);
    let mut dcol = vec![0.0; g.col_rows() * g.col_cols()];
    let mut dx = vec![0.0; n * in_len];
    for s in 0..n {
        im2col(g, &dy[s * out_len..(s + 1) * out_len], &mut dcol);
        let xs = &x[s * in_len..(s + 1) * in_len];
        gemm(cin, g.col_cols(), g.col_rows(), xs, false, &dcol, true, 1.0, dw);
        gemm(cin, g.col_rows(), g.col_cols(), weight, false, &dcol, false, 0.0, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    if let Some(db) = db {
        accumulate_channel_sums(dy, g.channels, g.h * g.w, db);
    }
    dx
}

fn add_channel_bias(y: &mut [f64], bias: &[f64]) {
    let plane = y.len() / bias.len();
    for (chunk, b) in y.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Adds per-channel sums of `dy` (`n x channels x plane`) into `out`.
fn accumulate_channel_sums(dy: &[f64], channels: usize, plane: usize, out: &mut [f64]) {
    for (i, chunk) in dy.chunks_exact(plane).enumerate() {
        out[i % channels] += chunk.iter().sum::<f64>();
    }
}

/// Cached batch-norm quantities needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel batch statistics of one train-mode normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    /// Number of values each channel was reduced over.
    pub count: usize,
}

/// Batch statistics keyed by normalization layer index.
pub type LayerStats = Vec<(usize, BnBatchStats)>;

/// Train-mode batch norm over `n x channels x plane`.
pub(crate) fn bn_forward_train(
    x: &[f64],
    channels: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, BnCache, BnBatchStats) {
    let n = x.len() / (channels * plane);
    let count = n * plane;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        mean[i % channels] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let m = mean[i % channels];
        var[i % channels] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (i, ((xc, hc), yc)) in
        x.chunks_exact(plane).zip(xhat.chunks_exact_mut(plane)).zip(y.chunks_exact_mut(plane)).enumerate()
    {
        let c = i % channels;
        for ((xv, hv), yv) in xc.iter().zip(hc.iter_mut()).zip(yc.iter_mut()) {
            *hv = (xv - mean[c]) * inv_std[c];
            *yv = gamma[c] * *hv + beta[c];
        }
    }
    (y, BnCache { xhat, inv_std }, BnBatchStats { mean, var, count })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward_eval(
    x: &[f64],
    channels: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (i, (xc, yc)) in x.chunks_exact(plane).zip(y.chunks_exact_mut(plane)).enumerate() {
        let c = i % channels;
        let scale = gamma[c] / (running_var[c] + eps).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        for (xv, yv) in xc.iter().zip(yc.iter_mut()) {
            *yv = xv * scale + shift;
        }
    }
    y
}

/// Backward through train-mode batch norm, including the dependence of the
/// batch mean and variance on every input.
pub(crate) fn bn_backward(
    dy: &[f64],
    cache: &BnCache,
    channels: usize,
    plane: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let count = (dy.len() / (channels * plane) * plane) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for (i, (dc, hc)) in dy.chunks_exact(plane).zip(cache.xhat.chunks_exact(plane)).enumerate() {
        let c = i % channels;
        for (d, h) in dc.iter().zip(hc) {
            sum_dy[c] += d;
            sum_dy_xhat[c] += d * h;
        }
    }
    for c in 0..channels {
        dgamma[c] += sum_dy_xhat[c];
        dbeta[c] += sum_dy[c];
    }
    let mut dx = vec![0.0; dy.len()];
    for (i, ((dc, hc), xc)) in
        dy.chunks_exact(plane).zip(cache.xhat.chunks_exact(plane)).zip(dx.chunks_exact_mut(plane)).enumerate()
    {
        let c = i % channels;
        let k = gamma[c] * cache.inv_std[c] / count;
        for ((d, h), out) in dc.iter().zip(hc).zip(xc.iter_mut()) {
            *out = k * (count * d - sum_dy[c] - h * sum_dy_xhat[c]);
        }
    }
    dx
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the activation output was not positive.
pub(crate) fn relu_backward_inplace(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y[n, out] = x[n, in] * W^T + b`, `weight: [out, in]`.
pub(crate) fn linear_forward(
    x: &[f64],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; n * fan_out];
    for row in y.chunks_exact_mut(fan_out) {
        row.copy_from_slice(bias);
    }
    gemm(n, fan_in, fan_out, x, false, weight, true, 1.0, &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    weight: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(fan_out, n, fan_in, dy, true, x, false, 1.0, dw);
    for row in dy.chunks_exact(fan_out) {
        db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
    }
    let mut dx = vec![0.0; n * fan_in];
    gemm(n, fan_out, fan_in, dy, false, weight, false, 0.0, &mut dx);
    dx
}
