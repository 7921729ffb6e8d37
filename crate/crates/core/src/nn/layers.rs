//! Forward and backward kernels for the handful of layers a staged residual network needs.
//! Activations are NCHW `f32` tensors.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

pub struct ConvCache {
    cols: Array2<f32>,
    x_dims: [usize; 4],
}

fn out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = out_hw(h, w, k, stride, pad);
    let l = ho * wo;
    let mut cols = Array2::<f32>::zeros((c * k * k, n * l));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let ncols = n * l;
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = ni * l + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = src[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, dims: [usize; 4], k: usize, stride: usize, pad: usize) -> Array4<f32> {
    let [n, c, h, w] = dims;
    let (ho, wo) = out_hw(h, w, k, stride, pad);
    let l = ho * wo;
    let ncols = n * l;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let cs = cols.as_slice().expect("cols are contiguous");
    let out = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let dst = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = ni * l + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[O, N*L]` matrix back to NCHW.
fn unflatten(y: Array2<f32>, n: usize, ho: usize, wo: usize) -> Array4<f32> {
    let o = y.nrows();
    y.into_shape_with_order((o, n, ho, wo))
        .expect("gemm output has O x N*L elements")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

fn flatten(dy: &Array4<f32>) -> Array2<f32> {
    let (n, o, ho, wo) = dy.dim();
    dy.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, n * ho * wo))
        .expect("NCHW tensor reshapes to O x N*L")
}

fn weight_matrix<'a>(w: &'a ArrayView4<f32>) -> ndarray::CowArray<'a, f32, ndarray::Ix2> {
    let (o, c, kh, kw) = w.dim();
    w.to_shape((o, c * kh * kw)).expect("weights reshape to O x C*k*k")
}

/// Square-kernel convolution without bias. Padding is `k / 2`.
pub fn conv2d(x: &ArrayView4<f32>, w: &ArrayView4<f32>, stride: usize) -> (Array4<f32>, ConvCache) {
    let k = w.dim().2;
    let pad = k / 2;
    let (n, _, h, wd) = x.dim();
    let (ho, wo) = out_hw(h, wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let wm = weight_matrix(w);
    let y = unflatten(wm.dot(&cols), n, ho, wo);
    let d = x.dim();
    (y, ConvCache { cols, x_dims: [d.0, d.1, d.2, d.3] })
}

pub fn conv2d_backward(
    dy: &Array4<f32>,
    cache: &ConvCache,
    w: &ArrayView4<f32>,
    stride: usize,
) -> (Array4<f32>, Array4<f32>) {
    let k = w.dim().2;
    let dym = flatten(dy);
    let dw = dym
        .dot(&cache.cols.t())
        .into_shape_with_order(w.dim())
        .expect("weight gradient matches weight shape");
    let wm = weight_matrix(w);
    let dcols = wm.t().dot(&dym);
    let dx = col2im(&dcols, cache.x_dims, k, stride, k / 2);
    (dx, dw)
}

pub struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

pub struct BatchStats {
    pub mean: Array1<f32>,
    /// Unbiased variance, as folded into running moments.
    pub var: Array1<f32>,
}

/// Training-mode batch norm over batch statistics. The caller folds the returned statistics into
/// the running moments.
pub fn batch_norm_train(
    x: &Array4<f32>,
    gamma: &ArrayView1<f32>,
    beta: &ArrayView1<f32>,
) -> (Array4<f32>, BnCache, BatchStats) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f32;
    let mut xhat = Array4::<f32>::zeros(x.dim());
    let mut inv_std = Array1::<f32>::zeros(c);
    let mut y = Array4::<f32>::zeros(x.dim());
    let mut stats = BatchStats { mean: Array1::zeros(c), var: Array1::zeros(c) };
    for ci in 0..c {
        let xc = x.slice(s![.., ci, .., ..]);
        let mean = xc.sum() / m;
        let var = xc.fold(0.0f32, |a, &v| a + (v - mean) * (v - mean)) / m;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ci] = is;
        let (g, b) = (gamma[ci], beta[ci]);
        ndarray::Zip::from(xhat.slice_mut(s![.., ci, .., ..]))
            .and(y.slice_mut(s![.., ci, .., ..]))
            .and(&xc)
            .for_each(|xh, yy, &v| {
                *xh = (v - mean) * is;
                *yy = g * *xh + b;
            });
        stats.mean[ci] = mean;
        stats.var[ci] = if m > 1.0 { var * m / (m - 1.0) } else { var };
    }
    (y, BnCache { xhat, inv_std }, stats)
}

pub fn fold_running(running: &mut ndarray::ArrayViewMut1<f32>, batch: &Array1<f32>) {
    running.zip_mut_with(batch, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
}

pub fn batch_norm_eval(
    x: &Array4<f32>,
    gamma: &ArrayView1<f32>,
    beta: &ArrayView1<f32>,
    mean: &ArrayView1<f32>,
    var: &ArrayView1<f32>,
) -> Array4<f32> {
    let mut y = x.clone();
    for (ci, mut yc) in y.axis_iter_mut(Axis(1)).enumerate() {
        let scale = gamma[ci] / (var[ci] + BN_EPS).sqrt();
        let shift = beta[ci] - mean[ci] * scale;
        yc.mapv_inplace(|v| v * scale + shift);
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dy: &Array4<f32>,
    cache: &BnCache,
    gamma: &ArrayView1<f32>,
) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
    let (n, c, h, w) = dy.dim();
    let m = (n * h * w) as f32;
    let mut dx = Array4::<f32>::zeros(dy.dim());
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let dyc = dy.slice(s![.., ci, .., ..]);
        let xh = cache.xhat.slice(s![.., ci, .., ..]);
        let sum_dy = dyc.sum();
        let sum_dy_xh = ndarray::Zip::from(&dyc)
            .and(&xh)
            .fold(0.0f32, |a, &d, &x| a + d * x);
        dgamma[ci] = sum_dy_xh;
        dbeta[ci] = sum_dy;
        let k = gamma[ci] * cache.inv_std[ci] / m;
        ndarray::Zip::from(dx.slice_mut(s![.., ci, .., ..]))
            .and(&dyc)
            .and(&xh)
            .for_each(|o, &d, &x| *o = k * (m * d - sum_dy - x * sum_dy_xh));
    }
    (dx, dgamma, dbeta)
}

pub fn relu(x: Array4<f32>) -> Array4<f32> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(dy: &Array4<f32>, out: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(out)
        .for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
    dx
}

pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    x.to_shape((n, c, h * w))
        .expect("pool reshape")
        .mean_axis(Axis(2))
        .expect("nonempty spatial extent")
}

pub fn global_avg_pool_backward(dp: &Array2<f32>, dims: (usize, usize, usize, usize)) -> Array4<f32> {
    let (n, c, h, w) = dims;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros(dims);
    for ni in 0..n {
        for ci in 0..c {
            dx.slice_mut(s![ni, ci, .., ..]).fill(dp[[ni, ci]] * scale);
        }
    }
    dx
}

/// `x: [N, in]`, `w: [out, in]` -> `[N, out]`.
pub fn linear(x: &Array2<f32>, w: &ArrayView2<f32>, b: &ArrayView1<f32>) -> Array2<f32> {
    x.dot(&w.t()) + b
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(
    dy: &Array2<f32>,
    x: &Array2<f32>,
    w: &ArrayView2<f32>,
) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
    (dy.dot(w), dy.t().dot(x), dy.sum_axis(Axis(0)))
}

/// Matches the channel count of a residual branch by truncating or zero-padding leading channels.
pub fn adjust_channels(x: &Array4<f32>, c_out: usize) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    if c == c_out {
        return x.clone();
    }
    let mut y = Array4::<f32>::zeros((n, c_out, h, w));
    let m = c.min(c_out);
    y.slice_mut(s![.., ..m, .., ..]).assign(&x.slice(s![.., ..m, .., ..]));
    y
}
