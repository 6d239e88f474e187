//! Layer primitives on `(batch, channel, height, width)` tensors with their
//! reverse-mode rules.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

pub const BN_EPS: f64 = 1e-5;

/// Output length of a 'same'-padded convolution.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + stride - 1) / stride
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside
/// `[0, w)`.
fn valid_cols(wo: usize, w: usize, stride: usize, kj: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    let hi = ((w + pad).saturating_sub(kj)).div_ceil(stride).min(wo);
    lo..hi.max(lo)
}

/// Unfolds one `(C, H, W)` sample into a `(C·kh·kw, Ho·Wo)` patch matrix with
/// 'same' zero padding.
pub fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut cols = Array2::zeros((c * kh * kw, ho * wo));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ho * wo;
                let oxs = valid_cols(wo, w, stride, kj, pl);
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let base = (ci * h + iy - pt) * w;
                    let out = row + oy * wo;
                    if stride == 1 {
                        let (a, b) = (oxs.start, oxs.end);
                        dst[out + a..out + b].copy_from_slice(&src[base + a + kj - pl..base + b + kj - pl]);
                    } else {
                        for ox in oxs.clone() {
                            dst[out + ox] = src[base + ox * stride + kj - pl];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the image.
pub fn col2im(
    cols: ArrayView2<f64>,
    (c, h, w): (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
) -> Array3<f64> {
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(w, stride));
    let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut img = Array3::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let dst = img.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ho * wo;
                let oxs = valid_cols(wo, w, stride, kj, pl);
                for oy in 0..ho {
                    let iy = oy * stride + ki;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let base = (ci * h + iy - pt) * w;
                    let inp = row + oy * wo;
                    if stride == 1 {
                        let (a, b) = (oxs.start, oxs.end);
                        let d = &mut dst[base + a + kj - pl..base + b + kj - pl];
                        for (o, v) in d.iter_mut().zip(&src[inp + a..inp + b]) {
                            *o += v;
                        }
                    } else {
                        for ox in oxs.clone() {
                            dst[base + ox * stride + kj - pl] += src[inp + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

fn flat_weight(w: &Array4<f64>) -> ArrayView2<'_, f64> {
    let (o, c, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((o, c * kh * kw))
        .expect("weights are contiguous")
}

/// `w`: `(out, in, kh, kw)`.
pub fn conv2d_forward(x: &Array4<f64>, w: &Array4<f64>, b: Option<&Array1<f64>>, stride: usize) -> Array4<f64> {
    let (n, _, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (ho, wo) = (conv_out_len(h, stride), conv_out_len(wd, stride));
    let wf = flat_weight(w);
    let mut y = Array4::zeros((n, o, ho, wo));
    for i in 0..n {
        let cols = im2col(x.index_axis(Axis(0), i), kh, kw, stride);
        let mut out = wf.dot(&cols);
        if let Some(b) = b {
            out += &b.view().insert_axis(Axis(1));
        }
        y.index_axis_mut(Axis(0), i)
            .assign(&out.into_shape_with_order((o, ho, wo)).expect("matching size"));
    }
    y
}

pub struct ConvGrads {
    pub dx: Option<Array4<f64>>,
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

pub fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    stride: usize,
    dy: &Array4<f64>,
    need_dx: bool,
) -> ConvGrads {
    let (n, c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = dy.dim();
    let wf = flat_weight(w);
    let mut dwf = Array2::<f64>::zeros((o, c * kh * kw));
    let mut dx = need_dx.then(|| Array4::zeros((n, c, h, wd)));
    for i in 0..n {
        let cols = im2col(x.index_axis(Axis(0), i), kh, kw, stride);
        let dyi = dy.index_axis(Axis(0), i);
        let dyi = dyi
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, ho * wo))
            .expect("matching size");
        dwf += &dyi.dot(&cols.t());
        if let Some(dx) = dx.as_mut() {
            let dcols = wf.t().dot(&dyi);
            dx.index_axis_mut(Axis(0), i)
                .assign(&col2im(dcols.view(), (c, h, wd), kh, kw, stride));
        }
    }
    let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    ConvGrads {
        dx,
        dw: dwf.into_shape_with_order((o, c, kh, kw)).expect("matching size"),
        db,
    }
}

/// Per-channel normalization statistics used in one forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    /// Batch mean and biased variance; `None` when running statistics were used.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

/// Per-channel sums of `f(x)` over batch and space.
fn channel_sums(dim: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize) -> f64) -> Array1<f64> {
    let (n, c, h, w) = dim;
    let plane = h * w;
    let mut out = Array1::zeros(c);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let mut acc = 0.0;
            for k in base..base + plane {
                acc += f(k, ch);
            }
            out[ch] += acc;
        }
    }
    out
}

/// Applies `f(flat_index, channel)` to every element.
fn map_channels(dim: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize) -> f64) -> Array4<f64> {
    let (n, c, h, w) = dim;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c * plane);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            out.extend((base..base + plane).map(|k| f(k, ch)));
        }
    }
    Array4::from_shape_vec(dim, out).expect("matching size")
}

pub fn batchnorm_forward(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running: Option<(&Array1<f64>, &Array1<f64>)>,
) -> (Array4<f64>, BnCache) {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (n, _, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let (mean, var, batch_stats) = match running {
        Some((mu, v)) => (mu.clone(), v.clone(), None),
        None => {
            let mean = channel_sums(x.dim(), |k, _| xs[k]) / m;
            let var = channel_sums(x.dim(), |k, ch| (xs[k] - mean[ch]).powi(2)) / m;
            (mean.clone(), var.clone(), Some((mean, var)))
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = map_channels(x.dim(), |k, ch| (xs[k] - mean[ch]) * inv_std[ch]);
    let xh = xhat.as_slice().expect("fresh array");
    let y = map_channels(x.dim(), |k, ch| gamma[ch] * xh[k] + beta[ch]);
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Array1<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let dy = dy.as_standard_layout().into_owned();
    let (n, _, h, w) = dy.dim();
    let m = (n * h * w) as f64;
    let d = dy.as_slice().expect("standard layout");
    let xh = cache.xhat.as_slice().expect("standard layout");
    let dbeta = channel_sums(dy.dim(), |k, _| d[k]);
    let dgamma = channel_sums(dy.dim(), |k, _| d[k] * xh[k]);
    let scale = gamma * &cache.inv_std;
    let dx = if cache.batch_stats.is_some() {
        map_channels(dy.dim(), |k, ch| {
            scale[ch] / m * (m * d[k] - dbeta[ch] - xh[k] * dgamma[ch])
        })
    } else {
        map_channels(dy.dim(), |k, ch| d[k] * scale[ch])
    };
    (dx, dgamma, dbeta)
}

pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Returns the pooled tensor and the flat `h·W + w`
/// index of each maximum within its plane.
pub fn maxpool_forward(x: &Array4<f64>, ph: usize, pw: usize) -> (Array4<f64>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / ph, w / pw);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for iy in oy * ph..oy * ph + ph {
                    for ix in ox * pw..ox * pw + pw {
                        let v = plane[iy * w + ix];
                        if v > best {
                            best = v;
                            at = iy * w + ix;
                        }
                    }
                }
                y.push(best);
                idx.push(at);
            }
        }
    }
    (
        Array4::from_shape_vec((n, c, ho, wo), y).expect("matching size"),
        Array4::from_shape_vec((n, c, ho, wo), idx).expect("matching size"),
    )
}

pub fn maxpool_backward(idx: &Array4<usize>, input_dim: (usize, usize, usize, usize), dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let (_, _, ho, wo) = idx.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    let out = dx.as_slice_mut().expect("fresh array");
    let dy = dy.as_standard_layout();
    let g = dy.as_slice().expect("standard layout");
    let at = idx.as_slice().expect("fresh array");
    for p in 0..n * c {
        for k in p * ho * wo..(p + 1) * ho * wo {
            out[p * h * w + at[k]] += g[k];
        }
    }
    dx
}

pub fn gap_forward(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn gap_backward(input_dim: (usize, usize, usize, usize), dy: &Array2<f64>) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let scaled = dy / (h * w) as f64;
    scaled
        .insert_axis(Axis(2))
        .insert_axis(Axis(3))
        .broadcast((n, c, h, w))
        .expect("broadcastable")
        .to_owned()
}

/// `x`: `(batch, in)`, `w`: `(out, in)`.
pub fn dense_forward(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + &b.view().insert_axis(Axis(0))
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(w), dy.t().dot(x), dy.sum_axis(Axis(0)))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against a soft target `y`, computed
/// from the logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
