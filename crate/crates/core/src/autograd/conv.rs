//! Convolution operators lowered to matrix products via im2col.

use ndarray::{Array2, Array3, ArrayView2, Axis, IxDyn};

use super::tensor::{matmul2, Array, Tensor};

/// Geometry of a 1-D correlation: output index `o` reads input `o*stride + k - pad_left`.
#[derive(Clone, Copy, Debug)]
struct Geom1 {
    batch: usize,
    channels: usize,
    len_in: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    len_out: usize,
}

/// Gathers `[channels*kernel, batch*len_out]` columns from `[batch, channels, len_in]`.
fn im2col_1d(x: &[f64], g: Geom1) -> Array2<f64> {
    let cols = g.batch * g.len_out;
    let mut out = vec![0.0; g.channels * g.kernel * cols];
    for c in 0..g.channels {
        for k in 0..g.kernel {
            let row = &mut out[(c * g.kernel + k) * cols..(c * g.kernel + k + 1) * cols];
            for b in 0..g.batch {
                let src = &x[(b * g.channels + c) * g.len_in..(b * g.channels + c + 1) * g.len_in];
                let dst = &mut row[b * g.len_out..(b + 1) * g.len_out];
                for (o, d) in dst.iter_mut().enumerate() {
                    let i = (o * g.stride + k) as isize - g.pad_left as isize;
                    if i >= 0 && (i as usize) < g.len_in {
                        *d = src[i as usize];
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.channels * g.kernel, cols), out).unwrap()
}

/// Adjoint of [`im2col_1d`]: scatter-adds columns back into `[batch, channels, len_in]`.
fn col2im_1d(col: ArrayView2<'_, f64>, g: Geom1) -> Vec<f64> {
    let mut x = vec![0.0; g.batch * g.channels * g.len_in];
    let col = col.as_standard_layout();
    let data = col.as_slice().unwrap();
    let cols = g.batch * g.len_out;
    for c in 0..g.channels {
        for k in 0..g.kernel {
            let row = &data[(c * g.kernel + k) * cols..(c * g.kernel + k + 1) * cols];
            for b in 0..g.batch {
                let dst = &mut x[(b * g.channels + c) * g.len_in..(b * g.channels + c + 1) * g.len_in];
                let src = &row[b * g.len_out..(b + 1) * g.len_out];
                for (o, &v) in src.iter().enumerate() {
                    let i = (o * g.stride + k) as isize - g.pad_left as isize;
                    if i >= 0 && (i as usize) < g.len_in {
                        dst[i as usize] += v;
                    }
                }
            }
        }
    }
    x
}

/// `[batch, ch, len]` -> `[ch, batch*len]`
fn to_channel_major(x: &Array, batch: usize, ch: usize, len: usize) -> Array2<f64> {
    let v = x
        .view()
        .into_shape_with_order((batch, ch, len))
        .unwrap()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned();
    v.into_shape_with_order((ch, batch * len)).unwrap()
}

/// `[ch, batch*len]` -> `[batch, ch, len]`
fn from_channel_major(m: Array2<f64>, batch: usize, ch: usize, len: usize) -> Array3<f64> {
    m.into_shape_with_order((ch, batch, len))
        .unwrap()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
}

fn contiguous(a: &Array) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn bias_grad(g: &Array) -> Array {
    // sum over batch and all trailing axes, keep channel axis
    let mut s = g.sum_axis(Axis(0));
    while s.ndim() > 1 {
        let last = s.ndim() - 1;
        s = s.sum_axis(Axis(last));
    }
    s
}

impl Tensor {
    /// 1-D cross-correlation. `self: [batch, in, len]`, `weight: [out, in, kernel]`.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Tensor {
        let (b, cin, t) = dims3(self.shape());
        let (cout, wcin, k) = dims3(weight.shape());
        assert_eq!(cin, wcin, "conv1d channel mismatch: input {cin}, weight {wcin}");
        let padded = t + pad_left + pad_right;
        assert!(padded >= k, "conv1d input shorter than kernel");
        let len_out = (padded - k) / stride + 1;
        let geom = Geom1 {
            batch: b,
            channels: cin,
            len_in: t,
            kernel: k,
            stride,
            pad_left,
            len_out,
        };
        let xs = contiguous(self.value());
        let col = im2col_1d(&xs, geom);
        let w2 = weight
            .value()
            .view()
            .into_shape_with_order((cout, cin * k))
            .unwrap()
            .to_owned();
        let out2 = matmul2(w2.view(), col.view());
        let mut out = from_channel_major(out2, b, cout, len_out);
        if let Some(bias) = bias {
            let bv = bias.to_vec();
            for (co, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
                lane.mapv_inplace(|v| v + bv[co]);
            }
        }
        let col = weight.requires_grad().then_some(col);
        let x = self.clone();
        let w = weight.clone();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(out.into_dyn(), parents, move |g| {
            let g2 = to_channel_major(g, b, cout, len_out);
            let w2 = w
                .value()
                .view()
                .into_shape_with_order((cout, cin * k))
                .unwrap()
                .to_owned();
            let gx = x.requires_grad().then(|| {
                let gcol = matmul2(w2.t(), g2.view());
                let v = col2im_1d(gcol.view(), geom);
                Array::from_shape_vec(IxDyn(&[b, cin, t]), v).unwrap()
            });
            let gw = col.as_ref().map(|col| {
                matmul2(g2.view(), col.t())
                    .into_shape_with_order(IxDyn(&[cout, cin, k]))
                    .unwrap()
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(Some(bias_grad(g)));
            }
            res
        })
    }

    /// Transposed 1-D convolution. `self: [batch, in, len]`, `weight: [in, out, kernel]`.
    ///
    /// Output length is `(len-1)*stride + kernel - pad_left - pad_right`.
    pub fn conv_transpose1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Tensor {
        let (b, cin, t) = dims3(self.shape());
        let (wcin, cout, k) = dims3(weight.shape());
        assert_eq!(cin, wcin, "conv_transpose1d channel mismatch");
        let full = (t - 1) * stride + k;
        assert!(full > pad_left + pad_right, "conv_transpose1d output would be empty");
        let len_out = full - pad_left - pad_right;
        // the adjoint geometry: a correlation over the output with `t` positions
        let geom = Geom1 {
            batch: b,
            channels: cout,
            len_in: len_out,
            kernel: k,
            stride,
            pad_left,
            len_out: t,
        };
        let x2 = to_channel_major(self.value(), b, cin, t);
        let w2 = weight
            .value()
            .view()
            .into_shape_with_order((cin, cout * k))
            .unwrap()
            .to_owned();
        let col = matmul2(w2.t(), x2.view());
        let v = col2im_1d(col.view(), geom);
        let mut out = Array3::from_shape_vec((b, cout, len_out), v).unwrap();
        if let Some(bias) = bias {
            let bv = bias.to_vec();
            for (co, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
                lane.mapv_inplace(|v| v + bv[co]);
            }
        }
        let x = self.clone();
        let w = weight.clone();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(out.into_dyn(), parents, move |g| {
            let gs = contiguous(g);
            let gcol = im2col_1d(&gs, geom);
            let w2 = w
                .value()
                .view()
                .into_shape_with_order((cin, cout * k))
                .unwrap()
                .to_owned();
            let gx = x.requires_grad().then(|| {
                let gx2 = matmul2(w2.view(), gcol.view());
                from_channel_major(gx2, b, cin, t).into_dyn()
            });
            let gw = w.requires_grad().then(|| {
                let x2 = to_channel_major(x.value(), b, cin, t);
                matmul2(x2.view(), gcol.t())
                    .into_shape_with_order(IxDyn(&[cin, cout, k]))
                    .unwrap()
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(Some(bias_grad(g)));
            }
            res
        })
    }

    /// 2-D cross-correlation. `self: [batch, in, h, w]`, `weight: [out, in, kh, kw]`,
    /// symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor {
        let s = self.shape();
        assert_eq!(s.len(), 4, "conv2d expects [batch, channels, h, w]");
        let (b, cin, h, wd) = (s[0], s[1], s[2], s[3]);
        let ws = weight.shape();
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let geom = Geom2 {
            batch: b,
            channels: cin,
            h,
            w: wd,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho: (h + 2 * padding.0 - kh) / stride.0 + 1,
            wo: (wd + 2 * padding.1 - kw) / stride.1 + 1,
        };
        let (ho, wo) = (geom.ho, geom.wo);
        let xs = contiguous(self.value());
        let col = im2col_2d(&xs, geom);
        let w2 = weight
            .value()
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let out2 = matmul2(w2.view(), col.view());
        let mut out = from_channel_major(out2, b, cout, ho * wo)
            .into_shape_with_order(IxDyn(&[b, cout, ho, wo]))
            .unwrap();
        add_bias(&mut out, bias);
        let col = weight.requires_grad().then_some(col);
        let x = self.clone();
        let w = weight.clone();
        let parents = conv_parents(self, weight, bias);
        let has_bias = bias.is_some();
        Tensor::from_op(out, parents, move |g| {
            let g2 = to_channel_major(g, b, cout, ho * wo);
            let w2 = w
                .value()
                .view()
                .into_shape_with_order((cout, cin * kh * kw))
                .unwrap()
                .to_owned();
            let gx = x.requires_grad().then(|| {
                let gcol = matmul2(w2.t(), g2.view());
                let v = col2im_2d(gcol.view(), geom);
                Array::from_shape_vec(IxDyn(&[b, cin, h, wd]), v).unwrap()
            });
            let gw = col.as_ref().map(|col| {
                matmul2(g2.view(), col.t())
                    .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                    .unwrap()
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(Some(bias_grad(g)));
            }
            res
        })
    }
}

fn add_bias(out: &mut Array, bias: Option<&Tensor>) {
    if let Some(bias) = bias {
        let bv = bias.to_vec();
        for (co, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|v| v + bv[co]);
        }
    }
}

fn conv_parents(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Vec<Tensor> {
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    parents
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected a rank-3 shape, got {s:?}");
    (s[0], s[1], s[2])
}

#[derive(Clone, Copy, Debug)]
struct Geom2 {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `ox` whose input index `ox*stride + j - pad` lies in `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, j: usize, pad: usize) -> (usize, usize) {
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let hi = if len + pad > j { ((len + pad - j - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col_2d(x: &[f64], g: Geom2) -> Array2<f64> {
    let plane = g.ho * g.wo;
    let cols = g.batch * plane;
    let rows = g.channels * g.kh * g.kw;
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &mut out[r * cols..(r + 1) * cols];
                let (x0, x1) = valid_range(g.wo, g.w, g.sw, j, g.pw);
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.h * g.w..(b * g.channels + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let y = (oy * g.sh + i) as isize - g.ph as isize;
                        if y < 0 || y as usize >= g.h || x0 >= x1 {
                            continue;
                        }
                        let srow = &src[y as usize * g.w..(y as usize + 1) * g.w];
                        let drow = &mut row[b * plane + oy * g.wo..b * plane + (oy + 1) * g.wo];
                        let start = x0 * g.sw + j - g.pw;
                        if g.sw == 1 {
                            drow[x0..x1].copy_from_slice(&srow[start..start + (x1 - x0)]);
                        } else {
                            for (d, s) in drow[x0..x1].iter_mut().zip(srow[start..].iter().step_by(g.sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).unwrap()
}

fn col2im_2d(col: ArrayView2<'_, f64>, g: Geom2) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let cols = g.batch * plane;
    let col = col.as_standard_layout();
    let data = col.as_slice().unwrap();
    let mut x = vec![0.0; g.batch * g.channels * g.h * g.w];
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &data[r * cols..(r + 1) * cols];
                let (x0, x1) = valid_range(g.wo, g.w, g.sw, j, g.pw);
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let y = (oy * g.sh + i) as isize - g.ph as isize;
                        if y < 0 || y as usize >= g.h || x0 >= x1 {
                            continue;
                        }
                        let srow = &row[b * plane + oy * g.wo + x0..b * plane + oy * g.wo + x1];
                        let start = base + y as usize * g.w + x0 * g.sw + j - g.pw;
                        let drow = &mut x[start..];
                        if g.sw == 1 {
                            for (d, v) in drow.iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in drow.iter_mut().step_by(g.sw).zip(srow) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
