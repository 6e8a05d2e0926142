use std::rc::Rc;

use super::tape::{ConvDims, Op, RunningStats, Tape, Var};
use super::{Result, TensorError, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};

pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

pub(crate) fn hardswish_grad(x: f64) -> f64 {
    if x < -3.0 {
        0.0
    } else if x > 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_parts(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(sa.to_vec())
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.record(name, shape, data, op, &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.record("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape { op: "batch_matmul", lhs: sa, rhs: sb });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            out.extend(matmul_raw(&da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], m, k, n));
        }
        self.record("batch_matmul", vec![batch, m, n], out, Op::BatchMatMul { a, b, batch, m, k, n }, &[a, b])
    }

    /// Output element `i` is `x[index[i]]`; the backward pass scatters.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let len = self.data(x).len();
        if numel != index.len() || index.iter().any(|&i| i >= len) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index of length {} does not fit output {shape:?}", index.len()),
            });
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        self.record("gather", shape, data, Op::Gather { x, index: Rc::new(index) }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid { op: "transpose", msg: format!("need at least 2 dims, got {shape:?}") });
        }
        let r = shape[shape.len() - 2];
        let c = shape[shape.len() - 1];
        let batch = shape.iter().product::<usize>() / (r * c);
        let mut index = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push(b * r * c + i * c + j);
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        self.gather(x, out_shape, index)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape });
        }
        let data = self.data(x).to_vec();
        self.record("reshape", shape, data, Op::Reshape { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.record("add", shape, data, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.record("sub", shape, data, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.record("mul", shape, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(bias) != [d] {
            return Err(TensorError::Shape { op: "add_bias", lhs: shape, rhs: self.shape(bias).to_vec() });
        }
        let bd = self.data(bias);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bd[i % d]).collect();
        self.record("add_bias", shape, data, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        if self.tracks_kinks() {
            for i in 0..self.data(x).len() {
                let v = self.data(x)[i];
                self.note_branch(sign_class(v), v.abs());
            }
        }
        self.unary("abs", x, f64::abs, Op::Abs { x })
    }

    /// L1 norm of all elements, as a `[1]` tensor.
    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        if self.tracks_kinks() {
            for i in 0..self.data(x).len() {
                let v = self.data(x)[i];
                self.note_branch(sign_class(v), v.abs());
            }
        }
        let s = self.data(x).iter().map(|v| v.abs()).sum();
        self.record("abs_sum", vec![1], vec![s], Op::AbsSum { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.record("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.record("mean", vec![1], vec![m], Op::Mean { x }, &[x])
    }

    /// Elementwise maximum; the gradient goes to `a` on ties.
    pub fn max_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("max", a, b)?;
        if self.tracks_kinks() {
            for i in 0..self.data(a).len() {
                let (x, y) = (self.data(a)[i], self.data(b)[i]);
                self.note_branch((x >= y) as u8, (x - y).abs());
            }
        }
        let data = zip_map(self.data(a), self.data(b), f64::max);
        self.record("max", shape, data, Op::Max { a, b }, &[a, b])
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.record("softmax", shape, data, Op::Softmax { x }, &[x])
    }

    /// Normalizes each row of the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gain, shift] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape { op: "layer_norm", lhs: shape, rhs: self.shape(p).to_vec() });
            }
        }
        let (g, b) = (self.data(gain), self.data(shift));
        let rows = self.data(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.record("layer_norm", shape, out, Op::LayerNorm { x, gain, shift, xhat, inv_std }, &[x, gain, shift])
    }

    /// Batch norm over `[N, C, ...]`. With `train` set, batch statistics are
    /// used and folded into `running`; otherwise `running` is used as-is.
    pub fn batch_norm_2d(&mut self, x: Var, gain: Var, shift: Var, running: &mut RunningStats, train: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid { op: "batch_norm", msg: format!("expected [N, C, ...], got {shape:?}") });
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        for p in [gain, shift] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape { op: "batch_norm", lhs: shape, rhs: self.shape(p).to_vec() });
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("running stats have {} channels, input has {c}", running.mean.len()),
            });
        }
        let xd = self.data(x);
        let count = (n * plane) as f64;
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    s += xd[base..base + plane].iter().sum::<f64>();
                }
                let mean = s / count;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    sq += xd[base..base + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                running.mean[ch] = (1.0 - BATCH_NORM_MOMENTUM) * running.mean[ch] + BATCH_NORM_MOMENTUM * mean;
                running.var[ch] = (1.0 - BATCH_NORM_MOMENTUM) * running.var[ch] + BATCH_NORM_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (running.mean[ch], running.var[ch])
            };
            means[ch] = mean;
            inv_std[ch] = 1.0 / (var + BATCH_NORM_EPS).sqrt();
        }
        let (g, sh) = (self.data(gain), self.data(shift));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let h = (xd[i] - means[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + sh[ch];
                }
            }
        }
        self.record(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm { x, gain, shift, xhat, inv_std, batch_stats: train, channels: c, plane },
            &[x, gain, shift],
        )
    }

    /// 3x3 cross-correlation with zero padding 1. Accepts `[C, H, W]` or
    /// `[N, C, H, W]` input and a `[C_out, C_in, 3, 3]` weight.
    pub fn conv2d_3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, cin, h, w) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(TensorError::Shape { op: "conv2d_3x3", lhs: xs, rhs: ws }),
        };
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 {
            return Err(TensorError::Shape { op: "conv2d_3x3", lhs: xs, rhs: ws });
        }
        let cout = ws[0];
        if self.shape(bias) != [cout] {
            return Err(TensorError::Shape { op: "conv2d_3x3", lhs: ws, rhs: self.shape(bias).to_vec() });
        }
        let dims = ConvDims { n, cin, cout, h, w };
        let out = conv3x3_forward(self.data(x), self.data(weight), self.data(bias), dims);
        let shape = if xs.len() == 3 { vec![cout, h, w] } else { vec![n, cout, h, w] };
        self.record("conv2d_3x3", shape, out, Op::Conv3x3 { x, weight, bias, dims }, &[x, weight, bias])
    }

    /// Fixed 3x3 filter applied to every `[H, W]` plane of `x` with
    /// reflect-101 borders (`-1 -> 1`).
    pub fn filter3x3_reflect(&mut self, x: Var, kernel: [f64; 9]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Invalid { op: "filter3x3", msg: format!("need at least 2 dims, got {shape:?}") });
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        let planes = shape.iter().product::<usize>() / (h * w);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (src, dst) in xd.chunks(h * w).zip(out.chunks_mut(h * w)) {
            crate::filters::filter_plane(src, h, w, &kernel, dst);
        }
        self.record("filter3x3", shape, out, Op::Filter3x3 { x, kernel, planes, h, w }, &[x])
    }

    /// `x * clamp(x + 3, 0, 6) / 6`.
    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        if self.tracks_kinks() {
            for i in 0..self.data(x).len() {
                let v = self.data(x)[i];
                let region = if v < -3.0 {
                    0
                } else if v > 3.0 {
                    2
                } else {
                    1
                };
                self.note_branch(region, (v + 3.0).abs().min((v - 3.0).abs()));
            }
        }
        self.unary("hardswish", x, |v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0, Op::HardSwish { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_parts(v).0, Op::Gelu { x })
    }
}

fn sign_class(v: f64) -> u8 {
    if v > 0.0 {
        2
    } else if v < 0.0 {
        0
    } else {
        1
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, n]`, `b: [k, n]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Valid output range for a kernel offset `k` in `0..3` with padding 1.
#[inline]
pub(crate) fn conv_range(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len - 1 } else { len };
    (lo, hi)
}

fn conv3x3_forward(x: &[f64], wt: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { n, cin, cout, h, w } = d;
    let plane = h * w;
    let mut out = vec![0.0; n * cout * plane];
    for b in 0..n {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            dst.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let src = &x[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                for ky in 0..3 {
                    let (y0, y1) = conv_range(ky, h);
                    for kx in 0..3 {
                        let wv = wt[((co * cin + ci) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = conv_range(kx, w);
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (o, &s) in drow.iter_mut().zip(srow) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
