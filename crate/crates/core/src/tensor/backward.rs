use super::ops::{conv_range, gelu_parts, hardswish_grad, matmul_nt, matmul_tn, reflect};
use super::tape::{ConvDims, Op, Tape, Var};
use super::{Result, TensorError};

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    /// Reverse sweep from a `[1]`-shaped output. Every record is visited once,
    /// newest first; gradients of shared inputs accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.data();
            let len_of = |v: Var| self.nodes[v.0].value.numel();
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if wants(*a) {
                        let da = matmul_nt(&g, self.data(*b), m, n, k);
                        accumulate(&mut grads[a.0], m * k, |s| add_into(s, &da));
                    }
                    if wants(*b) {
                        let db = matmul_tn(self.data(*a), &g, m, k, n);
                        accumulate(&mut grads[b.0], k * n, |s| add_into(s, &db));
                    }
                }
                Op::BatchMatMul { a, b, batch, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        if wants(*a) {
                            let da = matmul_nt(gi, &bd[i * k * n..(i + 1) * k * n], m, n, k);
                            accumulate(&mut grads[a.0], batch * m * k, |s| add_into(&mut s[i * m * k..(i + 1) * m * k], &da));
                        }
                        if wants(*b) {
                            let db = matmul_tn(&ad[i * m * k..(i + 1) * m * k], gi, m, k, n);
                            accumulate(&mut grads[b.0], batch * k * n, |s| add_into(&mut s[i * k * n..(i + 1) * k * n], &db));
                        }
                    }
                }
                Op::Gather { x, index } => {
                    accumulate(&mut grads[x.0], len_of(*x), |s| {
                        for (gi, &src) in g.iter().zip(index.iter()) {
                            s[src] += gi;
                        }
                    });
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads[x.0], g.len(), |s| add_into(s, &g));
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if wants(v) {
                            accumulate(&mut grads[v.0], g.len(), |s| add_into(s, &g));
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.len(), |s| add_into(s, &g));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.len(), |s| s.iter_mut().zip(&g).for_each(|(o, v)| *o -= v));
                    }
                }
                Op::Mul { a, b } => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.len(), |s| {
                            for i in 0..g.len() {
                                s[i] += g[i] * bd[i];
                            }
                        });
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.len(), |s| {
                            for i in 0..g.len() {
                                s[i] += g[i] * ad[i];
                            }
                        });
                    }
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads[x.0], g.len(), |s| s.iter_mut().zip(&g).for_each(|(o, v)| *o += v * factor));
                }
                Op::AddBias { x, bias } => {
                    if wants(*x) {
                        accumulate(&mut grads[x.0], g.len(), |s| add_into(s, &g));
                    }
                    if wants(*bias) {
                        let d = len_of(*bias);
                        accumulate(&mut grads[bias.0], d, |s| {
                            for (i, v) in g.iter().enumerate() {
                                s[i % d] += v;
                            }
                        });
                    }
                }
                Op::Abs { x } => {
                    let xd = self.data(*x);
                    accumulate(&mut grads[x.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * sign(xd[i]);
                        }
                    });
                }
                Op::AbsSum { x } => {
                    let xd = self.data(*x);
                    accumulate(&mut grads[x.0], xd.len(), |s| {
                        for i in 0..xd.len() {
                            s[i] += g[0] * sign(xd[i]);
                        }
                    });
                }
                Op::Sum { x } => {
                    accumulate(&mut grads[x.0], len_of(*x), |s| s.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Mean { x } => {
                    let n = len_of(*x);
                    let v = g[0] / n as f64;
                    accumulate(&mut grads[x.0], n, |s| s.iter_mut().for_each(|o| *o += v));
                }
                Op::Max { a, b } => {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.len(), |s| {
                            for i in 0..g.len() {
                                if ad[i] >= bd[i] {
                                    s[i] += g[i];
                                }
                            }
                        });
                    }
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.len(), |s| {
                            for i in 0..g.len() {
                                if ad[i] < bd[i] {
                                    s[i] += g[i];
                                }
                            }
                        });
                    }
                }
                Op::Softmax { x } => {
                    let c = *node.value.shape().last().unwrap();
                    accumulate(&mut grads[x.0], g.len(), |s| {
                        for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                srow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                    let d = len_of(*gain);
                    let gd = self.data(*gain);
                    if wants(*gain) {
                        accumulate(&mut grads[gain.0], d, |s| {
                            for (i, v) in g.iter().enumerate() {
                                s[i % d] += v * xhat[i];
                            }
                        });
                    }
                    if wants(*shift) {
                        accumulate(&mut grads[shift.0], d, |s| {
                            for (i, v) in g.iter().enumerate() {
                                s[i % d] += v;
                            }
                        });
                    }
                    if wants(*x) {
                        accumulate(&mut grads[x.0], g.len(), |s| {
                            for (r, is) in inv_std.iter().enumerate() {
                                let base = r * d;
                                let mut sum_dh = 0.0;
                                let mut sum_dh_h = 0.0;
                                for j in 0..d {
                                    let dh = g[base + j] * gd[j];
                                    sum_dh += dh;
                                    sum_dh_h += dh * xhat[base + j];
                                }
                                for j in 0..d {
                                    let dh = g[base + j] * gd[j];
                                    s[base + j] += is / d as f64 * (d as f64 * dh - sum_dh - xhat[base + j] * sum_dh_h);
                                }
                            }
                        });
                    }
                }
                Op::BatchNorm { x, gain, shift, xhat, inv_std, batch_stats, channels, plane } => {
                    let (c, plane) = (*channels, *plane);
                    let n = g.len() / (c * plane);
                    let gd = self.data(*gain);
                    let mut dgain = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                dgain[ch] += g[i] * xhat[i];
                                dshift[ch] += g[i];
                            }
                        }
                    }
                    if wants(*x) {
                        let count = (n * plane) as f64;
                        accumulate(&mut grads[x.0], g.len(), |s| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * plane;
                                    for i in base..base + plane {
                                        let dh = g[i] * gd[ch];
                                        s[i] += if *batch_stats {
                                            inv_std[ch] / count
                                                * (count * dh - dshift[ch] * gd[ch] - xhat[i] * dgain[ch] * gd[ch])
                                        } else {
                                            dh * inv_std[ch]
                                        };
                                    }
                                }
                            }
                        });
                    }
                    if wants(*gain) {
                        accumulate(&mut grads[gain.0], c, |s| add_into(s, &dgain));
                    }
                    if wants(*shift) {
                        accumulate(&mut grads[shift.0], c, |s| add_into(s, &dshift));
                    }
                }
                Op::Conv3x3 { x, weight, bias, dims } => {
                    conv3x3_backward(self, &g, *x, *weight, *bias, *dims, &mut grads);
                }
                Op::Filter3x3 { x, kernel, planes, h, w } => {
                    let (h, w) = (*h, *w);
                    accumulate(&mut grads[x.0], g.len(), |s| {
                        for p in 0..*planes {
                            let gp = &g[p * h * w..(p + 1) * h * w];
                            let sp = &mut s[p * h * w..(p + 1) * h * w];
                            for y in 0..h {
                                for xx in 0..w {
                                    let gv = gp[y * w + xx];
                                    for ky in 0..3 {
                                        let sy = reflect(y as isize + ky as isize - 1, h);
                                        for kx in 0..3 {
                                            let sx = reflect(xx as isize + kx as isize - 1, w);
                                            sp[sy * w + sx] += kernel[ky * 3 + kx] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::HardSwish { x } => {
                    let xd = self.data(*x);
                    accumulate(&mut grads[x.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * hardswish_grad(xd[i]);
                        }
                    });
                }
                Op::Sigmoid { x } => {
                    accumulate(&mut grads[x.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * out[i] * (1.0 - out[i]);
                        }
                    });
                }
                Op::Gelu { x } => {
                    let xd = self.data(*x);
                    accumulate(&mut grads[x.0], g.len(), |s| {
                        for i in 0..g.len() {
                            s[i] += g[i] * gelu_parts(xd[i]).1;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn conv3x3_backward(tape: &Tape, g: &[f64], x: Var, weight: Var, bias: Var, dims: ConvDims, grads: &mut [Option<Vec<f64>>]) {
    let ConvDims { n, cin, cout, h, w } = dims;
    let plane = h * w;
    let (xd, wd) = (tape.data(x), tape.data(weight));
    if tape.requires_grad(bias) {
        accumulate(&mut grads[bias.0], cout, |s| {
            for b in 0..n {
                for co in 0..cout {
                    s[co] += g[(b * cout + co) * plane..(b * cout + co + 1) * plane].iter().sum::<f64>();
                }
            }
        });
    }
    let want_x = tape.requires_grad(x);
    let want_w = tape.requires_grad(weight);
    let mut dx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dw = if want_w { vec![0.0; wd.len()] } else { Vec::new() };
    for b in 0..n {
        for co in 0..cout {
            let gp = &g[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for ci in 0..cin {
                let xoff = (b * cin + ci) * plane;
                for ky in 0..3 {
                    let (y0, y1) = conv_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = conv_range(kx, w);
                        let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let grow = &gp[y * w + x0..y * w + x1];
                            let sbase = xoff + sy * w + x0 + kx - 1;
                            if want_w {
                                let srow = &xd[sbase..sbase + (x1 - x0)];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if want_x && wv != 0.0 {
                                let drow = &mut dx[sbase..sbase + (x1 - x0)];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        if want_w {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    if want_x {
        accumulate(&mut grads[x.0], dx.len(), |s| add_into(s, &dx));
    }
    if want_w {
        accumulate(&mut grads[weight.0], dw.len(), |s| add_into(s, &dw));
    }
}
