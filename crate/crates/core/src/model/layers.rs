//! Convolution, batch normalization and activations with explicit backward
//! passes. Parameters live in a flat vector owned by the enclosing part;
//! layers only remember their offsets into it.

use super::tensor::{gemm, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const DIRECT_MAX_CIN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    pub bias: bool,
    pub w_off: usize,
    pub b_off: usize,
}

pub struct ConvCache {
    /// im2col matrix, `None` when the input itself serves as one (1x1 conv).
    col: Option<Vec<f64>>,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.bias { self.cout } else { 0 }
    }

    pub fn fan_in(&self) -> usize {
        self.cin / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad == (0, 0)
    }

    /// Few input channels per group: loop directly instead of building
    /// columns for a GEMM with a tiny inner dimension.
    fn is_direct(&self) -> bool {
        !self.is_pointwise() && self.cin / self.groups <= DIRECT_MAX_CIN
    }

    /// Output columns `ox` whose input column `ox * sw + kj - pw` is valid.
    fn valid_ox(&self, kj: usize, w: usize, wo: usize) -> std::ops::Range<usize> {
        let (sw, pw) = (self.stride.1, self.pad.1);
        let lo = if kj >= pw { 0 } else { (pw - kj).div_ceil(sw) };
        // ox * sw + kj - pw <= w - 1
        let hi = if w + pw > kj {
            ((w + pw - kj - 1) / sw + 1).min(wo)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    /// Visits every (output channel, input channel, sample, kernel row,
    /// output row, kernel column) with the matching weight index and
    /// row offsets into input and output planes.
    fn for_each_tap(
        &self,
        n: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let (kh, kw) = self.kernel;
        let (cin_g, cout_g) = (self.cin / self.groups, self.cout / self.groups);
        for o in 0..self.cout {
            let g = o / cout_g;
            for ci in 0..cin_g {
                let c = g * cin_g + ci;
                for s in 0..n {
                    for ki in 0..kh {
                        for oy in 0..ho {
                            let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = ((c * n + s) * h + iy as usize) * w;
                            let y_row = ((o * n + s) * ho + oy) * wo;
                            for kj in 0..kw {
                                let wi = ((o * cin_g + ci) * kh + ki) * kw + kj;
                                f(wi, x_row, y_row, kj);
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct_forward(&self, weights: &[f64], x: &Tensor, y: &mut Tensor) {
        let (ho, wo) = (y.h, y.w);
        let (sw, pw) = (self.stride.1, self.pad.1);
        let xw = x.w;
        let xd = &x.data;
        let yd = &mut y.data;
        self.for_each_tap(x.n, x.h, x.w, ho, wo, |wi, x_row, y_row, kj| {
            let wv = weights[wi];
            let r = self.valid_ox(kj, xw, wo);
            let yr = &mut yd[y_row..y_row + wo];
            let xr = &xd[x_row..x_row + xw];
            if sw == 1 {
                let off = r.start + kj - pw;
                for (yv, xv) in yr[r.clone()].iter_mut().zip(&xr[off..off + r.len()]) {
                    *yv += wv * xv;
                }
            } else {
                for ox in r {
                    yr[ox] += wv * xr[ox * sw + kj - pw];
                }
            }
        });
    }

    fn direct_backward(
        &self,
        weights: &[f64],
        x: &Tensor,
        dy: &Tensor,
        gw: &mut [f64],
        dx: &mut Tensor,
    ) {
        let (ho, wo) = (dy.h, dy.w);
        let (sw, pw) = (self.stride.1, self.pad.1);
        let xw = x.w;
        let xd = &x.data;
        let dyd = &dy.data;
        let dxd = &mut dx.data;
        self.for_each_tap(x.n, x.h, x.w, ho, wo, |wi, x_row, y_row, kj| {
            let wv = weights[wi];
            let r = self.valid_ox(kj, xw, wo);
            let dyr = &dyd[y_row..y_row + wo];
            let mut acc = 0.0;
            if sw == 1 {
                let off = r.start + kj - pw;
                let xr = &xd[x_row + off..x_row + off + r.len()];
                let dxr = &mut dxd[x_row + off..x_row + off + r.len()];
                for ((g, xv), d) in dyr[r.clone()].iter().zip(xr).zip(dxr.iter_mut()) {
                    acc += g * xv;
                    *d += wv * g;
                }
            } else {
                for ox in r {
                    let ix = x_row + ox * sw + kj - pw;
                    acc += dyr[ox] * xd[ix];
                    dxd[ix] += wv * dyr[ox];
                }
            }
            gw[wi] += acc;
        });
    }

    fn im2col(&self, x: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let (kh, kw) = self.kernel;
        let p = x.n * ho * wo;
        let mut col = vec![0.0; x.c * kh * kw * p];
        for c in 0..x.c {
            let xc = x.channel(c);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut col[((c * kh + ki) * kw + kj) * p..][..p];
                    for n in 0..x.n {
                        for oy in 0..ho {
                            let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src = &xc[(n * x.h + iy as usize) * x.w..][..x.w];
                            let dst = &mut row[(n * ho + oy) * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Tensor {
        let (kh, kw) = self.kernel;
        let p = n * ho * wo;
        let mut dx = Tensor::zeros(self.cin, n, h, w);
        for c in 0..self.cin {
            let dxc = dx.channel_mut(c);
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &col[((c * kh + ki) * kw + kj) * p..][..p];
                    for s in 0..n {
                        for oy in 0..ho {
                            let iy = (oy * self.stride.0 + ki) as isize - self.pad.0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut dxc[(s * h + iy as usize) * w..][..w];
                            let src = &row[(s * ho + oy) * wo..][..wo];
                            for (ox, &g) in src.iter().enumerate() {
                                let ix = (ox * self.stride.1 + kj) as isize - self.pad.1 as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn add_bias(&self, params: &[f64], y: &mut Tensor) {
        if self.bias {
            for o in 0..self.cout {
                let b = params[self.b_off + o];
                y.channel_mut(o).iter_mut().for_each(|v| *v += b);
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let p = x.n * ho * wo;
        let (cin_g, cout_g) = (self.cin / self.groups, self.cout / self.groups);
        let kdim = cin_g * self.kernel.0 * self.kernel.1;
        let weights = &params[self.w_off..self.w_off + self.weight_len()];
        let mut y = Tensor::zeros(self.cout, x.n, ho, wo);
        if self.is_direct() {
            self.direct_forward(weights, x, &mut y);
            self.add_bias(params, &mut y);
            return (y, ConvCache { col: None });
        }
        let pointwise = self.is_pointwise();
        let col = if pointwise {
            None
        } else {
            Some(self.im2col(x, ho, wo))
        };
        let cols: &[f64] = col.as_deref().unwrap_or(&x.data);
        for g in 0..self.groups {
            gemm(
                cout_g,
                kdim,
                p,
                &weights[g * cout_g * kdim..],
                false,
                &cols[g * kdim * p..],
                false,
                0.0,
                &mut y.data[g * cout_g * p..],
            );
        }
        self.add_bias(params, &mut y);
        (y, ConvCache { col })
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient. `x` is the input of the matching forward call.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        x: &Tensor,
        dy: &Tensor,
        grad: &mut [f64],
    ) -> Tensor {
        let (ho, wo) = (dy.h, dy.w);
        let p = dy.n * ho * wo;
        let (cin_g, cout_g) = (self.cin / self.groups, self.cout / self.groups);
        let kdim = cin_g * self.kernel.0 * self.kernel.1;
        let weights = &params[self.w_off..self.w_off + self.weight_len()];
        if self.bias {
            for o in 0..self.cout {
                grad[self.b_off + o] += dy.channel(o).iter().sum::<f64>();
            }
        }
        if self.is_direct() {
            let mut dx = Tensor::zeros(self.cin, dy.n, x.h, x.w);
            let gw = &mut grad[self.w_off..self.w_off + self.weight_len()];
            self.direct_backward(weights, x, dy, gw, &mut dx);
            return dx;
        }
        let cols: &[f64] = cache.col.as_deref().unwrap_or(&x.data);
        let mut dcol = vec![0.0; self.cin * self.kernel.0 * self.kernel.1 * p];
        {
            let gw = &mut grad[self.w_off..self.w_off + self.weight_len()];
            for g in 0..self.groups {
                let dyg = &dy.data[g * cout_g * p..];
                gemm(
                    cout_g,
                    p,
                    kdim,
                    dyg,
                    false,
                    &cols[g * kdim * p..],
                    true,
                    1.0,
                    &mut gw[g * cout_g * kdim..],
                );
                gemm(
                    kdim,
                    cout_g,
                    p,
                    &weights[g * cout_g * kdim..],
                    true,
                    dyg,
                    false,
                    0.0,
                    &mut dcol[g * kdim * p..],
                );
            }
        }
        let (h, w) = (x.h, x.w);
        if self.is_pointwise() {
            Tensor::from_data(self.cin, dy.n, h, w, dcol)
        } else {
            self.col2im(&dcol, dy.n, h, w, ho, wo)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma_off: usize,
    pub beta_off: usize,
    /// Offset into the running-statistics buffer: means then variances.
    pub stat_off: usize,
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    pub(crate) batch_mean: Vec<f64>,
    pub(crate) batch_var: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn forward(
        &self,
        params: &[f64],
        stats: &[f64],
        x: &Tensor,
        mode: Mode,
    ) -> (Tensor, BnCache) {
        let p = x.plane();
        let mut y = Tensor::zeros(x.c, x.n, x.h, x.w);
        let mut xhat = Tensor::zeros(x.c, x.n, x.h, x.w);
        let mut inv_std = vec![0.0; self.c];
        let mut batch_mean = vec![0.0; self.c];
        let mut batch_var = vec![0.0; self.c];
        for c in 0..self.c {
            let xc = x.channel(c);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = xc.iter().sum::<f64>() / p as f64;
                    let var = xc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p as f64;
                    (mean, var)
                }
                Mode::Eval => (stats[self.stat_off + c], stats[self.stat_off + self.c + c]),
            };
            batch_mean[c] = mean;
            batch_var[c] = var;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            let (g, b) = (params[self.gamma_off + c], params[self.beta_off + c]);
            for ((yh, yv), &xv) in xhat
                .channel_mut(c)
                .iter_mut()
                .zip(y.channel_mut(c).iter_mut())
                .zip(xc)
            {
                let h = (xv - mean) * is;
                *yh = h;
                *yv = g * h + b;
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                mode,
            },
        )
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn absorb(&self, stats: &mut [f64], cache: &BnCache, plane: usize) {
        let unbias = if plane > 1 {
            plane as f64 / (plane - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.c {
            let m = &mut stats[self.stat_off + c];
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * cache.batch_mean[c];
            let v = &mut stats[self.stat_off + self.c + c];
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * cache.batch_var[c] * unbias;
        }
    }

    /// Consumes the output gradient and reuses it for the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &BnCache,
        dy: Tensor,
        grad: &mut [f64],
    ) -> Tensor {
        let p = dy.plane() as f64;
        let mut dx = dy;
        for c in 0..self.c {
            let g = params[self.gamma_off + c];
            let xh = cache.xhat.channel(c);
            let dyc = dx.channel(c);
            let sum_dy: f64 = dyc.iter().sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh).map(|(a, b)| a * b).sum();
            grad[self.gamma_off + c] += sum_dy_xh;
            grad[self.beta_off + c] += sum_dy;
            let scale = g * cache.inv_std[c];
            let out = dx.channel_mut(c);
            match cache.mode {
                Mode::Train => {
                    for (o, &h) in out.iter_mut().zip(xh) {
                        *o = scale * (*o - sum_dy / p - h * sum_dy_xh / p);
                    }
                }
                Mode::Eval => out.iter_mut().for_each(|o| *o *= scale),
            }
        }
        dx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    relu_owned(x.clone())
}

pub fn relu_owned(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient through ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    relu_backward_owned(y, dy.clone())
}

pub fn relu_backward_owned(y: &Tensor, mut dy: Tensor) -> Tensor {
    dy.data.iter_mut().zip(&y.data).for_each(|(d, &v)| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dy
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data
        .iter_mut()
        .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    y
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    dx.data
        .iter_mut()
        .zip(&y.data)
        .for_each(|(d, &s)| *d *= s * (1.0 - s));
    dx
}

/// Softmax across channels of a `[C][N][1][1]` tensor.
pub fn softmax(x: &Tensor) -> Tensor {
    assert_eq!((x.h, x.w), (1, 1), "softmax expects 1x1 spatial");
    let mut y = x.clone();
    for n in 0..x.n {
        let max = (0..x.c)
            .map(|c| x.data[c * x.n + n])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..x.c {
            let e = (x.data[c * x.n + n] - max).exp();
            y.data[c * x.n + n] = e;
            sum += e;
        }
        for c in 0..x.c {
            y.data[c * x.n + n] /= sum;
        }
    }
    y
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for n in 0..y.n {
        let dot: f64 = (0..y.c)
            .map(|c| y.data[c * y.n + n] * dy.data[c * y.n + n])
            .sum();
        for c in 0..y.c {
            let i = c * y.n + n;
            dx.data[i] = y.data[i] * (dy.data[i] - dot);
        }
    }
    dx
}

pub fn activate(act: Activation, x: &Tensor) -> Tensor {
    match act {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softmax => softmax(x),
    }
}

pub fn activate_backward(act: Activation, y: &Tensor, dy: &Tensor) -> Tensor {
    match act {
        Activation::Relu => relu_backward(y, dy),
        Activation::Sigmoid => sigmoid_backward(y, dy),
        Activation::Softmax => softmax_backward(y, dy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv, params: &[f64], x: &Tensor) -> Tensor {
        let (ho, wo) = conv.out_hw(x.h, x.w);
        let (cin_g, cout_g) = (conv.cin / conv.groups, conv.cout / conv.groups);
        let (kh, kw) = conv.kernel;
        let mut y = Tensor::zeros(conv.cout, x.n, ho, wo);
        for o in 0..conv.cout {
            let g = o / cout_g;
            for n in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = if conv.bias {
                            params[conv.b_off + o]
                        } else {
                            0.0
                        };
                        for ci in 0..cin_g {
                            let c = g * cin_g + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy =
                                        (oy * conv.stride.0 + ki) as isize - conv.pad.0 as isize;
                                    let ix =
                                        (ox * conv.stride.1 + kj) as isize - conv.pad.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    let wi = ((o * cin_g + ci) * kh + ki) * kw + kj;
                                    let xi =
                                        ((c * x.n + n) * x.h + iy as usize) * x.w + ix as usize;
                                    acc += params[conv.w_off + wi] * x.data[xi];
                                }
                            }
                        }
                        y.data[((o * x.n + n) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn conv(
        cin: usize,
        cout: usize,
        k: (usize, usize),
        s: (usize, usize),
        p: (usize, usize),
        groups: usize,
    ) -> Conv {
        let mut c = Conv {
            cin,
            cout,
            kernel: k,
            stride: s,
            pad: p,
            groups,
            bias: true,
            w_off: 3,
            b_off: 0,
        };
        c.b_off = 3 + c.weight_len();
        c
    }

    fn filled(len: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "layers");
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (i, c) in [
            conv(4, 6, (3, 3), (1, 1), (1, 1), 2),
            conv(6, 6, (3, 3), (2, 2), (0, 0), 6),
            conv(3, 5, (1, 1), (1, 1), (0, 0), 1),
            conv(1, 4, (1, 5), (1, 2), (0, 2), 1),
            conv(4, 4, (5, 5), (1, 1), (2, 2), 4),
        ]
        .into_iter()
        .enumerate()
        {
            let params = filled(c.b_off + c.cout, i as u64);
            let x = Tensor::from_data(c.cin, 2, 7, 9, filled(c.cin * 2 * 63, 100 + i as u64));
            let (y, _) = c.forward(&params, &x);
            let r = naive_conv(&c, &params, &x);
            assert_eq!((y.c, y.h, y.w), (r.c, r.h, r.w));
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_differences() {
        for (i, c) in [
            conv(4, 6, (3, 3), (1, 1), (1, 1), 2),
            conv(6, 6, (3, 3), (2, 2), (0, 0), 3),
            conv(3, 5, (1, 1), (1, 1), (0, 0), 1),
        ]
        .into_iter()
        .enumerate()
        {
            let mut params = filled(c.b_off + c.cout, 10 + i as u64);
            let x = Tensor::from_data(c.cin, 2, 6, 7, filled(c.cin * 2 * 42, 20 + i as u64));
            let (y, cache) = c.forward(&params, &x);
            let probe = Tensor::from_data(y.c, y.n, y.h, y.w, filled(y.data.len(), 30 + i as u64));
            let loss = |params: &[f64], x: &Tensor| -> f64 {
                c.forward(params, x)
                    .0
                    .data
                    .iter()
                    .zip(&probe.data)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let mut grad = vec![0.0; params.len()];
            let dx = c.backward(&params, &cache, &x, &probe, &mut grad);
            let h = 1e-6;
            for j in 3..params.len() {
                let orig = params[j];
                params[j] = orig + h;
                let up = loss(&params, &x);
                params[j] = orig - h;
                let down = loss(&params, &x);
                params[j] = orig;
                assert!(((up - down) / (2.0 * h) - grad[j]).abs() < 1e-6);
            }
            let mut xp = x.clone();
            for j in (0..x.data.len()).step_by(7) {
                let orig = xp.data[j];
                xp.data[j] = orig + h;
                let up = loss(&params, &xp);
                xp.data[j] = orig - h;
                let down = loss(&params, &xp);
                xp.data[j] = orig;
                assert!(((up - down) / (2.0 * h) - dx.data[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_and_backprops() {
        let bn = BatchNorm {
            c: 2,
            gamma_off: 0,
            beta_off: 2,
            stat_off: 0,
        };
        let mut params = vec![1.5, 0.5, 0.1, -0.2];
        let mut stats = vec![0.0, 0.0, 1.0, 1.0];
        let x = Tensor::from_data(2, 3, 1, 2, filled(12, 7));
        let (y, cache) = bn.forward(&params, &stats, &x, Mode::Train);
        for c in 0..2 {
            let yc = y.channel(c);
            let mean = yc.iter().sum::<f64>() / 6.0;
            assert!((mean - params[2 + c]).abs() < 1e-12);
        }
        bn.absorb(&mut stats, &cache, 6);
        assert!((stats[0] - 0.1 * cache.batch_mean[0]).abs() < 1e-15);
        let probe = Tensor::from_data(2, 3, 1, 2, filled(12, 8));
        let loss = |params: &[f64], x: &Tensor| -> f64 {
            let (y, _) = bn.forward(params, &[0.0; 4], x, Mode::Train);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; 4];
        let dx = bn.backward(&params, &cache, probe.clone(), &mut grad);
        let h = 1e-6;
        for j in 0..4 {
            let orig = params[j];
            params[j] = orig + h;
            let up = loss(&params, &x);
            params[j] = orig - h;
            let down = loss(&params, &x);
            params[j] = orig;
            assert!(((up - down) / (2.0 * h) - grad[j]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for j in 0..12 {
            let orig = xp.data[j];
            xp.data[j] = orig + h;
            let up = loss(&params, &xp);
            xp.data[j] = orig - h;
            let down = loss(&params, &xp);
            xp.data[j] = orig;
            assert!(((up - down) / (2.0 * h) - dx.data[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let x = Tensor::from_data(6, 2, 1, 1, filled(12, 3).iter().map(|v| v * 50.0).collect());
        let y = softmax(&x);
        for n in 0..2 {
            let s: f64 = (0..6).map(|c| y.data[c * 2 + n]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let probe = Tensor::from_data(6, 2, 1, 1, filled(12, 4));
        let dx = softmax_backward(&y, &probe);
        let h = 1e-6;
        let f = |x: &Tensor| {
            softmax(x)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let x = Tensor::from_data(6, 2, 1, 1, filled(12, 3));
        let y = softmax(&x);
        let dx2 = softmax_backward(&y, &probe);
        for j in 0..12 {
            let mut up = x.clone();
            up.data[j] += h;
            let mut down = x.clone();
            down.data[j] -= h;
            assert!(((f(&up) - f(&down)) / (2.0 * h) - dx2.data[j]).abs() < 1e-6);
        }
        assert!(dx.is_finite());
    }
}
