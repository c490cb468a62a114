//! Primitive tensor operations and their backward rules.

use super::{Tensor, TensorError, TensorResult};

/// Spatial padding policy for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    /// No padding; output shrinks by kernel-1.
    Valid,
    /// Zero padding so that out = ceil(in / stride).
    Same,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// ── raw matmul kernels ──────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]^T  (dot products of rows)
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T · B[m,n]
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
        }
    }
    c
}

// ── elementwise ─────────────────────────────────────────────────────

macro_rules! binary_elementwise {
    ($name:ident, $op_name:literal, $fwd:expr, $dl:expr, $dr:expr) => {
        pub fn $name(&self, other: &Tensor) -> TensorResult {
            if self.shape() != other.shape() {
                return Err(shape_err($op_name, self.shape(), other.shape()));
            }
            let a = self.data();
            let b = other.data();
            let out: Vec<f32> = a.iter().zip(b.iter()).map(|(&x, &y)| $fwd(x, y)).collect();
            drop(a);
            drop(b);
            Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                &[self, other],
                Box::new(|g, _out, parents| {
                    let (lhs, rhs) = (&parents[0], &parents[1]);
                    let a = lhs.to_vec();
                    let b = rhs.to_vec();
                    if lhs.requires_grad() {
                        let d: Vec<f32> = g
                            .iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(&gi, (&x, &y))| gi * $dl(x, y))
                            .collect();
                        lhs.accumulate_grad(&d);
                    }
                    if rhs.requires_grad() {
                        let d: Vec<f32> = g
                            .iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(&gi, (&x, &y))| gi * $dr(x, y))
                            .collect();
                        rhs.accumulate_grad(&d);
                    }
                }),
            ))
        }
    };
}

impl Tensor {
    binary_elementwise!(add, "add", |x, y| x + y, |_x, _y| 1.0, |_x, _y| 1.0);
    binary_elementwise!(sub, "sub", |x, y| x - y, |_x, _y| 1.0, |_x, _y| -1.0);
    binary_elementwise!(mul, "mul", |x: f32, y: f32| x * y, |_x, y| y, |x, _y| x);

    pub fn add_scalar(&self, value: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x + value).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(|g, _out, parents| parents[0].accumulate_grad(g)),
        )
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(move |g, _out, parents| {
                let d: Vec<f32> = g.iter().map(|&gi| gi * factor).collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(|g, _out, parents| {
                let x = parents[0].to_vec();
                let d: Vec<f32> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(|g, out, parents| {
                let d: Vec<f32> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                    .collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Elementwise sign with the convention sign(0) = 0. Gradient is zero
    /// everywhere.
    pub fn sign(&self) -> Tensor {
        let out: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(|_g, _out, _parents| {}),
        )
    }

    /// Uniform quantization to `levels` values over [0,1]. The true gradient
    /// is zero almost everywhere, and that is what this op propagates; it is
    /// the non-differentiable preprocessing stage used in BPDA experiments.
    pub fn quantize(&self, levels: u32) -> Tensor {
        assert!(levels >= 2, "quantize needs at least 2 levels");
        let steps = (levels - 1) as f32;
        let out: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * steps).round() / steps)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(|_g, _out, _parents| {}),
        )
    }

    /// Clamp to [lo, hi]. Gradient passes through wherever the input is
    /// inside the closed interval.
    pub fn clip(&self, lo: f32, hi: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            &[self],
            Box::new(move |g, _out, parents| {
                let x = parents[0].to_vec();
                let d: Vec<f32> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&gi, &xi)| if xi >= lo && xi <= hi { gi } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> TensorResult {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            &[self],
            Box::new(|g, _out, parents| parents[0].accumulate_grad(g)),
        ))
    }

    /// [N, ...] -> [N, prod(...)]
    pub fn flatten(&self) -> TensorResult {
        if self.shape().is_empty() {
            return Err(TensorError::Invalid {
                op: "flatten",
                msg: "cannot flatten a scalar".into(),
            });
        }
        let n = self.shape()[0];
        let rest: usize = self.shape()[1..].iter().product();
        self.reshape(&[n, rest])
    }

    /// Concatenate along dim 1: [N,A] ++ [N,B] -> [N,A+B]
    pub fn concat_cols(&self, other: &Tensor) -> TensorResult {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[0] != other.shape()[0]
        {
            return Err(shape_err("concat_cols", self.shape(), other.shape()));
        }
        let n = self.shape()[0];
        let (a, b) = (self.shape()[1], other.shape()[1]);
        let mut out = Vec::with_capacity(n * (a + b));
        {
            let x = self.data();
            let y = other.data();
            for i in 0..n {
                out.extend_from_slice(&x[i * a..(i + 1) * a]);
                out.extend_from_slice(&y[i * b..(i + 1) * b]);
            }
        }
        Ok(Tensor::from_op(
            vec![n, a + b],
            out,
            &[self, other],
            Box::new(move |g, _out, parents| {
                let (lhs, rhs) = (&parents[0], &parents[1]);
                if lhs.requires_grad() {
                    let mut d = vec![0.0f32; n * a];
                    for i in 0..n {
                        d[i * a..(i + 1) * a].copy_from_slice(&g[i * (a + b)..i * (a + b) + a]);
                    }
                    lhs.accumulate_grad(&d);
                }
                if rhs.requires_grad() {
                    let mut d = vec![0.0f32; n * b];
                    for i in 0..n {
                        d[i * b..(i + 1) * b]
                            .copy_from_slice(&g[i * (a + b) + a..(i + 1) * (a + b)]);
                    }
                    rhs.accumulate_grad(&d);
                }
            }),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            &[self],
            Box::new(|g, _out, parents| {
                let d = vec![g[0]; parents[0].numel()];
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f32;
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(
            Vec::new(),
            vec![s / n],
            &[self],
            Box::new(move |g, _out, parents| {
                let d = vec![g[0] / n; parents[0].numel()];
                parents[0].accumulate_grad(&d);
            }),
        )
    }

    /// Per-sample sum: [N, ...] -> [N]
    pub fn sum_rows(&self) -> TensorResult {
        if self.shape().is_empty() {
            return Err(TensorError::Invalid {
                op: "sum_rows",
                msg: "needs a leading batch dimension".into(),
            });
        }
        let n = self.shape()[0];
        let row: usize = self.shape()[1..].iter().product();
        let data = self.data();
        let out: Vec<f32> = (0..n)
            .map(|i| data[i * row..(i + 1) * row].iter().sum())
            .collect();
        drop(data);
        Ok(Tensor::from_op(
            vec![n],
            out,
            &[self],
            Box::new(move |g, _out, parents| {
                let mut d = vec![0.0f32; n * row];
                for i in 0..n {
                    for v in &mut d[i * row..(i + 1) * row] {
                        *v = g[i];
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        ))
    }

    /// Column means over the batch: [N, D] -> [D]
    pub fn mean_axis0(&self) -> TensorResult {
        if self.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "mean_axis0",
                msg: format!("needs a 2-d input, got {:?}", self.shape()),
            });
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let data = self.data();
        let mut out = vec![0.0f32; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(&data[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f32;
        }
        drop(data);
        Ok(Tensor::from_op(
            vec![d],
            out,
            &[self],
            Box::new(move |g, _out, parents| {
                let mut dgrad = vec![0.0f32; n * d];
                for i in 0..n {
                    for (dst, &gj) in dgrad[i * d..(i + 1) * d].iter_mut().zip(g) {
                        *dst = gj / n as f32;
                    }
                }
                parents[0].accumulate_grad(&dgrad);
            }),
        ))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> TensorResult {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            &[self, other],
            Box::new(move |g, _out, parents| {
                let (lhs, rhs) = (&parents[0], &parents[1]);
                if lhs.requires_grad() {
                    // dA = dC · B^T
                    let d = matmul_nt(g, &rhs.data(), m, n, k);
                    lhs.accumulate_grad(&d);
                }
                if rhs.requires_grad() {
                    // dB = A^T · dC
                    let d = matmul_tn(&lhs.data(), g, m, k, n);
                    rhs.accumulate_grad(&d);
                }
            }),
        ))
    }

    /// Broadcast add of a bias vector: rows of [N,D] + [D], or channels of
    /// [N,C,H,W] + [C].
    pub fn add_bias(&self, bias: &Tensor) -> TensorResult {
        let bshape = bias.shape().to_vec();
        match self.shape() {
            [n, d] if bshape == [*d] => {
                let (n, d) = (*n, *d);
                let x = self.data();
                let b = bias.data();
                let mut out = vec![0.0f32; n * d];
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] = x[i * d + j] + b[j];
                    }
                }
                drop(x);
                drop(b);
                Ok(Tensor::from_op(
                    vec![n, d],
                    out,
                    &[self, bias],
                    Box::new(move |g, _out, parents| {
                        parents[0].accumulate_grad(g);
                        if parents[1].requires_grad() {
                            let mut db = vec![0.0f32; d];
                            for i in 0..n {
                                for (bj, gj) in db.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                    *bj += gj;
                                }
                            }
                            parents[1].accumulate_grad(&db);
                        }
                    }),
                ))
            }
            [n, c, h, w] if bshape == [*c] => {
                let (n, c, hw) = (*n, *c, h * w);
                let x = self.data();
                let b = bias.data();
                let mut out = vec![0.0f32; n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        let bv = b[ch];
                        for p in 0..hw {
                            out[base + p] = x[base + p] + bv;
                        }
                    }
                }
                drop(x);
                drop(b);
                Ok(Tensor::from_op(
                    self.shape().to_vec(),
                    out,
                    &[self, bias],
                    Box::new(move |g, _out, parents| {
                        parents[0].accumulate_grad(g);
                        if parents[1].requires_grad() {
                            let mut db = vec![0.0f32; c];
                            for i in 0..n {
                                for ch in 0..c {
                                    let base = (i * c + ch) * hw;
                                    db[ch] += g[base..base + hw].iter().sum::<f32>();
                                }
                            }
                            parents[1].accumulate_grad(&db);
                        }
                    }),
                ))
            }
            _ => Err(shape_err("add_bias", self.shape(), bias.shape())),
        }
    }

    // ── convolution and pooling ─────────────────────────────────────

    /// 2-d convolution, NCHW input and OIHW kernel, stride >= 1.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: Padding) -> TensorResult {
        if self.shape().len() != 4 || kernel.shape().len() != 4 {
            return Err(shape_err("conv2d", self.shape(), kernel.shape()));
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (o, ci, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if ci != c {
            return Err(shape_err("conv2d", self.shape(), kernel.shape()));
        }
        let (oh, ow, ph, pw) = conv_geometry(h, w, kh, kw, stride, padding).ok_or_else(|| {
            TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} does not fit input {h}x{w} at stride {stride}"),
            }
        })?;

        let kdim = c * kh * kw;
        let spatial = oh * ow;
        let mut out = vec![0.0f32; n * o * spatial];
        let mut cols_all: Vec<Vec<f32>> = Vec::with_capacity(n);
        {
            let x = self.data();
            let kdata = kernel.data();
            for i in 0..n {
                let cols = im2col(
                    &x[i * c * h * w..(i + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    ph,
                    pw,
                    oh,
                    ow,
                );
                // out rows are output channels: [O, oh*ow] in NCHW order
                let res = matmul_nt(&kdata, &cols, o, kdim, spatial);
                out[i * o * spatial..(i + 1) * o * spatial].copy_from_slice(&res);
                cols_all.push(cols);
            }
        }

        Ok(Tensor::from_op(
            vec![n, o, oh, ow],
            out,
            &[self, kernel],
            Box::new(move |g, _out, parents| {
                let (input, kern) = (&parents[0], &parents[1]);
                let kdata = kern.to_vec();
                let mut dkernel = vec![0.0f32; o * kdim];
                let mut dinput = vec![0.0f32; n * c * h * w];
                let input_grad = input.requires_grad();
                for i in 0..n {
                    let gout = &g[i * o * spatial..(i + 1) * o * spatial];
                    let cols = &cols_all[i];
                    if kern.requires_grad() {
                        // dK[o,k] += sum_s gout[o,s] * cols[s,k]
                        let dk = matmul_raw(gout, cols, o, spatial, kdim);
                        for (acc, v) in dkernel.iter_mut().zip(&dk) {
                            *acc += v;
                        }
                    }
                    if input_grad {
                        // dcols[s,k] = sum_o gout[o,s] * K[o,k]
                        let dcols = matmul_tn(gout, &kdata, o, spatial, kdim);
                        col2im_add(
                            &dcols,
                            &mut dinput[i * c * h * w..(i + 1) * c * h * w],
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            ph,
                            pw,
                            oh,
                            ow,
                        );
                    }
                }
                if kern.requires_grad() {
                    kern.accumulate_grad(&dkernel);
                }
                if input_grad {
                    input.accumulate_grad(&dinput);
                }
            }),
        ))
    }

    pub fn maxpool2d(&self, size: usize, stride: usize) -> TensorResult {
        pool2d(self, size, stride, true)
    }

    pub fn avgpool2d(&self, size: usize, stride: usize) -> TensorResult {
        pool2d(self, size, stride, false)
    }

    // ── classifier heads ────────────────────────────────────────────

    /// Row-wise softmax of a [N, K] tensor.
    pub fn softmax(&self) -> TensorResult {
        if self.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("needs a 2-d input, got {:?}", self.shape()),
            });
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let out = softmax_rows(&self.data(), n, k);
        Ok(Tensor::from_op(
            vec![n, k],
            out,
            &[self],
            Box::new(move |g, out, parents| {
                let mut d = vec![0.0f32; n * k];
                for i in 0..n {
                    let y = &out[i * k..(i + 1) * k];
                    let gr = &g[i * k..(i + 1) * k];
                    let dot: f32 = y.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for j in 0..k {
                        d[i * k + j] = y[j] * (gr[j] - dot);
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        ))
    }

    /// Per-sample cross entropy from raw logits: [N, K] with N labels,
    /// returning [N] losses. Numerically stable log-softmax form.
    pub fn cross_entropy_with_logits(&self, labels: &[usize]) -> TensorResult {
        if self.shape().len() != 2 || self.shape()[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy_with_logits",
                msg: format!(
                    "logits {:?} incompatible with {} labels",
                    self.shape(),
                    labels.len()
                ),
            });
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&t| t >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy_with_logits",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let probs = softmax_rows(&self.data(), n, k);
        let data = self.data();
        let mut losses = vec![0.0f32; n];
        for (i, &t) in labels.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f32 = row.iter().map(|&z| (z - max).exp()).sum::<f32>().ln() + max;
            losses[i] = lse - row[t];
        }
        drop(data);
        let labels_owned = labels.to_vec();
        Ok(Tensor::from_op(
            vec![n],
            losses,
            &[self],
            Box::new(move |g, _out, parents| {
                let mut d = vec![0.0f32; n * k];
                for i in 0..n {
                    let gi = g[i];
                    for j in 0..k {
                        let indicator = if j == labels_owned[i] { 1.0 } else { 0.0 };
                        d[i * k + j] = gi * (probs[i * k + j] - indicator);
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        ))
    }

    /// Per-sample margin loss max(max_{j != t} z_j - z_t, -confidence),
    /// the targeted objective used by optimization attacks.
    pub fn margin_loss(&self, targets: &[usize], confidence: f32) -> TensorResult {
        if self.shape().len() != 2 || self.shape()[0] != targets.len() {
            return Err(TensorError::Invalid {
                op: "margin_loss",
                msg: format!(
                    "logits {:?} incompatible with {} targets",
                    self.shape(),
                    targets.len()
                ),
            });
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let data = self.data();
        let mut losses = vec![0.0f32; n];
        let mut best_other = vec![0usize; n];
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * k..(i + 1) * k];
            let (mut bj, mut bv) = (usize::MAX, f32::NEG_INFINITY);
            for (j, &z) in row.iter().enumerate() {
                if j != t && z > bv {
                    bv = z;
                    bj = j;
                }
            }
            best_other[i] = bj;
            losses[i] = (bv - row[t]).max(-confidence);
        }
        drop(data);
        let targets_owned = targets.to_vec();
        Ok(Tensor::from_op(
            vec![n],
            losses,
            &[self],
            Box::new(move |g, out, parents| {
                let mut d = vec![0.0f32; n * k];
                for i in 0..n {
                    // inactive when clamped at -confidence
                    if out[i] > -confidence {
                        d[i * k + best_other[i]] += g[i];
                        d[i * k + targets_owned[i]] -= g[i];
                    }
                }
                parents[0].accumulate_grad(&d);
            }),
        ))
    }

    /// Cosine similarity of each row of [N,D] against a fixed [D] reference.
    /// Differentiable in the rows; the reference is treated as constant.
    pub fn cosine_rows(&self, reference: &Tensor) -> TensorResult {
        if self.shape().len() != 2 || reference.shape() != [self.shape()[1]] {
            return Err(shape_err("cosine_rows", self.shape(), reference.shape()));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        let r = reference.to_vec();
        let rnorm = norm(&r);
        if rnorm == 0.0 {
            return Err(TensorError::ZeroNorm);
        }
        let data = self.data();
        let mut out = vec![0.0f32; n];
        for i in 0..n {
            let row = &data[i * d..(i + 1) * d];
            let xnorm = norm(row);
            if xnorm == 0.0 {
                return Err(TensorError::ZeroNorm);
            }
            out[i] = dot(row, &r) / (xnorm * rnorm);
        }
        drop(data);
        Ok(Tensor::from_op(
            vec![n],
            out,
            &[self, reference],
            Box::new(move |g, out, parents| {
                if !parents[0].requires_grad() {
                    return;
                }
                let x = parents[0].to_vec();
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    let row = &x[i * d..(i + 1) * d];
                    let xnorm = norm(row);
                    let cosv = out[i];
                    let dst = &mut dx[i * d..(i + 1) * d];
                    for j in 0..d {
                        dst[j] =
                            g[i] * (r[j] / (xnorm * rnorm) - cosv * row[j] / (xnorm * xnorm));
                    }
                }
                parents[0].accumulate_grad(&dx);
            }),
        ))
    }

    // ── data helpers (no gradient flow) ─────────────────────────────

    /// Row argmax of a [N, K] tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape().len(), 2, "argmax_rows needs a 2-d tensor");
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let data = self.data();
        (0..n)
            .map(|i| {
                let row = &data[i * k..(i + 1) * k];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect()
    }

    /// Copy of row `i` of a batched tensor ([N, ...] -> [...]).
    pub fn row(&self, i: usize) -> Tensor {
        assert!(!self.shape().is_empty() && i < self.shape()[0]);
        let row: usize = self.shape()[1..].iter().product();
        let data = self.data()[i * row..(i + 1) * row].to_vec();
        Tensor::new(&self.shape()[1..], data).unwrap()
    }

    /// Stack equal-shape tensors along a new leading dimension.
    pub fn stack(rows: &[Tensor]) -> TensorResult {
        let first = rows.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            msg: "empty input".into(),
        })?;
        let mut data = Vec::with_capacity(rows.len() * first.numel());
        for r in rows {
            if r.shape() != first.shape() {
                return Err(shape_err("stack", first.shape(), r.shape()));
            }
            data.extend_from_slice(&r.data());
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(&shape, data)
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

fn softmax_rows(data: &[f32], n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * k];
    for i in 0..n {
        let row = &data[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let dst = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0f32;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Output geometry and padding offsets for a convolution or pooling window.
fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize, usize, usize)> {
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return None;
            }
            Some(((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0))
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            Some((oh, ow, pad_h / 2, pad_w / 2))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let kdim = c * kh * kw;
    let mut cols = vec![0.0f32; oh * ow * kdim];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols[(oy * ow + ox) * kdim..(oy * ow + ox + 1) * kdim];
            let mut idx = 0;
            for ch in 0..c {
                for ky in 0..kh {
                    let y = (oy * stride + ky) as isize - ph as isize;
                    for kx in 0..kw {
                        let xcol = (ox * stride + kx) as isize - pw as isize;
                        dst[idx] = if y >= 0 && (y as usize) < h && xcol >= 0 && (xcol as usize) < w
                        {
                            x[(ch * h + y as usize) * w + xcol as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    x: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
) {
    let kdim = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &cols[(oy * ow + ox) * kdim..(oy * ow + ox + 1) * kdim];
            let mut idx = 0;
            for ch in 0..c {
                for ky in 0..kh {
                    let y = (oy * stride + ky) as isize - ph as isize;
                    for kx in 0..kw {
                        let xcol = (ox * stride + kx) as isize - pw as isize;
                        if y >= 0 && (y as usize) < h && xcol >= 0 && (xcol as usize) < w {
                            x[(ch * h + y as usize) * w + xcol as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn pool2d(input: &Tensor, size: usize, stride: usize, is_max: bool) -> TensorResult {
    let op: &'static str = if is_max { "maxpool2d" } else { "avgpool2d" };
    if input.shape().len() != 4 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("needs NCHW input, got {:?}", input.shape()),
        });
    }
    if size == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "size and stride must be >= 1".into(),
        });
    }
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if size > h || size > w {
        return Err(TensorError::Invalid {
            op,
            msg: format!("window {size} does not fit {h}x{w}"),
        });
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = if is_max {
        vec![0usize; n * c * oh * ow]
    } else {
        Vec::new()
    };
    {
        let x = input.data();
        for i in 0..n {
            for ch in 0..c {
                let plane = &x[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let oidx = ((i * c + ch) * oh + oy) * ow + ox;
                        if is_max {
                            let (mut bi, mut bv) = (0usize, f32::NEG_INFINITY);
                            for ky in 0..size {
                                for kx in 0..size {
                                    let idx = (oy * stride + ky) * w + ox * stride + kx;
                                    if plane[idx] > bv {
                                        bv = plane[idx];
                                        bi = idx;
                                    }
                                }
                            }
                            out[oidx] = bv;
                            argmax[oidx] = (i * c + ch) * h * w + bi;
                        } else {
                            let mut s = 0.0f32;
                            for ky in 0..size {
                                for kx in 0..size {
                                    s += plane[(oy * stride + ky) * w + ox * stride + kx];
                                }
                            }
                            out[oidx] = s / (size * size) as f32;
                        }
                    }
                }
            }
        }
    }
    let inv_area = 1.0 / (size * size) as f32;
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        &[input],
        Box::new(move |g, _out, parents| {
            let mut d = vec![0.0f32; n * c * h * w];
            if is_max {
                for (oidx, &src) in argmax.iter().enumerate() {
                    d[src] += g[oidx];
                }
            } else {
                for i in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((i * c + ch) * oh + oy) * ow + ox] * inv_area;
                                for ky in 0..size {
                                    for kx in 0..size {
                                        d[(i * c + ch) * h * w
                                            + (oy * stride + ky) * w
                                            + ox * stride
                                            + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&d);
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[3.0, -1.5, 2.0, 7.0]);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_definition() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv2d_ones_valid() {
        // 3x3 ones * 2x2 ones kernel, stride 1 valid -> 2x2 of 4.0
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        let out = x.conv2d(&k, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.to_vec(), vec![4.0; 4]);
    }

    #[test]
    fn conv2d_hand_computed_window_sums() {
        // Sliding-window oracle computed by hand: input 1..9 in a 3x3 grid,
        // kernel of ones. Windows: (1+2+4+5)=12, (2+3+5+6)=16,
        // (4+5+7+8)=24, (5+6+8+9)=28.
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        let out = x.conv2d(&k, 1, Padding::Valid).unwrap();
        assert_eq!(out.to_vec(), vec![12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_same_padding_preserves_size() {
        let x = t(&[1, 1, 5, 5], &[1.0; 25]);
        let k = t(&[1, 1, 3, 3], &[1.0; 9]);
        let out = x.conv2d(&k, 1, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        // center pixel sees the full 3x3 window
        assert_eq!(out.to_vec()[12], 9.0);
        // corner sees 2x2
        assert_eq!(out.to_vec()[0], 4.0);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = t(&[1, 1, 3, 3], &[0.0; 9]);
        let k = t(&[1, 1, 4, 4], &[0.0; 16]);
        assert!(x.conv2d(&k, 1, Padding::Valid).is_err());
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let x = Tensor::leaf(
            &[1, 1, 2, 2],
            vec![1.0, 5.0, 3.0, 2.0],
            true,
        )
        .unwrap();
        let y = x.maxpool2d(2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 10.0, 10.0, 10.0]);
        let s = x.softmax().unwrap();
        let d = s.to_vec();
        for i in 0..2 {
            let sum: f32 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_matches_neg_log_softmax() {
        let x = t(&[1, 3], &[1.0, 2.0, 0.5]);
        let probs = x.softmax().unwrap().to_vec();
        let ce = x.cross_entropy_with_logits(&[1]).unwrap().to_vec()[0];
        assert!((ce - (-probs[1].ln())).abs() < 1e-5);
    }

    #[test]
    fn cosine_self_and_negation() {
        let v = t(&[1, 4], &[0.3, -1.2, 4.0, 0.01]);
        let r = t(&[4], &[0.3, -1.2, 4.0, 0.01]);
        let c = v.cosine_rows(&r).unwrap().to_vec()[0];
        assert!((c - 1.0).abs() < 1e-6);
        let neg = v.scale(-1.0);
        let c2 = neg.cosine_rows(&r).unwrap().to_vec()[0];
        assert!((c2 + 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let v = t(&[1, 3], &[0.0, 0.0, 0.0]);
        let r = t(&[3], &[1.0, 0.0, 0.0]);
        assert!(matches!(v.cosine_rows(&r), Err(TensorError::ZeroNorm)));
    }

    #[test]
    fn cosine_orthogonal_vectors() {
        let v = t(&[1, 2], &[1.0, 0.0]);
        let r = t(&[2], &[0.0, 1.0]);
        let c = v.cosine_rows(&r).unwrap().to_vec()[0];
        assert!(c.abs() < 1e-6);
    }

    #[test]
    fn sign_convention_at_zero() {
        let x = t(&[3], &[-2.0, 0.0, 3.0]);
        assert_eq!(x.sign().to_vec(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn quantize_is_idempotent_and_coarse() {
        let x = t(&[4], &[0.0, 0.49, 0.51, 1.0]);
        let q = x.quantize(2);
        assert_eq!(q.to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
        let qq = q.quantize(2);
        assert_eq!(qq.to_vec(), q.to_vec());
    }

    #[test]
    fn margin_loss_sign() {
        // logits [2, 0], target 1: margin = 2 - 0 = 2
        let x = t(&[1, 2], &[2.0, 0.0]);
        let m = x.margin_loss(&[1], 0.0).unwrap();
        assert_eq!(m.to_vec(), vec![2.0]);
        // high-confidence satisfied case clamps at -confidence
        let y = t(&[1, 2], &[0.0, 100.0]);
        let m2 = y.margin_loss(&[1], 50.0).unwrap();
        assert_eq!(m2.to_vec(), vec![-50.0]);
    }

    #[test]
    fn stack_and_row_roundtrip() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.row(1).to_vec(), vec![3.0, 4.0]);
    }
}
