//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products, skipping nodes
//! with no differentiable ancestor. A tape is built per forward pass and
//! dropped afterwards; gradients are never carried across tapes.

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Probability floor inside `ln` for [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv3x3 {
        x: Var,
        w: Var,
        cols: Vec<f64>,
    },
    /// Small images: the kernel unrolled into a `[hwc, hw·cout]` matrix.
    Conv3x3Dense {
        x: Var,
        w: Var,
        unrolled: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Statistics of a training-mode batch-norm call, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (used for running-stat updates).
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
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

/// `c = a' * b' + beta * c` where `'` is an optional transpose.
/// `a` is stored `m×k` (or `k×m` when transposed), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides stay inside them.
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

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn softmax_into(x: &[f64], out: &mut [f64], outer: usize, dim: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut max = f64::NEG_INFINITY;
            for d in 0..dim {
                max = max.max(x[base + d * inner]);
            }
            let mut total = 0.0;
            for d in 0..dim {
                let e = (x[base + d * inner] - max).exp();
                out[base + d * inner] = e;
                total += e;
            }
            for d in 0..dim {
                out[base + d * inner] /= total;
            }
        }
    }
}

/// Row-wise softmax of a `rows×cols` buffer.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols > 0 {
        softmax_into(x, &mut out, x.len() / cols, cols, 1);
    }
    out
}

fn im2col(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; b * h * w * k];
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let row = ((bi * h + hi) * w + wi) * k;
                for kh in 0..3 {
                    let ih = hi as isize + kh as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = wi as isize + kw as isize - 1;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + ih as usize) * w + iw as usize) * c;
                        let dst = row + (kh * 3 + kw) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Images with at most this many pixels use the unrolled-kernel path.
const DENSE_CONV_MAX_PIXELS: usize = 16;

/// Visits every (input pixel, output pixel, kernel tap) triple of a padded
/// 3×3 convolution.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for ho in 0..h {
        for wo in 0..w {
            for kh in 0..3 {
                let Some(hi) = (ho + kh).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kw in 0..3 {
                    let Some(wi) = (wo + kw).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    f(hi * w + wi, ho * w + wo, kh * 3 + kw);
                }
            }
        }
    }
}

fn unroll_kernel(k: &[f64], h: usize, w: usize, c: usize, cout: usize) -> Vec<f64> {
    let fan_out = h * w * cout;
    let mut big = vec![0.0; h * w * c * fan_out];
    for_each_tap(h, w, |pin, pout, tap| {
        for ci in 0..c {
            let src = (tap * c + ci) * cout;
            let dst = (pin * c + ci) * fan_out + pout * cout;
            big[dst..dst + cout].copy_from_slice(&k[src..src + cout]);
        }
    });
    big
}

fn fold_kernel_grad(dbig: &[f64], dk: &mut [f64], h: usize, w: usize, c: usize, cout: usize) {
    let fan_out = h * w * cout;
    for_each_tap(h, w, |pin, pout, tap| {
        for ci in 0..c {
            let src = (pin * c + ci) * fan_out + pout * cout;
            let dst = (tap * c + ci) * cout;
            for co in 0..cout {
                dk[dst + co] += dbig[src + co];
            }
        }
    });
}

fn col2im_add(dcols: &[f64], dx: &mut [f64], b: usize, h: usize, w: usize, c: usize) {
    let k = 9 * c;
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let row = ((bi * h + hi) * w + wi) * k;
                for kh in 0..3 {
                    let ih = hi as isize + kh as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let iw = wi as isize + kw as isize - 1;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + ih as usize) * w + iw as usize) * c;
                        let src = row + (kh * 3 + kw) * c;
                        for ci in 0..c {
                            dx[dst + ci] += dcols[src + ci];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Places a tensor on the tape; it is differentiable iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Places a tensor on the tape as a constant regardless of its flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what}: expected 2-D, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// Adds a length-`c` bias to every row of an `n×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "bias {:?} for {c} columns",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!(
                "softmax axis {axis} for rank {}",
                shape.len()
            )));
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![0.0; self.value(x).len()];
        softmax_into(self.value(x), &mut out, outer, dim, inner);
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            },
            ng,
        ))
    }

    fn check_labels(&self, v: Var, labels: &[usize], what: &str) -> Result<(usize, usize)> {
        let (n, c) = self.dims2(v, what)?;
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{what}: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("{what}: label {bad} with {c} classes")));
        }
        Ok((n, c))
    }

    /// Mean negative log-likelihood of `labels` under row-normalized `probs`,
    /// with probabilities floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.check_labels(probs, labels, "cross_entropy")?;
        let p = self.value(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p[i * c + l].max(PROB_FLOOR).ln())
            .sum();
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.ng(probs);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Fused row-softmax and cross-entropy on logits (exact log-softmax).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.check_labels(logits, labels, "softmax_cross_entropy")?;
        let z = self.value(logits);
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[l];
            for (j, v) in row.iter().enumerate() {
                probs[i * c + j] = (v - lse).exp();
            }
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims2(p, "concat_cols")?.0,
            None => return Err(Error::Dimension("concat of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s / n], Op::Mean(x), ng)
    }

    /// 3×3 convolution, stride 1, one-pixel zero padding, no bias.
    /// `x` is NHWC `[B,H,W,Cin]`, `w` is `[9·Cin, Cout]` with rows ordered
    /// `(kh, kw, cin)`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, h, wd, c) = match self.shape(x) {
            [b, h, w, c] => (*b, *h, *w, *c),
            s => return Err(Error::Dimension(format!("conv3x3 input {s:?} is not NHWC"))),
        };
        let (k, cout) = self.dims2(w, "conv3x3 kernel")?;
        if k != 9 * c {
            return Err(Error::Dimension(format!(
                "conv3x3 kernel has {k} rows for {c} input channels"
            )));
        }
        let ng = self.ng(x) || self.ng(w);
        if h * wd <= DENSE_CONV_MAX_PIXELS {
            let unrolled = unroll_kernel(self.value(w), h, wd, c, cout);
            let mut out = vec![0.0; b * h * wd * cout];
            let (fan_in, fan_out) = (h * wd * c, h * wd * cout);
            gemm(b, fan_in, fan_out, self.value(x), false, &unrolled, false, &mut out, 0.0);
            return Ok(self.push(
                vec![b, h, wd, cout],
                out,
                Op::Conv3x3Dense { x, w, unrolled },
                ng,
            ));
        }
        let cols = im2col(self.value(x), b, h, wd, c);
        let rows = b * h * wd;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, k, cout, &cols, false, self.value(w), false, &mut out, 0.0);
        Ok(self.push(vec![b, h, wd, cout], out, Op::Conv3x3 { x, w, cols }, ng))
    }

    fn bn_common(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm affine params for {c} channels"
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.chunks(c).enumerate() {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = xh;
                out[r * c + ch] = g[ch] * xh + bt[ch];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        ))
    }

    /// Batch normalization over the last axis using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let c = *self.shape(x).last().unwrap_or(&0);
        let xv = self.value(x);
        let rows = if c == 0 { 0 } else { xv.len() / c };
        if rows < 2 {
            return Err(Error::Dimension(
                "batch_norm needs at least two values per channel in training mode".into(),
            ));
        }
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for ch in 0..c {
                mean[ch] += row[ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for ch in 0..c {
                let d = row[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        let var_unbiased = var.iter().map(|v| v / (rows - 1) as f64).collect();
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let out = self.bn_common(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if mean.len() != c || var.len() != c {
            return Err(Error::Dimension(format!(
                "running stats for {} channels, input has {c}",
                mean.len()
            )));
        }
        self.bn_common(x, gamma, beta, mean, var, eps, false)
    }

    /// Averages NHWC `[B,H,W,C]` over the spatial dims into `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, h, w, c) = match self.shape(x) {
            [b, h, w, c] => (*b, *h, *w, *c),
            s => return Err(Error::Dimension(format!("global_avg_pool input {s:?}"))),
        };
        let hw = h * w;
        let xv = self.value(x);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for p in 0..hw {
                let src = (bi * hw + p) * c;
                for ch in 0..c {
                    out[bi * c + ch] += xv[src + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        let ng = self.ng(x);
        Ok(self.push(vec![b, c], out, Op::GlobalAvgPool(x), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if want(*a) {
                    let da = accumulate(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b), true, da, 1.0);
                }
                if want(*b) {
                    let db = accumulate(grads, *b, k * n);
                    gemm(k, m, n, val(*a), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(*v) {
                        let d = accumulate(grads, *v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if want(*x) {
                    let d = accumulate(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if want(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let d = accumulate(grads, *bias, c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = val(*b);
                    let d = accumulate(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if want(*b) {
                    let av = val(*a);
                    let d = accumulate(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, f) => {
                let d = accumulate(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let d = accumulate(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let d = accumulate(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            } => {
                let y = &node.value;
                let d = accumulate(grads, *x, g.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * dim * inner + i;
                        let dot: f64 = (0..*dim)
                            .map(|k| g[base + k * inner] * y[base + k * inner])
                            .sum();
                        for k in 0..*dim {
                            let idx = base + k * inner;
                            d[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let c = self.nodes[probs.0].shape[1];
                let n = labels.len() as f64;
                let p = val(*probs);
                let d = accumulate(grads, *probs, p.len());
                for (i, &l) in labels.iter().enumerate() {
                    let pv = p[i * c + l];
                    if pv > PROB_FLOOR {
                        d[i * c + l] -= g[0] / (n * pv);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].shape[1];
                let n = labels.len() as f64;
                let d = accumulate(grads, *logits, probs.len());
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        d[i * c + j] += g[0] * (probs[i * c + j] - onehot) / n;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if want(*p) {
                        let d = accumulate(grads, *p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                let d = accumulate(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].value.len();
                let d = accumulate(grads, *x, len);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                let d = accumulate(grads, *x, len);
                let s = g[0] / len.max(1) as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
            Op::Conv3x3Dense { x, w, unrolled } => {
                let (b, h, wd, c) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2], s[3])
                };
                let cout = node.shape[3];
                let (fan_in, fan_out) = (h * wd * c, h * wd * cout);
                if want(*w) {
                    let mut dbig = vec![0.0; fan_in * fan_out];
                    gemm(fan_in, b, fan_out, val(*x), true, g, false, &mut dbig, 0.0);
                    let dw = accumulate(grads, *w, 9 * c * cout);
                    fold_kernel_grad(&dbig, dw, h, wd, c, cout);
                }
                if want(*x) {
                    let dx = accumulate(grads, *x, b * fan_in);
                    gemm(b, fan_out, fan_in, g, false, unrolled, true, dx, 1.0);
                }
            }
            Op::Conv3x3 { x, w, cols } => {
                let (b, h, wd, c) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1], s[2], s[3])
                };
                let k = 9 * c;
                let cout = node.shape[3];
                let rows = b * h * wd;
                if want(*w) {
                    let dw = accumulate(grads, *w, k * cout);
                    gemm(k, rows, cout, cols, true, g, false, dw, 1.0);
                }
                if want(*x) {
                    let mut dcols = vec![0.0; rows * k];
                    gemm(rows, cout, k, g, false, val(*w), true, &mut dcols, 0.0);
                    let dx = accumulate(grads, *x, b * h * wd * c);
                    col2im_add(&dcols, dx, b, h, wd, c);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                if want(*beta) {
                    let d = accumulate(grads, *beta, c);
                    for row in g.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
                if want(*gamma) {
                    let d = accumulate(grads, *gamma, c);
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            d[ch] += gr[ch] * xr[ch];
                        }
                    }
                }
                if want(*x) {
                    let gm = val(*gamma);
                    let d = accumulate(grads, *x, g.len());
                    if *batch_stats {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let dxh = gr[ch] * gm[ch];
                                s1[ch] += dxh;
                                s2[ch] += dxh * xr[ch];
                            }
                        }
                        let nr = rows as f64;
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                let dxh = g[i] * gm[ch];
                                d[i] += inv_std[ch] / nr
                                    * (nr * dxh - s1[ch] - xhat[i] * s2[ch]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for ch in 0..c {
                                let i = r * c + ch;
                                d[i] += g[i] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = &self.nodes[x.0].shape;
                let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                let d = accumulate(grads, *x, b * hw * c);
                let inv = 1.0 / hw as f64;
                for bi in 0..b {
                    for p in 0..hw {
                        let dst = (bi * hw + p) * c;
                        for ch in 0..c {
                            d[dst + ch] += g[bi * c + ch] * inv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(&t(vec![2, 1], vec![1.0, 1.0]));
        let r = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(r), &[2, 1]);
        assert_eq!(tape.value(r), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn activations_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let z = tape.constant(&Tensor::zeros(vec![1, 4]));
        let s = tape.softmax(z, 1).unwrap();
        assert_eq!(tape.value(s), &[0.25; 4]);
        assert!(tape.softmax(z, 2).is_err());

        let x0 = tape.leaf(&Tensor::zeros(vec![1]).with_grad());
        let th = tape.tanh(x0);
        let loss = tape.sum(th);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x0).unwrap(), &[1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let p = tape.constant(&t(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]));
        let l = tape.cross_entropy(p, &[0]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        let floor = tape.cross_entropy(p, &[1]).unwrap();
        assert!((tape.scalar(floor) - (-PROB_FLOOR.ln())).abs() < 1e-9);

        let u = tape.constant(&Tensor::filled(vec![3, 4], 0.25));
        let l = tape.cross_entropy(u, &[0, 2, 3]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(u, &[0, 4, 1]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            tape.cross_entropy(u, &[0, 1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]).with_grad());
        let b = tape.constant(&t(vec![2, 1], vec![3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(b).is_none());
    }
}
