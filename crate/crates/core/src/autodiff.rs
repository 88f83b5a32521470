//! Minimal reverse-mode differentiation over a tape of 2-D tensor operations.
//!
//! The op set is exactly what the denoiser uses: embedding lookup, broadcasts, dense
//! products, layer norm, GELU/SiLU, fused multi-head self-attention and a fused
//! softmax cross-entropy. Each op records whatever its backward pass needs.

use crate::scalar::Scalar;
use crate::tensor::{col_sums, matmul, matmul_at, matmul_bt, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

enum Op<S> {
    Input,
    Param(usize),
    Embed {
        table: Var,
        idx: Vec<usize>,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    /// Row `r` of the input is repeated `group` times consecutively.
    Repeat {
        x: Var,
        group: usize,
    },
    /// The whole input is stacked `times` times.
    Tile {
        x: Var,
        times: usize,
    },
    MatMul(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Silu(Var),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
}

pub struct Tape<S> {
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf whose gradient is reported under `slot` by [`Tape::backward`].
    pub fn param(&mut self, slot: usize, value: Tensor<S>) -> Var {
        self.push(value, Op::Param(slot))
    }

    pub fn embed(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Embed { table, idx })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, out.cols), "bias shape");
        for r in 0..out.rows {
            for (o, &v) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn repeat(&mut self, x: Var, group: usize) -> Var {
        let v = self.value(x);
        let mut out = Tensor::zeros(v.rows * group, v.cols);
        for r in 0..v.rows {
            for g in 0..group {
                out.row_mut(r * group + g).copy_from_slice(v.row(r));
            }
        }
        self.push(out, Op::Repeat { x, group })
    }

    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&v.data);
        }
        let out = Tensor::from_vec(v.rows * times, v.cols, data);
        self.push(out, Op::Tile { x, times })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = S::of(cols as f64);
        let eps = S::of(LN_EPS);
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&z| gelu(z)).collect();
        let out = Tensor::from_vec(v.rows, v.cols, data);
        self.push(out, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&z| z * sigmoid(z)).collect();
        let out = Tensor::from_vec(v.rows, v.cols, data);
        self.push(out, Op::Silu(x))
    }

    /// Multi-head self-attention over `batch` independent sequences of length `seq`.
    ///
    /// `qkv` is `(batch * seq) x 3d` laid out as `[Q | K | V]`; the result is `(batch * seq) x d`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let x = self.value(qkv);
        assert_eq!(x.rows, batch * seq, "attention rows");
        assert_eq!(x.cols % (3 * heads), 0, "attention width");
        let d = x.cols / 3;
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut out = Tensor::zeros(batch * seq, d);
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut scores = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &x.row(b * seq + i)[h * dh..(h + 1) * dh];
                    let mut max = S::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &x.row(b * seq + j)[d + h * dh..d + (h + 1) * dh];
                        let mut acc = S::zero();
                        for (&a, &c) in q.iter().zip(k) {
                            acc += a * c;
                        }
                        *s = acc * scale;
                        max = max.max(*s);
                    }
                    let mut z = S::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_row = &mut probs[p_off + i * seq..p_off + (i + 1) * seq];
                    for (p, &s) in p_row.iter_mut().zip(&scores) {
                        *p = s / z;
                    }
                    let o = &mut out.data[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                    for (j, &p) in p_row.iter().enumerate() {
                        let v = &x.row(b * seq + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                        for (oo, &vv) in o.iter_mut().zip(v) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, as a `1 x 1` tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "one target per row");
        let mut probs = vec![S::zero(); l.len()];
        let mut total = S::zero();
        for (r, &target) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for (c, &v) in row.iter().enumerate() {
                probs[r * l.cols + c] = (v - log_z).exp();
            }
            total += log_z - row[target];
        }
        let loss = total / S::of(targets.len() as f64);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Reverse sweep from the scalar `root`; returns `(slot, gradient)` for every param leaf.
    pub fn backward(&self, root: Var) -> Vec<(usize, Tensor<S>)> {
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.values.len()];
        let rv = self.value(root);
        grads[root.0] = Some(Tensor::filled(rv.rows, rv.cols, S::one()));
        let mut out = Vec::new();

        fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for n in (0..=root.0).rev() {
            let Some(g) = grads[n].take() else { continue };
            match &self.ops[n] {
                Op::Input => {}
                Op::Param(slot) => out.push((*slot, g)),
                Op::Embed { table, idx } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow { x, bias } => {
                    accumulate(&mut grads[bias.0], col_sums(&g));
                    accumulate(&mut grads[x.0], g);
                }
                Op::Repeat { x, group } => {
                    let v = self.value(*x);
                    let mut gx = Tensor::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        for k in 0..*group {
                            for (a, &b) in gx.row_mut(r).iter_mut().zip(g.row(r * group + k)) {
                                *a += b;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tile { x, times } => {
                    let v = self.value(*x);
                    let mut gx = Tensor::zeros(v.rows, v.cols);
                    for k in 0..*times {
                        let chunk = &g.data[k * v.len()..(k + 1) * v.len()];
                        for (a, &b) in gx.data.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads[b.0], matmul_at(av, &g));
                    accumulate(&mut grads[a.0], matmul_bt(&g, bv));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = g.shape();
                    let gv = &self.value(*gain).data;
                    let n = S::of(cols as f64);
                    let mut gg = Tensor::zeros(1, cols);
                    let gb = col_sums(&g);
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..cols {
                            gg.data[c] += gr[c] * xh[c];
                            let d = gr[c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            out[c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[gain.0], gg);
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let v = self.value(*x);
                    let data = v.data.iter().zip(&g.data).map(|(&z, &d)| d * gelu_grad(z)).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(v.rows, v.cols, data));
                }
                Op::Silu(x) => {
                    let v = self.value(*x);
                    let data = v
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&z, &d)| {
                            let s = sigmoid(z);
                            d * (s + z * s * (S::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(v.rows, v.cols, data));
                }
                Op::Attention {
                    qkv,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let gx = attention_backward(self.value(*qkv), &g, probs, *batch, *seq, *heads);
                    accumulate(&mut grads[qkv.0], gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let l = self.value(*logits);
                    let upstream = g.data[0] / S::of(targets.len() as f64);
                    let mut gl = Tensor::from_vec(l.rows, l.cols, probs.clone());
                    for (r, &t) in targets.iter().enumerate() {
                        gl.data[r * l.cols + t] -= S::one();
                    }
                    for v in gl.data.iter_mut() {
                        *v *= upstream;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        out
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

fn gelu<S: Scalar>(z: S) -> S {
    let k = S::of((2.0 / std::f64::consts::PI).sqrt());
    let half = S::of(0.5);
    half * z * (S::one() + (k * (z + S::of(GELU_C) * z * z * z)).tanh())
}

fn gelu_grad<S: Scalar>(z: S) -> S {
    let k = S::of((2.0 / std::f64::consts::PI).sqrt());
    let half = S::of(0.5);
    let c = S::of(GELU_C);
    let th = (k * (z + c * z * z * z)).tanh();
    half * (S::one() + th) + half * z * (S::one() - th * th) * k * (S::one() + S::of(3.0) * c * z * z)
}

fn attention_backward<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    probs: &[S],
    batch: usize,
    seq: usize,
    heads: usize,
) -> Tensor<S> {
    let d = x.cols / 3;
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut gx = Tensor::zeros(x.rows, x.cols);
    let mut dp = vec![S::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let go = &g.row(b * seq + i)[h * dh..(h + 1) * dh];
                let p_row = &probs[p_off + i * seq..p_off + (i + 1) * seq];
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                let mut weighted = S::zero();
                for j in 0..seq {
                    let v = &x.row(b * seq + j)[2 * d + h * dh..2 * d + (h + 1) * dh];
                    let mut acc = S::zero();
                    for (&a, &c) in go.iter().zip(v) {
                        acc += a * c;
                    }
                    dp[j] = acc;
                    weighted += acc * p_row[j];
                    let p = p_row[j];
                    let gv = &mut gx.data[(b * seq + j) * x.cols + 2 * d + h * dh
                        ..(b * seq + j) * x.cols + 2 * d + (h + 1) * dh];
                    for (a, &o) in gv.iter_mut().zip(go) {
                        *a += p * o;
                    }
                }
                // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik), scaled into dQ_i and dK_j.
                for j in 0..seq {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let kj = b * seq + j;
                    let qi = b * seq + i;
                    for c in 0..dh {
                        let k_val = x.data[kj * x.cols + d + h * dh + c];
                        let q_val = x.data[qi * x.cols + h * dh + c];
                        gx.data[qi * x.cols + h * dh + c] += ds * k_val;
                        gx.data[kj * x.cols + d + h * dh + c] += ds * q_val;
                    }
                }
            }
        }
    }
    gx
}
