use super::{AttentionMask, Tensor};
use crate::error::{Error, Result};

/// Recorded operation, holding its inputs and whatever the backward rule
/// needs that is not recoverable from the output values.
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    ExpandRows(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Softmax {
        x: Tensor,
        axis: usize,
    },
    LayerNorm {
        x: Tensor,
        gain: Option<Tensor>,
        bias: Option<Tensor>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Tensor),
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    Sum(Tensor),
    Mean(Tensor),
    ConcatRows(Vec<Tensor>),
    SliceRows {
        x: Tensor,
        start: usize,
    },
    SliceCols {
        x: Tensor,
        start: usize,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        heads: usize,
        probs: Vec<f64>,
    },
    StraightThrough(Tensor),
}

type Acc<'a> = dyn FnMut(&Tensor, Vec<f64>) + 'a;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::ExpandRows(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::StraightThrough(x) => vec![x],
            Op::Softmax { x, .. } | Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => {
                let mut v = vec![x];
                v.extend(gain.iter());
                v.extend(bias.iter());
                v
            }
            Op::Embedding { table, .. } => vec![table],
            Op::ConcatRows(parts) => parts.iter().collect(),
            Op::Attention { q, k, v, .. } => vec![q, k, v],
        }
    }

    pub(crate) fn backward(&self, out: &[f64], out_shape: &[usize], g: &[f64], acc: &mut Acc<'_>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                let ga = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                drop((ad, bd));
                acc(a, ga);
                acc(b, gb);
            }
            Op::Scale(x, c) => acc(x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => acc(x, g.to_vec()),
            Op::ExpandRows(x) => {
                let d = x.numel();
                let mut gx = vec![0.0; d];
                for row in g.chunks(d) {
                    for (a, b) in gx.iter_mut().zip(row) {
                        *a += *b;
                    }
                }
                acc(x, gx);
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(a, b, g);
                acc(a, ga);
                acc(b, gb);
            }
            Op::Transpose(x) => {
                // out_shape is the transposed shape; transposing back restores x.
                let gx = transpose_last2(g, out_shape);
                acc(x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out_shape, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let mut dot = 0.0;
                        for a in 0..n {
                            dot += g[idx(a)] * out[idx(a)];
                        }
                        for a in 0..n {
                            gx[idx(a)] = out[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                acc(x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = g.len() / d;
                let gain_data = gain.as_ref().map(|t| t.to_vec());
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let off = r * d;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..d {
                        let gv = g[off + c];
                        ggain[c] += gv * xhat[off + c];
                        gbias[c] += gv;
                        dxhat[c] = match &gain_data {
                            Some(w) => gv * w[c],
                            None => gv,
                        };
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[off + c];
                    }
                    mean_d /= d as f64;
                    mean_dx /= d as f64;
                    for c in 0..d {
                        gx[off + c] = inv_std[r] * (dxhat[c] - mean_d - xhat[off + c] * mean_dx);
                    }
                }
                acc(x, gx);
                if let Some(w) = gain {
                    acc(w, ggain);
                }
                if let Some(b) = bias {
                    acc(b, gbias);
                }
            }
            Op::Gelu(x) => {
                let xd = x.data();
                let gx = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                drop(xd);
                acc(x, gx);
            }
            Op::Embedding { table, ids } => {
                let d = table.shape()[1];
                let mut gt = vec![0.0; table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
                acc(table, gt);
            }
            Op::Sum(x) => acc(x, vec![g[0]; x.numel()]),
            Op::Mean(x) => {
                let n = x.numel();
                acc(x, vec![g[0] / n as f64; n]);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = p.numel();
                    acc(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = x.shape()[1];
                let mut gx = vec![0.0; x.numel()];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(x, gx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let width = out_shape[1];
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                acc(x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(q, k, v, *heads, probs, g);
                acc(q, gq);
                acc(k, gk);
                acc(v, gv);
            }
        }
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (m * n);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = data[off + i * n + j];
            }
        }
    }
    out
}

// out[m,r] += a[m,q] * b[q,r]
fn mm_acc(a: &[f64], b: &[f64], m: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,q] += g[m,r] * b[q,r]^T
fn mm_a_bt_acc(g: &[f64], b: &[f64], m: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let brow = &b[k * r..(k + 1) * r];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * q + k] += s;
        }
    }
}

// out[q,r] += a[m,q]^T * g[m,r]
fn mm_at_b_acc(a: &[f64], g: &[f64], m: usize, q: usize, r: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    q: usize,
    r: usize,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_batched = !b_batch.is_empty();
    if b_batched && a_batch != b_batch {
        return Err(err());
    }
    let mut shape = a_batch.to_vec();
    shape.extend([m, r]);
    Ok((
        MatMulDims {
            batch: a_batch.iter().product(),
            m,
            q,
            r,
            b_batched,
        },
        shape,
    ))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, _) = matmul_dims(a.shape(), b.shape()).expect("shapes validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    let (sa, sb, sg) = (d.m * d.q, d.q * d.r, d.m * d.r);
    for i in 0..d.batch {
        let boff = if d.b_batched { i * sb } else { 0 };
        mm_a_bt_acc(
            &g[i * sg..(i + 1) * sg],
            &bd[boff..boff + sb],
            d.m,
            d.q,
            d.r,
            &mut ga[i * sa..(i + 1) * sa],
        );
        mm_at_b_acc(
            &ad[i * sa..(i + 1) * sa],
            &g[i * sg..(i + 1) * sg],
            d.m,
            d.q,
            d.r,
            &mut gb[boff..boff + sb],
        );
    }
    (ga, gb)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (sq, d) = (q.shape()[0], q.shape()[1]);
    let sk = k.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; sk];
    for h in 0..heads {
        let c0 = h * dh;
        let p = &probs[h * sq * sk..(h + 1) * sq * sk];
        for i in 0..sq {
            let prow = &p[i * sk..(i + 1) * sk];
            let grow = &g[i * d + c0..i * d + c0 + dh];
            let mut dot = 0.0;
            for j in 0..sk {
                let vrow = &vd[j * d + c0..j * d + c0 + dh];
                let mut s = 0.0;
                for c in 0..dh {
                    s += grow[c] * vrow[c];
                    gv[j * d + c0 + c] += prow[j] * grow[c];
                }
                dp[j] = s;
                dot += prow[j] * s;
            }
            for j in 0..sk {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    gq[i * d + c0 + c] += ds * kd[j * d + c0 + c];
                    gk[j * d + c0 + c] += ds * qd[i * d + c0 + c];
                }
            }
        }
    }
    (gq, gk, gv)
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (a, b) = (self.data(), other.data());
        a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|x| f(*x)).collect()
    }

    fn require_rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((self.shape()[0], self.shape()[1]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(self.map(|x| x * c), self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(self.map(|x| x + c), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    /// Repeats a `[d]` or `[1, d]` tensor into `[rows, d]`.
    pub fn expand_rows(&self, rows: usize) -> Result<Tensor> {
        let d = match self.shape() {
            [d] => *d,
            [1, d] => *d,
            s => {
                return Err(Error::Shape {
                    op: "expand_rows",
                    lhs: s.to_vec(),
                    rhs: vec![1, rows],
                })
            }
        };
        let src = self.data();
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        drop(src);
        Ok(Tensor::from_op(data, vec![rows, d], Op::ExpandRows(self.clone())))
    }

    /// `[.., m, q] x [.., q, r]`; the right operand may also be a plain
    /// `[q, r]` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (d, shape) = matmul_dims(self.shape(), other.shape())?;
        let (ad, bd) = (self.data(), other.data());
        let mut out = vec![0.0; d.batch * d.m * d.r];
        let (sa, sb, so) = (d.m * d.q, d.q * d.r, d.m * d.r);
        for i in 0..d.batch {
            let boff = if d.b_batched { i * sb } else { 0 };
            mm_acc(
                &ad[i * sa..(i + 1) * sa],
                &bd[boff..boff + sb],
                d.m,
                d.q,
                d.r,
                &mut out[i * so..(i + 1) * so],
            );
        }
        drop((ad, bd));
        Ok(Tensor::from_op(out, shape, Op::MatMul(self.clone(), other.clone())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let data = transpose_last2(&self.data(), self.shape());
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(data, shape, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..n {
                    mx = mx.max(x[idx(a)]);
                }
                let mut sum = 0.0;
                for a in 0..n {
                    let e = (x[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..n {
                    out[idx(a)] /= sum;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Softmax {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance, then applies the optional affine `gain`/`bias` (both `[d]`).
    pub fn layernorm(&self, gain: Option<&Tensor>, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let d = *self.shape().last().unwrap();
        for p in [gain, bias].into_iter().flatten() {
            if p.shape() != [d] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let x = self.data();
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mean) * is;
            }
        }
        drop(x);
        let mut out = xhat.clone();
        if let Some(w) = gain {
            let w = w.data();
            for (i, v) in out.iter_mut().enumerate() {
                *v *= w[i % d];
            }
        }
        if let Some(b) = bias {
            let b = b.data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += b[i % d];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.cloned(),
                bias: bias.cloned(),
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        Tensor::from_op(self.map(gelu_value), self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (vocab, d) = table.require_rank2("embedding")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let t = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        drop(t);
        Ok(Tensor::from_op(
            data,
            vec![ids.len(), d],
            Op::Embedding {
                table: table.clone(),
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s / self.numel() as f64], vec![1], Op::Mean(self.clone()))
    }

    /// Stacks rank-2 tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        let (_, cols) = first.require_rank2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.require_rank2("concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data());
        }
        Ok(Tensor::from_op(data, vec![rows, cols], Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_rank2("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::Contract(format!(
                "row slice {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.data()[start * cols..(start + len) * cols].to_vec();
        Ok(Tensor::from_op(
            data,
            vec![len, cols],
            Op::SliceRows {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_rank2("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![rows, len],
            Op::SliceCols {
                x: self.clone(),
                start,
            },
        ))
    }

    /// Masked scaled dot-product attention, `softmax(q kᵀ / √d_h + bias) v`,
    /// split over `heads` column blocks. Denied pairs get a `-inf` bias; a
    /// query row with no allowed key yields a zero output row.
    pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask, heads: usize) -> Result<Tensor> {
        let (sq, d) = q.require_rank2("attention")?;
        let (sk, dk) = k.require_rank2("attention")?;
        if dk != d || v.shape() != k.shape() {
            return Err(Error::Shape {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: if dk != d { k.shape().to_vec() } else { v.shape().to_vec() },
            });
        }
        if mask.rows() != sq || mask.cols() != sk {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![sq, sk],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut probs = vec![0.0; heads * sq * sk];
        let mut out = vec![0.0; sq * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..sq {
                let prow = &mut probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
                let qrow = &qd[i * d + c0..i * d + c0 + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..sk {
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let krow = &kd[j * d + c0..j * d + c0 + dh];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    prow[j] = s;
                    mx = mx.max(s);
                }
                if mx == f64::NEG_INFINITY {
                    // Fully masked row: zero output, zero gradient.
                    continue;
                }
                let mut sum = 0.0;
                for j in 0..sk {
                    if mask.allowed(i, j) {
                        let e = (prow[j] - mx).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                for j in 0..sk {
                    prow[j] /= sum;
                    let p = prow[j];
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &vd[j * d + c0..j * d + c0 + dh];
                    let orow = &mut out[i * d + c0..i * d + c0 + dh];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        drop((qd, kd, vd));
        Ok(Tensor::from_op(
            out,
            vec![sq, d],
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                probs,
            },
        ))
    }

    /// `delta * clip(round(x / delta), -levels, levels)` elementwise, with an
    /// identity (straight-through) gradient. Rounding is half away from zero.
    pub fn quantize_ste(&self, delta: f64, levels: u32) -> Result<Tensor> {
        if !(delta > 0.0) || levels == 0 {
            return Err(Error::Contract(format!(
                "quantizer needs delta > 0 and levels >= 1, got delta={delta}, levels={levels}"
            )));
        }
        let l = levels as f64;
        let data = self.map(|x| delta * (x / delta).round().clamp(-l, l));
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::StraightThrough(self.clone())))
    }
}
