//! Operation recording and the backward pass.
//!
//! A [`Graph`] is a tape: every forward method validates shapes, computes
//! the result eagerly, pushes one [`Op`] record and hands back the output
//! tensor. Records are therefore already in topological order, and
//! [`Graph::backward`] is a single reverse sweep that applies each
//! operation's vector-Jacobian rule exactly once.
//!
//! Gradients only flow where they are wanted: an output requires grad iff
//! some input does, and [`Tensor::accumulate_grad`] drops writes to tensors
//! with `requires_grad` off, so constants (masks, selectors, inputs) cost
//! nothing in the backward sweep.

use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Matmul {
        a: Tensor<F>,
        b: Tensor<F>,
        trans_b: bool,
        out: Tensor<F>,
    },
    Add {
        a: Tensor<F>,
        b: Tensor<F>,
        out: Tensor<F>,
    },
    /// `[r x c] + [c]`, the one broadcast this engine allows.
    AddBias {
        a: Tensor<F>,
        bias: Tensor<F>,
        out: Tensor<F>,
    },
    Scale {
        a: Tensor<F>,
        c: F,
        out: Tensor<F>,
    },
    Mul {
        a: Tensor<F>,
        b: Tensor<F>,
        out: Tensor<F>,
    },
    Gelu {
        a: Tensor<F>,
        out: Tensor<F>,
    },
    LayerNorm {
        a: Tensor<F>,
        gamma: Tensor<F>,
        beta: Tensor<F>,
        // Per-row statistics cached at forward time for the backward rule.
        mean: Vec<F>,
        inv_std: Vec<F>,
        out: Tensor<F>,
    },
    Softmax {
        a: Tensor<F>,
        axis: usize,
        out: Tensor<F>,
    },
    Embed {
        table: Tensor<F>,
        indices: Vec<usize>,
        out: Tensor<F>,
    },
    Concat {
        parts: Vec<Tensor<F>>,
        axis: usize,
        out: Tensor<F>,
    },
    CrossEntropy {
        logits: Tensor<F>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        // Row softmax cached at forward time.
        probs: Vec<F>,
        n_valid: usize,
        out: Tensor<F>,
    },
    /// Pure metadata view: same flat values under a new shape. Not a compute
    /// primitive; the gradient is a straight copy.
    Reshape {
        a: Tensor<F>,
        out: Tensor<F>,
    },
}

/// Recording tape for one forward pass. Single-threaded, single-use:
/// record, call [`backward`](Graph::backward) once, drop.
pub struct Graph<F: Scalar> {
    ops: Vec<Op<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { ops: Vec::new() }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push_out(&mut self, op: Op<F>, inputs_require: bool, out: &Tensor<F>) {
        out.set_requires_grad(inputs_require);
        self.ops.push(op);
    }

    // ── Forward primitives ──────────────────────────────────────────────

    /// `a[m x k] . b[k x n]`.
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] . b[n x k]^T`. Same primitive as [`matmul`](Self::matmul)
    /// with the right operand read transposed; attention and weight
    /// application both want this orientation.
    pub fn matmul_nt(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
        let mismatch = || Error::ShapeMismatch {
            op: if trans_b { "matmul_nt" } else { "matmul" },
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() != 2 || b.rank() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (n, data) = {
            let bd = b.data();
            if trans_b {
                if b.shape()[1] != k {
                    return Err(mismatch());
                }
                let n = b.shape()[0];
                (n, kernels::matmul_nt(m, k, n, &a.data(), &bd))
            } else {
                if b.shape()[0] != k {
                    return Err(mismatch());
                }
                let n = b.shape()[1];
                (n, kernels::matmul(m, k, n, &a.data(), &bd))
            }
        };
        let out = Tensor::from_vec(&[m, n], data)?;
        let req = a.requires_grad() || b.requires_grad();
        self.push_out(
            Op::Matmul {
                a: a.clone(),
                b: b.clone(),
                trans_b,
                out: out.clone(),
            },
            req,
            &out,
        );
        Ok(out)
    }

    /// Elementwise sum of equal shapes, or `[r x c] + [c]` bias broadcast.
    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let req = a.requires_grad() || b.requires_grad();
        if a.shape() == b.shape() {
            let data = {
                let (ad, bd) = (a.data(), b.data());
                ad.iter().zip(bd.iter()).map(|(&x, &y)| x + y).collect()
            };
            let out = Tensor::from_vec(a.shape(), data)?;
            self.push_out(
                Op::Add {
                    a: a.clone(),
                    b: b.clone(),
                    out: out.clone(),
                },
                req,
                &out,
            );
            return Ok(out);
        }
        if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
            let cols = b.shape()[0];
            let data = {
                let (ad, bd) = (a.data(), b.data());
                ad.iter()
                    .enumerate()
                    .map(|(i, &x)| x + bd[i % cols])
                    .collect()
            };
            let out = Tensor::from_vec(a.shape(), data)?;
            self.push_out(
                Op::AddBias {
                    a: a.clone(),
                    bias: b.clone(),
                    out: out.clone(),
                },
                req,
                &out,
            );
            return Ok(out);
        }
        Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: &Tensor<F>, c: F) -> Result<Tensor<F>> {
        let data = a.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        self.push_out(
            Op::Scale {
                a: a.clone(),
                c,
                out: out.clone(),
            },
            a.requires_grad(),
            &out,
        );
        Ok(out)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::from_vec(a.shape(), data)?;
        self.push_out(
            Op::Mul {
                a: a.clone(),
                b: b.clone(),
                out: out.clone(),
            },
            a.requires_grad() || b.requires_grad(),
            &out,
        );
        Ok(out)
    }

    /// GELU in its tanh form, applied elementwise.
    pub fn gelu(&mut self, a: &Tensor<F>) -> Result<Tensor<F>> {
        let data = a.data().iter().map(|&x| gelu_value(x)).collect();
        let out = Tensor::from_vec(a.shape(), data)?;
        self.push_out(
            Op::Gelu {
                a: a.clone(),
                out: out.clone(),
            },
            a.requires_grad(),
            &out,
        );
        Ok(out)
    }

    /// Row-wise layer normalization of a `[rows x d]` tensor with learned
    /// gain and bias of shape `[d]`.
    pub fn layer_norm(
        &mut self,
        a: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        if a.rank() != 2 {
            return Err(Error::contract(
                "layer_norm",
                format!("input must be rank 2, got shape {:?}", a.shape()),
            ));
        }
        let (rows, d) = (a.shape()[0], a.shape()[1]);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: a.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let eps = F::c(LAYER_NORM_EPS);
        let inv_d = F::one() / F::c(d as f64);
        let mut mean = vec![F::zero(); rows];
        let mut inv_std = vec![F::zero(); rows];
        let mut data = vec![F::zero(); rows * d];
        {
            let (ad, gd, bd) = (a.data(), gamma.data(), beta.data());
            for r in 0..rows {
                let row = &ad[r * d..(r + 1) * d];
                let mu = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<F>() * inv_d;
                let is = F::one() / (var + eps).sqrt();
                mean[r] = mu;
                inv_std[r] = is;
                for c in 0..d {
                    data[r * d + c] = gd[c] * (row[c] - mu) * is + bd[c];
                }
            }
        }
        let out = Tensor::from_vec(a.shape(), data)?;
        let req = a.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.push_out(
            Op::LayerNorm {
                a: a.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean,
                inv_std,
                out: out.clone(),
            },
            req,
            &out,
        );
        Ok(out)
    }

    /// Softmax along `axis`, shift-stabilized per lane.
    pub fn softmax(&mut self, a: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
        if axis >= a.rank() {
            return Err(Error::contract(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", a.shape()),
            ));
        }
        let shape = a.shape().to_vec();
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = a.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = F::neg_infinity();
                for l in 0..lane {
                    mx = mx.max(data[base + l * inner]);
                }
                let mut sum = F::zero();
                for l in 0..lane {
                    let e = (data[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                for l in 0..lane {
                    data[base + l * inner] *= inv;
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        self.push_out(
            Op::Softmax {
                a: a.clone(),
                axis,
                out: out.clone(),
            },
            a.requires_grad(),
            &out,
        );
        Ok(out)
    }

    /// Gather rows of `table[v x d]` at `indices`, giving `[len x d]`.
    pub fn embed(&mut self, table: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
        if table.rank() != 2 {
            return Err(Error::contract(
                "embed",
                format!("table must be rank 2, got shape {:?}", table.shape()),
            ));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(
                "embed",
                format!("index {bad} out of range for table with {v} rows"),
            ));
        }
        let data = {
            let td = table.data();
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                data.extend_from_slice(&td[i * d..(i + 1) * d]);
            }
            data
        };
        let out = Tensor::from_vec(&[indices.len(), d], data)?;
        self.push_out(
            Op::Embed {
                table: table.clone(),
                indices: indices.to_vec(),
                out: out.clone(),
            },
            table.requires_grad(),
            &out,
        );
        Ok(out)
    }

    /// Concatenate along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no tensors given"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::contract(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            if p.rank() != rank
                || (0..rank).any(|i| i != axis && p.shape()[i] != first.shape()[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let outer: usize = first.shape()[..axis].iter().product();
        let out_lane = out_shape[axis];
        let mut data = vec![F::zero(); outer * out_lane * inner];
        let mut lane_off = 0;
        for p in parts {
            let lane = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * lane * inner..(o + 1) * lane * inner];
                let dst_base = (o * out_lane + lane_off) * inner;
                data[dst_base..dst_base + lane * inner].copy_from_slice(src);
            }
            lane_off += lane;
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        let req = parts.iter().any(|p| p.requires_grad());
        self.push_out(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
                out: out.clone(),
            },
            req,
            &out,
        );
        Ok(out)
    }

    /// Mean token-level cross-entropy of `logits[n x v]` against `targets`,
    /// skipping positions where `mask` is false. Returns a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: &Tensor<F>,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Tensor<F>> {
        if logits.rank() != 2 {
            return Err(Error::contract(
                "cross_entropy",
                format!("logits must be rank 2, got shape {:?}", logits.shape()),
            ));
        }
        let (n, v) = (logits.shape()[0], logits.shape()[1]);
        if targets.len() != n || mask.len() != n {
            return Err(Error::contract(
                "cross_entropy",
                format!(
                    "{n} logit rows need {n} targets and mask entries, got {} and {}",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(
                "cross_entropy",
                format!("target {bad} out of range for {v} classes"),
            ));
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(Error::contract("cross_entropy", "every position is masked"));
        }
        let mut probs = vec![F::zero(); n * v];
        let mut loss = F::zero();
        {
            let ld = logits.data();
            for r in 0..n {
                let row = &ld[r * v..(r + 1) * v];
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let sum: F = row.iter().map(|&x| (x - mx).exp()).sum();
                let lse = mx + sum.ln();
                for c in 0..v {
                    probs[r * v + c] = (row[c] - lse).exp();
                }
                if mask[r] {
                    loss += lse - row[targets[r]];
                }
            }
        }
        loss = loss / F::c(n_valid as f64);
        let out = Tensor::scalar(loss);
        self.push_out(
            Op::CrossEntropy {
                logits: logits.clone(),
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n_valid,
                out: out.clone(),
            },
            logits.requires_grad(),
            &out,
        );
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from `loss`, a scalar produced by this graph. Every
    /// `requires_grad` tensor reachable from it ends up holding its
    /// dLoss/dTensor; all other tensors are left untouched. Consumes the
    /// graph: one tape, one sweep.
    pub fn backward(self, loss: &Tensor<F>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.shape()),
            ));
        }
        if !loss.requires_grad() {
            // Nothing upstream asked for gradients; leave every buffer absent.
            return Ok(());
        }
        loss.accumulate_grad(&[F::one()]);
        for op in self.ops.into_iter().rev() {
            apply_vjp(op);
        }
        Ok(())
    }
}

fn apply_vjp<F: Scalar>(op: Op<F>) {
    match op {
        Op::Matmul { a, b, trans_b, out } => {
            let Some(dout) = out.grad() else { return };
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = out.shape()[1];
            if !trans_b {
                // c = a.b: da = dout.b^T, db = a^T.dout
                if a.requires_grad() {
                    a.accumulate_grad(&kernels::matmul_nt(m, n, k, &dout, &b.data()));
                }
                if b.requires_grad() {
                    let at = kernels::transpose(m, k, &a.data());
                    b.accumulate_grad(&kernels::matmul(k, m, n, &at, &dout));
                }
            } else {
                // c = a.b^T: da = dout.b, db = dout^T.a
                if a.requires_grad() {
                    a.accumulate_grad(&kernels::matmul(m, n, k, &dout, &b.data()));
                }
                if b.requires_grad() {
                    let dt = kernels::transpose(m, n, &dout);
                    b.accumulate_grad(&kernels::matmul(n, m, k, &dt, &a.data()));
                }
            }
        }
        Op::Add { a, b, out } => {
            let Some(dout) = out.grad() else { return };
            a.accumulate_grad(&dout);
            b.accumulate_grad(&dout);
        }
        Op::AddBias { a, bias, out } => {
            let Some(dout) = out.grad() else { return };
            a.accumulate_grad(&dout);
            if bias.requires_grad() {
                let cols = bias.numel();
                let mut db = vec![F::zero(); cols];
                for (i, &d) in dout.iter().enumerate() {
                    db[i % cols] += d;
                }
                bias.accumulate_grad(&db);
            }
        }
        Op::Scale { a, c, out } => {
            let Some(dout) = out.grad() else { return };
            let da: Vec<F> = dout.iter().map(|&d| d * c).collect();
            a.accumulate_grad(&da);
        }
        Op::Mul { a, b, out } => {
            let Some(dout) = out.grad() else { return };
            if a.requires_grad() {
                let bd = b.data();
                let da: Vec<F> = dout.iter().zip(bd.iter()).map(|(&d, &y)| d * y).collect();
                drop(bd);
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let db: Vec<F> = dout.iter().zip(ad.iter()).map(|(&d, &x)| d * x).collect();
                drop(ad);
                b.accumulate_grad(&db);
            }
        }
        Op::Gelu { a, out } => {
            let Some(dout) = out.grad() else { return };
            let ad = a.data();
            let da: Vec<F> = dout
                .iter()
                .zip(ad.iter())
                .map(|(&d, &x)| d * gelu_derivative(x))
                .collect();
            drop(ad);
            a.accumulate_grad(&da);
        }
        Op::LayerNorm {
            a,
            gamma,
            beta,
            mean,
            inv_std,
            out,
        } => {
            let Some(dout) = out.grad() else { return };
            let (rows, d) = (a.shape()[0], a.shape()[1]);
            let inv_d = F::one() / F::c(d as f64);
            let ad = a.data();
            let gd = gamma.data();
            let mut da = vec![F::zero(); rows * d];
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            for r in 0..rows {
                let (mu, is) = (mean[r], inv_std[r]);
                let x = &ad[r * d..(r + 1) * d];
                let dy = &dout[r * d..(r + 1) * d];
                // g = dy * gamma; the input rule needs its per-row mean and
                // its correlation with the normalized row.
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for c in 0..d {
                    let xhat = (x[c] - mu) * is;
                    let g = dy[c] * gd[c];
                    m1 += g;
                    m2 += g * xhat;
                    dgamma[c] += dy[c] * xhat;
                    dbeta[c] += dy[c];
                }
                m1 *= inv_d;
                m2 *= inv_d;
                for c in 0..d {
                    let xhat = (x[c] - mu) * is;
                    da[r * d + c] = is * (dy[c] * gd[c] - m1 - xhat * m2);
                }
            }
            drop(ad);
            drop(gd);
            a.accumulate_grad(&da);
            gamma.accumulate_grad(&dgamma);
            beta.accumulate_grad(&dbeta);
        }
        Op::Softmax { a, axis, out } => {
            let Some(dout) = out.grad() else { return };
            let shape = out.shape().to_vec();
            let lane = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let y = out.data();
            let mut da = vec![F::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = F::zero();
                    for l in 0..lane {
                        let idx = base + l * inner;
                        dot += dout[idx] * y[idx];
                    }
                    for l in 0..lane {
                        let idx = base + l * inner;
                        da[idx] = y[idx] * (dout[idx] - dot);
                    }
                }
            }
            drop(y);
            a.accumulate_grad(&da);
        }
        Op::Embed {
            table,
            indices,
            out,
        } => {
            let Some(dout) = out.grad() else { return };
            if !table.requires_grad() {
                return;
            }
            let d = table.shape()[1];
            let mut dt = vec![F::zero(); table.numel()];
            for (row, &idx) in indices.iter().enumerate() {
                for c in 0..d {
                    dt[idx * d + c] += dout[row * d + c];
                }
            }
            table.accumulate_grad(&dt);
        }
        Op::Concat { parts, axis, out } => {
            let Some(dout) = out.grad() else { return };
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let outer: usize = out.shape()[..axis].iter().product();
            let out_lane = out.shape()[axis];
            let mut lane_off = 0;
            for p in parts {
                let lane = p.shape()[axis];
                if p.requires_grad() {
                    let mut dp = vec![F::zero(); p.numel()];
                    for o in 0..outer {
                        let src_base = (o * out_lane + lane_off) * inner;
                        let dst_base = o * lane * inner;
                        dp[dst_base..dst_base + lane * inner]
                            .copy_from_slice(&dout[src_base..src_base + lane * inner]);
                    }
                    p.accumulate_grad(&dp);
                }
                lane_off += lane;
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            n_valid,
            out,
        } => {
            let Some(dout) = out.grad() else { return };
            let upstream = dout[0] / F::c(n_valid as f64);
            let (n, v) = (logits.shape()[0], logits.shape()[1]);
            let mut dl = vec![F::zero(); n * v];
            for r in 0..n {
                if !mask[r] {
                    continue;
                }
                for c in 0..v {
                    let indicator = if c == targets[r] { F::one() } else { F::zero() };
                    dl[r * v + c] = upstream * (probs[r * v + c] - indicator);
                }
            }
            logits.accumulate_grad(&dl);
        }
        Op::Reshape { a, out } => {
            let Some(dout) = out.grad() else { return };
            a.accumulate_grad(&dout);
        }
    }
}

// ── GELU scalar pieces ──────────────────────────────────────────────────

const GELU_COEFF: f64 = 0.044715;

fn gelu_value<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    let c = F::c(GELU_COEFF);
    let s = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = s * (x + c * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let half = F::c(0.5);
    let c = F::c(GELU_COEFF);
    let three = F::c(3.0);
    let s = F::c((2.0 / std::f64::consts::PI).sqrt());
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * s * (F::one() + three * c * x * x)
}

// ── Composed helpers ────────────────────────────────────────────────────

/// Sum of every element, composed from the primitives: the tensor is read
/// as one row and multiplied against a ones column.
pub fn sum_all<F: Scalar>(g: &mut Graph<F>, t: &Tensor<F>) -> Result<Tensor<F>> {
    let n = t.numel();
    let flat = reshape(g, t, &[1, n])?;
    let ones = Tensor::from_vec(&[n, 1], vec![F::one(); n])?;
    g.matmul(&flat, &ones)
}

/// Shape change with identical contents (row-major view). Element count
/// must be preserved; the gradient is a straight copy back.
pub fn reshape<F: Scalar>(g: &mut Graph<F>, t: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    let numel: usize = shape.iter().product();
    if numel != t.numel() {
        return Err(Error::contract(
            "reshape",
            format!("cannot view {:?} as {shape:?}", t.shape()),
        ));
    }
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let out = Tensor::from_vec(shape, t.to_vec())?;
    out.set_requires_grad(t.requires_grad());
    g.ops.push(Op::Reshape {
        a: t.clone(),
        out: out.clone(),
    });
    Ok(out)
}
