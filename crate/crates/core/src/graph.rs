//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Sequence tensors are flattened to rows `b·T + t`. Ops are fused at the
//! granularity the model needs (linear layer, layer norm, causal attention,
//! loss kernels), each with a hand-written backward pass.

use crate::error::Result;
use crate::objective::{
    exhaustive_ce, exhaustive_ce_backward, gather_rows, independent_infonce,
    independent_infonce_backward, loss_lcat, loss_lcat_backward, loss_num, loss_num_backward,
    scatter_add, shared_infonce, shared_infonce_backward, IndependentInfoNce, SharedInfoNce,
};
use crate::tensor::{gemm, matmul, Matrix, Real};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

enum Op<R> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Matrix<R>,
        rstd: Vec<R>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        idx: Vec<u32>,
    },
    Concat(Vec<Var>),
    Prepend {
        s: Var,
        x: Var,
        steps: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention(Box<AttentionCache<R>>),
    MuSigma(Var),
    MatMulNT(Var, Var),
    NumNll {
        musig: Var,
        y: Vec<R>,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        y: Vec<u32>,
        mask: Vec<bool>,
        probs: Matrix<R>,
    },
    SharedNce {
        h: Var,
        e: Var,
        y: Vec<u32>,
        mask: Vec<bool>,
        state: Box<SharedInfoNce<R>>,
    },
    IndepNce {
        h: Var,
        e: Var,
        y: Vec<u32>,
        mask: Vec<bool>,
        state: Box<IndependentInfoNce<R>>,
    },
    Exhaustive {
        h: Var,
        e: Var,
        y: Vec<u32>,
        mask: Vec<bool>,
    },
    WeightedSum(Vec<(Var, R)>),
}

struct AttentionCache<R> {
    qkv: Var,
    batch: usize,
    steps: usize,
    heads: usize,
    key_valid: Vec<bool>,
    /// `[B, heads, T, T]`, zero outside the causal, valid-key region.
    probs: Vec<R>,
}

struct Node<R> {
    value: Matrix<R>,
    op: Op<R>,
}

/// A recording of one forward computation.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node; `None` when the node was not reached.
pub struct Gradients<R> {
    grads: Vec<Option<Matrix<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Matrix<R>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<R>> {
        self.grads[v.0].take()
    }
}

fn accumulate<R: Real>(slot: &mut Option<Matrix<R>>, g: Matrix<R>) {
    match slot {
        Some(s) => s.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn gelu<R: Real>(x: R) -> (R, R) {
    let c = R::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = R::from_f64(0.044715);
    let half = R::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = R::one() - R::from_f64(2.0) / ((u + u).exp() + R::one());
    let y = half * x * (R::one() + t);
    let dy = half * (R::one() + t)
        + half * x * (R::one() - t * t) * c * (R::one() + R::from_f64(3.0) * a * x * x);
    (y, dy)
}

fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value.data[0]
    }

    pub fn leaf(&mut self, m: Matrix<R>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// `x·W + b` with `W: [in × out]`, `b: [1 × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(bv.cols, wv.cols, "linear bias width");
        let mut out = Matrix::zeros(xv.rows, wv.cols);
        for r in 0..out.rows {
            out.row_mut(r).copy_from_slice(&bv.data);
        }
        gemm(R::one(), xv, false, wv, false, R::one(), &mut out);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Row-wise layer normalization with gain `g` and bias `b` (`[1 × d]`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows, xv.cols);
        let eps = R::from_f64(LAYER_NORM_EPS);
        let inv_d = R::one() / R::from_f64(d as f64);
        let mut xhat = Matrix::zeros(rows, d);
        let mut rstd = vec![R::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<R>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (gv, bv) = (self.value(g), self.value(b));
        let mut out = Matrix::zeros(rows, d);
        for r in 0..rows {
            for c in 0..d {
                out.data[r * d + c] = xhat.data[r * d + c] * gv.data[c] + bv.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                g,
                b,
                xhat,
                rstd,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Matrix::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().map(|&v| gelu(v).0).collect(),
        );
        self.push(out, Op::Gelu(x))
    }

    /// Rows `table[idx]`.
    pub fn gather(&mut self, table: Var, idx: Vec<u32>) -> Result<Var> {
        let out = gather_rows(self.value(table), &idx)?;
        Ok(self.push(out, Op::Gather { table, idx }))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row count");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::Concat(parts))
    }

    /// `s: [B × d]`, `x: [B·T × d]` → `[B·(T+1) × d]` with `s[b]` at row `b·(T+1)`.
    pub fn prepend(&mut self, s: Var, x: Var, steps: usize) -> Var {
        let (sv, xv) = (self.value(s), self.value(x));
        let (b, d) = (sv.rows, sv.cols);
        assert_eq!(xv.rows, b * steps, "prepend rows");
        let t1 = steps + 1;
        let mut out = Matrix::zeros(b * t1, d);
        for i in 0..b {
            out.row_mut(i * t1).copy_from_slice(sv.row(i));
            let src = &xv.data[i * steps * d..(i + 1) * steps * d];
            out.data[(i * t1 + 1) * d..(i + 1) * t1 * d].copy_from_slice(src);
        }
        self.push(out, Op::Prepend { s, x, steps })
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let d = xv.cols;
        let mut out = Matrix::zeros(rows.len(), d);
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows { x, rows })
    }

    /// Multi-head causal self-attention from packed `[Q | K | V]` rows.
    /// Query `p` attends to keys `q ≤ p` with `key_valid[b·T + q]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        steps: usize,
        heads: usize,
        key_valid: Vec<bool>,
    ) -> Var {
        let qv = self.value(qkv);
        let d = qv.cols / 3;
        assert_eq!(qv.cols, 3 * d);
        assert_eq!(qv.rows, batch * steps);
        assert_eq!(d % heads, 0, "width divisible by heads");
        assert_eq!(key_valid.len(), batch * steps);
        let dh = d / heads;
        let scale = R::one() / R::from_f64(dh as f64).sqrt();
        let w3 = 3 * d;
        let mut out = Matrix::zeros(batch * steps, d);
        let mut probs = vec![R::zero(); batch * heads * steps * steps];
        let mut scores = vec![R::zero(); steps];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * steps * steps;
                for p in 0..steps {
                    let qrow = &qv.data[(b * steps + p) * w3 + h * dh..][..dh];
                    let mut mx = R::neg_infinity();
                    for q in 0..=p {
                        if !key_valid[b * steps + q] {
                            continue;
                        }
                        let krow = &qv.data[(b * steps + q) * w3 + d + h * dh..][..dh];
                        let s = crate::tensor::dot(qrow, krow) * scale;
                        scores[q] = s;
                        mx = mx.max(s);
                    }
                    if mx == R::neg_infinity() {
                        continue;
                    }
                    let mut z = R::zero();
                    for q in 0..=p {
                        if key_valid[b * steps + q] {
                            let e = (scores[q] - mx).exp();
                            probs[pbase + p * steps + q] = e;
                            z = z + e;
                        }
                    }
                    let orow = &mut out.data[(b * steps + p) * d + h * dh..][..dh];
                    for q in 0..=p {
                        let pr = &mut probs[pbase + p * steps + q];
                        if *pr == R::zero() {
                            continue;
                        }
                        *pr = *pr / z;
                        let vrow = &qv.data[(b * steps + q) * w3 + 2 * d + h * dh..][..dh];
                        for c in 0..dh {
                            orow[c] = orow[c] + *pr * vrow[c];
                        }
                    }
                }
            }
        }
        let cache = AttentionCache {
            qkv,
            batch,
            steps,
            heads,
            key_valid,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)))
    }

    /// `[R × 2]` raw → column 0 `μ`, column 1 `σ = softplus(raw) + floor`.
    pub fn mu_sigma(&mut self, raw: Var) -> Var {
        let rv = self.value(raw);
        assert_eq!(rv.cols, 2);
        let floor = R::from_f64(SIGMA_FLOOR);
        let mut out = rv.clone();
        for r in 0..out.rows {
            out.data[2 * r + 1] = softplus(rv.data[2 * r + 1]) + floor;
        }
        self.push(out, Op::MuSigma(raw))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), false, self.value(b), true);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn num_nll(&mut self, musig: Var, y: Vec<R>, mask: Vec<bool>) -> Result<Var> {
        let l = loss_num(self.value(musig), &y, &mask)?;
        Ok(self.push(Matrix::scalar(l), Op::NumNll { musig, y, mask }))
    }

    pub fn cross_entropy(&mut self, logits: Var, y: Vec<u32>, mask: Vec<bool>) -> Result<Var> {
        let (l, probs) = loss_lcat(self.value(logits), &y, &mask)?;
        Ok(self.push(
            Matrix::scalar(l),
            Op::CrossEntropy {
                logits,
                y,
                mask,
                probs,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn shared_nce(
        &mut self,
        h: Var,
        e: Var,
        y: Vec<u32>,
        mask: Vec<bool>,
        batch: usize,
        negatives: &[u32],
        dedup_positive: bool,
    ) -> Result<Var> {
        let st = shared_infonce(
            self.value(h),
            self.value(e),
            &y,
            &mask,
            batch,
            negatives,
            dedup_positive,
        )?;
        Ok(self.push(
            Matrix::scalar(st.loss),
            Op::SharedNce {
                h,
                e,
                y,
                mask,
                state: Box::new(st),
            },
        ))
    }

    pub fn independent_nce(
        &mut self,
        h: Var,
        e: Var,
        y: Vec<u32>,
        mask: Vec<bool>,
        negatives: &[u32],
        n: usize,
    ) -> Result<Var> {
        let st = independent_infonce(self.value(h), self.value(e), &y, &mask, negatives, n)?;
        Ok(self.push(
            Matrix::scalar(st.loss),
            Op::IndepNce {
                h,
                e,
                y,
                mask,
                state: Box::new(st),
            },
        ))
    }

    pub fn exhaustive_ce(&mut self, h: Var, e: Var, y: Vec<u32>, mask: Vec<bool>) -> Result<Var> {
        let (l, _) = exhaustive_ce(self.value(h), self.value(e), &y, &mask)?;
        Ok(self.push(Matrix::scalar(l), Op::Exhaustive { h, e, y, mask }))
    }

    /// `Σ c_i · x_i` over scalar nodes; the coefficients are constants.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, R)>) -> Var {
        let v = terms
            .iter()
            .fold(R::zero(), |s, &(x, c)| s + c * self.scalar(x));
        self.push(Matrix::scalar(v), Op::WeightedSum(terms))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<R>> {
        self.backward_seeded(root, Matrix::scalar(R::one()))
    }

    /// Reverse pass from any node given the upstream gradient `seed`.
    pub fn backward_seeded(&self, root: Var, seed: Matrix<R>) -> Result<Gradients<R>> {
        let rv = self.value(root);
        assert_eq!((rv.rows, rv.cols), (seed.rows, seed.cols), "seed shape");
        let mut grads: Vec<Option<Matrix<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    accumulate(&mut grads[x.0], matmul(&dy, false, wv, true));
                    accumulate(&mut grads[w.0], matmul(xv, true, &dy, false));
                    let mut db = Matrix::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (a, &g) in db.data.iter_mut().zip(dy.row(r)) {
                            *a = *a + g;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], dy.clone());
                    accumulate(&mut grads[b.0], dy);
                }
                Op::LayerNorm {
                    x,
                    g,
                    b,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*g);
                    let (rows, d) = (dy.rows, dy.cols);
                    let inv_d = R::one() / R::from_f64(d as f64);
                    let mut dx = Matrix::zeros(rows, d);
                    let mut dg = Matrix::zeros(1, d);
                    let mut dbias = Matrix::zeros(1, d);
                    let mut dxhat = vec![R::zero(); d];
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = R::zero();
                        let mut m2 = R::zero();
                        for c in 0..d {
                            dg.data[c] = dg.data[c] + dyr[c] * xh[c];
                            dbias.data[c] = dbias.data[c] + dyr[c];
                            dxhat[c] = dyr[c] * gv.data[c];
                            m1 = m1 + dxhat[c];
                            m2 = m2 + dxhat[c] * xh[c];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for c in 0..d {
                            dx.data[r * d + c] = rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[g.0], dg);
                    accumulate(&mut grads[b.0], dbias);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        *d = *d * gelu(v).1;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gather { table, idx } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows, tv.cols);
                    scatter_add(&mut dt, idx, &dy);
                    accumulate(&mut grads[table.0], dt);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut dp = Matrix::zeros(dy.rows, pc);
                        for r in 0..dy.rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads[p.0], dp);
                    }
                }
                Op::Prepend { s, x, steps } => {
                    let (b, d) = (self.value(*s).rows, dy.cols);
                    let t1 = steps + 1;
                    let mut ds = Matrix::zeros(b, d);
                    let mut dx = Matrix::zeros(b * steps, d);
                    for i in 0..b {
                        ds.row_mut(i).copy_from_slice(dy.row(i * t1));
                        dx.data[i * steps * d..(i + 1) * steps * d]
                            .copy_from_slice(&dy.data[(i * t1 + 1) * d..(i + 1) * t1 * d]);
                    }
                    accumulate(&mut grads[s.0], ds);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, &g) in dx.row_mut(r).iter_mut().zip(dy.row(o)) {
                            *a = *a + g;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Attention(c) => {
                    let dqkv = self.attention_backward(c, &dy);
                    accumulate(&mut grads[c.qkv.0], dqkv);
                }
                Op::MuSigma(raw) => {
                    let rv = self.value(*raw);
                    let mut dr = dy;
                    for r in 0..dr.rows {
                        dr.data[2 * r + 1] = dr.data[2 * r + 1] * sigmoid(rv.data[2 * r + 1]);
                    }
                    accumulate(&mut grads[raw.0], dr);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], matmul(&dy, false, bv, false));
                    accumulate(&mut grads[b.0], matmul(&dy, true, av, false));
                }
                Op::NumNll { musig, y, mask } => {
                    let d = loss_num_backward(self.value(*musig), y, mask, dy.data[0]);
                    accumulate(&mut grads[musig.0], d);
                }
                Op::CrossEntropy {
                    logits,
                    y,
                    mask,
                    probs,
                } => {
                    accumulate(
                        &mut grads[logits.0],
                        loss_lcat_backward(probs, y, mask, dy.data[0]),
                    );
                }
                Op::SharedNce {
                    h,
                    e,
                    y,
                    mask,
                    state,
                } => {
                    let (dh, de) = shared_infonce_backward(
                        state,
                        self.value(*h),
                        self.value(*e),
                        y,
                        mask,
                        dy.data[0],
                    );
                    accumulate(&mut grads[h.0], dh);
                    accumulate(&mut grads[e.0], de);
                }
                Op::IndepNce {
                    h,
                    e,
                    y,
                    mask,
                    state,
                } => {
                    let (dh, de) = independent_infonce_backward(
                        state,
                        self.value(*h),
                        self.value(*e),
                        y,
                        mask,
                        dy.data[0],
                    );
                    accumulate(&mut grads[h.0], dh);
                    accumulate(&mut grads[e.0], de);
                }
                Op::Exhaustive { h, e, y, mask } => {
                    let (dh, de) = exhaustive_ce_backward(
                        self.value(*h),
                        self.value(*e),
                        y,
                        mask,
                        dy.data[0],
                    )?;
                    accumulate(&mut grads[h.0], dh);
                    accumulate(&mut grads[e.0], de);
                }
                Op::WeightedSum(terms) => {
                    for &(x, c) in terms {
                        accumulate(&mut grads[x.0], Matrix::scalar(c * dy.data[0]));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn attention_backward(&self, c: &AttentionCache<R>, dy: &Matrix<R>) -> Matrix<R> {
        let qv = self.value(c.qkv);
        let d = qv.cols / 3;
        let w3 = 3 * d;
        let (batch, steps, heads) = (c.batch, c.steps, c.heads);
        let dh = d / heads;
        let scale = R::one() / R::from_f64(dh as f64).sqrt();
        let mut dqkv = Matrix::zeros(qv.rows, qv.cols);
        let mut dprob = vec![R::zero(); steps];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * steps * steps;
                for p in 0..steps {
                    let dout = &dy.data[(b * steps + p) * d + h * dh..][..dh];
                    let probs = &c.probs[pbase + p * steps..][..steps];
                    let mut s = R::zero();
                    for q in 0..=p {
                        if probs[q] == R::zero() && !c.key_valid[b * steps + q] {
                            dprob[q] = R::zero();
                            continue;
                        }
                        let vrow = &qv.data[(b * steps + q) * w3 + 2 * d + h * dh..][..dh];
                        dprob[q] = crate::tensor::dot(dout, vrow);
                        s = s + probs[q] * dprob[q];
                        let dv = &mut dqkv.data[(b * steps + q) * w3 + 2 * d + h * dh..][..dh];
                        for k in 0..dh {
                            dv[k] = dv[k] + probs[q] * dout[k];
                        }
                    }
                    for q in 0..=p {
                        if !c.key_valid[b * steps + q] {
                            continue;
                        }
                        let ds = probs[q] * (dprob[q] - s) * scale;
                        if ds == R::zero() {
                            continue;
                        }
                        let qoff = (b * steps + p) * w3 + h * dh;
                        let koff = (b * steps + q) * w3 + d + h * dh;
                        for k in 0..dh {
                            let kq = qv.data[koff + k];
                            let qq = qv.data[qoff + k];
                            dqkv.data[qoff + k] = dqkv.data[qoff + k] + ds * kq;
                            dqkv.data[koff + k] = dqkv.data[koff + k] + ds * qq;
                        }
                    }
                }
            }
        }
        dqkv
    }
}
