//! A small tape-based reverse-mode differentiation engine over row-major
//! `f64` matrices.
//!
//! Every op records its inputs on the [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and returns gradients for every parameter that was read
//! through [`Tape::param`]. Ops are coarse (fused attention, layer norm,
//! flow-matching loss) so that a forward pass stays a few dozen nodes.

use std::sync::Arc;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Strided view description for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl View {
    pub fn rows(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Row-major matrix read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        let r = (rows.max(1) - 1) as isize * self.row_stride;
        let c = (cols.max(1) - 1) as isize * self.col_stride;
        (self.offset as isize + r + c) as usize
    }
}

/// `C[m×n] = alpha · A[m×k] · B[k×n] + beta · C`, on strided views into slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last_index(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || bv.last_index(k, n) < b.len(), "gemm: B out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched is bounded by the asserts above and the
    // three slices cannot alias because `c` is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride,
            av.col_stride,
            b.as_ptr().add(bv.offset),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        View::rows(a.cols),
        &b.data,
        View::rows(b.cols),
        0.0,
        &mut c.data,
        View::rows(b.cols),
    );
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Cached quantities of a fused multi-head attention node.
#[derive(Debug)]
struct AttnCache {
    heads: usize,
    scale: f64,
    /// `heads × n × m` attention probabilities.
    probs: Vec<f64>,
}

/// Blocked (query, key) pairs, row-major `n × m`; `true` means masked out.
pub type AttnMask = Arc<Vec<bool>>;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a broadcast `1 × cols` row.
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, needed by the backward pass.
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cache: AttnCache,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Scalar loss with its gradient w.r.t. `pred` computed eagerly.
    Loss { pred: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of a scalar w.r.t. each parameter index; `None` when unused.
pub type ParamGrads = Vec<Option<Mat>>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input)
    }

    /// Read parameter `index`; repeated reads share one node.
    pub fn param(&mut self, index: usize, value: &Mat) -> Var {
        if self.param_vars.len() <= index {
            self.param_vars.resize(index + 1, None);
        }
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(index));
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, x.cols), "add_row shape");
        let mut value = x.clone();
        for chunk in value.data.chunks_mut(x.cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Row-wise layer normalization with affine `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Mat::from_vec(rows, cols, out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| gelu(v)).collect());
        self.push(value, Op::Gelu(x))
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `q` is `n × d`, `k` and `v` are `m × d`; the result is `n × d` with
    /// heads concatenated along columns. Masked pairs get zero probability.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttnMask>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d, m) = (qv.rows, qv.cols, kv.rows);
        assert_eq!(kv.cols, d);
        assert_eq!((vv.rows, vv.cols), (m, d));
        assert_eq!(d % heads, 0, "embedding not divisible by heads");
        if let Some(mask) = mask {
            assert_eq!(mask.len(), n * m, "mask shape");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            // S = Q_h K_hᵀ
            gemm(
                n,
                dh,
                m,
                scale,
                &qv.data,
                View::rows(d).at(h * dh),
                &kv.data,
                View::transposed(d).at(h * dh),
                0.0,
                p,
                View::rows(m),
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                let blocked = mask.map(|mk| &mk[i * m..(i + 1) * m]);
                let mut peak = f64::NEG_INFINITY;
                for (j, s) in row.iter().enumerate() {
                    if blocked.is_none_or(|b| !b[j]) {
                        peak = peak.max(*s);
                    }
                }
                let mut total = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    if blocked.is_some_and(|b| b[j]) {
                        *s = 0.0;
                    } else {
                        *s = (*s - peak).exp();
                        total += *s;
                    }
                }
                if total > 0.0 {
                    for s in row.iter_mut() {
                        *s /= total;
                    }
                }
            }
            // O_h = P V_h
            gemm(
                n,
                m,
                dh,
                1.0,
                p,
                View::rows(m),
                &vv.data,
                View::rows(d).at(h * dh),
                0.0,
                &mut out,
                View::rows(d).at(h * dh),
            );
        }
        let value = Mat::from_vec(n, d, out);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                cache: AttnCache {
                    heads,
                    scale,
                    probs,
                },
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `indices[i]` of `table`, in order.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in &indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Mat::from_vec(indices.len(), t.cols, data);
        self.push(value, Op::GatherRows(table, indices))
    }

    /// Record a scalar loss whose gradient w.r.t. `pred` is already known.
    pub fn loss(&mut self, pred: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.value(pred).len());
        self.push(Mat::from_vec(1, 1, vec![value]), Op::Loss { pred, grad })
    }

    /// Backpropagate from the scalar `root` and collect parameter gradients.
    pub fn backward(&self, root: Var, num_params: usize) -> ParamGrads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut out: ParamGrads = (0..num_params).map(|_| None).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out[*p] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs_grad(*a) {
                        // dA = G Bᵀ
                        let mut da = Mat::zeros(av.rows, av.cols);
                        gemm(
                            av.rows,
                            bv.cols,
                            av.cols,
                            1.0,
                            &g.data,
                            View::rows(g.cols),
                            &bv.data,
                            View::transposed(bv.cols),
                            0.0,
                            &mut da.data,
                            View::rows(av.cols),
                        );
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        // dB = Aᵀ G
                        let mut db = Mat::zeros(bv.rows, bv.cols);
                        gemm(
                            av.cols,
                            av.rows,
                            bv.cols,
                            1.0,
                            &av.data,
                            View::transposed(av.cols),
                            &g.data,
                            View::rows(g.cols),
                            0.0,
                            &mut db.data,
                            View::rows(bv.cols),
                        );
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (d, v) in dr.data.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let cols = g.cols;
                    let gam = &self.value(*gamma).data;
                    let mut dgamma = Mat::zeros(1, cols);
                    let mut dbeta = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(g.rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dgamma.data[c] += gr[c] * xh[c];
                            dbeta.data[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            dx.data[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        *d *= gelu_grad(v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, cache } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, cache, &g);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let slice = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                        accumulate(&mut grads, p, Mat::from_vec(rows, g.cols, slice));
                        start += rows;
                    }
                }
                Op::GatherRows(table, indices) => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows, t.cols);
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, v) in dt.data[i * t.cols..(i + 1) * t.cols].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Loss { pred, grad } => {
                    let p = self.value(*pred);
                    let scale = g.data[0];
                    let data = grad.iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, *pred, Mat::from_vec(p.rows, p.cols, data));
                }
            }
        }
        out
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }

    fn attention_backward(&self, q: Var, k: Var, v: Var, cache: &AttnCache, g: &Mat) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d, m) = (qv.rows, qv.cols, kv.rows);
        let heads = cache.heads;
        let dh = d / heads;
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(m, d);
        let mut dv = Mat::zeros(m, d);
        let mut dp = vec![0.0; n * m];
        for h in 0..heads {
            let p = &cache.probs[h * n * m..(h + 1) * n * m];
            // dV_h = Pᵀ G_h
            gemm(
                m,
                n,
                dh,
                1.0,
                p,
                View::transposed(m),
                &g.data,
                View::rows(d).at(h * dh),
                0.0,
                &mut dv.data,
                View::rows(d).at(h * dh),
            );
            // dP = G_h V_hᵀ
            gemm(
                n,
                dh,
                m,
                1.0,
                &g.data,
                View::rows(d).at(h * dh),
                &vv.data,
                View::transposed(d).at(h * dh),
                0.0,
                &mut dp,
                View::rows(m),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale.
            for i in 0..n {
                let pr = &p[i * m..(i + 1) * m];
                let dr = &mut dp[i * m..(i + 1) * m];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dval, &pval) in dr.iter_mut().zip(pr) {
                    *dval = pval * (*dval - dot) * cache.scale;
                }
            }
            // dQ_h = dS K_h
            gemm(
                n,
                m,
                dh,
                1.0,
                &dp,
                View::rows(m),
                &kv.data,
                View::rows(d).at(h * dh),
                0.0,
                &mut dq.data,
                View::rows(d).at(h * dh),
            );
            // dK_h = dSᵀ Q_h
            gemm(
                m,
                n,
                dh,
                1.0,
                &dp,
                View::transposed(m),
                &qv.data,
                View::rows(d).at(h * dh),
                0.0,
                &mut dk.data,
                View::rows(d).at(h * dh),
            );
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn rand_mat(rows: usize, cols: usize, seed: &mut u64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| lcg(seed)).collect())
    }

    /// Weighted sum of the output so every entry receives a distinct gradient.
    fn weighted_sum(tape: &mut Tape, out: Var, weights: &[f64]) -> Var {
        let v = tape.value(out);
        let value = v.data.iter().zip(weights).map(|(a, b)| a * b).sum();
        tape.loss(out, value, weights.to_vec())
    }

    /// Compare tape gradients against central differences for every parameter entry.
    fn check(params: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let eval = |ps: &[Mat]| -> (f64, ParamGrads) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
            let root = build(&mut tape, &vars);
            let val = tape.value(root).data[0];
            let g = tape.backward(root, ps.len());
            (val, g)
        };
        let (_, grads) = eval(params);
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for e in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data[e] += h;
                let mut minus = params.to_vec();
                minus[pi].data[e] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = grads[pi].as_ref().map_or(0.0, |g| g.data[e]);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn matmul_matches_naive() {
        let mut s = 1;
        let a = rand_mat(3, 4, &mut s);
        let b = rand_mat(4, 5, &mut s);
        let c = matmul(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let naive: f64 = (0..4).map(|k| a.at(i, k) * b.at(k, j)).sum();
                assert!((c.at(i, j) - naive).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_layer_norm_gelu_gradients() {
        let mut s = 7;
        let params = vec![
            rand_mat(4, 6, &mut s),
            rand_mat(6, 5, &mut s),
            rand_mat(1, 5, &mut s),
            rand_mat(1, 5, &mut s),
            rand_mat(1, 5, &mut s),
        ];
        let w = (0..20).map(|_| lcg(&mut s)).collect::<Vec<_>>();
        let err = check(&params, |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            let y = t.layer_norm(y, v[3], v[4]);
            let y = t.gelu(y);
            weighted_sum(t, y, &w)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn attention_gradients_with_mask() {
        let mut s = 3;
        let (n, m, d) = (5, 4, 6);
        let params = vec![rand_mat(n, d, &mut s), rand_mat(m, d, &mut s), rand_mat(m, d, &mut s)];
        let mask: AttnMask = Arc::new((0..n * m).map(|i| i % 3 == 1).collect());
        let w = (0..n * d).map(|_| lcg(&mut s)).collect::<Vec<_>>();
        let err = check(&params, |t, v| {
            let o = t.attention(v[0], v[1], v[2], 2, Some(&mask));
            weighted_sum(t, o, &w)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_concat_add_gradients() {
        let mut s = 11;
        let params = vec![rand_mat(3, 4, &mut s), rand_mat(2, 4, &mut s), rand_mat(1, 4, &mut s)];
        let w = (0..20).map(|_| lcg(&mut s)).collect::<Vec<_>>();
        let err = check(&params, |t, v| {
            let g = t.gather_rows(v[0], vec![2, 0, 2]);
            let g = t.add_row(g, v[2]);
            let c = t.concat_rows(&[g, v[1]]);
            let c2 = t.add(c, c);
            weighted_sum(t, c2, &w)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fully_masked_attention_row_is_zero() {
        let mut t = Tape::new();
        let mut s = 5;
        let q = t.input(rand_mat(2, 4, &mut s));
        let k = t.input(rand_mat(3, 4, &mut s));
        let v = t.input(rand_mat(3, 4, &mut s));
        let mask: AttnMask = Arc::new(vec![true, true, true, false, false, false]);
        let o = t.attention(q, k, v, 1, Some(&mask));
        assert!(t.value(o).row(0).iter().all(|&x| x == 0.0));
    }
}
