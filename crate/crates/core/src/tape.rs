//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar (1×1) output with
//! respect to every node that requires one. Operations are the handful the
//! action transformer needs, several of them fused (layer norm, causal
//! softmax, row normalization, softmax cross-entropy) so their backward
//! passes stay exact and cheap.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Array2<f64>),
    Borrowed(&'a Array2<f64>),
}

impl Value<'_> {
    fn view(&self) -> ArrayView2<'_, f64> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Borrowed(a) => a.view(),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a 1×n row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    /// Multiplies by a 1×1 variable.
    ScaleBy(Var, Var),
    MulConst(Var, Array2<f64>),
    Exp(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Array1<f64>,
    },
    /// Row softmax over the lower triangle (column j admitted iff j <= row).
    CausalSoftmax(Var),
    GatherRows(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// `x / (‖x‖ + eps)` per row.
    RowNormalize {
        x: Var,
        eps: f64,
        norms: Array1<f64>,
    },
    /// Sum over rows of `logsumexp(row) - row[target]`; output 1×1.
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that need none or were
/// not reached.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf borrowing its value (parameters).
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (inputs, fixed features).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×n row");
        let v = &self.value(a) + &self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = &self.value(a) * c;
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::ScaleBy(a, s), rg)
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let v = &self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, mask), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.dim());
        let mut rstd = Array1::zeros(xv.nrows());
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            Zip::from(xhat.row_mut(r))
                .and(&row)
                .for_each(|h, &v| *h = (v - mean) * rs);
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn causal_softmax(&mut self, scores: Var) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.nrows(), sv.ncols(), "causal softmax needs a square matrix");
        let mut out = Array2::zeros(sv.dim());
        for (i, row) in sv.outer_iter().enumerate() {
            let admitted = row.slice(s![..=i]);
            let max = admitted.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in 0..=i {
                out[[i, j]] /= sum;
            }
        }
        let rg = self.rg(scores);
        self.push(out, Op::CausalSoftmax(scores), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let idx: Vec<Option<usize>> = rows.iter().copied().map(Some).collect();
        self.gather_rows_opt(a, idx)
    }

    /// Gathers rows by index; `None` yields a zero row.
    pub fn gather_rows_opt(&mut self, a: Var, rows: Vec<Option<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((rows.len(), av.ncols()));
        for (r, idx) in rows.iter().enumerate() {
            if let Some(i) = idx {
                out.row_mut(r).assign(&av.row(*i));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, rows), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, len), rg)
    }

    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let norms: Array1<f64> = xv
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut out = xv.to_owned();
        for (mut row, n) in out.outer_iter_mut().zip(norms.iter()) {
            row /= n + eps;
        }
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize { x, eps, norms }, rg)
    }

    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per row");
        let mut probs = Array2::zeros(lv.dim());
        let mut total = 0.0;
        for (r, row) in lv.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[r]];
            Zip::from(probs.row_mut(r))
                .and(&row)
                .for_each(|p, &v| *p = (v - lse).exp());
        }
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Gradients of the 1×1 node `output` with respect to every node that
    /// requires one.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        accumulate(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b)));
                    }
                    if need(b) {
                        accumulate(&mut grads[b.0], g.t().dot(&self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if need(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if need(row) {
                        accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, c) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g * *c);
                    }
                }
                Op::ScaleBy(a, sv) => {
                    if need(sv) {
                        let ds = (&g * &self.value(*a)).sum();
                        accumulate(&mut grads[sv.0], Array2::from_elem((1, 1), ds));
                    }
                    if need(a) {
                        let c = self.scalar(*sv);
                        accumulate(&mut grads[a.0], g * c);
                    }
                }
                Op::MulConst(a, mask) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g * mask);
                    }
                }
                Op::Exp(a) => {
                    if need(a) {
                        accumulate(&mut grads[a.0], g * &node.value.view());
                    }
                }
                Op::Gelu(a) => {
                    if need(a) {
                        let mut d = g;
                        Zip::from(&mut d)
                            .and(&self.value(*a))
                            .for_each(|d, &x| *d *= gelu_grad(x));
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if need(beta) {
                        accumulate(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(gamma) {
                        accumulate(
                            &mut grads[gamma.0],
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if need(x) {
                        let gv = self.value(*gamma);
                        let dxhat = &g * &gv;
                        let n = dxhat.ncols() as f64;
                        let mut dx = Array2::zeros(dxhat.dim());
                        for r in 0..dxhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let mean_dh = dh.sum() / n;
                            let mean_dh_xh = dh.dot(&xh) / n;
                            Zip::from(dx.row_mut(r))
                                .and(&dh)
                                .and(&xh)
                                .for_each(|o, &d, &h| *o = rstd[r] * (d - mean_dh - h * mean_dh_xh));
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::CausalSoftmax(sc) => {
                    if need(sc) {
                        let p = node.value.view();
                        let mut ds = Array2::zeros(p.dim());
                        for r in 0..p.nrows() {
                            let pr = p.slice(s![r, ..=r]);
                            let gr = g.slice(s![r, ..=r]);
                            let dot = pr.dot(&gr);
                            for j in 0..=r {
                                ds[[r, j]] = pr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads[sc.0], ds);
                    }
                }
                Op::GatherRows(a, rows) => {
                    if need(a) {
                        let mut da = Array2::zeros(self.value(*a).dim());
                        for (r, idx) in rows.iter().enumerate() {
                            if let Some(i) = idx {
                                let mut dst = da.row_mut(*i);
                                dst += &g.row(r);
                            }
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        if need(p) {
                            accumulate(
                                &mut grads[p.0],
                                g.slice(s![start..start + rows, ..]).to_owned(),
                            );
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.value(*p).ncols();
                        if need(p) {
                            accumulate(
                                &mut grads[p.0],
                                g.slice(s![.., start..start + cols]).to_owned(),
                            );
                        }
                        start += cols;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    if need(a) {
                        let mut da = Array2::zeros(self.value(*a).dim());
                        da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::RowNormalize { x, eps, norms } => {
                    if need(x) {
                        let xv = self.value(*x);
                        let mut dx = Array2::zeros(xv.dim());
                        for r in 0..xv.nrows() {
                            let n = norms[r];
                            let denom = n + eps;
                            let xr = xv.row(r);
                            let gr = g.row(r);
                            let coef = if n > 0.0 {
                                xr.dot(&gr) / (n * denom * denom)
                            } else {
                                0.0
                            };
                            Zip::from(dx.row_mut(r))
                                .and(&gr)
                                .and(&xr)
                                .for_each(|o, &gv, &xv| *o = gv / denom - xv * coef);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    probs,
                } => {
                    if need(logits) {
                        let scale = g[[0, 0]];
                        let mut d = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            d[[r, t]] -= 1.0;
                        }
                        d *= scale;
                        accumulate(&mut grads[logits.0], d);
                    }
                }
            }
        }
        Gradients { grads }
    }
}
