use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, F> {
    Owned(Tensor<F>),
    Borrowed(&'p Tensor<F>),
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Softmax { x: Var, axis: usize, temp: F },
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    L2NormRows { x: Var, norms: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Transpose(Var),
    Scale(Var, F),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    MulRows(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
}

struct Node<'p, F> {
    value: Value<'p, F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A computation record: values of every primitive application in creation
/// (topological) order, together with what backward needs.
///
/// A graph is single-writer. Parameters are borrowed from a [`ParamStore`]
/// rather than copied, so the store stays immutable while the graph lives.
pub struct Graph<'p, F> {
    nodes: Vec<Node<'p, F>>,
    store: Option<&'p ParamStore<F>>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<'p, F: Float> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Float> Graph<'p, F> {
    /// A graph with no parameter store; only owned leaves are available.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            track_params: true,
        }
    }

    pub fn with_params(store: &'p ParamStore<F>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Parameters fetched after this call do not require gradients.
    pub fn no_grad(mut self) -> Self {
        self.track_params = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// `x + 1·bᵀ`: adds a row vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(bias).len() != c {
            return shape_err("add_bias", format!("{} columns, bias of {}", c, self.value(bias).len()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for i in 0..r {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let out = out.reshape(&[r, c])?;
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("elementwise_mul", format!("{:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "elementwise_mul")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let rows = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return shape_err("concat_cols", "row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.any_grad(parts);
        self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Rows of `x` selected (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return shape_err("gather_rows", format!("row {i} of {r}"));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![idx.len(), c], data)?, Op::GatherRows(x, idx.to_vec()), rg, "gather_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start > end || end > c {
            return shape_err("slice_cols", format!("{start}..{end} of {c}"));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.value(x).row(i)[start..end]);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, end - start], data)?, Op::SliceCols(x, start), rg, "slice_cols")
    }

    /// Mean over axis 0 (→ 1×c) or axis 1 (→ r×1).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let t = self.value(x);
        let out = match axis {
            0 => {
                let mut acc = vec![F::zero(); c];
                for i in 0..r {
                    for (a, &v) in acc.iter_mut().zip(t.row(i)) {
                        *a += v;
                    }
                }
                let n = F::from_f64(r as f64);
                Tensor::new(vec![1, c], acc.into_iter().map(|a| a / n).collect())?
            }
            1 => {
                let n = F::from_f64(c as f64);
                Tensor::new(vec![r, 1], (0..r).map(|i| t.row(i).iter().copied().sum::<F>() / n).collect())?
            }
            _ => return Err(Error::InvalidArgument(format!("mean axis {axis}"))),
        };
        let rg = self.any_grad(&[x]);
        self.push(out, Op::MeanAxis(x, axis), rg, "mean_over_axis")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum")
    }

    /// `softmax(x / temp)` along `axis` (1 = within each row, 0 = within each column).
    pub fn softmax(&mut self, x: Var, axis: usize, temp: F) -> Result<Var> {
        if !(temp > F::zero()) || !temp.is_finite() {
            return Err(Error::InvalidArgument(format!("softmax temperature {temp} must be > 0")));
        }
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("softmax axis {axis}")));
        }
        let (r, c) = self.dims(x);
        let t = self.value(x);
        let mut out = vec![F::zero(); r * c];
        let (outer, inner, so, si) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let base = o * so;
            let mut m = F::neg_infinity();
            for i in 0..inner {
                m = m.max(t.data()[base + i * si] / temp);
            }
            let mut z = F::zero();
            for i in 0..inner {
                let e = (t.data()[base + i * si] / temp - m).exp();
                out[base + i * si] = e;
                z += e;
            }
            for i in 0..inner {
                out[base + i * si] /= z;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, c], out)?, Op::Softmax { x, axis, temp }, rg, "softmax")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = F::from_f64(GELU_C);
        let k = F::from_f64(GELU_K);
        let half = F::from_f64(0.5);
        let out = self.value(x).map(|v| half * v * (F::one() + (c * (v + k * v * v * v)).tanh()));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), rg, "exp")
    }

    /// Per-row layer normalization with learned gain and bias (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return shape_err("layer_norm", format!("width {c}, gain {}, bias {}", self.value(gain).len(), self.value(bias).len()));
        }
        let eps = F::from_f64(LN_EPS);
        let n = F::from_f64(c as f64);
        let t = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = t.row(i);
            let mu = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
            "layer_norm",
        )
    }

    /// Divide every row by its l2 norm. A row of zero norm is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let t = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = t.row(i);
            let nrm = Tensor::dot(row, row).sqrt();
            if nrm == F::zero() {
                return Err(Error::ZeroNorm { row: i });
            }
            norms.push(nrm);
            for j in 0..c {
                out[i * c + j] = row[j] / nrm;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(vec![r, c], out)?, Op::L2NormRows { x, norms }, rg, "l2_normalize_rows")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.any_grad(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
            "embedding_lookup",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), rg, "transpose")
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg, "scale_by_scalar")
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg, "add_scalar")
    }

    /// `s · x` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("mul_scalar", format!("scalar has shape {:?}", self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let rg = self.any_grad(&[x, s]);
        self.push(out, Op::MulScalarVar(x, s), rg, "mul_scalar")
    }

    /// Scale row `i` of `x` by `w[i]`; `w` holds one value per row.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(w).len() != r {
            return shape_err("mul_rows", format!("{r} rows, {} weights", self.value(w).len()));
        }
        let wv = self.value(w).data();
        let t = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(t.row(i)) {
                *o = v * wv[i];
            }
        }
        let rg = self.any_grad(&[x, w]);
        self.push(Tensor::new(vec![r, c], out)?, Op::MulRows(x, w), rg, "mul_rows")
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if labels.len() != r {
            return shape_err("cross_entropy_with_onehot", format!("{r} rows, {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let t = self.value(logits);
        let mut probs = vec![F::zero(); r * c];
        let mut total = F::zero();
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
        }
        let loss = total / F::from_f64(r as f64);
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
            "cross_entropy_with_onehot",
        )
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of the one-element node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss has shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::full(self.shape(loss), F::one());
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let y = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    F::gemm(m, n, k, dy.data(), false, bv, true, ga.data_mut(), true);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    F::gemm(k, m, n, av, true, dy.data(), false, gb.data_mut(), true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        self.grad_buf(grads, v).add_assign(dy);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires_grad(*x) {
                    self.grad_buf(grads, *x).add_assign(dy);
                }
                if self.requires_grad(*bias) {
                    let (r, _) = dy.dims2();
                    let gb = self.grad_buf(grads, *bias);
                    for i in 0..r {
                        for (g, &d) in gb.data_mut().iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (p, q) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(p) {
                        let qv = self.value(q).data();
                        let gp = self.grad_buf(grads, p);
                        for ((g, &d), &o) in gp.data_mut().iter_mut().zip(dy.data()).zip(qv) {
                            *g += d * o;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        let gp = self.grad_buf(grads, p);
                        for (g, &d) in gp.data_mut().iter_mut().zip(&dy.data()[offset..offset + n]) {
                            *g += d;
                        }
                    }
                    offset += n;
                    debug_assert_eq!(n % c.max(1), 0);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = dy.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.requires_grad(p) {
                        let gp = self.grad_buf(grads, p);
                        for r in 0..rows {
                            for (g, &d) in gp.row_mut(r).iter_mut().zip(&dy.row(r)[col..col + w]) {
                                *g += d;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(x, idxs) => {
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (out_row, &src) in idxs.iter().enumerate() {
                        for (g, &d) in gx.row_mut(src).iter_mut().zip(dy.row(out_row)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if self.requires_grad(*x) {
                    let w = dy.cols();
                    let gx = self.grad_buf(grads, *x);
                    for r in 0..dy.rows() {
                        for (g, &d) in gx.row_mut(r)[*start..*start + w].iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                if self.requires_grad(*x) {
                    let (r, c) = self.dims(*x);
                    let gx = self.grad_buf(grads, *x);
                    if *axis == 0 {
                        let n = F::from_f64(r as f64);
                        for i in 0..r {
                            for (g, &d) in gx.row_mut(i).iter_mut().zip(dy.data()) {
                                *g += d / n;
                            }
                        }
                    } else {
                        let n = F::from_f64(c as f64);
                        for i in 0..r {
                            let d = dy.data()[i] / n;
                            for g in gx.row_mut(i) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.requires_grad(*x) {
                    let d = dy.item();
                    for g in self.grad_buf(grads, *x).data_mut() {
                        *g += d;
                    }
                }
            }
            Op::Softmax { x, axis, temp } => {
                if self.requires_grad(*x) {
                    let (r, c) = y.dims2();
                    let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    let yd = y.data();
                    let dd = dy.data();
                    let gx = self.grad_buf(grads, *x);
                    let g = gx.data_mut();
                    for o in 0..outer {
                        let base = o * so;
                        let mut dot = F::zero();
                        for i in 0..inner {
                            let p = base + i * si;
                            dot += yd[p] * dd[p];
                        }
                        for i in 0..inner {
                            let p = base + i * si;
                            g[p] += yd[p] * (dd[p] - dot) / *temp;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for ((g, &d), &t) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * (F::one() - t * t);
                    }
                }
            }
            Op::Gelu(x) => {
                if self.requires_grad(*x) {
                    let c = F::from_f64(GELU_C);
                    let k = F::from_f64(GELU_K);
                    let half = F::from_f64(0.5);
                    let three = F::from_f64(3.0);
                    let xv = self.value(*x).data();
                    let gx = self.grad_buf(grads, *x);
                    for ((g, &d), &v) in gx.data_mut().iter_mut().zip(dy.data()).zip(xv) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (F::one() - t * t) * c * (F::one() + three * k * v * v);
                        *g += d * (half * (F::one() + t) + half * v * dt);
                    }
                }
            }
            Op::Exp(x) => {
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for ((g, &d), &e) in gx.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                        *g += d * e;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = y.dims2();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = self.grad_buf(grads, *gain);
                    for i in 0..r {
                        for j in 0..c {
                            gg.data_mut()[j] += dy.data()[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = self.grad_buf(grads, *bias);
                    for i in 0..r {
                        for (g, &d) in gb.data_mut().iter_mut().zip(dy.row(i)) {
                            *g += d;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let n = F::from_f64(c as f64);
                    let gx = self.grad_buf(grads, *x);
                    let mut dxhat = vec![F::zero(); c];
                    for i in 0..r {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            dxhat[j] = dy.data()[i * c + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * c + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let row = gx.row_mut(i);
                        for j in 0..c {
                            row[j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                if self.requires_grad(*x) {
                    let (r, _) = y.dims2();
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..r {
                        let yr = y.row(i);
                        let dr = dy.row(i);
                        let dot = Tensor::dot(yr, dr);
                        for ((g, &d), &yy) in gx.row_mut(i).iter_mut().zip(dr).zip(yr) {
                            *g += (d - yy * dot) / norms[i];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let gt = self.grad_buf(grads, *table);
                    for (row, &id) in ids.iter().enumerate() {
                        for (g, &d) in gt.row_mut(id).iter_mut().zip(dy.row(row)) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    let dt = dy.transpose2();
                    self.grad_buf(grads, *x).add_assign(&dt);
                }
            }
            Op::Scale(x, c) => {
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (g, &d) in gx.data_mut().iter_mut().zip(dy.data()) {
                        *g += d * *c;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.requires_grad(*x) {
                    self.grad_buf(grads, *x).add_assign(dy);
                }
            }
            Op::MulScalarVar(x, s) => {
                let sv = self.value(*s).item();
                if self.requires_grad(*s) {
                    let dot = Tensor::dot(dy.data(), self.value(*x).data());
                    self.grad_buf(grads, *s).data_mut()[0] += dot;
                }
                if self.requires_grad(*x) {
                    let gx = self.grad_buf(grads, *x);
                    for (g, &d) in gx.data_mut().iter_mut().zip(dy.data()) {
                        *g += d * sv;
                    }
                }
            }
            Op::MulRows(x, w) => {
                let (r, _) = y.dims2();
                if self.requires_grad(*w) {
                    let xv = self.value(*x);
                    let dots: Vec<F> = (0..r).map(|i| Tensor::dot(dy.row(i), xv.row(i))).collect();
                    let gw = self.grad_buf(grads, *w);
                    for (g, d) in gw.data_mut().iter_mut().zip(dots) {
                        *g += d;
                    }
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..r {
                        for (g, &d) in gx.row_mut(i).iter_mut().zip(dy.row(i)) {
                            *g += d * wv[i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.requires_grad(*logits) {
                    let (r, c) = self.dims(*logits);
                    let scale = dy.item() / F::from_f64(r as f64);
                    let gl = self.grad_buf(grads, *logits);
                    for i in 0..r {
                        for j in 0..c {
                            let onehot = if j == labels[i] { F::one() } else { F::zero() };
                            gl.data_mut()[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> &'g mut Tensor<F> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()))
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "elementwise_mul",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::MeanAxis(..) => "mean_over_axis",
        Op::SumAll(..) => "sum",
        Op::Softmax { .. } => "softmax",
        Op::Tanh(..) => "tanh",
        Op::Gelu(..) => "gelu",
        Op::Exp(..) => "exp",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2NormRows { .. } => "l2_normalize_rows",
        Op::Embedding { .. } => "embedding_lookup",
        Op::Transpose(..) => "transpose",
        Op::Scale(..) => "scale_by_scalar",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalarVar(..) => "mul_scalar",
        Op::MulRows(..) => "mul_rows",
        Op::CrossEntropy { .. } => "cross_entropy_with_onehot",
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a stored parameter, if it took part in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.wrt(v))
    }

    /// All parameter gradients, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<F>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
