//! Recorded-op tape over a fixed primitive set, with exact reverse-mode
//! differentiation.
//!
//! A [`Tape`] is built once per traced computation (the transformer graph is
//! static), then executed with [`Tape::forward`]. Re-running the same tape
//! with the same bindings is bitwise deterministic; all reductions use a
//! fixed left-to-right order. Forward replay accepts activation overrides so
//! the patching engine can overwrite node values before they are consumed.
//!
//! [`Tape::backward`] visits ops in exact reverse order of recording. It
//! supports two hooks needed by the gradient-based estimators:
//!
//! * a drop set of value ids whose accumulated adjoint is zeroed before any
//!   propagation to earlier ops (used to drop one layer's residual
//!   contribution at a time), and
//! * a frozen-LayerNorm mode that treats the per-row normalization
//!   denominator as a constant during backprop only.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, softmax_into, Tensor};

pub type ValueId = usize;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Named external input; bound at forward time.
    Input { name: String },
    Constant { value: Tensor },
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul { a: ValueId, b: ValueId },
    Transpose { a: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Scale { a: ValueId, factor: f64 },
    /// `[m,n] + [n]` broadcast over rows.
    AddRow { a: ValueId, bias: ValueId },
    Gelu { a: ValueId },
    /// Row-wise layer normalization with learned gain and bias.
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, eps: f64 },
    /// Row-wise softmax over the causal prefix of a `[t,t]` score matrix;
    /// entries above the diagonal are exactly zero.
    SoftmaxCausal { a: ValueId },
    /// Gather rows of `table` by token id.
    Embed { table: ValueId, ids: Vec<usize> },
    /// `[m,n] -> [n]`, row `row`.
    RowSelect { a: ValueId, row: usize },
    /// `[n] -> [1]`, element `index`.
    PickElem { a: ValueId, index: usize },
    /// `[n] -> [1]`, log-sum-exp of the whole vector.
    LogSumExp { a: ValueId },
    /// `[n] -> [1]`, log-sum-exp excluding element `index`.
    LogSumExpExcept { a: ValueId, index: usize },
}

/// Activation overrides applied during forward replay, immediately after the
/// target value is computed and before any consumer reads it.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    rows: HashMap<ValueId, Vec<(usize, Vec<f64>)>>,
    elems: HashMap<ValueId, Vec<(usize, usize, f64)>>,
}

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.elems.is_empty()
    }

    /// Overwrite row `row` of a matrix value.
    pub fn set_row(&mut self, id: ValueId, row: usize, values: Vec<f64>) {
        self.rows.entry(id).or_default().push((row, values));
    }

    /// Overwrite a single matrix element.
    pub fn set_elem(&mut self, id: ValueId, row: usize, col: usize, value: f64) {
        self.elems.entry(id).or_default().push((row, col, value));
    }

    fn apply(&self, id: ValueId, value: &mut Tensor) {
        if let Some(rows) = self.rows.get(&id) {
            for (r, vals) in rows {
                value.row_mut(*r).copy_from_slice(vals);
            }
        }
        if let Some(elems) = self.elems.get(&id) {
            for (r, c, v) in elems {
                value.set(*r, *c, *v);
            }
        }
    }
}

/// Options for a single backward pass.
#[derive(Clone, Debug, Default)]
pub struct BackwardOptions {
    /// Value ids whose adjoint is zeroed before propagating upstream.
    pub drop_set: HashSet<ValueId>,
    /// Treat every LayerNorm denominator as a constant.
    pub frozen_ln: bool,
}

/// Forward results: one tensor per recorded value.
pub struct RunValues {
    values: Vec<Tensor>,
}

impl RunValues {
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id]
    }
}

/// Gradients for tapped values only.
pub struct Gradients {
    grads: HashMap<ValueId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient of a tapped value; panics if the value was not tapped.
    pub fn expect(&self, id: ValueId) -> &Tensor {
        self.grads.get(&id).expect("value was not tapped before forward")
    }
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    taps: BTreeSet<ValueId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.shapes[id]
    }

    /// Declare interest in a value's gradient. Untapped values do not appear
    /// in [`Gradients`].
    pub fn tap(&mut self, id: ValueId) {
        self.taps.insert(id);
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> ValueId {
        self.ops.push(op);
        self.shapes.push(shape);
        self.ops.len() - 1
    }

    fn mismatch(&self, detail: String) -> Error {
        Error::ShapeMismatch { op_index: self.ops.len(), detail }
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> ValueId {
        self.push(Op::Input { name: name.to_string() }, shape)
    }

    pub fn constant(&mut self, value: Tensor) -> ValueId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant { value }, shape)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(format!("matmul {:?} @ {:?}", sa, sb)));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul { a, b }, shape))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = &self.shapes[a];
        if sa.len() != 2 {
            return Err(self.mismatch(format!("transpose {:?}", sa)));
        }
        let shape = vec![sa[1], sa[0]];
        Ok(self.push(Op::Transpose { a }, shape))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shapes[a] != self.shapes[b] {
            return Err(self.mismatch(format!("add {:?} + {:?}", self.shapes[a], self.shapes[b])));
        }
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::Add { a, b }, shape))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shapes[a] != self.shapes[b] {
            return Err(self.mismatch(format!("sub {:?} - {:?}", self.shapes[a], self.shapes[b])));
        }
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::Sub { a, b }, shape))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let shape = self.shapes[a].clone();
        self.push(Op::Scale { a, factor }, shape)
    }

    pub fn add_row(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[bias]);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.mismatch(format!("add_row {:?} + {:?}", sa, sb)));
        }
        let shape = sa.clone();
        Ok(self.push(Op::AddRow { a, bias }, shape))
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let shape = self.shapes[a].clone();
        self.push(Op::Gelu { a }, shape)
    }

    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId, eps: f64) -> Result<ValueId> {
        let (sx, sg, sb) = (&self.shapes[x], &self.shapes[gain], &self.shapes[bias]);
        if sx.len() != 2 || sg != &vec![sx[1]] || sb != &vec![sx[1]] {
            return Err(self.mismatch(format!("layer_norm {:?} g{:?} b{:?}", sx, sg, sb)));
        }
        let shape = sx.clone();
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape))
    }

    pub fn softmax_causal(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = &self.shapes[a];
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(self.mismatch(format!("softmax_causal {:?}", sa)));
        }
        let shape = sa.clone();
        Ok(self.push(Op::SoftmaxCausal { a }, shape))
    }

    pub fn embed(&mut self, table: ValueId, ids: Vec<usize>) -> Result<ValueId> {
        let st = &self.shapes[table];
        if st.len() != 2 {
            return Err(self.mismatch(format!("embed table {:?}", st)));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(self.mismatch(format!("embed id {} out of {} rows", bad, st[0])));
        }
        let shape = vec![ids.len(), st[1]];
        Ok(self.push(Op::Embed { table, ids }, shape))
    }

    pub fn row_select(&mut self, a: ValueId, row: usize) -> Result<ValueId> {
        let sa = &self.shapes[a];
        if sa.len() != 2 || row >= sa[0] {
            return Err(self.mismatch(format!("row_select {} of {:?}", row, sa)));
        }
        let shape = vec![sa[1]];
        Ok(self.push(Op::RowSelect { a, row }, shape))
    }

    pub fn pick_elem(&mut self, a: ValueId, index: usize) -> Result<ValueId> {
        let sa = &self.shapes[a];
        if sa.len() != 1 || index >= sa[0] {
            return Err(self.mismatch(format!("pick_elem {} of {:?}", index, sa)));
        }
        Ok(self.push(Op::PickElem { a, index }, vec![1]))
    }

    pub fn log_sum_exp(&mut self, a: ValueId) -> Result<ValueId> {
        let sa = &self.shapes[a];
        if sa.len() != 1 {
            return Err(self.mismatch(format!("log_sum_exp {:?}", sa)));
        }
        Ok(self.push(Op::LogSumExp { a }, vec![1]))
    }

    pub fn log_sum_exp_except(&mut self, a: ValueId, index: usize) -> Result<ValueId> {
        let sa = &self.shapes[a];
        if sa.len() != 1 || sa[0] < 2 || index >= sa[0] {
            return Err(self.mismatch(format!("log_sum_exp_except {} of {:?}", index, sa)));
        }
        Ok(self.push(Op::LogSumExpExcept { a, index }, vec![1]))
    }

    pub fn forward(&self, bindings: &HashMap<String, Tensor>) -> Result<RunValues> {
        self.forward_with_overrides(bindings, &Overrides::default())
    }

    /// Execute the tape in recording order. Each value is computed, then any
    /// override for it is applied before later ops consume it.
    pub fn forward_with_overrides(
        &self,
        bindings: &HashMap<String, Tensor>,
        overrides: &Overrides,
    ) -> Result<RunValues> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let mut out = match op {
                Op::Input { name } => {
                    let t = bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != self.shapes[idx] {
                        return Err(Error::ShapeMismatch {
                            op_index: idx,
                            detail: format!(
                                "input `{}` bound with shape {:?}, declared {:?}",
                                name,
                                t.shape(),
                                self.shapes[idx]
                            ),
                        });
                    }
                    t.clone()
                }
                Op::Constant { value } => value.clone(),
                Op::MatMul { a, b } => values[*a].matmul(&values[*b]),
                Op::Transpose { a } => values[*a].transpose(),
                Op::Add { a, b } => {
                    let mut t = values[*a].clone();
                    for (x, y) in t.data_mut().iter_mut().zip(values[*b].data()) {
                        *x += y;
                    }
                    t
                }
                Op::Sub { a, b } => {
                    let mut t = values[*a].clone();
                    for (x, y) in t.data_mut().iter_mut().zip(values[*b].data()) {
                        *x -= y;
                    }
                    t
                }
                Op::Scale { a, factor } => {
                    let mut t = values[*a].clone();
                    for x in t.data_mut() {
                        *x *= factor;
                    }
                    t
                }
                Op::AddRow { a, bias } => {
                    let mut t = values[*a].clone();
                    let b = values[*bias].data();
                    let n = b.len();
                    for r in 0..t.rows() {
                        let row = t.row_mut(r);
                        for j in 0..n {
                            row[j] += b[j];
                        }
                    }
                    t
                }
                Op::Gelu { a } => {
                    let mut t = values[*a].clone();
                    for x in t.data_mut() {
                        *x = gelu(*x);
                    }
                    t
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xin = &values[*x];
                    let g = values[*gain].data();
                    let b = values[*bias].data();
                    let n = xin.cols();
                    let mut t = Tensor::zeros(xin.shape().to_vec());
                    for r in 0..xin.rows() {
                        let xr = xin.row(r);
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let or = t.row_mut(r);
                        for j in 0..n {
                            or[j] = (xr[j] - mean) * inv * g[j] + b[j];
                        }
                    }
                    t
                }
                Op::SoftmaxCausal { a } => {
                    let s = &values[*a];
                    let t_len = s.rows();
                    let mut t = Tensor::zeros(vec![t_len, t_len]);
                    for r in 0..t_len {
                        let scores = &s.row(r)[..=r];
                        let out_row = &mut t.row_mut(r)[..=r];
                        softmax_into(scores, out_row);
                    }
                    t
                }
                Op::Embed { table, ids } => {
                    let tbl = &values[*table];
                    let n = tbl.cols();
                    let mut t = Tensor::zeros(vec![ids.len(), n]);
                    for (r, &id) in ids.iter().enumerate() {
                        t.row_mut(r).copy_from_slice(tbl.row(id));
                    }
                    t
                }
                Op::RowSelect { a, row } => {
                    let src = &values[*a];
                    Tensor::new(vec![src.cols()], src.row(*row).to_vec()).unwrap()
                }
                Op::PickElem { a, index } => Tensor::scalar(values[*a].data()[*index]),
                Op::LogSumExp { a } => Tensor::scalar(log_sum_exp(values[*a].data())),
                Op::LogSumExpExcept { a, index } => {
                    let src = values[*a].data();
                    let rest: Vec<f64> = src
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| j != index)
                        .map(|(_, v)| *v)
                        .collect();
                    Tensor::scalar(log_sum_exp(&rest))
                }
            };
            overrides.apply(idx, &mut out);
            values.push(out);
        }
        Ok(RunValues { values })
    }

    /// Reverse pass from `seed` (a scalar value, seeded with gradient 1.0
    /// unless `seed_grad` is given). Gradients are returned for tapped values
    /// only. Adjoints of values in the drop set are zeroed before any
    /// propagation, including to earlier ops.
    pub fn backward(
        &self,
        run: &RunValues,
        seed: ValueId,
        seed_grad: Option<&Tensor>,
        opts: &BackwardOptions,
    ) -> Result<Gradients> {
        let mut adjoints: Vec<Tensor> =
            self.shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        match seed_grad {
            Some(g) => {
                if g.shape() != self.shapes[seed] {
                    return Err(Error::ShapeMismatch {
                        op_index: seed,
                        detail: format!(
                            "seed gradient shape {:?}, value shape {:?}",
                            g.shape(),
                            self.shapes[seed]
                        ),
                    });
                }
                adjoints[seed] = g.clone();
            }
            None => {
                for v in adjoints[seed].data_mut() {
                    *v = 1.0;
                }
            }
        }

        for idx in (0..self.ops.len()).rev() {
            if opts.drop_set.contains(&idx) {
                let z = Tensor::zeros(self.shapes[idx].clone());
                adjoints[idx] = z;
            }
            let grad = adjoints[idx].clone();
            match &self.ops[idx] {
                Op::Input { .. } | Op::Constant { .. } => {}
                Op::MatMul { a, b } => {
                    let da = grad.matmul(&run.values[*b].transpose());
                    let db = run.values[*a].transpose().matmul(&grad);
                    accumulate(&mut adjoints[*a], &da);
                    accumulate(&mut adjoints[*b], &db);
                }
                Op::Transpose { a } => {
                    let da = grad.transpose();
                    accumulate(&mut adjoints[*a], &da);
                }
                Op::Add { a, b } => {
                    accumulate(&mut adjoints[*a], &grad);
                    accumulate(&mut adjoints[*b], &grad);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adjoints[*a], &grad);
                    let mut neg = grad.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut adjoints[*b], &neg);
                }
                Op::Scale { a, factor } => {
                    let mut da = grad.clone();
                    for v in da.data_mut() {
                        *v *= factor;
                    }
                    accumulate(&mut adjoints[*a], &da);
                }
                Op::AddRow { a, bias } => {
                    accumulate(&mut adjoints[*a], &grad);
                    let n = self.shapes[*bias][0];
                    let mut db = Tensor::zeros(vec![n]);
                    for r in 0..grad.rows() {
                        let gr = grad.row(r);
                        let d = db.data_mut();
                        for j in 0..n {
                            d[j] += gr[j];
                        }
                    }
                    accumulate(&mut adjoints[*bias], &db);
                }
                Op::Gelu { a } => {
                    let xin = &run.values[*a];
                    let mut da = grad.clone();
                    for (g, x) in da.data_mut().iter_mut().zip(xin.data()) {
                        *g *= gelu_grad(*x);
                    }
                    accumulate(&mut adjoints[*a], &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (dx, dg, db) = layer_norm_backward(
                        &run.values[*x],
                        run.values[*gain].data(),
                        &grad,
                        *eps,
                        opts.frozen_ln,
                    );
                    accumulate(&mut adjoints[*x], &dx);
                    accumulate(&mut adjoints[*gain], &dg);
                    accumulate(&mut adjoints[*bias], &db);
                }
                Op::SoftmaxCausal { a } => {
                    let p = &run.values[idx];
                    let t_len = p.rows();
                    let mut da = Tensor::zeros(vec![t_len, t_len]);
                    for r in 0..t_len {
                        let pr = &p.row(r)[..=r];
                        let gr = &grad.row(r)[..=r];
                        let inner = dot(pr, gr);
                        let dr = &mut da.row_mut(r)[..=r];
                        for j in 0..=r {
                            dr[j] = pr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut adjoints[*a], &da);
                }
                Op::Embed { table, ids } => {
                    let n = self.shapes[*table][1];
                    let dt = adjoints[*table].data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        let gr = grad.row(r);
                        for j in 0..n {
                            dt[id * n + j] += gr[j];
                        }
                    }
                }
                Op::RowSelect { a, row } => {
                    let n = self.shapes[idx][0];
                    let da = adjoints[*a].data_mut();
                    let g = grad.data();
                    for j in 0..n {
                        da[row * n + j] += g[j];
                    }
                }
                Op::PickElem { a, index } => {
                    adjoints[*a].data_mut()[*index] += grad.item();
                }
                Op::LogSumExp { a } => {
                    let g = grad.item();
                    let src = run.values[*a].data();
                    let lse = run.values[idx].item();
                    let da = adjoints[*a].data_mut();
                    for (d, v) in da.iter_mut().zip(src) {
                        *d += g * (v - lse).exp();
                    }
                }
                Op::LogSumExpExcept { a, index } => {
                    let g = grad.item();
                    let src = run.values[*a].data();
                    let lse = run.values[idx].item();
                    let da = adjoints[*a].data_mut();
                    for (j, (d, v)) in da.iter_mut().zip(src).enumerate() {
                        if j != *index {
                            *d += g * (v - lse).exp();
                        }
                    }
                }
            }
        }

        let grads = self
            .taps
            .iter()
            .map(|&id| {
                let mut t = adjoints[id].clone();
                if opts.drop_set.contains(&id) {
                    t = Tensor::zeros(self.shapes[id].clone());
                }
                (id, t)
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(acc: &mut Tensor, delta: &Tensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

fn layer_norm_backward(
    x: &Tensor,
    gain: &[f64],
    grad: &Tensor,
    eps: f64,
    frozen: bool,
) -> (Tensor, Tensor, Tensor) {
    let n = x.cols();
    let nf = n as f64;
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dg = Tensor::zeros(vec![n]);
    let mut db = Tensor::zeros(vec![n]);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = grad.row(r);
        let mean = xr.iter().sum::<f64>() / nf;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv = 1.0 / (var + eps).sqrt();

        // dy through gain; xhat for the gain gradient.
        let mut dyh = vec![0.0; n];
        let mut mean_dyh = 0.0;
        let mut mean_dyh_xhat = 0.0;
        for j in 0..n {
            let xhat = (xr[j] - mean) * inv;
            dyh[j] = gr[j] * gain[j];
            mean_dyh += dyh[j];
            mean_dyh_xhat += dyh[j] * xhat;
            dg.data_mut()[j] += gr[j] * xhat;
            db.data_mut()[j] += gr[j];
        }
        mean_dyh /= nf;
        mean_dyh_xhat /= nf;
        let dxr = dx.row_mut(r);
        for j in 0..n {
            let xhat = (xr[j] - mean) * inv;
            dxr[j] = if frozen {
                // Denominator held constant: only the mean subtraction is
                // differentiated.
                inv * (dyh[j] - mean_dyh)
            } else {
                inv * (dyh[j] - mean_dyh - xhat * mean_dyh_xhat)
            };
        }
    }
    (dx, dg, db)
}
