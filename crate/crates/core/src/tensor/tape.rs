//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; `backward`
//! walks the list in reverse and accumulates exact analytic gradients into
//! every node that (transitively) depends on a gradient-requiring leaf.
//! Tapes are cheap to build and are thrown away after each pass, so graphs
//! of varying shape cost nothing extra.

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

enum Op {
    Leaf,
    /// Elementwise sum of two same-shape values.
    Add(ValueId, ValueId),
    /// `[n x d] + [1 x d]` with the row vector broadcast over rows.
    AddRow(ValueId, ValueId),
    /// Elementwise product of two same-shape values.
    Mul(ValueId, ValueId),
    /// Rows of a `[n x d]` matrix scaled by the entries of a `[n x 1]` column.
    MulCol(ValueId, ValueId),
    MatMul(ValueId, ValueId),
    /// Row gather; serves embedding lookup and per-arc source selection.
    GatherRows(ValueId, Vec<usize>),
    ConcatCols(ValueId, ValueId),
    Reshape(ValueId),
    /// Sum rows of the input into `num_segments` output rows keyed by
    /// `segment_ids`; the aggregation primitive of message passing.
    SegmentSum {
        input: ValueId,
        segment_ids: Vec<usize>,
    },
    LeakyRelu(ValueId, f64),
    Sigmoid(ValueId),
    Softplus(ValueId),
    /// `a * x + b` elementwise with scalar constants.
    AffineScalar(ValueId, f64),
    SumAll(ValueId),
    /// Cross-entropy of softmax(logits) against a target index. `probs` is
    /// saved at forward time for the backward pass.
    SoftmaxCrossEntropy {
        logits: ValueId,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` call, if the node needed one.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let mut out = va.clone();
        out.add_assign(&self.nodes[b.0].value)?;
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::Add(a, b)))
    }

    pub fn add_row(&mut self, m: ValueId, row: ValueId) -> Result<ValueId, TensorError> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return Err(shape_err("add_row", vm, vr));
        }
        let mut out = vm.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = out.get(r, c) + vr.get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, self.needs(m) || self.needs(row), Op::AddRow(m, row)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::Mul(a, b)))
    }

    pub fn mul_col(&mut self, m: ValueId, col: ValueId) -> Result<ValueId, TensorError> {
        let (vm, vc) = (self.value(m), self.value(col));
        if vc.cols() != 1 || vc.rows() != vm.rows() {
            return Err(shape_err("mul_col", vm, vc));
        }
        let mut out = vm.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let s = vc.get(r, 0);
            for c in 0..cols {
                out.set(r, c, out.get(r, c) * s);
            }
        }
        Ok(self.push(out, self.needs(m) || self.needs(col), Op::MulCol(m, col)))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::MatMul(a, b)))
    }

    pub fn gather_rows(&mut self, src: ValueId, indices: &[usize]) -> Result<ValueId, TensorError> {
        let vs = self.value(src);
        let cols = vs.cols();
        let mut out = Tensor::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= vs.rows() {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    rows: vs.rows(),
                    cols,
                });
            }
            for c in 0..cols {
                out.set(r, c, vs.get(i, c));
            }
        }
        Ok(self.push(out, self.needs(src), Op::GatherRows(src, indices.to_vec())))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", va, vb));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut out = Tensor::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            for c in 0..ca {
                out.set(r, c, va.get(r, c));
            }
            for c in 0..cb {
                out.set(r, ca + c, vb.get(r, c));
            }
        }
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::ConcatCols(a, b)))
    }

    pub fn reshape(&mut self, a: ValueId, rows: usize, cols: usize) -> Result<ValueId, TensorError> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(TensorError::BadLength {
                op: "reshape",
                len: va.len(),
                rows,
                cols,
            });
        }
        let out = Tensor::from_vec(rows, cols, va.data().to_vec())?;
        Ok(self.push(out, self.needs(a), Op::Reshape(a)))
    }

    pub fn segment_sum(
        &mut self,
        input: ValueId,
        segment_ids: &[usize],
        num_segments: usize,
    ) -> Result<ValueId, TensorError> {
        let vi = self.value(input);
        if segment_ids.len() != vi.rows() {
            return Err(TensorError::BadLength {
                op: "segment_sum",
                len: segment_ids.len(),
                rows: vi.rows(),
                cols: vi.cols(),
            });
        }
        let cols = vi.cols();
        let mut out = Tensor::zeros(num_segments, cols);
        for (r, &s) in segment_ids.iter().enumerate() {
            if s >= num_segments {
                return Err(TensorError::IndexOutOfBounds {
                    op: "segment_sum",
                    index: s,
                    rows: num_segments,
                    cols,
                });
            }
            for c in 0..cols {
                out.set(s, c, out.get(s, c) + vi.get(r, c));
            }
        }
        Ok(self.push(
            out,
            self.needs(input),
            Op::SegmentSum {
                input,
                segment_ids: segment_ids.to_vec(),
            },
        ))
    }

    pub fn leaky_relu(&mut self, a: ValueId, slope: f64) -> ValueId {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, self.needs(a), Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(out, self.needs(a), Op::Sigmoid(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).map(softplus_scalar);
        self.push(out, self.needs(a), Op::Softplus(a))
    }

    /// `a * x + b` elementwise; covers negation, scaling and constant shifts.
    pub fn affine_scalar(&mut self, x: ValueId, a: f64, b: f64) -> ValueId {
        let out = self.value(x).map(|v| a * v + b);
        self.push(out, self.needs(x), Op::AffineScalar(x, a))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), self.needs(a), Op::SumAll(a))
    }

    /// `-log softmax(logits)[target]` as a scalar. Logits may be any shape;
    /// they are treated as a flat vector.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        target: usize,
    ) -> Result<ValueId, TensorError> {
        let vl = self.value(logits);
        if target >= vl.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "softmax_cross_entropy",
                index: target,
                rows: vl.rows(),
                cols: vl.cols(),
            });
        }
        let probs = softmax(vl.data());
        let max = vl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = vl.data().iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        let loss = log_sum - vl.data()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            self.needs(logits),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Back-propagates from a scalar node, accumulating gradients into every
    /// node that requires them. Can be called repeatedly; gradients add up.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TensorError> {
        let vl = self.value(loss);
        if !vl.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                rows: vl.rows(),
                cols: vl.cols(),
            });
        }
        // Propagate in a scratch space so repeated calls over the same loss
        // accumulate exactly one extra pass instead of compounding.
        let mut work: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(out_grad) = work[i].clone() else {
                continue;
            };
            let contributions = self.backward_step(i, &out_grad)?;
            for (parent, grad) in contributions {
                if self.needs(parent) {
                    match &mut work[parent.0] {
                        Some(g) => g
                            .add_assign(&grad)
                            .expect("gradient shape fixed at creation"),
                        slot @ None => *slot = Some(grad),
                    }
                }
            }
        }
        for (i, grad) in work.into_iter().enumerate() {
            if let Some(grad) = grad {
                self.accumulate(ValueId(i), grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, grad: Tensor) {
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_assign(&grad).expect("gradient shape fixed at creation"),
            slot @ None => *slot = Some(grad),
        }
    }

    fn backward_step(
        &self,
        index: usize,
        g: &Tensor,
    ) -> Result<Vec<(ValueId, Tensor)>, TensorError> {
        let node = &self.nodes[index];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(m, row) => {
                let mut rg = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        rg.set(0, c, rg.get(0, c) + g.get(r, c));
                    }
                }
                vec![(*m, g.clone()), (*row, rg)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                )?;
                let gb = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulCol(m, col) => {
                let (vm, vc) = (self.value(*m), self.value(*col));
                let mut gm = Tensor::zeros(vm.rows(), vm.cols());
                let mut gc = Tensor::zeros(vm.rows(), 1);
                for r in 0..vm.rows() {
                    let s = vc.get(r, 0);
                    let mut dot = 0.0;
                    for c in 0..vm.cols() {
                        gm.set(r, c, g.get(r, c) * s);
                        dot += g.get(r, c) * vm.get(r, c);
                    }
                    gc.set(r, 0, dot);
                }
                vec![(*m, gm), (*col, gc)]
            }
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.value(*b).transpose())?;
                let gb = self.value(*a).transpose().matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::GatherRows(src, indices) => {
                let vs = self.value(*src);
                let mut gs = Tensor::zeros(vs.rows(), vs.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..vs.cols() {
                        gs.set(i, c, gs.get(i, c) + g.get(r, c));
                    }
                }
                vec![(*src, gs)]
            }
            Op::ConcatCols(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    for c in 0..va.cols() {
                        ga.set(r, c, g.get(r, c));
                    }
                    for c in 0..vb.cols() {
                        gb.set(r, c, g.get(r, va.cols() + c));
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape(a) => {
                let va = self.value(*a);
                let ga = Tensor::from_vec(va.rows(), va.cols(), g.data().to_vec())?;
                vec![(*a, ga)]
            }
            Op::SegmentSum {
                input, segment_ids,
            } => {
                let vi = self.value(*input);
                let mut gi = Tensor::zeros(vi.rows(), vi.cols());
                for (r, &s) in segment_ids.iter().enumerate() {
                    for c in 0..vi.cols() {
                        gi.set(r, c, g.get(s, c));
                    }
                }
                vec![(*input, gi)]
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gd)| if x > 0.0 { gd } else { slope * gd })
                    .collect();
                vec![(*a, Tensor::from_vec(va.rows(), va.cols(), data)?)]
            }
            Op::Sigmoid(a) => {
                let s = &node.value;
                let data = s
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gd)| gd * y * (1.0 - y))
                    .collect();
                vec![(*a, Tensor::from_vec(s.rows(), s.cols(), data)?)]
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gd)| gd * sigmoid_scalar(x))
                    .collect();
                vec![(*a, Tensor::from_vec(va.rows(), va.cols(), data)?)]
            }
            Op::AffineScalar(x, a) => {
                vec![(*x, g.map(|gd| gd * a))]
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                let gd = g.item()?;
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                ga.fill(gd);
                vec![(*a, ga)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let vl = self.value(*logits);
                let gd = g.item()?;
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| gd * (p - if i == *target { 1.0 } else { 0.0 }))
                    .collect();
                vec![(*logits, Tensor::from_vec(vl.rows(), vl.cols(), data)?)]
            }
        };
        Ok(out)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs_rows: a.rows(),
        lhs_cols: a.cols(),
        rhs_rows: b.rows(),
        rhs_cols: b.cols(),
    }
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softmax of a flat slice, stabilized by max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Compares the analytic gradient of a scalar function against central finite
/// differences (step [`FD_STEP`]) for every element of every parameter and
/// returns the largest relative error, where the error of one element is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `build` must deterministically construct the loss from the given leaves;
/// it is re-invoked on fresh tapes for each perturbed evaluation.
pub fn grad_check<F>(mut build: F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape, &[ValueId]) -> Result<ValueId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let eval = |build: &mut F, work: &[Tensor]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let ids: Vec<ValueId> = work.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let loss = build(&mut t, &ids)?;
        t.value(loss).item()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + FD_STEP;
            let fp = eval(&mut build, &work)?;
            work[pi].data_mut()[e] = orig - FD_STEP;
            let fm = eval(&mut build, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[e];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
