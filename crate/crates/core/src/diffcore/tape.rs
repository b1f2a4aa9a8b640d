use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor2};
use crate::error::{Error, Result};

/// Index of a parameter tensor within a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor2) -> ParamId {
        tensor.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> + '_ {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            grads: self
                .tensors
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor2> + '_ {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor2::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().for_each(|g| g.scale(k));
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor2::is_finite)
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Dropout(Var, Vec<f64>),
    Concat(Var, Var),
    PadCols(Var),
    SegmentMean(Var, Vec<usize>),
    Softmax(Var, f64),
    Mse(Var, Tensor2),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Input | Param(_) => [None, None],
            MatMul(a, b) | AddRow(a, b) | Add(a, b) | Concat(a, b) => [Some(*a), Some(*b)],
            Scale(a, _) | Relu(a) | Tanh(a) | Dropout(a, _) | PadCols(a) | SegmentMean(a, _)
            | Softmax(a, _) | Mse(a, _) | Sum(a) => [Some(*a), None],
        }
    }
}

struct Node {
    value: Option<Tensor2>,
    op: Op,
    needs_grad: bool,
}

/// Operation record over borrowed parameters.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        let needs_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives gradient.
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = Tensor2::zeros(ta.rows(), tb.cols());
        matmul_acc(ta, tb, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::ShapeMismatch(format!(
                "add_row {:?} + {:?}",
                ta.shape(),
                tr.shape()
            )));
        }
        let mut out = ta.clone();
        out.requires_grad = false;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, "add")?;
        let mut out = ta.clone();
        out.requires_grad = false;
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        out.scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.requires_grad = false;
        out.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// Multiplies element-wise by a fixed mask (inverted dropout: entries are
    /// 0 or `1/(1-p)`).
    pub fn dropout_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.data().len() {
            return Err(Error::ShapeMismatch("dropout mask".into()));
        }
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor2::from_vec(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch(format!(
                "concat {:?} | {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * (ta.cols() + tb.cols()));
        for i in 0..ta.rows() {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor2::from_vec(ta.rows(), ta.cols() + tb.cols(), data)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Right-pads with zero columns up to `width`.
    pub fn pad_cols(&mut self, a: Var, width: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() > width {
            return Err(Error::ShapeMismatch(format!(
                "cannot pad width {} to {width}",
                ta.cols()
            )));
        }
        let mut out = Tensor2::zeros(ta.rows(), width);
        for i in 0..ta.rows() {
            out.row_mut(i)[..ta.cols()].copy_from_slice(ta.row(i));
        }
        Ok(self.push(out, Op::PadCols(a)))
    }

    /// Mean over row segments `offsets[s]..offsets[s+1]`, one output row per
    /// segment. Each column is summed in sorted order so the result does not
    /// depend on row order within a segment.
    pub fn segment_mean(&mut self, a: Var, offsets: Vec<usize>) -> Result<Var> {
        let ta = self.value(a);
        let valid = offsets.len() >= 2
            && offsets[0] == 0
            && offsets.windows(2).all(|w| w[0] < w[1])
            && offsets[offsets.len() - 1] == ta.rows();
        if !valid {
            return Err(Error::ShapeMismatch(format!(
                "segment offsets {offsets:?} for {} rows",
                ta.rows()
            )));
        }
        let segs = offsets.len() - 1;
        let cols = ta.cols();
        let mut out = Tensor2::zeros(segs, cols);
        let mut column = Vec::new();
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let n = (hi - lo) as f64;
            for j in 0..cols {
                column.clear();
                column.extend((lo..hi).map(|i| ta.get(i, j)));
                column.sort_by(f64::total_cmp);
                out.set(s, j, column.iter().sum::<f64>() / n);
            }
        }
        Ok(self.push(out, Op::SegmentMean(a, offsets)))
    }

    /// Row-wise `softmax(a / temperature)`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let out = softmax_temperature(self.value(a), temperature)?;
        Ok(self.push(out, Op::Softmax(a, temperature)))
    }

    /// Mean squared error against a constant target, as a 1×1 node.
    pub fn mse(&mut self, a: Var, target: Tensor2) -> Result<Var> {
        let l = mse_loss(self.value(a), &target)?;
        Ok(self.push(Tensor2::scalar(l), Op::Mse(a, target)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor2::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.shape() != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got {:?}",
                t.shape()
            )));
        }
        self.backward_with(loss, Tensor2::scalar(1.0))
    }

    /// Reverse sweep seeded with an upstream gradient for `output`; used when
    /// a loss and its gradient are computed outside the tape.
    pub fn backward_with(&self, output: Var, seed: Tensor2) -> Result<Gradients> {
        seed.same_shape(self.value(output), "backward seed")?;
        let mut grads: Vec<Option<Tensor2>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut out = self.params.zeros_like();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for input in node.op.inputs().iter().flatten() {
                if input.0 >= idx {
                    return Err(Error::GraphCycle {
                        node: idx,
                        input: input.0,
                    });
                }
            }
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            let send = |v: Var, t: Tensor2, grads: &mut Vec<Option<Tensor2>>| match &mut grads
                [v.0]
            {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            };

            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.grads_mut()[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if need(a) {
                        let mut ga = Tensor2::zeros(ta.rows(), ta.cols());
                        matmul_bt_acc(&g, tb, &mut ga);
                        send(*a, ga, &mut grads);
                    }
                    if need(b) {
                        let mut gb = Tensor2::zeros(tb.rows(), tb.cols());
                        matmul_at_acc(ta, &g, &mut gb);
                        send(*b, gb, &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if need(row) {
                        let mut gr = Tensor2::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, x) in gr.data_mut().iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                        send(*row, gr, &mut grads);
                    }
                    if need(a) {
                        send(*a, g, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        send(*b, g.clone(), &mut grads);
                    }
                    if need(a) {
                        send(*a, g, &mut grads);
                    }
                }
                Op::Scale(a, k) => {
                    if need(a) {
                        let mut ga = g;
                        ga.scale(*k);
                        send(*a, ga, &mut grads);
                    }
                }
                Op::Relu(a) => {
                    if need(a) {
                        let y = node.value.as_ref().unwrap();
                        let mut ga = g;
                        for (gx, yx) in ga.data_mut().iter_mut().zip(y.data()) {
                            if *yx <= 0.0 {
                                *gx = 0.0;
                            }
                        }
                        send(*a, ga, &mut grads);
                    }
                }
                Op::Tanh(a) => {
                    if need(a) {
                        let y = node.value.as_ref().unwrap();
                        let mut ga = g;
                        for (gx, yx) in ga.data_mut().iter_mut().zip(y.data()) {
                            *gx *= 1.0 - yx * yx;
                        }
                        send(*a, ga, &mut grads);
                    }
                }
                Op::Dropout(a, mask) => {
                    if need(a) {
                        let mut ga = g;
                        for (gx, m) in ga.data_mut().iter_mut().zip(mask) {
                            *gx *= m;
                        }
                        send(*a, ga, &mut grads);
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    if need(a) {
                        let data = (0..g.rows()).flat_map(|i| g.row(i)[..ca].to_vec()).collect();
                        send(*a, Tensor2::from_vec(g.rows(), ca, data)?, &mut grads);
                    }
                    if need(b) {
                        let data = (0..g.rows()).flat_map(|i| g.row(i)[ca..].to_vec()).collect();
                        send(*b, Tensor2::from_vec(g.rows(), cb, data)?, &mut grads);
                    }
                }
                Op::PadCols(a) => {
                    if need(a) {
                        let ca = self.value(*a).cols();
                        let data = (0..g.rows()).flat_map(|i| g.row(i)[..ca].to_vec()).collect();
                        send(*a, Tensor2::from_vec(g.rows(), ca, data)?, &mut grads);
                    }
                }
                Op::SegmentMean(a, offsets) => {
                    if need(a) {
                        let ta = self.value(*a);
                        let mut ga = Tensor2::zeros(ta.rows(), ta.cols());
                        for s in 0..offsets.len() - 1 {
                            let (lo, hi) = (offsets[s], offsets[s + 1]);
                            let inv = 1.0 / (hi - lo) as f64;
                            for i in lo..hi {
                                for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(s)) {
                                    *o = x * inv;
                                }
                            }
                        }
                        send(*a, ga, &mut grads);
                    }
                }
                Op::Softmax(a, tau) => {
                    if need(a) {
                        let y = node.value.as_ref().unwrap();
                        let mut ga = Tensor2::zeros(y.rows(), y.cols());
                        for i in 0..y.rows() {
                            let (yr, gr) = (y.row(i), g.row(i));
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                                *o = yr[j] * (gr[j] - dot) / tau;
                            }
                        }
                        send(*a, ga, &mut grads);
                    }
                }
                Op::Mse(a, target) => {
                    if need(a) {
                        let ta = self.value(*a);
                        let k = 2.0 * g.item() / ta.data().len() as f64;
                        let data = ta
                            .data()
                            .iter()
                            .zip(target.data())
                            .map(|(p, t)| k * (p - t))
                            .collect();
                        send(*a, Tensor2::from_vec(ta.rows(), ta.cols(), data)?, &mut grads);
                    }
                }
                Op::Sum(a) => {
                    if need(a) {
                        let ta = self.value(*a);
                        let mut ga = Tensor2::zeros(ta.rows(), ta.cols());
                        ga.fill(g.item());
                        send(*a, ga, &mut grads);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Gradients {
    pub(crate) fn grads_mut(&mut self) -> &mut [Tensor2] {
        &mut self.grads
    }
}

/// Row-wise `exp(l_i/τ) / Σ_j exp(l_j/τ)` with max subtraction.
pub fn softmax_temperature(logits: &Tensor2, temperature: f64) -> Result<Tensor2> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidTemperature(temperature));
    }
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| ((l - max) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(i).iter_mut().zip(exps) {
            *o = e / z;
        }
    }
    Ok(out)
}

/// Mean of squared element differences.
pub fn mse_loss(pred: &Tensor2, target: &Tensor2) -> Result<f64> {
    pred.same_shape(target, "mse")?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}
