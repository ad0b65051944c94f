use super::{DiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// lhs is `[m, n]`, rhs is `[n]` and is repeated for every row.
    RhsRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Min,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, lhs: Var, rhs: Var, bc: Broadcast },
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clip { x: Var, lo: f64, hi: f64 },
    /// Elementwise function whose pointwise derivative was supplied at record time.
    Map { x: Var, deriv: Tensor },
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSoftmax(Var),
    Gather { x: Var, idx: Vec<usize> },
    Slice { x: Var, offset: usize },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Min => "min",
                BinaryKind::Max => "max",
            },
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clip { .. } => "clip",
            Op::Map { .. } => "map",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Records operations eagerly; [`Tape::backward`] replays them in reverse.
///
/// Nodes only ever reference earlier nodes, so the recording order is a
/// topological order of the computation graph.
#[derive(Clone, Debug, Default)]
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn broadcast(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<Broadcast, DiffError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() == b.shape() {
            Ok(Broadcast::Same)
        } else if a.numel() == 1 {
            Ok(Broadcast::LhsScalar)
        } else if b.numel() == 1 {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            })
        }
    }

    fn binary(&mut self, kind: BinaryKind, lhs: Var, rhs: Var, bc: Broadcast) -> Result<Var, DiffError> {
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            // ties resolve to the first argument
            BinaryKind::Min => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
            BinaryKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let (a, b) = (self.value(lhs), self.value(rhs));
        let value = match bc {
            Broadcast::Same => Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            Broadcast::LhsScalar => {
                let x = a.data()[0];
                b.map(|y| f(x, y))
            }
            Broadcast::RhsScalar => {
                let y = b.data()[0];
                a.map(|x| f(x, y))
            }
            Broadcast::RhsRow => {
                let n = b.numel();
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % n])).collect(),
                )?
            }
        };
        self.push(Op::Binary { kind, lhs, rhs, bc }, value, &[lhs, rhs])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        let bc = self.broadcast("add", lhs, rhs)?;
        self.binary(BinaryKind::Add, lhs, rhs, bc)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        let bc = self.broadcast("sub", lhs, rhs)?;
        self.binary(BinaryKind::Sub, lhs, rhs, bc)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        let bc = self.broadcast("mul", lhs, rhs)?;
        self.binary(BinaryKind::Mul, lhs, rhs, bc)
    }

    /// Elementwise minimum; the adjoint follows the smaller branch, ties go to `lhs`.
    pub fn min(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        let bc = self.broadcast("min", lhs, rhs)?;
        self.binary(BinaryKind::Min, lhs, rhs, bc)
    }

    /// Elementwise maximum; ties go to `lhs`.
    pub fn max(&mut self, lhs: Var, rhs: Var) -> Result<Var, DiffError> {
        let bc = self.broadcast("max", lhs, rhs)?;
        self.binary(BinaryKind::Max, lhs, rhs, bc)
    }

    fn check_row(&self, op: &'static str, m: Var, row: Var) -> Result<(), DiffError> {
        let (a, b) = (self.shape(m), self.shape(row));
        if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch { op, detail: format!("{:?} with row {:?}", a, b) })
        }
    }

    /// Adds a `[n]` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, DiffError> {
        self.check_row("add_row", m, row)?;
        self.binary(BinaryKind::Add, m, row, Broadcast::RhsRow)
    }

    pub fn sub_row(&mut self, m: Var, row: Var) -> Result<Var, DiffError> {
        self.check_row("sub_row", m, row)?;
        self.binary(BinaryKind::Sub, m, row, Broadcast::RhsRow)
    }

    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var, DiffError> {
        self.check_row("mul_row", m, row)?;
        self.binary(BinaryKind::Mul, m, row, Broadcast::RhsRow)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| -v);
        self.push(Op::Neg(x), value, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| c * v);
        self.push(Op::Scale(x, c), value, &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::Offset(x), value, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Log(x), value, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value, &[x])
    }

    /// Clamps into `[lo, hi]`. The derivative is 1 strictly inside and 0 on
    /// or beyond either boundary.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(DiffError::InvalidArgument(format!("clip bounds [{lo}, {hi}]")));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clip { x, lo, hi }, value, &[x])
    }

    /// Elementwise `f` with derivative `df`, both evaluated at record time.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Var, DiffError> {
        let input = self.value(x);
        let value = input.map(&f);
        let deriv = input.map(&df);
        self.push(Op::Map { x, deriv }, value, &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = Tensor::new(vec![m, n], matmul(self.value(a).data(), self.value(b).data(), m, k, n))?;
        self.push(Op::MatMul(a, b), value, &[a, b])
    }

    /// Matrix-vector product `[m, k] x [k] -> [m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var, DiffError> {
        let k = match self.shape(x) {
            [k] => *k,
            s => {
                return Err(DiffError::ShapeMismatch { op: "matvec", detail: format!("vector {:?}", s) })
            }
        };
        let col = self.reshape(x, vec![k, 1])?;
        let out = self.matmul(a, col)?;
        let m = self.shape(out)[0];
        self.reshape(out, vec![m])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(DiffError::InvalidArgument("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(Op::Mean(x), value, &[x])
    }

    /// `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (m, n) = self.dims2("sum_rows", x)?;
        let data = self.value(x).data().chunks(n.max(1)).take(m).map(|r| r.iter().sum()).collect();
        self.push(Op::SumRows(x), Tensor::new(vec![m], data)?, &[x])
    }

    /// Row-wise log-softmax of an `[m, n]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let (_, n) = self.dims2("log_softmax", x)?;
        if n == 0 {
            return Err(DiffError::InvalidArgument("log_softmax over zero columns".into()));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::LogSoftmax(x), value, &[x])
    }

    /// Picks `x[i, idx[i]]` from an `[m, n]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let (m, n) = self.dims2("gather", x)?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(DiffError::ShapeMismatch {
                op: "gather",
                detail: format!("{} indices into [{m}, {n}]", idx.len()),
            });
        }
        let t = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect();
        self.push(Op::Gather { x, idx: idx.to_vec() }, Tensor::vector(data), &[x])
    }

    /// Contiguous window of the flattened tensor, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: Vec<usize>) -> Result<Var, DiffError> {
        let len: usize = shape.iter().product();
        let t = self.value(x);
        if offset + len > t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "slice",
                detail: format!("window {}..{} of {} values", offset, offset + len, t.numel()),
            });
        }
        let value = Tensor::new(shape, t.data()[offset..offset + len].to_vec())?;
        self.push(Op::Slice { x, offset }, value, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let value = t.reshaped(shape);
        self.push(Op::Reshape(x), value, &[x])
    }

    fn dims2(&self, op: &'static str, x: Var) -> Result<(usize, usize), DiffError> {
        match self.shape(x) {
            [m, n] => Ok((*m, *n)),
            s => Err(DiffError::ShapeMismatch { op, detail: format!("expected a matrix, got {:?}", s) }),
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(DiffError::NonScalarOutput { shape: out.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs, bc } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                let n = g.numel();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    let (ai, bi) = match bc {
                        Broadcast::Same => (i, i),
                        Broadcast::LhsScalar => (0, i),
                        Broadcast::RhsScalar => (i, 0),
                        Broadcast::RhsRow => (i, i % b.numel()),
                    };
                    let (x, y) = (a.data()[ai], b.data()[bi]);
                    let gi = g.data()[i];
                    let (da, db) = match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (y, x),
                        BinaryKind::Min => {
                            if x <= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        BinaryKind::Max => {
                            if x >= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    ga[i] = gi * da;
                    gb[i] = gi * db;
                }
                let reduce = |full: Vec<f64>, target: &Tensor, scalar: bool, row: bool| -> Tensor {
                    if scalar {
                        Tensor::new(target.shape().to_vec(), vec![full.iter().sum()]).unwrap()
                    } else if row {
                        let m = target.numel();
                        let mut acc = vec![0.0; m];
                        for (i, v) in full.iter().enumerate() {
                            acc[i % m] += v;
                        }
                        Tensor::new(target.shape().to_vec(), acc).unwrap()
                    } else {
                        Tensor::new(target.shape().to_vec(), full).unwrap()
                    }
                };
                let da = reduce(ga, a, *bc == Broadcast::LhsScalar, false);
                let db = reduce(gb, b, *bc == Broadcast::RhsScalar, *bc == Broadcast::RhsRow);
                self.accumulate(grads, *lhs, da);
                self.accumulate(grads, *rhs, db);
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| c * v)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Tanh(x) => {
                let d = zip(g, out, |gi, y| gi * (1.0 - y * y));
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip(g, out, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = zip(g, out, |gi, y| gi * y);
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = zip(g, self.value(*x), |gi, v| gi / v);
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = zip(g, self.value(*x), |gi, v| 2.0 * gi * v);
                self.accumulate(grads, *x, d);
            }
            Op::Clip { x, lo, hi } => {
                let d = zip(g, self.value(*x), |gi, v| if v > *lo && v < *hi { gi } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Map { x, deriv } => {
                let d = zip(g, deriv, |gi, dv| gi * dv);
                self.accumulate(grads, *x, d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * tb.data()[p * n + j];
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &g.data()[i * n..(i + 1) * n];
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(row) {
                                *d += aip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let gv = g.data()[0] / t.numel() as f64;
                self.accumulate(grads, *x, Tensor::filled(t.shape(), gv));
            }
            Op::SumRows(x) => {
                let t = self.value(*x);
                let n = t.shape()[1];
                let data = (0..t.numel()).map(|i| g.data()[i / n.max(1)]).collect();
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::LogSoftmax(x) => {
                let n = out.shape()[1];
                let mut data = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(n).zip(out.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    data.extend(grow.iter().zip(yrow).map(|(gi, yi)| gi - yi.exp() * total));
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data).unwrap());
            }
            Op::Gather { x, idx } => {
                let t = self.value(*x);
                let n = t.shape()[1];
                let mut data = vec![0.0; t.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    data[i * n + j] += g.data()[i];
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Slice { x, offset } => {
                let t = self.value(*x);
                let mut data = vec![0.0; t.numel()];
                data[*offset..*offset + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), data).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshaped(shape));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }
}
