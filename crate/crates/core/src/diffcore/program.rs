use super::{DiffError, Tape, Tensor, Var};

type Body = dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + Send + Sync;

/// A reusable computation: a declared input signature plus a closure that
/// records the computation onto a fresh [`Tape`] each time it is evaluated.
pub struct Program {
    input_shapes: Vec<Vec<usize>>,
    body: Box<Body>,
}

impl std::fmt::Debug for Program {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Program").field("input_shapes", &self.input_shapes).finish()
    }
}

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Per input tensor, the worst relative error over its coordinates.
    pub per_param: Vec<f64>,
    /// `(input index, flat coordinate)` of the worst coordinate overall.
    pub worst: Option<(usize, usize)>,
}

impl Program {
    pub fn new(
        input_shapes: Vec<Vec<usize>>,
        body: impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + Send + Sync + 'static,
    ) -> Self {
        Self { input_shapes, body: Box::new(body) }
    }

    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    fn record(&self, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var), DiffError> {
        if inputs.len() != self.input_shapes.len() {
            return Err(DiffError::ShapeMismatch {
                op: "forward",
                detail: format!("expected {} inputs, got {}", self.input_shapes.len(), inputs.len()),
            });
        }
        for (i, (t, s)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(DiffError::ShapeMismatch {
                    op: "forward",
                    detail: format!("input {i}: expected {:?}, got {:?}", s, t.shape()),
                });
            }
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = (self.body)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }

    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, DiffError> {
        let (tape, _, out) = self.record(inputs)?;
        Ok(tape.value(out).clone())
    }

    /// Value and gradient with respect to every input.
    pub fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>), DiffError> {
        let (tape, vars, out) = self.record(inputs)?;
        let grads = tape.backward(out)?;
        let value = tape.value(out).data()[0];
        Ok((value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect()))
    }

    pub fn grad(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>, DiffError> {
        Ok(self.value_and_grad(inputs)?.1)
    }

    fn scalar_at(&self, inputs: &[Tensor]) -> Result<f64, DiffError> {
        let out = self.forward(inputs)?;
        match out.item() {
            Some(v) => Ok(v),
            None => Err(DiffError::NonScalarOutput { shape: out.shape().to_vec() }),
        }
    }

    /// Compares every gradient coordinate with a central difference of
    /// half-width `step`.
    ///
    /// The relative error of a coordinate is `|ad - fd| / max(|ad|, |fd|, 1)`;
    /// the unit floor keeps near-zero gradients from reporting noise.
    pub fn finite_difference_check(
        &self,
        inputs: &[Tensor],
        step: f64,
        tolerance: f64,
    ) -> Result<FdReport, DiffError> {
        if !(step > 0.0) {
            return Err(DiffError::InvalidArgument(format!("finite-difference step {step}")));
        }
        let analytic = self.grad(inputs)?;
        let mut probe: Vec<Tensor> = inputs.to_vec();
        let mut per_param = Vec::with_capacity(inputs.len());
        let mut worst = None;
        let mut max_rel_error = 0.0f64;
        for (pi, g) in analytic.iter().enumerate() {
            let mut param_worst = 0.0f64;
            for j in 0..g.numel() {
                let orig = probe[pi].data()[j];
                probe[pi].data_mut()[j] = orig + step;
                let plus = self.scalar_at(&probe)?;
                probe[pi].data_mut()[j] = orig - step;
                let minus = self.scalar_at(&probe)?;
                probe[pi].data_mut()[j] = orig;
                let fd = (plus - minus) / (2.0 * step);
                let ad = g.data()[j];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                param_worst = param_worst.max(rel);
                if rel > max_rel_error || worst.is_none() {
                    max_rel_error = max_rel_error.max(rel);
                    worst = Some((pi, j));
                }
            }
            per_param.push(param_worst);
        }
        Ok(FdReport { passed: max_rel_error <= tolerance, max_rel_error, per_param, worst })
    }
}
