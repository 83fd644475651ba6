use super::{GraphError, Scalar, Tensor};

/// A trainable tensor with its gradient slot and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            grad: None,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot. Ignored while frozen.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<(), GraphError> {
        if g.len() != self.value.len() {
            return Err(GraphError::Shape {
                op: "accumulate_grad",
                detail: format!("{}: gradient of {} values for {}", self.name, g.len(), self.value.len()),
            });
        }
        if self.frozen {
            return Ok(());
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.grad = None;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates.
    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    /// Drops the gradient and optimizer state, keeping the value.
    pub fn reset_optimizer(&mut self) {
        self.grad = None;
        self.m.fill(T::zero());
        self.v.fill(T::zero());
        self.step = 0;
        self.frozen = false;
    }

    pub fn set_adam_state(&mut self, m: Vec<T>, v: Vec<T>, step: u64) -> Result<(), GraphError> {
        if m.len() != self.value.len() || v.len() != self.value.len() {
            return Err(GraphError::Shape { op: "adam_state", detail: self.name.clone() });
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-6, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update on every unfrozen parameter, then clears
/// gradients. An unfrozen parameter without a gradient is an error and
/// leaves every parameter untouched.
pub fn adam_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    cfg: &AdamConfig,
) -> Result<(), GraphError> {
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().filter(|p| !p.frozen).collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(GraphError::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let g = p.grad.take().expect("checked above");
        let value = p.value.data_mut();
        for i in 0..g.len() {
            let gi = g[i].f64();
            let m = cfg.beta1 * p.m[i].f64() + (1.0 - cfg.beta1) * gi;
            let v = cfg.beta2 * p.v[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            p.m[i] = T::of(m);
            p.v[i] = T::of(v);
            let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            value[i] = T::of(value[i].f64() - update);
        }
    }
    Ok(())
}
