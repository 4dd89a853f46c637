use rand::Rng;

use super::graph::{Grads, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter tensors with matching gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Graph handles for the parameters of one [`ParamSet`], in set order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
    }

    /// Append a dense layer `name.w` of shape `[out, inp]` (symmetric uniform
    /// with bound `sqrt(6/(inp+out))`) and `name.b` of zeros.
    pub fn push_dense(&mut self, name: &str, inp: usize, out: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let w: Vec<f64> = (0..inp * out).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(format!("{name}.w"), Tensor::new(vec![out, inp], w).expect("dense shape"));
        self.push(format!("{name}.b"), Tensor::zeros(&[out]));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
            .value
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy every parameter onto the graph as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|p| g.input(p.value.clone())).collect();
        let names = self.params.iter().map(|p| p.name.clone()).collect();
        Bound { vars, names }
    }

    /// Add the graph gradients of the bound leaves into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Grads) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// Flattened copy of all gradients, in set order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for p in &mut self.params {
            if index < p.value.len() {
                return &mut p.value.data_mut()[index];
            }
            index -= p.value.len();
        }
        panic!("parameter index out of range")
    }
}

/// One plain gradient-descent update, `p ← p − α·∇p`, followed by zeroing
/// the accumulators. Leaves the parameters untouched if any gradient is not
/// finite.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient for `{}`", bad.name)));
    }
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    params.zero_grad();
    Ok(())
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must evaluate the scalar loss at the current parameter values and
/// accumulate its analytic gradient into the sets. Returns the maximum over
/// all scalar parameters of `|a − n| / max(1e-12, |a| + |n|)`.
pub fn grad_check<F>(sets: &mut [ParamSet], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut [ParamSet]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    for s in sets.iter_mut() {
        s.zero_grad();
    }
    f(sets)?;
    let analytic: Vec<Vec<f64>> = sets.iter().map(ParamSet::flat_grads).collect();

    let mut worst: f64 = 0.0;
    for (si, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = *sets[si].scalar_mut(k);
            *sets[si].scalar_mut(k) = orig + eps;
            let plus = f(sets)?;
            *sets[si].scalar_mut(k) = orig - eps;
            let minus = f(sets)?;
            *sets[si].scalar_mut(k) = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / f64::max(1e-12, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    for s in sets.iter_mut() {
        s.zero_grad();
    }
    Ok(worst)
}
