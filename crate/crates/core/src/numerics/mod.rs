//! Tensors, reverse-mode gradients, finite-difference checking and Adam.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::ParameterVector;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{column_means, matmul, mean_center, standardize_columns, transpose, Tensor, DEFAULT_STD_EPS};

use crate::error::{shape_err, Error, Result};

/// Tape handles for every entry of a [`ParameterVector`], in the same order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    /// Records `params` on `tape` as trainable leaves.
    pub fn trainable(tape: &mut Tape, params: &ParameterVector) -> Self {
        let vars = params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        Self { vars }
    }

    /// Records `params` on `tape` as constants (no gradients).
    pub fn frozen(tape: &mut Tape, params: &ParameterVector) -> Self {
        let vars = params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Collects gradients for every parameter, substituting zeros for parameters
/// the loss does not depend on.
pub fn collect_grads(grads: &mut Gradients, vars: &ParamVars, params: &ParameterVector) -> Result<ParameterVector> {
    let mut out = ParameterVector::new();
    for ((name, var), (_, t)) in vars.iter().zip(params.entries()) {
        let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(t.shape()));
        out.push(name, g)?;
    }
    Ok(out)
}

/// Evaluates a scalar loss and its gradient with respect to every parameter.
pub fn value_and_grad<F>(params: &ParameterVector, loss_fn: F) -> Result<(f64, ParameterVector)>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::trainable(&mut tape, params);
    let loss = loss_fn(&mut tape, &vars)?;
    let value = scalar_value(&tape, loss)?;
    let mut grads = tape.backward(loss)?;
    Ok((value, collect_grads(&mut grads, &vars, params)?))
}

/// Forward-only evaluation of the same loss closure used by [`value_and_grad`].
pub fn eval_loss<F>(params: &ParameterVector, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ParamVars::frozen(&mut tape, params);
    let loss = loss_fn(&mut tape, &vars)?;
    scalar_value(&tape, loss)
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return shape_err(format!("loss must be scalar, got shape {:?}", t.shape()));
    }
    Ok(t.data()[0])
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_diff_grad<F>(params: &ParameterVector, h: f64, loss_fn: F) -> Result<ParameterVector>
where
    F: Fn(&ParameterVector) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    for i in 0..params.total_len() {
        let orig = params.get_flat(i).expect("index in range");
        probe.set_flat(i, orig + h)?;
        let up = loss_fn(&probe)?;
        probe.set_flat(i, orig - h)?;
        let down = loss_fn(&probe)?;
        probe.set_flat(i, orig)?;
        grad.set_flat(i, (up - down) / (2.0 * h))?;
    }
    Ok(grad)
}

/// Largest relative error between two gradients, `|a−b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is ~0 from dominating.
pub fn max_relative_error(a: &ParameterVector, b: &ParameterVector, floor: f64) -> Result<f64> {
    a.expect_same_layout(b)?;
    Ok(a.values()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParameterVector {
        ParameterVector::from_entries(vec![("theta".into(), Tensor::scalar(v))]).unwrap()
    }

    #[test]
    fn square_value_and_grad() {
        let p = scalar_params(3.0);
        let (v, g) = value_and_grad(&p, |t, vars| {
            let x = vars.get("theta")?;
            let s = t.square(x)?;
            t.sum(s)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.flat(), vec![6.0]);
    }

    #[test]
    fn constant_loss_has_zero_grad() {
        let p = scalar_params(3.0);
        let (v, g) = value_and_grad(&p, |t, _| Ok(t.constant(Tensor::scalar(2.5)))).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(g.flat(), vec![0.0]);
        let fd = finite_diff_grad(&p, 1e-3, |_| Ok(2.5)).unwrap();
        assert_eq!(fd.flat(), vec![0.0]);
    }

    #[test]
    fn central_difference_examples() {
        let fd = finite_diff_grad(&scalar_params(3.0), 1e-3, |p| Ok(p.flat()[0].powi(2))).unwrap();
        assert!((fd.flat()[0] - 6.0).abs() < 1e-6);
        // central difference of x³ is 3x² + h²
        let fd = finite_diff_grad(&scalar_params(2.0), 1e-3, |p| Ok(p.flat()[0].powi(3))).unwrap();
        assert!((fd.flat()[0] - 12.000001).abs() < 1e-8);
        assert!(finite_diff_grad(&scalar_params(2.0), 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let p = scalar_params(1.0);
        let r = value_and_grad(&p, |t, _| Ok(t.constant(Tensor::zeros(&[2]))));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        // f = x·x + 3x through two paths
        let p = scalar_params(2.0);
        let (_, g) = value_and_grad(&p, |t, vars| {
            let x = vars.get("theta")?;
            let sq = t.mul(x, x)?;
            let lin = t.scale(x, 3.0)?;
            let s = t.add(sq, lin)?;
            t.sum(s)
        })
        .unwrap();
        assert_eq!(g.flat(), vec![7.0]);
    }
}
