use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Floor added to the finite-difference magnitude in the relative error.
pub const GRAD_CHECK_EPS: f64 = 1e-8;

/// A scalar-valued function recorded on a tape, evaluable at any precision.
pub trait TapeFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

fn eval_value<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<T>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Autodiff(format!(
            "grad_check: function must be scalar-valued, got shape {:?}",
            v.shape()
        )));
    }
    let y = v.item().to_f64_lossy();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(x) = {y}")));
    }
    Ok(y)
}

/// Autodiff gradients of `f` with respect to every input.
pub fn autodiff_gradients<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    let y = g.value(out).item();
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(x) = {y}")));
    }
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect())
}

/// Central differences of `f` at `inputs` with step `h`, evaluated in precision `T`.
pub fn finite_difference_gradients<T: Scalar, F: TapeFn>(
    f: &F,
    inputs: &[Tensor<T>],
    h: f64,
) -> Result<Vec<Tensor<T>>> {
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + T::lit(h);
            let plus = eval_value(f, &work)?;
            work[i].data_mut()[j] = orig - T::lit(h);
            let minus = eval_value(f, &work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = T::lit((plus - minus) / (2.0 * h));
        }
        out.push(grad);
    }
    Ok(out)
}

fn max_relative_error<A: Scalar, B: Scalar>(auto: &[Tensor<A>], numeric: &[Tensor<B>]) -> f64 {
    auto.iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| {
            let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
            (a - n).abs() / (n.abs() + GRAD_CHECK_EPS)
        })
        .fold(0.0, f64::max)
}

/// Max over all input elements of `|autodiff − central difference| / (|central difference| + ε)`.
pub fn grad_check<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<T>], h: f64) -> Result<f64> {
    let auto = autodiff_gradients(f, inputs)?;
    let numeric = finite_difference_gradients(f, inputs, h)?;
    Ok(max_relative_error(&auto, &numeric))
}

/// Checks `T`-precision autodiff against central differences taken in 64-bit.
///
/// Single-precision finite differences are dominated by rounding at useful
/// step sizes, so the oracle runs on the same function evaluated in `f64`.
pub fn grad_check_vs_f64<T: Scalar, F: TapeFn>(f: &F, inputs: &[Tensor<T>], h: f64) -> Result<f64> {
    let auto = autodiff_gradients(f, inputs)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let numeric = finite_difference_gradients(f, &wide, h)?;
    Ok(max_relative_error(&auto, &numeric))
}
