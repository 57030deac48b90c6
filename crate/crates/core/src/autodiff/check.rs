use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns max over coordinates of |autodiff − fd| / (|fd| + 1e-8).
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_gradient_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// [`check_gradient`] over several inputs at once.
pub fn check_gradient_multi<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        f(&tape, &vars)?.backward()?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = analytic[k].data()[i];
            worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-8));
        }
    }
    Ok(worst)
}
