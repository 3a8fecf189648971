//! Central-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How many coordinates of each parameter to probe. `None` probes all.
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: None,
            seed: 0,
        }
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(v));
    }
    Ok(v)
}

/// Largest `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over the
/// probed coordinates. `f` builds a scalar from the parameter vars.
pub fn fd_check<F>(f: F, params: &[Tensor<f64>], options: FdOptions) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite(v));
        }
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|&v| grads.get(v).expect("leaf requires grad").clone())
            .collect()
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = params.to_vec();
    let h = options.step;
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        let n = params[k].len();
        let coords: Vec<usize> = match options.coords_per_param {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
