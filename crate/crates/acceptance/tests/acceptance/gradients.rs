//! Finite-difference check of the full emotion-state loss and the response
//! NLL through the whole model in f64.

use std::time::Instant;

use empdial_autograd::{Tape, Tensor, Var};
use empdial_core::corpus::Example;
use empdial_core::emodm::emodm_loss;
use empdial_core::model::{Forward, Model};
use empdial_core::respg::{respg_loss, shift_right, StateTriple};
use empdial_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{tiny_config, toy_model};

const STEP: f64 = 1e-5;

fn evaluate<F>(model: &Model<f64>, loss: &F, grad: bool) -> (f64, Vec<Tensor<f64>>)
where
    F: for<'m> Fn(&mut Forward<'m, f64>, &mut Tape<'m, f64>) -> Result<Var>,
{
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let mut f = model.bind(&mut tape, |_| grad, None);
    let l = loss(&mut f, &mut tape).unwrap();
    let value = tape.value(l).item();
    if !grad {
        return (value, Vec::new());
    }
    let vars = f.vars.clone();
    let grads = tape.backward(l).unwrap();
    let per_param = vars
        .iter()
        .zip(model.params.iter())
        .map(|(&v, (_, _, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, per_param)
}

/// Largest relative error over every parameter coordinate, and the number
/// of coordinates probed.
fn max_relative_error<F>(model: &mut Model<f64>, loss: F) -> (f64, usize)
where
    F: for<'m> Fn(&mut Forward<'m, f64>, &mut Tape<'m, f64>) -> Result<Var>,
{
    let (_, analytic) = evaluate(model, &loss, true);
    let ids: Vec<_> = model.params.ids().collect();
    let mut worst = 0.0f64;
    let mut probed = 0;
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = evaluate(model, &loss, false).0;
            model.params.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = evaluate(model, &loss, false).0;
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(err);
            probed += 1;
        }
    }
    (worst, probed)
}

fn jitter(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for x in model.params.get_mut(id).data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
}

pub fn run() -> std::result::Result<String, String> {
    let start = Instant::now();
    let (model, examples) = toy_model(tiny_config(8, 1), 3);
    let mut model: Model<f64> = model.cast();
    jitter(&mut model, 4);
    let ex: Example = examples[1].clone();
    let mut report = Vec::new();
    let mut worst = 0.0f64;

    for soft in [false, true] {
        model.config.soft_prior_lookup = soft;
        let ctx = ex.context_ids.clone();
        let gold = ex.gold.clone();
        let (err, n) = max_relative_error(&mut model, |f, tape| {
            let out = f.emodm(tape, &ctx, None)?;
            emodm_loss(tape, &out, &gold, 0.6, 0.5)
        });
        report.push(format!("emodm(soft={soft}) {err:.2e} over {n}"));
        worst = worst.max(err);
    }

    let ctx = ex.context_ids.clone();
    let target = ex.target_ids.clone();
    let state = StateTriple::from(&ex.gold);
    let (err, n) = max_relative_error(&mut model, |f, tape| {
        let out = f.respg(tape, &ctx, &shift_right(&target), &state)?;
        respg_loss(tape, out.logits, &target)
    });
    report.push(format!("respg {err:.2e} over {n}"));
    worst = worst.max(err);

    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max rel err {worst:.2e} ({}), {secs:.1}s", report.join(", "));
    if worst < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
