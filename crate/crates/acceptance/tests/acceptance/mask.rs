//! Gradient probe of the decoder attention pattern on n = 3, m = 3.

use empdial_autograd::{Tape, Tensor};
use empdial_core::corpus::{CLS, LST, SPK};
use empdial_core::model::Model;
use empdial_core::respg::{build_attention_mask, AttentionMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{tiny_config, toy_model};

const N: usize = 3;
const M: usize = 3;

/// `dep[i][j]`: output row `i` has a non-zero gradient with respect to an
/// additive offset on input row `j`.
fn measured(model: &Model<f64>, ids: &[usize]) -> Vec<Vec<bool>> {
    let d = model.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..ids.len())
        .map(|i| {
            let mut tape = Tape::new();
            let mut f = model.bind(&mut tape, |_| false, None);
            let x = f.embed(&mut tape, ids).unwrap();
            let offset = tape.leaf(Tensor::zeros(&[ids.len(), d]), true);
            let x = tape.add(x, offset).unwrap();
            let h = f.decoder_hidden(&mut tape, ids, x, N).unwrap();
            let row = tape.slice_rows(h, i, 1).unwrap();
            let probe: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
            let probe = tape.constant(Tensor::row(&probe));
            let s = tape.mul(row, probe).unwrap();
            let s = tape.sum(s);
            let grads = tape.backward(s).unwrap();
            let g = grads.get(offset).unwrap();
            (0..ids.len()).map(|j| g.row_slice(j).iter().any(|&v| v != 0.0)).collect()
        })
        .collect()
}

fn pattern(mask: &AttentionMask) -> Vec<Vec<bool>> {
    let s = mask.size();
    (0..s).map(|i| (0..s).map(|j| mask.allows(i, j)).collect()).collect()
}

/// Boolean product: reachable through one step of `a` after one of `b`.
fn compose(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let s = a.len();
    (0..s)
        .map(|i| (0..s).map(|j| (0..s).any(|k| a[i][k] && b[k][j])).collect())
        .collect()
}

fn render(p: &[Vec<bool>]) -> String {
    p.iter()
        .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn run() -> Result<String, String> {
    let mask = build_attention_mask(N, M);
    let full = pattern(&mask);
    let history = pattern(&mask.history_only());

    // Mask invariants themselves.
    for i in 0..=N + M {
        for j in 0..=N + M {
            let want = i == 0 || j <= N || j <= i;
            if full[i][j] != want {
                return Err(format!("mask[{i}][{j}] = {}", full[i][j]));
            }
        }
    }

    let mut notes = Vec::new();
    for layers in [1, 2] {
        let (model, _) = toy_model(tiny_config(8, layers), 21);
        let model: Model<f64> = model.cast();
        let w = model.vocab.id("my");
        let ids = [CLS, SPK, w, w, LST, w, w];
        let got = measured(&model, &ids);
        let expected = if layers == 1 { full.clone() } else { compose(&full, &history) };
        if got != expected {
            return Err(format!(
                "L={layers}: gradient pattern {} expected {}",
                render(&got),
                render(&expected)
            ));
        }
        for i in N + 1..=N + M {
            if (i + 1..=N + M).any(|j| got[i][j]) {
                return Err(format!("L={layers}: response row {i} depends on a later position"));
            }
        }
        if !got[0].iter().all(|&b| b) {
            return Err(format!("L={layers}: [CLS] row does not reach every position"));
        }
        notes.push(format!("L={layers} {}", render(&got)));
    }
    Ok(notes.join("; "))
}
