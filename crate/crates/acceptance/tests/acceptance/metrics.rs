//! Evaluation metrics against brute-force reimplementations.

use empdial_core::metrics::{
    accuracy, average_precision, bleu4, distinct_n, hamming_loss, micro_f1, weighted_f1, BLEU_EPSILON,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

fn grams(tokens: &[u8], n: usize) -> Vec<Vec<u8>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<u8>], g: &[u8]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn oracle_bleu(cands: &[Vec<u8>], refs: &[Vec<u8>]) -> f64 {
    let mut p = [0.0f64; 4];
    for n in 1..=4 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, n);
            let rg = grams(r, n);
            let mut seen: Vec<Vec<u8>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                hit += occurrences(&cg, g).min(occurrences(&rg, g));
            }
            total += cg.len();
        }
        p[n - 1] = if hit == 0 {
            BLEU_EPSILON / total.max(1) as f64
        } else {
            hit as f64 / total as f64
        };
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (p[0] * p[1] * p[2] * p[3]).powf(0.25)
}

fn oracle_distinct(responses: &[Vec<u8>], n: usize) -> f64 {
    let all: Vec<Vec<u8>> = responses.iter().flat_map(|r| grams(r, n)).collect();
    let mut unique: Vec<&Vec<u8>> = Vec::new();
    for g in &all {
        if !unique.contains(&g) {
            unique.push(g);
        }
    }
    if all.is_empty() {
        0.0
    } else {
        unique.len() as f64 / all.len() as f64
    }
}

fn oracle_weighted_f1(gold: &[usize], pred: &[usize], classes: usize) -> f64 {
    let n = gold.len() as f64;
    let mut score = 0.0;
    for c in 0..classes {
        let support = gold.iter().filter(|&&g| g == c).count();
        let predicted = pred.iter().filter(|&&p| p == c).count();
        let tp = gold.iter().zip(pred).filter(|(&g, &p)| g == c && p == c).count();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        score += support as f64 / n * f1;
    }
    score
}

fn oracle_micro_f1(gold: &[Vec<bool>], pred: &[Vec<bool>]) -> f64 {
    let (mut tp, mut gp, mut pp) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        for j in 0..g.len() {
            tp += (g[j] && p[j]) as usize;
            gp += g[j] as usize;
            pp += p[j] as usize;
        }
    }
    if gp == 0 && pp == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / pp as f64;
    let recall = tp as f64 / gp as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Sort labels by score, walk down the ranking and average precision at
/// each relevant label. Scores must be distinct.
fn oracle_ap(gold: &[Vec<bool>], scores: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (g, s) in gold.iter().zip(scores) {
        let relevant = g.iter().filter(|&&b| b).count();
        if relevant == 0 || relevant == g.len() {
            total += 1.0;
            continue;
        }
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
        let (mut hits, mut sum) = (0, 0.0);
        for (pos, &l) in order.iter().enumerate() {
            if g[l] {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
            }
        }
        total += sum / relevant as f64;
    }
    total / gold.len() as f64
}

fn close(name: &str, got: f64, want: f64) -> Result<(), String> {
    if (got - want).abs() > TOL {
        Err(format!("{name}: {got} vs oracle {want}"))
    } else {
        Ok(())
    }
}

fn toks(s: &str) -> Vec<u8> {
    s.split_whitespace().map(|w| w.as_bytes()[0]).collect()
}

fn hand_examples() -> Result<(), String> {
    let cat = vec![toks("the cat sat down")];
    close("identical", bleu4(&cat, &cat).unwrap(), 1.0)?;
    // "the the the the" against "the cat sat down": unigram precision 1/4.
    let the = vec![vec![b't'; 4]];
    let refs = vec![vec![b't', b'c', b's', b'd']];
    let expected = (0.25f64 * (BLEU_EPSILON / 3.0) * (BLEU_EPSILON / 2.0) * BLEU_EPSILON).powf(0.25);
    close("clipped unigrams", bleu4(&the, &refs).unwrap(), expected)?;
    close("clipped unigrams oracle", oracle_bleu(&the, &refs), expected)?;
    // Half-length candidate with perfect precision.
    let long = vec![(0u8..16).collect::<Vec<_>>()];
    let half = vec![(0u8..8).collect::<Vec<_>>()];
    close("brevity penalty", bleu4(&half, &long).unwrap(), (-1.0f64).exp())?;

    close("dist aab", distinct_n(&[vec![1u8, 1, 2]], 1), 2.0 / 3.0)?;
    close("dist abab", distinct_n(&[vec![1u8, 2, 1, 2]], 2), 2.0 / 3.0)?;
    close("dist distinct", distinct_n(&[vec![1u8, 2, 3]], 1), 1.0)?;

    let g = vec![vec![true, false, true]];
    let p = vec![vec![true, true, true]];
    close("hamming", hamming_loss(&g, &p).unwrap(), 1.0 / 3.0)?;
    close("acc", accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap(), 2.0 / 3.0)?;
    close("wf1", weighted_f1(&[0, 0, 1], &[0, 1, 1], 2).unwrap(), 2.0 / 3.0)?;
    close("perfect ap", average_precision(&g, &[vec![0.9, 0.1, 0.8]]).unwrap(), 1.0)?;
    close("perfect mif1", micro_f1(&g, &g).unwrap(), 1.0)?;
    Ok(())
}

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| rng.random_range(0..5u8)).collect()
}

pub fn run() -> Result<String, String> {
    hand_examples()?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..50 {
        let size = rng.random_range(1..=6);
        let cands: Vec<Vec<u8>> = (0..size).map(|_| random_tokens(&mut rng, 8)).collect();
        let refs: Vec<Vec<u8>> = (0..size).map(|_| random_tokens(&mut rng, 8)).collect();
        let tag = |m: &str| format!("case {case} {m}");
        close(&tag("bleu4"), bleu4(&cands, &refs).unwrap(), oracle_bleu(&cands, &refs))?;
        for n in 1..=3 {
            close(&tag("distinct"), distinct_n(&cands, n), oracle_distinct(&cands, n))?;
        }

        let classes = rng.random_range(2..=7);
        let k = rng.random_range(1..=12);
        let gold: Vec<usize> = (0..k).map(|_| rng.random_range(0..classes)).collect();
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| if rng.random_bool(0.5) { g } else { rng.random_range(0..classes) })
            .collect();
        let hits = gold.iter().zip(&pred).filter(|(a, b)| a == b).count();
        close(&tag("accuracy"), accuracy(&gold, &pred).unwrap(), hits as f64 / k as f64)?;
        close(
            &tag("weighted f1"),
            weighted_f1(&gold, &pred, classes).unwrap(),
            oracle_weighted_f1(&gold, &pred, classes),
        )?;

        let labels = rng.random_range(2..=9);
        let bits = |rng: &mut ChaCha8Rng| -> Vec<Vec<bool>> {
            (0..k).map(|_| (0..labels).map(|_| rng.random_bool(0.35)).collect()).collect()
        };
        let g = bits(&mut rng);
        let p = bits(&mut rng);
        let scores: Vec<Vec<f64>> = (0..k).map(|_| (0..labels).map(|_| rng.random::<f64>()).collect()).collect();
        let wrong = g.iter().zip(&p).flat_map(|(a, b)| a.iter().zip(b)).filter(|(x, y)| x != y).count();
        close(&tag("hamming"), hamming_loss(&g, &p).unwrap(), wrong as f64 / (k * labels) as f64)?;
        close(&tag("micro f1"), micro_f1(&g, &p).unwrap(), oracle_micro_f1(&g, &p))?;
        close(&tag("average precision"), average_precision(&g, &scores).unwrap(), oracle_ap(&g, &scores))?;
    }
    Ok("hand examples and 50 random cases within 1e-9".into())
}
