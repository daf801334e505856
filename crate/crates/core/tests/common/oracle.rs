//! Brute-force reference for the masked reverse chain on tiny instances.

use std::collections::HashMap;

use mixdiff_core::mdm::{reverse_step, LinearSchedule};
use mixdiff_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const M: usize = 3;
pub const V: usize = 3;

/// Hand-set logits for a 2-token sequence over 3 symbols; the second
/// position's preferences depend on the first position's current value.
pub fn toy_logits(state: &[usize]) -> Tensor {
    let first = [0.5, -0.3, 1.1];
    let second = match state[0] {
        0 => [2.0, 0.0, -1.0],
        1 => [-0.5, 1.5, 0.2],
        2 => [0.0, 0.0, 2.5],
        _ => [0.3, 0.3, 0.3],
    };
    Tensor::new(vec![2, V], first.iter().chain(&second).copied().collect()).unwrap()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Exact distribution after one reverse step, by enumerating each position's
/// outcomes.
pub fn enumerate_step(
    dist: &HashMap<Vec<usize>, f64>,
    t: f64,
    s: f64,
    logits: &dyn Fn(&[usize]) -> Tensor,
) -> HashMap<Vec<usize>, f64> {
    let stay = (1.0 - s) / (1.0 - t);
    let mut out = HashMap::new();
    for (state, &p) in dist {
        let lg = logits(state);
        let options: Vec<Vec<(usize, f64)>> = state
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if x != M {
                    return vec![(x, 1.0)];
                }
                let probs = softmax(lg.row(i));
                let mut o = vec![(M, stay)];
                o.extend(probs.iter().enumerate().map(|(k, &q)| (k, (1.0 - stay) * q)));
                o
            })
            .collect();
        for &(a, pa) in &options[0] {
            for &(b, pb) in &options[1] {
                *out.entry(vec![a, b]).or_insert(0.0) += p * pa * pb;
            }
        }
    }
    out
}

pub fn total_variation(a: &HashMap<Vec<usize>, f64>, b: &HashMap<Vec<usize>, f64>) -> f64 {
    let mut keys: Vec<&Vec<usize>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

pub fn empirical(
    grid: &[f64],
    start: Vec<usize>,
    runs: usize,
    seed: u64,
    logits: &dyn Fn(&[usize]) -> Tensor,
) -> HashMap<Vec<usize>, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: HashMap<Vec<usize>, f64> = HashMap::new();
    for _ in 0..runs {
        let mut x = start.clone();
        for w in grid.windows(2) {
            x = reverse_step(&x, w[0], w[1], &logits(&x), &LinearSchedule, M, &mut rng).unwrap();
        }
        *counts.entry(x).or_insert(0.0) += 1.0 / runs as f64;
    }
    counts
}

