//! Central-difference verification of tape gradients.

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat element index where the maximum occurred.
    pub worst: Option<(ParamId, usize)>,
    pub coords_checked: usize,
}

/// Compares `backward()` against central differences for every scalar in
/// `params`. `loss` must build the same deterministic scalar on any tape.
pub fn grad_check<F>(params: &ParamStore, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    Ok(grad_check_report(params, eps, None, loss)?.max_rel_error)
}

/// Like [`grad_check`], optionally visiting at most `stride_limit` evenly
/// spaced elements of each parameter tensor.
pub fn grad_check_report<F>(
    params: &ParamStore,
    eps: f64,
    stride_limit: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let step = match stride_limit {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        for e in (0..n).step_by(step) {
            let orig = params.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic.get(id).map_or(0.0, |g| g.data()[e]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((id, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap());
        let err = grad_check(&store, 1e-5, |t| {
            let w = t.param(ParamId(0));
            let sq = t.mul(w, w)?;
            let s = t.sum_all(sq);
            Ok(t.scale(s, 3.0))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[3], 1.0));
        let err = grad_check(&store, 1e-5, |t| Ok(t.constant(Tensor::scalar(7.0)))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let store = ParamStore::new();
        assert!(grad_check(&store, 1e-2, |t| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("x", random(&[5, 6], 1.0, &mut rng));
        store.insert("w", random(&[6, 7], 1.0, &mut rng));
        store.insert("b", random(&[7], 1.0, &mut rng));
        let targets = [0, 3, 6, 2, 1];
        let mask = [true, false, true, true, true];
        let weights = [1.0, 2.0, 0.5, 3.0, 1.5];
        let err = grad_check(&store, 1e-5, |t| {
            let x = t.param(ParamId(0));
            let w = t.param(ParamId(1));
            let b = t.param(ParamId(2));
            let h = t.matmul(x, w)?;
            let h = t.add_row(h, b)?;
            t.masked_cross_entropy(h, &targets, &mask, &weights)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_primitive_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.insert("x", random(&[6, 8], 1.0, &mut rng));
        let g = store.insert("g", random(&[8], 1.0, &mut rng));
        let b = store.insert("b", random(&[8], 0.5, &mut rng));
        let wq = store.insert("wq", random(&[8, 8], 0.7, &mut rng));
        let wk = store.insert("wk", random(&[8, 8], 0.7, &mut rng));
        let wv = store.insert("wv", random(&[8, 8], 0.7, &mut rng));
        let emb = store.insert("emb", random(&[5, 8], 1.0, &mut rng));
        let pk = random(&[3, 8], 1.0, &mut rng);
        let pv = random(&[3, 8], 1.0, &mut rng);
        let target = random(&[6, 8], 1.0, &mut rng);
        let prefix = crate::autodiff::ConstKv {
            keys: std::sync::Arc::new(pk),
            values: std::sync::Arc::new(pv),
        };
        let spans = vec![(0, 5), (0, 5), (1, 6), (3, 9), (3, 9), (0, 9)];
        let err = grad_check(&store, 1e-5, |t| {
            let [xs, ep, gp, bp, wqp, wkp, wvp] = [x, emb, g, b, wq, wk, wv].map(|id| t.param(id));
            let e = t.embedding(ep, &[0, 4, 4, 2, 1, 3])?;
            let h = t.add(xs, e)?;
            let h = t.layer_norm(h, gp, bp, 1e-5)?;
            let q = t.matmul(h, wqp)?;
            let k = t.matmul(h, wkp)?;
            let v = t.matmul(h, wvp)?;
            let q = t.rotary(q, &[0, 1, 2, 3, 4, 5], 4, 100.0)?;
            let k = t.rotary(k, &[0, 1, 2, 3, 4, 5], 4, 100.0)?;
            let a = t.attention(q, k, v, Some(prefix.clone()), spans.clone(), 2)?;
            let a = t.silu(a);
            let top = t.gather_rows(a, &[4, 5, 0])?;
            let rest = t.gather_rows(h, &[1, 2, 3])?;
            let m = t.merge_rows(6, vec![(top, vec![0, 2, 4]), (rest, vec![1, 3, 5])])?;
            t.masked_mse(m, &target, &[true, true, false, true, true, true])
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
