//! Central finite-difference gradient checking.

use super::{Graph, NodeId, ParamStore};

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences, for at most `per_param` evenly strided entries of
/// every parameter that `only` accepts. The store is restored afterwards.
pub fn check<F, P>(store: &mut ParamStore, f: F, only: P, per_param: usize) -> CheckOutcome
where
    F: Fn(&mut Graph<'_>) -> NodeId,
    P: Fn(&str) -> bool,
{
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut outcome = CheckOutcome {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !only(&name) {
            continue;
        }
        let n = store.get(id).len();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + EPS;
            let plus = eval(store);
            store.get_mut(id).data_mut()[k] = orig - EPS;
            let minus = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            let analytic = grads.get(id).map(|g| g.data()[k]).unwrap_or(0.0);
            let e = relative_error(analytic, numeric);
            outcome.entries += 1;
            if e > outcome.max_rel_error || outcome.worst.is_empty() {
                outcome.max_rel_error = e;
                outcome.worst = format!("{name}[{k}]");
            }
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{AttentionSpec, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn primitive_ops_pass() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            let x = s.add("x", Tensor::randn(4, 6, 1.0, &mut rng), true);
            let w = s.add("w", Tensor::randn(6, 6, 0.5, &mut rng), true);
            let gam = s.add("gamma", Tensor::randn(1, 6, 1.0, &mut rng), false);
            let bet = s.add("beta", Tensor::randn(1, 6, 1.0, &mut rng), false);
            let proj = Tensor::randn(4, 6, 1.0, &mut rng);
            let mask = [true, true, false, true];
            let out = check(
                &mut s,
                |g| {
                    let (xn, wn) = (g.param(x), g.param(w));
                    let (gn, bn) = (g.param(gam), g.param(bet));
                    let h = g.layer_norm(xn, gn, bn);
                    let q = g.matmul(h, wn);
                    let a = g.attention(
                        q,
                        h,
                        xn,
                        AttentionSpec {
                            heads: 2,
                            key_mask: Some(&mask),
                            causal: true,
                        },
                    );
                    let a = g.gelu(a);
                    let t = g.tanh(a);
                    let r = g.add(t, xn);
                    g.weighted_sum(r, proj.clone())
                },
                |_| true,
                usize::MAX,
            );
            assert!(out.max_rel_error < TOLERANCE, "{out:?}");
            assert_eq!(out.entries, 24 + 36 + 12);
        }
    }
}
