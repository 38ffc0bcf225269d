//! Finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the computation from scratch for every perturbed
//! evaluation, so it stays independent of the backward pass it is judging.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-parameter maximum relative error between analytic and central-difference
/// gradients, plus the overall maximum.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor so that zero-gradient parameters compare cleanly.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Checks the analytic gradient of a scalar function against central
/// differences `(f(p+h) - f(p-h)) / 2h`, parameter element by element.
///
/// `build` must construct the loss from the supplied leaves alone and be
/// deterministic; it is invoked once per perturbed evaluation.
pub fn finite_diff_check<F>(
    names: &[&str],
    params: &[Tensor],
    h: f64,
    mut build: F,
) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    if names.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} names for {} parameters",
            names.len(),
            params.len()
        )));
    }

    let eval = |build: &mut F, params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.input(p)).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = build(&mut g, &vars)?;
    let base = g.scalar_value(loss)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {base}")));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for ei in 0..params[pi].numel() {
            let original = work[pi].data()[ei];
            work[pi].data_mut()[ei] = original + h;
            let plus = eval(&mut build, &work)?;
            work[pi].data_mut()[ei] = original - h;
            let minus = eval(&mut build, &work)?;
            work[pi].data_mut()[ei] = original;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi][ei], numeric));
        }
        overall = overall.max(worst);
        entries.push((name.to_string(), worst));
    }

    Ok(GradReport { entries, max_rel_err: overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_tensor(r: &mut SplitMix64, dims: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.next_range(lo, hi)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        // f(x) = x^2 at x = 3: central differences are exact for quadratics.
        let x = Tensor::scalar(3.0);
        let report = finite_diff_check(&["x"], &[x], 1e-3, |g, vs| {
            let sq = g.mul(vs[0], vs[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-10, "{}", report.max_rel_err);
    }

    #[test]
    fn constant_function_all_zero() {
        let x = Tensor::from_vec(vec![3], vec![0.4, -1.0, 2.0]).unwrap();
        let c = Tensor::scalar(5.0);
        let report = finite_diff_check(&["x"], &[x], 1e-5, move |g, _| {
            let k = g.input(&c);
            Ok(g.sum(k))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn matmul_product_grads_match() {
        // loss = sum(A . B)
        let mut r = SplitMix64::new(5);
        let a = random_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let b = random_tensor(&mut r, vec![4, 2], -1.0, 1.0);
        let report = finite_diff_check(&["a", "b"], &[a, b], 1e-5, |g, vs| {
            let c = g.matmul(vs[0], vs[1])?;
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let x = Tensor::scalar(0.0);
        let err = finite_diff_check(&["x"], &[x], 1e-5, |g, vs| {
            // 1/x at 0 -> inf
            let one = g.add_const(vs[0], 1.0);
            let num = g.add_const(vs[0], 0.0);
            let q = g.div(one, num)?;
            Ok(g.sum(q))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    /// Every op the graph exposes, each through its own little objective.
    #[test]
    fn every_op_passes_gradcheck() {
        let mut r = SplitMix64::new(77);
        let tol = 1e-4;
        let h = 1e-5;

        let x = random_tensor(&mut r, vec![3, 4], 0.2, 1.5);
        let y = random_tensor(&mut r, vec![3, 4], 0.3, 1.7);
        let bias = random_tensor(&mut r, vec![4], -0.5, 0.5);
        let gamma = random_tensor(&mut r, vec![4], 0.5, 1.5);
        let beta = random_tensor(&mut r, vec![4], -0.5, 0.5);
        let m1 = random_tensor(&mut r, vec![3, 4], -1.0, 1.0);
        let m2 = random_tensor(&mut r, vec![4, 5], -1.0, 1.0);

        type BuildFn = Box<dyn FnMut(&mut Graph, &[Var]) -> crate::error::Result<Var>>;
        let cases: Vec<(&str, Vec<Tensor>, BuildFn)> = vec![
            ("add", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.add(vs[0], vs[1])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("sub", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.sub(vs[0], vs[1])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("mul", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.mul(vs[0], vs[1])?;
                Ok(g.sum(z))
            })),
            ("div", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.div(vs[0], vs[1])?;
                Ok(g.sum(z))
            })),
            ("min", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.min(vs[0], vs[1])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("max", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.max(vs[0], vs[1])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("add_bias_row", vec![x.clone(), bias.clone()], Box::new(|g, vs| {
                let z = g.add_bias_row(vs[0], vs[1])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("scale_add_const", vec![x.clone()], Box::new(|g, vs| {
                let z = g.scale(vs[0], -2.5);
                let z = g.add_const(z, 0.75);
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("relu", vec![m1.clone()], Box::new(|g, vs| {
                let z = g.relu(vs[0]);
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("sigmoid", vec![m1.clone()], Box::new(|g, vs| {
                let z = g.sigmoid(vs[0]);
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("abs", vec![m1.clone()], Box::new(|g, vs| {
                let z = g.abs(vs[0]);
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("matmul", vec![m1.clone(), m2.clone()], Box::new(|g, vs| {
                let z = g.matmul(vs[0], vs[1])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("transpose", vec![m1.clone()], Box::new(|g, vs| {
                let zt = g.transpose(vs[0])?;
                let z2 = g.mul(zt, zt)?;
                Ok(g.mean(z2))
            })),
            ("reshape", vec![m1.clone()], Box::new(|g, vs| {
                let z = g.reshape(vs[0], vec![2, 6])?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("narrow", vec![m1.clone()], Box::new(|g, vs| {
                let z = g.narrow(vs[0], 1, 1, 2)?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("concat", vec![x.clone(), y.clone()], Box::new(|g, vs| {
                let z = g.concat(&[vs[0], vs[1]], 0)?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("softmax", vec![m1.clone()], Box::new(|g, vs| {
                let s = g.softmax(vs[0], 1)?;
                let s2 = g.mul(s, s)?;
                Ok(g.sum(s2))
            })),
            ("log_softmax", vec![m1.clone()], Box::new(|g, vs| {
                let s = g.log_softmax(vs[0], 1)?;
                let s2 = g.mul(s, s)?;
                Ok(g.mean(s2))
            })),
            ("layer_norm", vec![x.clone(), gamma.clone(), beta.clone()], Box::new(|g, vs| {
                let z = g.layer_norm(vs[0], vs[1], vs[2], 1e-9)?;
                let z2 = g.mul(z, z)?;
                Ok(g.sum(z2))
            })),
            ("sum", vec![m1.clone()], Box::new(|g, vs| {
                let z2 = g.mul(vs[0], vs[0])?;
                Ok(g.sum(z2))
            })),
            ("mean", vec![m1.clone()], Box::new(|g, vs| {
                let z2 = g.mul(vs[0], vs[0])?;
                Ok(g.mean(z2))
            })),
        ];

        for (name, tensors, mut build) in cases {
            let names: Vec<&str> = (0..tensors.len()).map(|_| "p").collect();
            let report = finite_diff_check(&names, &tensors, h, &mut build)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(
                report.passes(tol),
                "{name}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    /// A tensor feeding two consumers must receive both gradient contributions.
    #[test]
    fn shared_use_accumulation_matches_fd() {
        let mut r = SplitMix64::new(123);
        let x = random_tensor(&mut r, vec![2, 3], -1.0, 1.0);
        let w = random_tensor(&mut r, vec![3, 3], -1.0, 1.0);
        let report = finite_diff_check(&["x", "w"], &[x, w], 1e-5, |g, vs| {
            let a = g.matmul(vs[0], vs[1])?;
            let b = g.sigmoid(vs[0]);
            let sa = g.sum(a);
            let sb = g.sum(b);
            let both = g.add(sa, sb)?;
            let sq = g.mul(both, both)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }
}
