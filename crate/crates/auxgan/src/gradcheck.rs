//! Central-difference gradient checking for scalar functions built on the
//! graph. The numeric side re-evaluates the closure from scratch for every
//! probed coordinate, so it stays independent of the backward pass it checks.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, TensorD, Var};
use crate::rng::SeedRng;

/// Options for one check run.
#[derive(Debug, Clone)]
pub struct CheckOpts {
    /// Central-difference step; must lie in [1e-6, 1e-2].
    pub eps: f64,
    /// Cap on probed coordinates per leaf (None = all). Sampling is seeded.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
    /// Run graphs in train or eval mode.
    pub mode: Mode,
}

impl Default for CheckOpts {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_leaf: None,
            seed: 0,
            mode: Mode::Train,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

/// Compare analytic gradients of `f` (a scalar-valued graph build over the
/// given leaves) against central finite differences; returns the worst
/// relative error over all probed coordinates.
///
/// `f` must be deterministic: any internal state (e.g. batch-norm) has to be
/// rebuilt fresh on every call.
pub fn grad_check<F>(f: F, leaves: &[TensorD], opts: &CheckOpts) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&opts.eps) {
        return Err(Error::config(format!(
            "grad_check: eps {} outside [1e-6, 1e-2]",
            opts.eps
        )));
    }

    let eval = |values: &[TensorD]| -> Result<f64> {
        let mut g = Graph::new(opts.mode);
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone(), false)).collect();
        let root = f(&mut g, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::config("grad_check: function output must be scalar"));
        }
        let y = g.scalar(root);
        if !y.is_finite() {
            return Err(Error::numeric(format!(
                "grad_check: non-finite function value {y}"
            )));
        }
        Ok(y)
    };

    // Analytic pass.
    let (analytic, f_scale): (Vec<ArrayD<f64>>, f64) = {
        let mut g = Graph::new(opts.mode);
        let vars: Vec<Var> = leaves.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let root = f(&mut g, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::config("grad_check: function output must be scalar"));
        }
        let y = g.scalar(root);
        if !y.is_finite() {
            return Err(Error::numeric("grad_check: non-finite function value"));
        }
        g.backward(root)?;
        let grads = vars
            .iter()
            .zip(leaves.iter())
            .map(|(&v, leaf)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()))
            })
            .collect();
        (grads, y)
    };
    let zero_floor = noise_floor(f_scale, opts.eps);

    let mut rng = SeedRng::new(opts.seed);
    let mut values: Vec<TensorD> = leaves.to_vec();
    let mut report = CheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for li in 0..leaves.len() {
        let len = leaves[li].len();
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(k) if k < len => {
                let mut all: Vec<usize> = (0..len).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        };
        for ci in coords {
            let base = leaves[li].as_slice().expect("leaf is contiguous")[ci];
            values[li].as_slice_mut().unwrap()[ci] = base + opts.eps;
            let fp = eval(&values).map_err(|e| {
                Error::numeric(format!("grad_check: leaf {li} coord {ci} (+eps): {e}"))
            })?;
            values[li].as_slice_mut().unwrap()[ci] = base - opts.eps;
            let fm = eval(&values).map_err(|e| {
                Error::numeric(format!("grad_check: leaf {li} coord {ci} (-eps): {e}"))
            })?;
            values[li].as_slice_mut().unwrap()[ci] = base;

            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[li].as_slice().unwrap()[ci];
            let err = rel_err(a, numeric, zero_floor);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(WorstCoord {
                    leaf: li,
                    index: ci,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Relative error with a noise floor so that true-zero gradients do not
/// register finite-difference roundoff as failures. The floor scales with
/// the function magnitude: a central difference of f carries roundoff of
/// order |f|·ε_machine/eps, so anything below a small multiple of that is
/// indistinguishable from zero.
fn rel_err(a: f64, n: f64, zero_floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= zero_floor {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-8)
}

fn noise_floor(f_scale: f64, eps: f64) -> f64 {
    (50.0 * f_scale.abs() * f64::EPSILON / eps).max(1e-9)
}

/// Gradient check for computations whose parameters live in a [`ParamSet`]
/// and reach the graph through a [`Binder`] (blocks, fusion modules, whole
/// networks). Checks every parameter in the set plus the explicit inputs.
///
/// The builder must construct any stateful layers afresh per call (clone a
/// prototype) so repeated evaluations are deterministic. Note that checks
/// over spectrally normalized parameters must run in eval mode, where the
/// stored u/v are constants — matching the gradient's model.
pub fn grad_check_params<F>(
    build: F,
    set: &crate::layers::ParamSet,
    inputs: &[TensorD],
    opts: &CheckOpts,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &mut crate::layers::ParamSet, &[Var]) -> Result<(Var, crate::layers::Binder)>,
{
    if !(1e-6..=1e-2).contains(&opts.eps) {
        return Err(Error::config(format!(
            "grad_check: eps {} outside [1e-6, 1e-2]",
            opts.eps
        )));
    }

    let eval = |set_snapshot: &crate::layers::ParamSet, input_values: &[TensorD]| -> Result<f64> {
        let mut g = Graph::new(opts.mode);
        let mut s = set_snapshot.clone();
        let vars: Vec<Var> = input_values
            .iter()
            .map(|v| g.leaf(v.clone(), false))
            .collect();
        let (root, _binder) = build(&mut g, &mut s, &vars)?;
        let y = g.scalar(root);
        if !y.is_finite() {
            return Err(Error::numeric(format!(
                "grad_check: non-finite function value {y}"
            )));
        }
        Ok(y)
    };

    // Analytic pass: backward + harvest into a fresh clone of the set.
    let (param_grads, input_grads, f_scale) = {
        let mut g = Graph::new(opts.mode);
        let mut s = set.clone();
        s.zero_grads();
        let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let (root, binder) = build(&mut g, &mut s, &vars)?;
        if g.value(root).len() != 1 {
            return Err(Error::config("grad_check: function output must be scalar"));
        }
        let y = g.scalar(root);
        if !y.is_finite() {
            return Err(Error::numeric("grad_check: non-finite function value"));
        }
        g.backward(root)?;
        binder.harvest(&mut g, &mut s);
        let pg: Vec<ArrayD<f64>> = s.iter().map(|p| p.grad.clone()).collect();
        let ig: Vec<ArrayD<f64>> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(&v, leaf)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()))
            })
            .collect();
        (pg, ig, y)
    };
    let zero_floor = noise_floor(f_scale, opts.eps);

    let mut rng = SeedRng::new(opts.seed);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let probe = |analytic: f64, numeric: f64, leaf: usize, index: usize, rep: &mut CheckReport| {
        let err = rel_err(analytic, numeric, zero_floor);
        rep.coords_checked += 1;
        if err > rep.max_rel_err {
            rep.max_rel_err = err;
            rep.worst = Some(WorstCoord {
                leaf,
                index,
                analytic,
                numeric,
            });
        }
    };

    let pick = |rng: &mut SeedRng, len: usize| -> Vec<usize> {
        match opts.max_coords_per_leaf {
            Some(k) if k < len => {
                let mut all: Vec<usize> = (0..len).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        }
    };

    // Parameters.
    for pi in 0..set.len() {
        let len = set.get(crate::layers::ParamId(pi)).data.len();
        for ci in pick(&mut rng, len) {
            let mut plus = set.clone();
            plus.get_mut(crate::layers::ParamId(pi))
                .data
                .as_slice_mut()
                .unwrap()[ci] += opts.eps;
            let fp = eval(&plus, inputs)?;
            let mut minus = set.clone();
            minus
                .get_mut(crate::layers::ParamId(pi))
                .data
                .as_slice_mut()
                .unwrap()[ci] -= opts.eps;
            let fm = eval(&minus, inputs)?;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let analytic = param_grads[pi].as_slice().unwrap()[ci];
            probe(analytic, numeric, pi, ci, &mut report);
        }
    }

    // Inputs.
    let mut values: Vec<TensorD> = inputs.to_vec();
    for li in 0..inputs.len() {
        let len = inputs[li].len();
        for ci in pick(&mut rng, len) {
            let base = inputs[li].as_slice().unwrap()[ci];
            values[li].as_slice_mut().unwrap()[ci] = base + opts.eps;
            let fp = eval(set, &values)?;
            values[li].as_slice_mut().unwrap()[ci] = base - opts.eps;
            let fm = eval(set, &values)?;
            values[li].as_slice_mut().unwrap()[ci] = base;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let analytic = input_grads[li].as_slice().unwrap()[ci];
            probe(analytic, numeric, set.len() + li, ci, &mut report);
        }
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn sum_of_squares_matches_2x() {
        let x = arr1(&[1.0, -2.0, 3.0]).into_dyn();
        let report = grad_check(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                Ok(g.sum_all(sq))
            },
            &[x],
            &CheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn sigmoid_of_linear_is_tight() {
        let x = arr1(&[0.3, -0.7, 1.2]).into_dyn();
        let w = ndarray::arr2(&[[0.5, -0.25, 0.1], [1.0, 0.2, -0.4]]).into_dyn();
        let b = arr1(&[0.05, -0.1]).into_dyn();
        let report = grad_check(
            |g, vars| {
                let x2 = g.reshape(vars[0], &[1, 3])?;
                let y = g.linear(x2, vars[1], Some(vars[2]))?;
                let s = g.sigmoid(y);
                Ok(g.sum_all(s))
            },
            &[x, w, b],
            &CheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = arr1(&[1.0]).into_dyn();
        let opts = CheckOpts {
            eps: 0.5,
            ..Default::default()
        };
        assert!(grad_check(|g, v| Ok(g.sum_all(v[0])), &[x], &opts).is_err());
    }

    #[test]
    fn reports_non_finite_values() {
        let x = arr1(&[1.0e308]).into_dyn();
        let err = grad_check(
            |g, v| {
                let doubled = g.add(v[0], v[0])?;
                Ok(g.sum_all(doubled))
            },
            &[x],
            &CheckOpts::default(),
        );
        assert!(err.is_err());
    }
}
