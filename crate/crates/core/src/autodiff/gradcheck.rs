//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; `None` checks every one.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_param: Some(20),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε` at sampled coordinates.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return a single-element node.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], mut f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-5, 1e-2]",
            opts.eps
        )));
    }
    let (base, grads) = evaluate(&mut f, params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at the unperturbed point".into()));
    }
    let mut rng = Rng::new(opts.seed);
    let mut coords = Vec::new();
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let idx: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < p.numel() => (0..k).map(|_| rng.below(p.numel())).collect(),
            _ => (0..p.numel()).collect(),
        };
        for i in idx {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&mut f, &work, false)?.0;
            work[pi].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&mut f, &work, false)?.0;
            work[pi].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective when perturbing parameter {pi} index {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads[pi].data()[i];
            coords.push(CoordCheck {
                param: pi,
                index: i,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            });
        }
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(CheckReport {
        coords,
        max_rel_err,
        tol: opts.tol,
    })
}

/// Finite-difference check of every parameter in `store` (or the listed
/// ones) against gradients of the scalar that `f` builds on a bound tape.
pub fn check_store<F>(
    store: &ParamStore<f64>,
    ids: Option<&[ParamId]>,
    mode: Mode,
    mut f: F,
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    F: FnMut(&mut Forward<'_, f64>) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-5, 1e-2]",
            opts.eps
        )));
    }
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let analytic = {
        let mut fw = Forward::new(store, mode, true);
        let out = f(&mut fw)?;
        fw.param_grads(out)?
    };
    let mut work = store.clone();
    let mut value = |s: &ParamStore<f64>| -> Result<f64> {
        let mut fw = Forward::new(s, mode, false);
        let out = f(&mut fw)?;
        Ok(fw.tape.value(out).item())
    };
    let mut rng = Rng::new(opts.seed);
    let mut coords = Vec::new();
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.value(id).numel();
        let idx: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = value(&work)?;
            work.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = value(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective when perturbing {} index {i}",
                    store.meta(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id).data()[i];
            coords.push(CoordCheck {
                param: pi,
                index: i,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(CheckReport {
        coords,
        max_rel_err,
        tol: opts.tol,
    })
}

fn evaluate<F>(f: &mut F, ps: &[Tensor<f64>], with_grads: bool) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let value = tape.value(out).item();
    if !with_grads || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(out)?;
    Ok((value, leaves.iter().map(|&l| g.get(l)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::from_f64(&[1], &[3.0]).unwrap()];
        let opts = CheckOptions {
            eps: 1e-3,
            ..Default::default()
        };
        let r = finite_diff_check(
            &p,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &opts,
        )
        .unwrap();
        let c = &r.coords[0];
        assert!((c.analytic - 6.0).abs() < 1e-12);
        assert!((c.numeric - 6.0).abs() < 1e-6);
        assert!(r.passed());
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let p = vec![Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let r = finite_diff_check(&p, |t, _| Ok(t.constant(Tensor::scalar(4.0))), &CheckOptions::default()).unwrap();
        assert!(r.coords.iter().all(|c| c.analytic == 0.0 && c.numeric == 0.0));
        assert!(r.passed());
    }

    #[test]
    fn two_layer_mlp_passes() {
        let mut rng = Rng::new(42);
        let params = vec![
            Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng).unwrap(),
            Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng).unwrap(),
            Tensor::uniform(&[5], -0.5, 0.5, &mut rng).unwrap(),
            Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng).unwrap(),
        ];
        let r = finite_diff_check(
            &params,
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.tanh(h);
                let o = t.matmul(h, v[3])?;
                let s = t.sigmoid(o);
                Ok(t.sum(s))
            },
            &CheckOptions {
                coords_per_param: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.coords.len(), 20);
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let p = vec![Tensor::from_f64(&[1], &[0.0]).unwrap()];
        let err = finite_diff_check(
            &p,
            |t, v| {
                let a = t.affine(v[0], 1e308, 0.0);
                let b = t.affine(a, 1e308, 0.0);
                Ok(t.sum(b))
            },
            &CheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("index 0")), "{err}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let p = vec![Tensor::from_f64(&[1], &[0.0]).unwrap()];
        let opts = CheckOptions {
            eps: 0.5,
            ..Default::default()
        };
        assert!(finite_diff_check(&p, |t, v| Ok(t.sum(v[0])), &opts).is_err());
    }
}
