//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};

/// A scalar function of a [`ParamStore`] with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ParamStore) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamGrads)>;
}

/// Blanket objective from a pair of closures.
pub struct FnObjective<L, G> {
    pub loss: L,
    pub grad: G,
}

impl<L, G> Objective for FnObjective<L, G>
where
    L: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<(f64, ParamGrads)>,
{
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        (self.loss)(params)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamGrads)> {
        (self.grad)(params)
    }
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stencil {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`.
    Central,
    /// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`, fourth-order accurate,
    /// for deep compositions whose small gradient entries drown in rounding
    /// noise at the step sizes the two-point formula needs.
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub stencil: Stencil,
    pub tol: f64,
    /// Check at most this many randomly chosen entries per tensor; `None` checks all.
    pub max_entries_per_tensor: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            stencil: Stencil::Central,
            tol: 1e-4,
            max_entries_per_tensor: None,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the objective's analytic gradient with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by entry.
pub fn finite_diff_check(
    objective: &impl Objective,
    params: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.eps > 0.0 && opts.eps <= 1e-3) {
        return Err(Error::invalid(format!(
            "finite-difference step {} outside (0, 1e-3]",
            opts.eps
        )));
    }
    let (base, analytic) = objective.loss_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::CheckAborted(format!("loss is {base}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    for (id, p) in params.iter() {
        let n = p.value.data().len();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &e in &entries {
            let orig = work.get(id).data()[e];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[e] = orig + delta;
                let v = objective.loss(&work)?;
                if !v.is_finite() {
                    return Err(Error::CheckAborted(format!("non-finite loss perturbing {}[{e}]", p.name)));
                }
                Ok(v)
            };
            let h = opts.eps;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            work.get_mut(id).data_mut()[e] = orig;
            let a = analytic.get(id).map_or(0.0, |g| g.data()[e]);
            worst = worst.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck {
            name: p.name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
            passed: worst < opts.tol,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        passed: tensors.iter().all(|t| t.passed),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::params::{Graph, ParamGroup};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register(
            "theta",
            ParamGroup::Head,
            Matrix::from_vec(1, 3, vec![0.3, -1.2, 2.5]).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn constant_loss_passes() {
        let s = store();
        let obj = FnObjective {
            loss: |_: &ParamStore| Ok(4.2),
            grad: |p: &ParamStore| Ok((4.2, ParamGrads::zeros_like(p))),
        };
        let r = finite_diff_check(&obj, &s, &GradCheckOptions { tol: 1e-300, ..Default::default() }).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn quadratic_loss_gradient_is_theta() {
        let s = store();
        let id = s.find("theta").unwrap();
        let half_sq = |p: &ParamStore| -> Result<f64> {
            Ok(p.get(id).data().iter().map(|v| v * v).sum::<f64>() / 2.0)
        };
        let obj = FnObjective {
            loss: half_sq,
            grad: |p: &ParamStore| {
                let mut g = Graph::new(p);
                let t = g.param(id);
                let tt = g.transpose(t);
                let sq = g.matmul(t, tt)?;
                let half = g.scale(sq, 0.5);
                let v = g.value(half).get(0, 0);
                let (grads, _) = g.backward(&[(half, Matrix::filled(1, 1, 1.0))])?;
                assert_eq!(grads.get(id).unwrap(), p.get(id));
                Ok((v, grads))
            },
        };
        let r = finite_diff_check(&obj, &s, &GradCheckOptions { tol: 1e-6, ..Default::default() }).unwrap();
        assert!(r.passed, "{r:?}");
        let five = GradCheckOptions { stencil: Stencil::FivePoint, eps: 1e-3, tol: 1e-9, ..Default::default() };
        assert!(finite_diff_check(&obj, &s, &five).unwrap().passed);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let s = store();
        let obj = FnObjective {
            loss: |_: &ParamStore| Ok(f64::NAN),
            grad: |p: &ParamStore| Ok((f64::NAN, ParamGrads::zeros_like(p))),
        };
        assert!(matches!(
            finite_diff_check(&obj, &s, &GradCheckOptions::default()),
            Err(Error::CheckAborted(_))
        ));
        let bad = GradCheckOptions { eps: 1e-2, ..Default::default() };
        assert!(finite_diff_check(&obj, &s, &bad).is_err());
    }
}
