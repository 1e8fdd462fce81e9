//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, with (analytic, numeric) values.
    pub worst: Option<(ParamId, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval(params: &ParamStore, f: &impl Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

/// Compares backward-pass gradients with central differences at `coords`.
pub fn grad_check(
    params: &ParamStore,
    f: impl Fn(&mut Graph) -> Result<Var>,
    eps: f64,
    coords: &[(ParamId, usize)],
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(params);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        coords
            .iter()
            .map(|&(id, i)| grads.param(id).map_or(0.0, |gr| gr[i]))
            .collect::<Vec<_>>()
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(&work, &f)?;
        work.get_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(&work, &f)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((id, i, a, numeric));
        }
    }
    Ok(report)
}

/// Draws `n` coordinates, spreading them round-robin over the parameters that
/// `keep` accepts so every tensor is exercised.
pub fn sample_coords(
    params: &ParamStore,
    n: usize,
    seed: u64,
    keep: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<_> = params
        .iter()
        .filter(|(_, name, t)| keep(name) && t.numel() > 0)
        .map(|(id, _, t)| (id, t.numel()))
        .collect();
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|k| {
            let (id, numel) = pool[k % pool.len()];
            (id, rng.gen_range(0..numel))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ElementwiseFn;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.3, 0.8, -0.4]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn linear_function_is_exact() {
        let p = store();
        let id = p.id("w").unwrap();
        let coords: Vec<_> = (0..6).map(|i| (id, i)).collect();
        let r = grad_check(
            &p,
            |g| {
                let w = g.param(id);
                let s = g.scale(w, 3.0);
                Ok(g.sum(s))
            },
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let p = store();
        let id = p.id("w").unwrap();
        let coords: Vec<_> = (0..6).map(|i| (id, i)).collect();
        let broken = ElementwiseFn {
            forward: f64::sin,
            derivative: |x| -x.sin(),
        };
        let r = grad_check(
            &p,
            |g| {
                let w = g.param(id);
                let s = g.map(w, broken);
                Ok(g.sum(s))
            },
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(r.max_rel_err > 1e-2, "{r:?}");
    }
}
