//! Central finite-difference checks of analytic gradients (64-bit only).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of(g: &Graph<'_, f64>, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::InvalidArgument(format!("grad_check needs a scalar output, got {:?}", t.shape())));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for the
/// scalar function `f` at `x`, using `(f(x+h) − f(x−h)) / 2h`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    Fun: for<'a> Fn(&mut Graph<'a, f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be > 0")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Finite-difference check of every coordinate of every parameter in `ids`
/// (all parameters when `ids` is `None`). `f` builds the scalar from a graph
/// bound to the supplied store.
pub fn grad_check_params<Fun>(
    store: &ParamStore<f64>,
    ids: Option<&[ParamId]>,
    f: Fun,
    h: f64,
) -> Result<GradCheckReport>
where
    Fun: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s).no_grad();
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };
    let analytic: Vec<(ParamId, Tensor<f64>)> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        scalar_of(&g, out)?;
        let grads = g.backward(out)?;
        store
            .ids()
            .map(|id| {
                let t = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
                (id, t)
            })
            .collect()
    };
    let all: Vec<ParamId> = store.ids().collect();
    let targets = ids.unwrap_or(&all);
    let mut work = store.clone();
    let mut entries = Vec::new();
    for &id in targets {
        let base = store.get(id).clone();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let orig = base.data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[id.index()].1.data()[i], numeric));
        }
        entries.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{vtc_loss, ContrastiveBatch};

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn summed_softmax() {
        let x = Tensor::from_f64(&[2, 3], &[0.3, -0.8, 0.5, 0.9, 0.1, -0.4]).unwrap();
        let err = grad_check(
            |g, x| {
                let s = g.softmax(x, 1, 0.9)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn contrastive_loss_on_two_pairs() {
        let v = Tensor::from_f64(&[2, 3], &[0.2, -0.5, 0.7, 0.9, 0.1, -0.3]).unwrap();
        let t = Tensor::from_f64(&[2, 3], &[0.6, 0.3, -0.2, -0.1, 0.8, 0.4]).unwrap();
        for (wrt_video, x) in [(true, &v), (false, &t)] {
            let other = if wrt_video { t.clone() } else { v.clone() };
            let err = grad_check(
                |g, x| {
                    let xn = g.l2_normalize_rows(x)?;
                    let o = g.constant(other.clone());
                    let on = g.l2_normalize_rows(o)?;
                    let log_tau_c = g.constant(Tensor::scalar(0.07f64.ln()));
                    let (v_cls, t_cls) = if wrt_video { (xn, on) } else { (on, xn) };
                    Ok(vtc_loss(g, &ContrastiveBatch { v_cls, t_cls, log_tau_c })?.total)
                },
                x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
        assert!(grad_check(|g, x| g.scale(x, 2.0), &x, 1e-5).is_err());
        let big = Tensor::from_f64(&[1], &[800.0]).unwrap();
        assert!(grad_check(|g, x| g.exp(x), &big, 1e-5).is_err());
    }
}
