//! Central finite differences, used as the oracle for reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Param, Tensor};

/// Default step for double-precision checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of comparing backward against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

/// Runs `build` once with backward to collect analytic gradients for
/// `params`, then re-runs it forward-only under central perturbations of
/// every coordinate.
///
/// `build` records the loss on the given graph and returns it.
pub fn check_param_grads<F>(params: &[Param<f64>], h: f64, mut build: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph<f64>) -> Result<Var>,
{
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            let t = p.read();
            t.grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    for p in params {
        p.zero_grad();
    }

    let eval = |build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    for (p, want) in params.iter().zip(&analytic) {
        let n = p.read().len();
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = p.read().data()[i];
            p.write().data_mut()[i] = orig + h;
            let up = eval(&mut build)?;
            p.write().data_mut()[i] = orig - h;
            let down = eval(&mut build)?;
            p.write().data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let err = max_relative_error(want, &numeric, REL_ERR_FLOOR);
        report.coordinates += n;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = p.name().to_string();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -1.0, 7.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, FD_STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[1.0], &[1.0], 1e-6), 0.0);
        assert!((max_relative_error(&[2.0], &[1.0], 1e-6) - 0.5).abs() < 1e-12);
        assert!(max_relative_error(&[1e-12], &[0.0], 1e-6) < 1e-5);
    }
}
