use super::{Bindings, Graph, ParameterSet, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter, flat index, analytic, numeric) at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub elements_checked: usize,
    pub deterministic: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.deterministic && self.max_rel_error < self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn evaluate<F>(params: &ParameterSet<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g)?;
    let loss = f(&mut g, &b)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every parameter.
pub fn grad_check<F>(params: &ParameterSet<f64>, eps: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g)?;
    let loss = f(&mut g, &b)?;
    let base = g.value(loss).item();
    let analytic = g.backward(loss)?.for_params(&g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
        deterministic: evaluate(params, &f)?.to_bits() == base.to_bits(),
        tolerance,
    };

    let mut probe = params.clone();
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let original = probe.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = original + eps;
            let plus = evaluate(&probe, &f)?;
            probe.get_mut(name)?.data_mut()[i] = original - eps;
            let minus = evaluate(&probe, &f)?;
            probe.get_mut(name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = rel_error(a, numeric);
            report.elements_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, values: Vec<f64>) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert(name, Tensor::vector(values).unwrap()).unwrap();
        p
    }

    #[test]
    fn square_at_one() {
        let p = single("x", vec![1.0]);
        let report = grad_check(&p, 1e-5, 1e-6, |g, b| {
            let x = b.get("x")?;
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })
        .unwrap();
        let (_, _, analytic, numeric) = report.worst.clone().unwrap();
        assert_eq!(analytic, 2.0);
        assert!((numeric - 2.0).abs() < 1e-8);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let p = single("x", vec![0.3, -1.2, 4.0]);
        let report = grad_check(&p, 1e-4, 1e-9, |g, b| {
            let x = b.get("x")?;
            let s = g.scale(x, 3.0)?;
            g.sum(s)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let p = single("x", vec![1.0]);
        assert!(grad_check(&p, 1e-2, 1e-4, |g, b| g.sum(b.get("x")?)).is_err());
    }

    #[test]
    fn non_determinism_is_reported() {
        use std::cell::Cell;
        let p = single("x", vec![1.0]);
        let calls = Cell::new(0.0);
        let report = grad_check(&p, 1e-5, 1e-4, |g, b| {
            calls.set(calls.get() + 1.0);
            let x = b.get("x")?;
            let y = g.add_scalar(x, calls.get())?;
            g.sum(y)
        })
        .unwrap();
        assert!(!report.deterministic);
        assert!(!report.passed());
    }
}
