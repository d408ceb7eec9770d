use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{invalid, Error, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `max(0, |analytic − fd| − r) / (|analytic| + |fd| + 1e-12)`,
    /// where `r` bounds the rounding error of the central difference itself
    pub max_rel_error: f64,
    /// the same maximum without the rounding allowance
    pub raw_max_rel_error: f64,
    /// parameter name and flat index of the worst coordinate
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Multiple of the objective's last-bit rounding allowed for accumulated
/// rounding across graph operations.
const ROUNDING_MARGIN: f64 = 10.0;

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective {v}")));
    }
    Ok(v)
}

/// Check the reverse-mode gradient of the scalar graph built by `f` against
/// central finite differences over every entry of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    g.backward(out)?;
    let analytic: HashMap<&str, Array2<f64>> = g
        .bindings()
        .filter_map(|(n, v)| g.grad(v).map(|gr| (n, gr.clone())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        raw_max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let cols = store.value(name).map_or(0, |v| v.ncols());
        let len = store.value(name).map_or(0, |v| v.len());
        for idx in 0..len {
            let at = [idx / cols, idx % cols];
            let orig = probe.value(name).unwrap()[at];
            probe.value_mut(name).unwrap()[at] = orig + h;
            let plus = eval(&probe, &f)?;
            probe.value_mut(name).unwrap()[at] = orig - h;
            let minus = eval(&probe, &f)?;
            probe.value_mut(name).unwrap()[at] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let an = analytic
                .get(name.as_str())
                .map_or(0.0, |a| a[at]);
            if !an.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
            // discrepancy that rounding in the two objective values can explain
            let r = ROUNDING_MARGIN * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h);
            let rel = ((an - fd).abs() - r).max(0.0) / (an.abs() + fd.abs() + 1e-12);
            let raw = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
            report.raw_max_rel_error = report.raw_max_rel_error.max(raw);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        s.insert("x", array![[3.0]]).unwrap();
        let r = grad_check(&s, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            g.hadamard(x, x)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn dead_relu_is_exact_zero() {
        let mut s = ParamStore::new();
        s.insert("x", array![[-2.0, -0.5]]).unwrap();
        let r = grad_check(&s, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.relu(x);
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn tiny_gradient_under_unit_objective() {
        // central differences cannot resolve 1e-9 slopes of an O(1) objective
        let mut s = ParamStore::new();
        s.insert("x", array![[0.3, -0.7]]).unwrap();
        let r = grad_check(&s, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            let t = g.scale(x, 1e-9);
            let one = g.constant(array![[1.0, 0.0]]);
            let y = g.add(t, one)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let s = ParamStore::new();
        let f = |g: &mut Graph, _: &ParamStore| Ok(g.constant(array![[1.0]]));
        assert!(grad_check(&s, 1.0, f).is_err());
        assert!(grad_check(&s, 1e-9, f).is_err());
    }

    #[test]
    fn non_finite_objective_errors() {
        let mut s = ParamStore::new();
        s.insert("x", array![[1.0]]).unwrap();
        let r = grad_check(&s, 1e-5, |g, s| {
            let x = g.param(s, "x")?;
            Ok(g.scale(x, f64::INFINITY))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
