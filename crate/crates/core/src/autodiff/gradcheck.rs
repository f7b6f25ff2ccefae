//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;
use crate::tensor::Precision;

/// Denominator floor for the relative error, so entries whose true gradient is
/// essentially zero are judged on absolute agreement instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of the scalar built by `build` with central
/// differences for every entry of every parameter in `params`.
///
/// `build` must construct the whole forward pass on the supplied graph,
/// registering parameters through [`Graph::param_from`]; it is re-run for every
/// perturbation. Graphs are always 64-bit here.
pub fn grad_check<F>(build: F, params: &ParamStore, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new(Precision::F64);
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;

    let mut probe = params.clone();
    let mut entries = Vec::new();
    for (name, value) in params.iter() {
        let analytic = grads.param(name).cloned();
        let mut entry = GradCheckEntry {
            name: name.clone(),
            len: value.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..value.len() {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            let err = rel_error(a, numeric);
            if err > entry.max_rel_error || i == 0 {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        entry.passed = entry.max_rel_error < tolerance;
        entries.push(entry);
    }
    Ok(GradCheckReport { step, tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(3.0));
        let report = grad_check(
            |g, p| {
                let x = g.param_from(p, "x")?;
                let y = g.mul(x, x)?;
                g.sum_all(y)
            },
            &p,
            1e-5,
            1e-8,
        )
        .unwrap();
        let e = &report.entries[0];
        assert_eq!(e.analytic, 6.0);
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(report.passed(), "{report:?}");
    }
}
