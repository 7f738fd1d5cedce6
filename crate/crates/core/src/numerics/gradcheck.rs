//! Central finite-difference verification of analytic gradients.

use super::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// gradients are compared in absolute terms.
    pub floor: f64,
    /// Upper bound on checked elements per parameter (evenly strided).
    pub max_per_param: usize,
    pub mode: Mode,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-4, floor: 1e-3, max_per_param: usize::MAX, mode: Mode::Train }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    /// Compares `d loss / d p` from one backward pass with
    /// `(loss(p + h) - loss(p - h)) / 2h` for every (sampled) element of
    /// every parameter in the store.
    pub fn run<F>(&self, store: &mut ParamStore<f64>, loss_fn: F) -> Result<GradCheckReport>
    where
        F: for<'g> Fn(&Graph<'g, f64>) -> Result<Var>,
    {
        let analytic = {
            let g = Graph::new(store, self.mode);
            let loss = loss_fn(&g)?;
            g.backward(loss)?
        };
        let eval = |store: &ParamStore<f64>| -> Result<f64> {
            let g = Graph::new(store, self.mode);
            let loss = loss_fn(&g)?;
            Ok(g.value(loss).data()[0])
        };
        let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let n = store.param(id).value.numel();
            let stride = n.div_ceil(self.max_per_param.min(n)).max(1);
            for i in (0..n).step_by(stride) {
                let a = analytic.param(id).map_or(0.0, |t| t.data()[i]);
                let orig = store.param(id).value.data()[i];
                store.param_mut(id).value.data_mut()[i] = orig + self.step;
                let plus = eval(store)?;
                store.param_mut(id).value.data_mut()[i] = orig - self.step;
                let minus = eval(store)?;
                store.param_mut(id).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = format!(
                        "{}[{}]: analytic {:.6e}, numeric {:.6e}",
                        store.param(id).name,
                        i,
                        a,
                        numeric
                    );
                }
            }
        }
        Ok(report)
    }
}
