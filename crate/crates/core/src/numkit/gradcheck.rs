use serde::Serialize;

use super::{OpKind, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compares tape gradients against central finite differences over every
/// scalar of every parameter in a store.
#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    pub h: f64,
    pub tol: f64,
    pub fault: Option<OpKind>,
}

impl GradChecker {
    pub fn new(h: f64, tol: f64) -> Result<Self> {
        if !(1e-7..=1e-3).contains(&h) {
            return Err(Error::Contract(format!("step h={h} outside [1e-7, 1e-3]")));
        }
        Ok(Self {
            h,
            tol,
            fault: None,
        })
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    /// Error metric per coordinate: `|analytic − fd| / max(1, |fd|)`.
    pub fn check<F>(&self, name: &str, store: &ParamStore, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        if let Some(kind) = self.fault {
            tape.inject_fault(kind);
        }
        let loss = f(&mut tape, store)?;
        let analytic = tape.backward(loss, store)?;

        let eval = |s: &ParamStore| -> Result<f64> {
            let mut t = Tape::new();
            let l = f(&mut t, s)?;
            Ok(t.value(l).item())
        };

        let mut probe = store.clone();
        let mut max_rel_err: f64 = 0.0;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                probe.get_mut(id).data_mut()[k] = orig + self.h;
                let up = eval(&probe)?;
                probe.get_mut(id).data_mut()[k] = orig - self.h;
                let down = eval(&probe)?;
                probe.get_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * self.h);
                let a = analytic.get(id).data()[k];
                let err = (a - fd).abs() / fd.abs().max(1.0);
                if !err.is_finite() {
                    max_rel_err = f64::INFINITY;
                } else {
                    max_rel_err = max_rel_err.max(err);
                }
            }
        }
        Ok(GradReport {
            op_name: name.to_string(),
            max_rel_err,
            pass: max_rel_err < self.tol,
        })
    }
}

/// One-shot convenience wrapper around [`GradChecker`].
pub fn grad_check<F>(name: &str, store: &ParamStore, h: f64, tol: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    GradChecker::new(h, tol)?.check(name, store, f)
}
