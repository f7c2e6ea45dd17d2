use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::Tensor;

/// Named access to a set of trainable tensors.
pub trait ParamStore<T: Real> {
    fn param_names(&self) -> Vec<&'static str>;
    fn param(&self, name: &str) -> Option<&Tensor<T>>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

/// Gradient of one named parameter. Its shape equals the parameter's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord<T> {
    pub param: &'static str,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    records: Vec<GradRecord<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new(records: Vec<GradRecord<T>>) -> Self {
        Self { records }
    }

    /// Zero gradients shaped like every parameter of `store`.
    pub fn zeros_like<P: ParamStore<T>>(store: &P) -> Self {
        let records = store
            .param_names()
            .into_iter()
            .map(|name| GradRecord {
                param: name,
                grad: Tensor::zeros(store.param(name).expect("listed parameter").shape()),
            })
            .collect();
        Self { records }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.records.iter().find(|r| r.param == name).map(|r| &r.grad)
    }

    pub fn records(&self) -> &[GradRecord<T>] {
        &self.records
    }

    /// Elementwise sum; both sides must list the same parameters in the same order.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.records.len() != other.records.len() {
            return Err(Error::dim("gradient sets differ in length"));
        }
        for (a, b) in self.records.iter_mut().zip(&other.records) {
            if a.param != b.param {
                return Err(Error::dim(format!("gradient order {} vs {}", a.param, b.param)));
            }
            a.grad.add_assign(&b.grad)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.records.iter_mut().for_each(|r| r.grad.scale(s));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub param: &'static str,
    pub max_abs_err: f64,
    /// `max |analytic − numeric| / max(max |numeric|, 1e-12)` over the group.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }

    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.param == name)
    }
}

/// Compares analytic gradients against central differences
/// `(L(θ+h) − L(θ−h)) / 2h`, one parameter element at a time.
///
/// `loss_fn` must be deterministic: evaluate with dropout off or with a frozen mask.
pub fn finite_diff_check<P, F>(loss_fn: F, params: &P, h: f64) -> Result<GradCheckReport>
where
    P: ParamStore<f64> + Clone,
    F: Fn(&P) -> Result<(f64, Gradients<f64>)>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param(format!("finite-difference step {h} must be positive")));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("loss is {loss}")));
    }
    let mut probe = params.clone();
    let mut groups = Vec::new();
    for name in params.param_names() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::param(format!("no analytic gradient for {name}")))?;
        let n = params.param(name).expect("listed parameter").len();
        if grad.shape() != params.param(name).expect("listed parameter").shape() {
            return Err(Error::dim(format!("gradient shape mismatch for {name}")));
        }
        let mut max_abs = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..n {
            let orig = probe.param(name).expect("listed parameter").data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                probe.param_mut(name).expect("listed parameter").data_mut()[i] = value;
                let (l, _) = loss_fn(&probe)?;
                if !l.is_finite() {
                    return Err(Error::numeric(format!("loss is {l} while probing {name}[{i}]")));
                }
                Ok(l)
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            probe.param_mut(name).expect("listed parameter").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_abs = max_abs.max((grad.data()[i] - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        groups.push(GroupError { param: name, max_abs_err: max_abs, max_rel_err: max_abs / max_num.max(1e-12) });
    }
    Ok(GradCheckReport { groups })
}
