//! Central finite-difference checking of analytic gradients.
//!
//! Deliberately independent of the reverse-mode engine: it only re-evaluates
//! the forward pass at perturbed parameter values.

use super::{Parameter, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare the analytic gradient of `loss_fn` w.r.t. every parameter against
/// central finite differences with the given step.
///
/// `loss_fn` must rebuild the graph from the parameters' current data on
/// every call.
pub fn finite_difference_check(
    params: &[Parameter],
    step: f64,
    loss_fn: impl Fn() -> Tensor,
) -> GradCheckReport {
    for p in params {
        p.tensor.zero_grad();
    }
    let loss = loss_fn();
    loss.backward().expect("gradcheck loss must be scalar");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked_elements: 0,
    };
    for p in params {
        let analytic = p
            .tensor
            .grad()
            .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let base = p.tensor.value();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            p.tensor.set_data(&plus);
            let lp = loss_fn().item();

            let mut minus = base.clone();
            minus[i] -= step;
            p.tensor.set_data(&minus);
            let lm = loss_fn().item();

            p.tensor.set_data(&base);

            let numeric = (lp - lm) / (2.0 * step);
            // The floor keeps roundoff on near-zero gradients from
            // registering as relative error; real defects show up at the
            // gradient's own scale and still trip it.
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic[i] - numeric).abs() / denom;
            report.checked_elements += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{}]", p.name, i);
            }
        }
    }
    report
}
