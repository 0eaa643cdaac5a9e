//! Central finite-difference check of every trainable gradient.
//!
//! Perturbing a weight only changes activations from its own stage onward,
//! so the loss is re-evaluated from the cached stage input rather than from
//! the network input.

use crate::layers::Tensor;
use crate::model::{softmax, WrnModel};
use crate::WrnError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    /// `name[index]: analytic, numeric` of the worst entry.
    pub worst: String,
}

fn mean_ce(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let p = softmax(logits, k);
    labels.iter().enumerate().map(|(i, &l)| -p[i * k + l].ln()).sum::<f64>() / labels.len() as f64
}

/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    model: &mut WrnModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    h: f64,
    floor: f64,
) -> Result<GradCheck, WrnError> {
    model.loss_and_grads(x, labels)?;
    let analytic: Vec<Vec<f64>> = model.store().entries().iter().map(|e| e.grad.clone()).collect();
    let inputs = model.stage_inputs(x)?;
    let k = model.config().classes;
    let mut report = GradCheck { checked: 0, worst_rel: 0.0, worst: String::new() };

    for (ei, grads) in analytic.iter().enumerate() {
        if !model.store().entries()[ei].trainable {
            continue;
        }
        let stage = model.stage_of(ei);
        for (j, &a) in grads.iter().enumerate() {
            let orig = model.store().entries()[ei].value[j];
            let loss_at = |m: &mut WrnModel<f64>, v: f64| -> Result<f64, WrnError> {
                m.store_mut().entries_mut()[ei].value[j] = v;
                let logits = match stage {
                    Some(s) => m.forward_train_from(s, &inputs[s]),
                    None => m.forward(x, crate::Mode::Train)?,
                };
                Ok(mean_ce(&logits, labels, k))
            };
            let up = loss_at(model, orig + h)?;
            let down = loss_at(model, orig - h)?;
            model.store_mut().entries_mut()[ei].value[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.worst_rel || report.checked == 0 {
                report.worst_rel = rel;
                report.worst = format!("{}[{j}]: analytic {a:e}, numeric {numeric:e}", model.store().entries()[ei].name);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
