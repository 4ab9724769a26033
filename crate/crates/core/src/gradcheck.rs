//! Central finite-difference checking. Only forward evaluations are used on
//! the numeric side, so this stays independent of the backward pass it
//! verifies.

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat element index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub elements_checked: usize,
}

/// Compare analytic gradients against central differences for every element
/// of every parameter. `loss_fn` must rebuild the loss from the parameters'
/// current data each call.
pub fn finite_difference_check(
    params: &[(String, Tensor)],
    mut loss_fn: impl FnMut() -> Result<Tensor>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, p)| {
            p.grad().ok_or_else(|| {
                crate::error::Error::Contract(format!("no gradient for parameter `{name}`"))
            })
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        elements_checked: 0,
    };
    for (pi, (name, p)) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.with_data(|d| d[i]);
            p.with_data_mut(|d| d[i] = orig + epsilon);
            let plus = loss_fn()?.item()?;
            p.with_data_mut(|d| d[i] = orig - epsilon);
            let minus = loss_fn()?.item()?;
            p.with_data_mut(|d| d[i] = orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
