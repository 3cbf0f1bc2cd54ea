//! Central finite-difference verification of analytic gradients.

use super::{no_grad, trace_kinks, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose +/- probes landed on different sides of a ReLU kink.
    pub skipped_kinks: usize,
}

/// Checks the gradient of a scalar function at `point`.
pub fn gradient_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let x = Tensor::parameter(point.shape(), point.to_vec())?;
    gradient_check_params(std::slice::from_ref(&x), || f(&x), eps)
}

/// Checks the gradient of `loss` with respect to every element of `params`.
///
/// `loss` is re-evaluated with each coordinate nudged by `+eps` and `-eps`;
/// the parameter values are restored afterwards.
pub fn gradient_check_params<T, F>(
    params: &[Tensor<T>],
    loss: F,
    eps: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn() -> Result<Tensor<T>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Input(format!(
            "gradient check step must be positive, got {eps}"
        )));
    }
    params.iter().for_each(Tensor::zero_grad);
    let value = loss()?;
    if value.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    ensure_finite(value.item().to_f64_lossy(), "loss at the probe point")?;
    if value.requires_grad() {
        value.backward()?;
    }
    drop(value);

    let probe = |p: &Tensor<T>, i: usize, v: T| -> Result<(f64, u64)> {
        p.data_mut()[i] = v;
        let (out, trace) = no_grad(|| trace_kinks(&loss));
        Ok((out?.item().to_f64_lossy(), trace))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let step = T::from_f64_lossy(eps);
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
        for (i, a) in analytic.into_iter().enumerate() {
            let original = p.data()[i];
            let plus = probe(p, i, original + step);
            let minus = probe(p, i, original - step);
            p.data_mut()[i] = original;
            let ((fp, trace_p), (fm, trace_m)) = (plus?, minus?);
            ensure_finite(fp, "perturbed loss")?;
            ensure_finite(fm, "perturbed loss")?;
            if trace_p != trace_m {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = a.to_f64_lossy();
            ensure_finite(a, "analytic gradient")?;
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    params.iter().for_each(Tensor::zero_grad);
    Ok(report)
}

fn ensure_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({v})")))
    }
}
