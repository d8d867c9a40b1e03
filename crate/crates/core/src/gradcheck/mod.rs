//! Central finite-difference verification of reverse-mode gradients.

mod suite;

use std::fmt;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use suite::{run_named, run_suite, SUITE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are
    /// numerically zero are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            abs_floor: 1e-6,
            max_coords: None,
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    pub passed: bool,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates sitting on a kink (one-sided differences disagree), left
    /// out of the comparison.
    pub skipped: usize,
    pub tolerance: f64,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let worst = match self.worst {
            Some((i, e)) => format!("{}[{}]", i, e),
            None => "-".into(),
        };
        write!(
            f,
            "{:<16} {:>12.3e} {:>8} {:>8} {:>10} {}",
            self.op,
            self.max_rel_error,
            self.checked,
            self.skipped,
            worst,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

impl GradReport {
    pub fn table_header() -> String {
        format!(
            "{:<16} {:>12} {:>8} {:>8} {:>10} {}",
            "op", "max_rel_err", "checked", "skipped", "worst", "result"
        )
    }
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(name: &str, f: F, input: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    grad_check_many(name, |vars| f(&vars[0]), std::slice::from_ref(input), cfg)
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn grad_check_many<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::parameter).collect();
    let loss = f(&vars)?;
    loss.backward()?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    compare_gradients(name, f, inputs, &analytic, cfg)
}

/// Compares caller-supplied analytic gradients against central differences.
pub fn compare_gradients<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    if analytic.len() != inputs.len() {
        return Err(Error::Contract(format!(
            "{} analytic gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let vars: Vec<Var<f64>> = probe.iter().cloned().map(Var::constant).collect();
        let out = f(&vars)?;
        if out.value().len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    let h = cfg.step;
    let f0 = eval(inputs)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport {
        op: name.to_string(),
        max_rel_error: 0.0,
        passed: true,
        worst: None,
        checked: 0,
        skipped: 0,
        tolerance: cfg.tolerance,
    };

    for (which, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
        input.expect_same_shape(grad)?;
        let len = input.len();
        let stride = match cfg.max_coords {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for idx in (0..len).step_by(stride) {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + h;
            let fp = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - h;
            let fm = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{}: non-finite gradient comparison at {}[{}]",
                    name, which, idx
                )));
            }
            if rel > cfg.tolerance {
                let right = (fp - f0) / h;
                let left = (f0 - fm) / h;
                let one_sided = right.abs().max(left.abs()).max(cfg.abs_floor);
                if (right - left).abs() / one_sided > cfg.tolerance {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, idx));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance && report.checked > 0;
    Ok(report)
}
