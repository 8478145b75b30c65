//! Central finite-difference verification of the analytic gradients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Example, LossWeights, Model};

/// Worst relative error within one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradientReport {
    /// True when every block passed; vacuously true for an empty report.
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failed_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with a floor of 1e-6 on the denominator, so parameters with
/// vanishing gradients compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-6)
}

/// Compares the model's reverse-mode gradient of the total loss on `batch`
/// with central differences of step `h`. O(parameters) loss evaluations.
pub fn gradient_check(model: &Model, batch: &[Example], weights: LossWeights, h: f64, tol: f64) -> GradientReport {
    gradient_check_with(model, batch, weights, h, tol, |m, g| {
        m.loss(batch, weights, Some(g));
    })
}

/// As [`gradient_check`], with the analytic gradient supplied by `analytic`
/// (which receives a zeroed buffer).
pub fn gradient_check_with(
    model: &Model,
    batch: &[Example],
    weights: LossWeights,
    h: f64,
    tol: f64,
    analytic: impl Fn(&Model, &mut [f64]),
) -> GradientReport {
    let mut report = GradientReport { tolerance: tol, blocks: Vec::new() };
    if batch.iter().all(|e| e.features.candidates.is_empty()) {
        return report;
    }
    let mut grad = vec![0.0; model.params.len()];
    analytic(model, &mut grad);
    let mut probe = model.clone();
    for block in model.blocks() {
        let mut worst: f64 = 0.0;
        for i in block.range() {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = probe.loss(batch, weights, None).total;
            probe.params[i] = orig - h;
            let down = probe.loss(batch, weights, None).total;
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(grad[i], numeric);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        report.blocks.push(BlockCheck { name: block.name.clone(), params: block.len(), max_rel_error: worst, passed: worst <= tol });
    }
    report
}
