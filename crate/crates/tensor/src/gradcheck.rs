//! Central finite-difference checks of tape gradients.
//!
//! The reported error for one input is normwise: the largest absolute
//! deviation between analytic and numeric partials divided by the largest
//! numeric partial magnitude of that input. The overall figure is the
//! maximum over inputs. Numeric partials are always taken in `f64`.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A scalar-valued function of tensors that can be built on any tape.
pub trait DiffFn {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

impl<F> DiffFn for F
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    fn eval<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        // Plain closures are only usable in 64-bit mode; the `f32` analytic
        // path needs a type implementing the trait generically.
        let tape: &mut Tape<f64> = (tape as &mut dyn std::any::Any)
            .downcast_mut()
            .ok_or_else(|| TensorError::Contract("closure DiffFn is f64-only".into()))?;
        self(tape, inputs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Checks at most this many evenly spaced entries per input.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_entries: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

fn evaluate<T: Element, F: DiffFn>(f: &F, inputs: &[Tensor<T>], grad: bool) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = f.eval(&mut tape, &vars)?;
    let value = tape.value(out).item()?.as_f64();
    if !grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((value, grads))
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn compare<F: DiffFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let idx = sample_indices(input.len(), cfg.max_entries);
        let mut max_num = 0.0f64;
        let mut max_diff = 0.0f64;
        for &i in &idx {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let (plus, _) = evaluate(f, &work, false)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let (minus, _) = evaluate(f, &work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            max_num = max_num.max(numeric.abs());
            max_diff = max_diff.max((numeric - analytic[k][i]).abs());
        }
        let rel = if max_num > 0.0 {
            max_diff / max_num
        } else {
            max_diff
        };
        report.merge(GradCheckReport {
            max_rel_error: rel,
            max_abs_error: max_diff,
            checked: idx.len(),
        });
    }
    Ok(report)
}

/// Analytic gradients in `f64` against central differences in `f64`.
pub fn check_f64<F: DiffFn>(f: &F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (_, grads) = evaluate(f, inputs, true)?;
    let analytic: Vec<Vec<f64>> = grads.into_iter().map(Tensor::into_data).collect();
    compare(f, inputs, &analytic, cfg)
}

/// Analytic gradients in `f32` against central differences in `f64`.
pub fn check_f32<F: DiffFn>(f: &F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let narrow: Vec<Tensor<f32>> = inputs.iter().map(Tensor::cast).collect();
    let (_, grads) = evaluate(f, &narrow, true)?;
    let analytic: Vec<Vec<f64>> = grads.iter().map(|g| g.cast::<f64>().into_data()).collect();
    compare(f, inputs, &analytic, cfg)
}
