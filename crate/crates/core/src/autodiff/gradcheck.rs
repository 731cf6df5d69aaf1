//! Central finite-difference certification of tape gradients.

use super::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Denominator floor of the relative error, so near-zero gradients compare absolutely.
    pub floor: f64,
    /// Cap on probed elements per input; `None` probes every element.
    pub max_probes: Option<usize>,
}

impl GradCheckConfig {
    pub fn f64_default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-3,
            max_probes: None,
        }
    }

    pub fn f32_default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-1,
            max_probes: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` position of the worst disagreement.
    pub worst: (usize, usize),
    pub probes: usize,
    /// Distance of the unperturbed graph from its nearest non-differentiable point.
    pub kink_margin: f64,
}

fn evaluate<T, F>(inputs: &[Tensor<T>], build: &F, requires_grad: bool) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect();
    let out = build(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape(
            "check_gradients",
            format!("graph output must be scalar, got {:?}", tape.shape(out)),
        ));
    }
    Ok((tape, vars, out))
}

/// Compare the tape's gradients of `build(inputs)` against central differences.
///
/// `build` receives one leaf per input and must return a scalar node. Probed elements are
/// evenly strided across each input when `max_probes` caps the count.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], build: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(inputs, &build, true)?;
    tape.backward(out)?;
    let kink_margin = tape.kink_margin();
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probes: 0,
        kink_margin,
    };
    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = cfg.max_probes.map_or(1, |m| n.div_ceil(m.max(1)));
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            perturbed[i].data_mut()[e] = T::of(orig.as_f64() + cfg.step);
            let plus = loss_value(&perturbed, &build)?;
            perturbed[i].data_mut()[e] = T::of(orig.as_f64() - cfg.step);
            let minus = loss_value(&perturbed, &build)?;
            perturbed[i].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[i][e].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (i, e);
            }
            report.probes += 1;
        }
    }
    Ok(report)
}

fn loss_value<T, F>(inputs: &[Tensor<T>], build: &F) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(inputs, build, false)?;
    Ok(tape.value(out).data()[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient_of_product() {
        let x = Tensor::from_vec(vec![0.3f64, -0.7, 1.1]);
        let report = check_gradients(
            &[x],
            |t, v| {
                let y = t.scale(v[0], 3.0);
                t.weighted_sum(y, &[1.0, 2.0, -1.0])
            },
            GradCheckConfig::f64_default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.probes, 3);
    }

    #[test]
    fn rejects_non_scalar_graph() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0]);
        let err = check_gradients(&[x], |_, v| Ok(v[0]), GradCheckConfig::f64_default());
        assert!(err.is_err());
    }
}
