//! Central finite-difference verification of tape gradients in 64-bit mode.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor4;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per input; inputs at most this long are probed exhaustively.
    pub samples_per_input: usize,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-4, samples_per_input: 12, abs_floor: 1e-2, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a ReLU kink
    /// or similar non-differentiable point lies inside the step).
    pub skipped_kinks: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

/// Checks the analytic gradient of `Σ r·f(inputs)` (random fixed `r`) against
/// central finite differences.
pub fn gradcheck<F>(inputs: &[Tensor4<f64>], f: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = tape.weighted_sum(out, weights.clone())?;
    let base = tape.value(loss).data()[0];
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor4<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = tape.weighted_sum(out, weights.clone())?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report =
        GradcheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0, tolerance: cfg.tolerance };
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_input {
            (0..len).collect()
        } else {
            // Oversample so kink skips can be replaced.
            sample(&mut rng, len, (2 * cfg.samples_per_input).min(len)).into_vec()
        };
        let mut done = 0;
        for idx in picks {
            if done == cfg.samples_per_input {
                break;
            }
            let a = grad[idx];
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    what: "analytic gradient".into(),
                    location: format!("input {which}, element {idx}"),
                });
            }
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + cfg.step;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - cfg.step;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;

            let right = (plus - base) / cfg.step;
            let left = (base - minus) / cfg.step;
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if !rel.is_finite() {
                return Err(Error::NonFinite {
                    what: "finite-difference gradient".into(),
                    location: format!("input {which}, element {idx}"),
                });
            }
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, idx));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvGeom;

    fn rand_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pointwise_conv_passes_tightly() {
        let x = rand_tensor([1, 3, 4, 4], 1);
        let w = rand_tensor([2, 3, 1, 1], 2);
        let cfg = GradcheckConfig { tolerance: 1e-6, ..Default::default() };
        let r = gradcheck(&[x, w], |t, v| t.conv2d(v[0], v[1], ConvGeom::new(1, [0, 0])), &cfg).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_a_wrong_rule() {
        use crate::graph::Backward;
        struct Doubled;
        impl Backward<f64> for Doubled {
            fn backward(&self, _: &[&Tensor4<f64>], _: &Tensor4<f64>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
                vec![Some(g.iter().map(|v| 2.0 * v).collect())]
            }
        }
        let x = rand_tensor([1, 1, 2, 2], 3);
        let r = gradcheck(
            &[x],
            |t, v| {
                let y = t.value(v[0]).clone();
                Ok(t.push(y, vec![v[0]], Box::new(Doubled)))
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.worst.is_some());
    }
}
