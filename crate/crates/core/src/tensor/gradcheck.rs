//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Outcome of checking one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±step perturbation flipped a ReLU input's sign.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward gradients of a scalar function against central
/// differences `(f(θ+he) − f(θ−he)) / 2h`.
///
/// `f` records the loss on a fresh tape given one leaf per parameter.
/// Parameters are restored to their original values before returning.
pub fn finite_diff_check<F>(
    params: &mut [(String, Tensor<f64>)],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[(String, Tensor<f64>)], with_grad: bool| -> Result<(f64, Vec<bool>, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|(_, t)| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss)[0];
        let pattern = tape.relu_pattern();
        let grads = if with_grad {
            tape.backward(loss)?;
            Some(
                vars.iter()
                    .zip(params)
                    .map(|(&v, (_, t))| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                    .collect(),
            )
        } else {
            None
        };
        Ok((value, pattern, grads))
    };

    let (_, base_pattern, grads) = eval(params, true)?;
    let grads = grads.expect("requested");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { params: Vec::new() };
    for pi in 0..params.len() {
        let numel = params[pi].1.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: params[pi].0.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for idx in coords {
            let orig = params[pi].1.data()[idx];
            params[pi].1.data_mut()[idx] = orig + opts.step;
            let plus = eval(params, false);
            params[pi].1.data_mut()[idx] = orig - opts.step;
            let minus = eval(params, false);
            params[pi].1.data_mut()[idx] = orig;
            let (fp, pp, _) = plus?;
            let (fm, pm, _) = minus?;
            if pp != base_pattern || pm != base_pattern {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(grads[pi][idx], numeric);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = err;
                check.worst = Some((idx, grads[pi][idx], numeric));
            }
            check.checked += 1;
        }
        report.params.push(check);
    }
    Ok(report)
}
