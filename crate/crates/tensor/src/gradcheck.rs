//! Central finite-difference gradient checks in `f64`.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    /// Check at most this many coordinates of each input; applied first.
    pub per_input: Option<usize>,
    /// Skip coordinates whose difference quotients at `eps` and `eps / 2`
    /// disagree by more than `1e-5` relative: the function is not smooth
    /// there (a ReLU or max-pool switch inside the stencil) or round-off
    /// dominates. Skips are counted in the report.
    pub skip_nonsmooth: bool,
    pub seed: u64,
    /// Test hook forwarded to [`Tape::inject_fault`].
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: Some(64), per_input: None, skip_nonsmooth: false, seed: 0, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item().ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out).to_vec()))
}

fn central_difference<F>(f: &F, probe: &mut [Tensor<f64>], i: usize, j: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let orig = probe[i].data()[j];
    probe[i].data_mut()[j] = orig + eps;
    let plus = evaluate(f, probe)?;
    probe[i].data_mut()[j] = orig - eps;
    let minus = evaluate(f, probe)?;
    probe[i].data_mut()[j] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares the tape gradient of scalar `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.inject_fault(cfg.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item().ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out).to_vec()))?;
    if evaluate(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    tape.backward(out)?;

    let mut sampler = Rng::new(cfg.seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.numel()).collect();
        if let Some(k) = cfg.per_input.filter(|&k| idx.len() > k) {
            sampler.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
        }
        coords.extend(idx.into_iter().map(|j| (i, j)));
    }
    if let Some(limit) = cfg.max_coords {
        if coords.len() > limit {
            sampler.shuffle(&mut coords);
            coords.truncate(limit);
            coords.sort_unstable();
        }
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, coords_skipped: 0, worst: None };
    let mut probe = inputs.to_vec();
    for (i, j) in coords {
        let analytic = tape.grad(vars[i]).map_or(0.0, |g| g.data()[j]);
        let numeric = central_difference(&f, &mut probe, i, j, cfg.eps)?;
        if cfg.skip_nonsmooth {
            let half = central_difference(&f, &mut probe, i, j, cfg.eps / 2.0)?;
            if relative_error(numeric, half) > 1e-5 {
                report.coords_skipped += 1;
                continue;
            }
        }
        let err = relative_error(analytic, numeric);
        report.coords_checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, j, analytic, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let report = grad_check(
            |tape, v| {
                let s = tape.scale(v[0], 3.5)?;
                tape.sum_all(s)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.coords_checked, 5);
    }

    #[test]
    fn non_determinism_is_detected() {
        let counter = std::cell::Cell::new(0.0);
        let x = Tensor::from_fn(&[2], |i| i as f64);
        let result = grad_check(
            |tape, v| {
                counter.set(counter.get() + 1.0);
                let s = tape.scale(v[0], counter.get())?;
                tape.sum_all(s)
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert_eq!(result, Err(TensorError::NonDeterministic));
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = Tensor::from_fn(&[3], |i| i as f64 + 0.5);
        let cfg = GradCheckConfig { fault: Some(OpKind::Mul), ..Default::default() };
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum_all(sq)
            },
            &[x],
            &cfg,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn kinks_are_skipped_only_when_asked() {
        // |x| just right of its kink: the stencil at eps straddles it, the one at eps / 2 does not.
        let x = Tensor::from_fn(&[2], |i| if i == 0 { 7e-6 } else { 1.5 });
        let abs = |tape: &mut Tape<f64>, v: &[Var]| {
            let n = tape.scale(v[0], -1.0)?;
            let a = tape.relu(v[0])?;
            let b = tape.relu(n)?;
            let s = tape.add(a, b)?;
            tape.sum_all(s)
        };
        let strict = grad_check(abs, std::slice::from_ref(&x), &GradCheckConfig::default()).unwrap();
        assert!(strict.max_rel_error > 0.2);
        let lenient = grad_check(abs, &[x], &GradCheckConfig { skip_nonsmooth: true, ..Default::default() }).unwrap();
        assert_eq!((lenient.coords_checked, lenient.coords_skipped), (1, 1));
        assert!(lenient.max_rel_error < 1e-9);
    }
}
