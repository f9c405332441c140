//! Central finite-difference oracle for the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{backward, build, forward, ForwardMode, ModelSpec, NormBuffers, ParamVector, Phase, Role};
use crate::data::Batch;
use crate::error::{config, Result};

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-6;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively; central differences at step 1e-6 carry up to ~1e-9 absolute
/// roundoff once batch-norm sums cancel.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Standard-normal inputs with uniformly drawn labels.
pub fn probe_batch(dim: usize, classes: usize, size: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<f64> = (0..dim * size).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<usize> = (0..size).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(dim, inputs, labels).expect("probe batch is well formed")
}

/// Central differences of the loss with respect to every parameter.
pub fn finite_difference_grad(
    params: &ParamVector,
    buffers: &NormBuffers,
    psi_init: &[f64],
    batch: &Batch,
    mode: ForwardMode,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = forward(&probe, buffers, psi_init, batch, mode)?.loss;
        probe.values_mut()[i] = orig - step;
        let minus = forward(&probe, buffers, psi_init, batch, mode)?.loss;
        probe.values_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Worst relative error between analytic and finite-difference gradients
/// over every parameter of a randomly perturbed network built from `spec`.
///
/// Biases and normalization parameters are moved off their initial values,
/// `psi_init` is the fresh initialization, and in the eval phase the
/// running statistics are randomized so that every code path is exercised.
pub fn grad_check(spec: &ModelSpec, seed: u64, mode: ForwardMode) -> Result<f64> {
    let (mut params, mut buffers) = build(spec, seed)?;
    if params.len() > 2000 {
        return config(format!("grad_check is limited to 2000 parameters, model has {}", params.len()));
    }
    let psi_init = params.psi();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let roles = params.layout().roles();
    for (v, role) in params.values_mut().iter_mut().zip(roles) {
        match role {
            Role::Weight => {}
            Role::Bias => *v = rng.random_range(-0.2..0.2),
            Role::NormScale => *v = rng.random_range(0.5..1.5),
            Role::NormBias => *v = rng.random_range(-0.3..0.3),
        }
    }
    if mode.phase == Phase::Eval {
        for layer in &mut buffers.layers {
            for m in &mut layer.mean {
                *m = rng.random_range(-0.5..0.5);
            }
            for v in &mut layer.var {
                *v = rng.random_range(0.5..2.0);
            }
        }
    }
    let batch = probe_batch(spec.input_dim, spec.output_dim, 8, seed.wrapping_add(1));
    let analytic = backward(&params, &buffers, &psi_init, &batch, mode)?.grad;
    let numeric = finite_difference_grad(&params, &buffers, &psi_init, &batch, mode, FD_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NormKind;

    #[test]
    fn small_specs_pass_the_oracle() {
        let spec = ModelSpec::new(2, &[4], 2, NormKind::BatchNorm);
        assert!(grad_check(&spec, 7, ForwardMode::train()).unwrap() <= 1e-5);
        let spec = ModelSpec::new(2, &[4], 2, NormKind::LayerNorm);
        assert!(grad_check(&spec, 7, ForwardMode::train()).unwrap() <= 1e-5);
        let spec = ModelSpec::new(2, &[4], 2, NormKind::BatchNorm);
        assert!(grad_check(&spec, 7, ForwardMode::interpolated(0.3)).unwrap() <= 1e-5);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-8);
    }
}
