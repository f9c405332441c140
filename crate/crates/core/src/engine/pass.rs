use std::borrow::Cow;

use super::{ForwardMode, LayerSlots, NormBuffers, NormKind, ParamVector, Phase};
use crate::data::Batch;
use crate::error::{shape, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub loss: f64,
    pub buffers: NormBuffers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutput {
    /// `d loss / d params`, one entry per parameter.
    pub grad: Vec<f64>,
    pub loss: f64,
    pub logits: Matrix,
    pub buffers: NormBuffers,
}

/// `alpha * psi + (1 - alpha) * psi_init`, returning an endpoint verbatim
/// when `alpha` is exactly 0 or 1.
pub fn interpolate_psi(psi: &[f64], psi_init: &[f64], alpha: f64) -> Vec<f64> {
    psi.iter()
        .zip(psi_init)
        .map(|(&p, &p0)| lerp(p, p0, alpha))
        .collect()
}

#[inline]
fn lerp(p: f64, p0: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        p
    } else if alpha == 0.0 {
        p0
    } else {
        alpha * p + (1.0 - alpha) * p0
    }
}

struct LayerCache {
    input: Vec<f64>,
    /// Normalized pre-activations (before scale and shift).
    xhat: Vec<f64>,
    /// Per-feature (batch norm) or per-row (layer norm) `1 / sqrt(var + eps)`.
    inv_std: Vec<f64>,
    /// Output of the normalization, i.e. the ReLU input.
    pre_relu: Vec<f64>,
}

struct Pass {
    logits: Matrix,
    loss: f64,
    buffers: NormBuffers,
    caches: Vec<LayerCache>,
    last_input: Vec<f64>,
}

fn check_inputs(
    params: &ParamVector,
    buffers: &NormBuffers,
    psi_init: &[f64],
    dim: usize,
    mode: &ForwardMode,
) -> Result<()> {
    mode.validate()?;
    let spec = params.spec();
    if dim != spec.input_dim {
        return shape(format!("input dimension {dim} does not match model input_dim {}", spec.input_dim));
    }
    if !buffers.matches(spec) {
        return shape("normalization buffers do not match the model");
    }
    if mode.aws_alpha.is_some() && psi_init.len() != params.layout().psi_indices().len() {
        return shape(format!(
            "psi_init has {} entries, model has {} normalization parameters",
            psi_init.len(),
            params.layout().psi_indices().len()
        ));
    }
    Ok(())
}

/// Parameter values actually used by the pass.
fn effective<'a>(params: &'a ParamVector, psi_init: &[f64], mode: &ForwardMode) -> Cow<'a, [f64]> {
    match mode.aws_alpha {
        Some(a) if a != 1.0 => {
            let mut v = params.values().to_vec();
            for (k, &i) in params.layout().psi_indices().iter().enumerate() {
                v[i] = lerp(v[i], psi_init[k], a);
            }
            Cow::Owned(v)
        }
        _ => Cow::Borrowed(params.values()),
    }
}

fn linear(input: &[f64], rows: usize, w: &[f64], b: &[f64], slots: &LayerSlots) -> Vec<f64> {
    let (fi, fo) = (slots.fan_in, slots.fan_out);
    let mut out = vec![0.0; rows * fo];
    for r in 0..rows {
        let x = &input[r * fi..(r + 1) * fi];
        let y = &mut out[r * fo..(r + 1) * fo];
        for j in 0..fo {
            let wj = &w[j * fi..(j + 1) * fi];
            let mut acc = b[j];
            for i in 0..fi {
                acc += wj[i] * x[i];
            }
            y[j] = acc;
        }
    }
    out
}

fn ensure_finite(values: &[f64], layer: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            what: what.to_string(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    params: &ParamVector,
    buffers: &NormBuffers,
    psi_init: &[f64],
    inputs: &[f64],
    rows: usize,
    labels: Option<&[usize]>,
    mode: ForwardMode,
    keep_cache: bool,
) -> Result<Pass> {
    let spec = params.spec();
    let theta = effective(params, psi_init, &mode);
    let layers = params.layout().layers();
    let n_hidden = spec.hidden_dims.len();
    let eps = spec.norm_eps;
    let mut new_buffers = buffers.clone();
    let mut caches = Vec::with_capacity(if keep_cache { n_hidden } else { 0 });

    let mut x: Vec<f64> = inputs.to_vec();
    for (l, slots) in layers[..n_hidden].iter().enumerate() {
        let h = slots.fan_out;
        let z = linear(&x, rows, &theta[slots.weight.clone()], &theta[slots.bias.clone()], slots);
        ensure_finite(&z, l, "linear output")?;
        let (xhat, inv_std, y) = match (&slots.norm, spec.norm_kind) {
            (Some((gs, bs)), NormKind::BatchNorm) => {
                let (gamma, beta) = (&theta[gs.clone()], &theta[bs.clone()]);
                let mut xhat = vec![0.0; rows * h];
                let mut inv_std = vec![0.0; h];
                let stats = &mut new_buffers.layers[l];
                for j in 0..h {
                    let (mean, inv) = match mode.phase {
                        Phase::Train => {
                            let mean = (0..rows).map(|r| z[r * h + j]).sum::<f64>() / rows as f64;
                            let var = (0..rows)
                                .map(|r| {
                                    let c = z[r * h + j] - mean;
                                    c * c
                                })
                                .sum::<f64>()
                                / rows as f64;
                            let unbiased = if rows > 1 {
                                var * rows as f64 / (rows - 1) as f64
                            } else {
                                var
                            };
                            let m = spec.bn_momentum;
                            stats.mean[j] = (1.0 - m) * stats.mean[j] + m * mean;
                            stats.var[j] = (1.0 - m) * stats.var[j] + m * unbiased;
                            (mean, 1.0 / (var + eps).sqrt())
                        }
                        Phase::Eval => (stats.mean[j], 1.0 / (stats.var[j] + eps).sqrt()),
                    };
                    inv_std[j] = inv;
                    for r in 0..rows {
                        xhat[r * h + j] = (z[r * h + j] - mean) * inv;
                    }
                }
                let mut y = vec![0.0; rows * h];
                for r in 0..rows {
                    for j in 0..h {
                        y[r * h + j] = gamma[j] * xhat[r * h + j] + beta[j];
                    }
                }
                (xhat, inv_std, y)
            }
            (Some((gs, bs)), NormKind::LayerNorm) => {
                let (gamma, beta) = (&theta[gs.clone()], &theta[bs.clone()]);
                let mut xhat = vec![0.0; rows * h];
                let mut inv_std = vec![0.0; rows];
                let mut y = vec![0.0; rows * h];
                for r in 0..rows {
                    let zr = &z[r * h..(r + 1) * h];
                    let mean = zr.iter().sum::<f64>() / h as f64;
                    let var = zr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for j in 0..h {
                        let xh = (zr[j] - mean) * inv;
                        xhat[r * h + j] = xh;
                        y[r * h + j] = gamma[j] * xh + beta[j];
                    }
                }
                (xhat, inv_std, y)
            }
            _ => (Vec::new(), Vec::new(), z),
        };
        ensure_finite(&y, l, "normalization output")?;
        let act: Vec<f64> = y.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        if keep_cache {
            caches.push(LayerCache {
                input: std::mem::take(&mut x),
                xhat,
                inv_std,
                pre_relu: y,
            });
        }
        x = act;
    }

    let out = &layers[n_hidden];
    let logits = linear(&x, rows, &theta[out.weight.clone()], &theta[out.bias.clone()], out);
    ensure_finite(&logits, n_hidden, "logits")?;
    let classes = out.fan_out;

    let loss = match labels {
        Some(labels) => {
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= classes {
                    return shape(format!("label {y} outside [0, {classes})"));
                }
                let row = &logits[r * classes..(r + 1) * classes];
                total += log_sum_exp(row) - row[y];
            }
            total / rows as f64
        }
        None => 0.0,
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: n_hidden,
            what: "loss".into(),
        });
    }

    Ok(Pass {
        logits: Matrix {
            rows,
            cols: classes,
            data: logits,
        },
        loss,
        buffers: new_buffers,
        caches,
        last_input: x,
    })
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Forward pass returning logits, mean cross-entropy and the (possibly
/// updated) normalization buffers. `psi_init` is only read when
/// `mode.aws_alpha` is set.
pub fn forward(
    params: &ParamVector,
    buffers: &NormBuffers,
    psi_init: &[f64],
    batch: &Batch,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    check_inputs(params, buffers, psi_init, batch.dim(), &mode)?;
    let pass = run(
        params,
        buffers,
        psi_init,
        batch.inputs(),
        batch.size(),
        Some(batch.labels()),
        mode,
        false,
    )?;
    Ok(ForwardOutput {
        logits: pass.logits,
        loss: pass.loss,
        buffers: pass.buffers,
    })
}

/// Eval-phase logits for `rows` unlabeled inputs.
pub fn predict(params: &ParamVector, buffers: &NormBuffers, inputs: &[f64], rows: usize) -> Result<Matrix> {
    let dim = params.spec().input_dim;
    if inputs.len() != rows * dim {
        return shape(format!("{} input values for {rows} rows of dimension {dim}", inputs.len()));
    }
    let mode = ForwardMode::eval();
    check_inputs(params, buffers, &[], dim, &mode)?;
    Ok(run(params, buffers, &[], inputs, rows, None, mode, false)?.logits)
}

/// Gradient of the mean cross-entropy with respect to every parameter.
///
/// Under interpolation the normalization gradients are taken with respect to
/// the stored parameters, i.e. the gradient at the interpolated point scaled
/// by `alpha`.
pub fn backward(
    params: &ParamVector,
    buffers: &NormBuffers,
    psi_init: &[f64],
    batch: &Batch,
    mode: ForwardMode,
) -> Result<BackwardOutput> {
    check_inputs(params, buffers, psi_init, batch.dim(), &mode)?;
    let rows = batch.size();
    let pass = run(
        params,
        buffers,
        psi_init,
        batch.inputs(),
        rows,
        Some(batch.labels()),
        mode,
        true,
    )?;
    let spec = params.spec();
    let theta = effective(params, psi_init, &mode);
    let layers = params.layout().layers();
    let n_hidden = spec.hidden_dims.len();
    let mut grad = vec![0.0; params.len()];

    // softmax - onehot, averaged over the batch
    let classes = pass.logits.cols;
    let mut dz = vec![0.0; rows * classes];
    for (r, &y) in batch.labels().iter().enumerate() {
        let row = pass.logits.row(r);
        let lse = log_sum_exp(row);
        for j in 0..classes {
            let p = (row[j] - lse).exp();
            dz[r * classes + j] = (p - if j == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }

    let mut upstream = linear_backward(&dz, &pass.last_input, rows, &layers[n_hidden], &theta, &mut grad);

    for l in (0..n_hidden).rev() {
        let slots = &layers[l];
        let cache = &pass.caches[l];
        let h = slots.fan_out;
        let mut dy = upstream;
        for (g, &y) in dy.iter_mut().zip(&cache.pre_relu) {
            if y <= 0.0 {
                *g = 0.0;
            }
        }
        let dz = match &slots.norm {
            None => dy,
            Some((gs, bs)) => {
                let gamma = &theta[gs.clone()];
                for j in 0..h {
                    let mut g_scale = 0.0;
                    let mut g_bias = 0.0;
                    for r in 0..rows {
                        g_scale += dy[r * h + j] * cache.xhat[r * h + j];
                        g_bias += dy[r * h + j];
                    }
                    grad[gs.start + j] = g_scale;
                    grad[bs.start + j] = g_bias;
                }
                let mut dxhat = dy;
                for r in 0..rows {
                    for j in 0..h {
                        dxhat[r * h + j] *= gamma[j];
                    }
                }
                norm_backward(spec.norm_kind, mode.phase, &dxhat, &cache.xhat, &cache.inv_std, rows, h)
            }
        };
        upstream = linear_backward(&dz, &cache.input, rows, slots, &theta, &mut grad);
    }

    if let Some(a) = mode.aws_alpha {
        if a != 1.0 {
            for &i in params.layout().psi_indices() {
                grad[i] *= a;
            }
        }
    }

    Ok(BackwardOutput {
        grad,
        loss: pass.loss,
        logits: pass.logits,
        buffers: pass.buffers,
    })
}

fn norm_backward(
    kind: NormKind,
    phase: Phase,
    dxhat: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    rows: usize,
    h: usize,
) -> Vec<f64> {
    let mut dz = vec![0.0; rows * h];
    match (kind, phase) {
        (NormKind::BatchNorm, Phase::Train) => {
            let n = rows as f64;
            for j in 0..h {
                let mut s = 0.0;
                let mut sx = 0.0;
                for r in 0..rows {
                    s += dxhat[r * h + j];
                    sx += dxhat[r * h + j] * xhat[r * h + j];
                }
                let k = inv_std[j] / n;
                for r in 0..rows {
                    dz[r * h + j] = k * (n * dxhat[r * h + j] - s - xhat[r * h + j] * sx);
                }
            }
        }
        (NormKind::BatchNorm, Phase::Eval) => {
            for r in 0..rows {
                for j in 0..h {
                    dz[r * h + j] = dxhat[r * h + j] * inv_std[j];
                }
            }
        }
        (NormKind::LayerNorm, _) => {
            let n = h as f64;
            for r in 0..rows {
                let d = &dxhat[r * h..(r + 1) * h];
                let x = &xhat[r * h..(r + 1) * h];
                let s: f64 = d.iter().sum();
                let sx: f64 = d.iter().zip(x).map(|(a, b)| a * b).sum();
                let k = inv_std[r] / n;
                for j in 0..h {
                    dz[r * h + j] = k * (n * d[j] - s - x[j] * sx);
                }
            }
        }
        (NormKind::None, _) => dz.copy_from_slice(dxhat),
    }
    dz
}

/// Accumulates weight/bias gradients into `grad`, returns the input gradient.
fn linear_backward(
    dz: &[f64],
    input: &[f64],
    rows: usize,
    slots: &LayerSlots,
    theta: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let (fi, fo) = (slots.fan_in, slots.fan_out);
    let w = &theta[slots.weight.clone()];
    let mut dx = vec![0.0; rows * fi];
    let (gw_start, gb_start) = (slots.weight.start, slots.bias.start);
    for r in 0..rows {
        let x = &input[r * fi..(r + 1) * fi];
        let dxr = &mut dx[r * fi..(r + 1) * fi];
        for j in 0..fo {
            let g = dz[r * fo + j];
            if g == 0.0 {
                continue;
            }
            grad[gb_start + j] += g;
            let gw = &mut grad[gw_start + j * fi..gw_start + (j + 1) * fi];
            let wj = &w[j * fi..(j + 1) * fi];
            for i in 0..fi {
                gw[i] += g * x[i];
                dxr[i] += g * wj[i];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{build, ModelSpec};

    fn setup(norm: NormKind) -> (ParamVector, NormBuffers, Vec<f64>, Batch) {
        let spec = ModelSpec::new(3, &[5, 4], 3, norm);
        let (mut p, b) = build(&spec, 11).unwrap();
        let psi_init = p.psi();
        // move psi away from its initialization
        let shifted: Vec<f64> = psi_init.iter().enumerate().map(|(k, v)| v + 0.1 * (k as f64 % 3.0) - 0.05).collect();
        p.set_psi(&shifted).unwrap();
        let batch = super::super::probe_batch(3, 3, 6, 5);
        (p, b, psi_init, batch)
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn interpolation_example() {
        let out = interpolate_psi(&[2.0, -0.4], &[1.0, 0.0], 0.5);
        assert_eq!(out, vec![1.5, -0.2]);
    }

    #[test]
    fn alpha_one_matches_plain_forward() {
        for norm in [NormKind::BatchNorm, NormKind::LayerNorm] {
            let (p, b, psi0, batch) = setup(norm);
            let plain = forward(&p, &b, &psi0, &batch, ForwardMode::train()).unwrap();
            let interp = forward(&p, &b, &psi0, &batch, ForwardMode::interpolated(1.0)).unwrap();
            assert_eq!(bits(&plain.logits.data), bits(&interp.logits.data));
            assert_eq!(plain.loss.to_bits(), interp.loss.to_bits());
        }
    }

    #[test]
    fn alpha_zero_matches_init_psi() {
        let (p, b, psi0, batch) = setup(NormKind::BatchNorm);
        let mut replaced = p.clone();
        replaced.set_psi(&psi0).unwrap();
        let a = forward(&p, &b, &psi0, &batch, ForwardMode::interpolated(0.0)).unwrap();
        let r = forward(&replaced, &b, &psi0, &batch, ForwardMode::train()).unwrap();
        assert_eq!(bits(&a.logits.data), bits(&r.logits.data));
        let g = backward(&p, &b, &psi0, &batch, ForwardMode::interpolated(0.0)).unwrap();
        assert!(p.layout().psi_indices().iter().all(|&i| g.grad[i] == 0.0));
    }

    #[test]
    fn half_alpha_halves_psi_gradient() {
        let (p, b, psi0, batch) = setup(NormKind::LayerNorm);
        let mut at_point = p.clone();
        at_point.set_psi(&interpolate_psi(&p.psi(), &psi0, 0.5)).unwrap();
        let interp = backward(&p, &b, &psi0, &batch, ForwardMode::interpolated(0.5)).unwrap();
        let plain = backward(&at_point, &b, &psi0, &batch, ForwardMode::train()).unwrap();
        for &i in p.layout().psi_indices() {
            assert_eq!(interp.grad[i], 0.5 * plain.grad[i]);
        }
        for &i in p.layout().phi_indices() {
            assert_eq!(interp.grad[i], plain.grad[i]);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_features() {
        let mut spec = ModelSpec::new(3, &[6], 2, NormKind::BatchNorm);
        spec.norm_eps = 1e-14;
        let (p, b) = build(&spec, 5).unwrap();
        let batch = super::super::probe_batch(3, 2, 16, 9);
        let pass = run(&p, &b, &[], batch.inputs(), 16, Some(batch.labels()), ForwardMode::train(), true).unwrap();
        let xhat = &pass.caches[0].xhat;
        for j in 0..6 {
            let col: Vec<f64> = (0..16).map(|r| xhat[r * 6 + j]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-8, "var {var}");
        }
    }

    #[test]
    fn eval_phase_leaves_buffers_alone() {
        let (p, b, psi0, batch) = setup(NormKind::BatchNorm);
        let out = forward(&p, &b, &psi0, &batch, ForwardMode::eval()).unwrap();
        assert_eq!(out.buffers, b);
        let out = forward(&p, &b, &psi0, &batch, ForwardMode::train()).unwrap();
        assert_ne!(out.buffers, b);
        assert!(out.buffers.layers.iter().all(|l| l.var.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn errors_for_bad_inputs() {
        let (p, b, psi0, batch) = setup(NormKind::BatchNorm);
        let mode = ForwardMode {
            phase: Phase::Eval,
            aws_alpha: Some(0.5),
        };
        assert!(matches!(forward(&p, &b, &psi0, &batch, mode), Err(Error::Config(_))));
        assert!(matches!(
            forward(&p, &b, &psi0[1..], &batch, ForwardMode::interpolated(0.5)),
            Err(Error::Shape(_))
        ));
        let wrong = super::super::probe_batch(2, 3, 4, 0);
        assert!(matches!(forward(&p, &b, &psi0, &wrong, ForwardMode::train()), Err(Error::Shape(_))));

        let mut bad = p.clone();
        bad.values_mut()[0] = f64::NAN;
        match forward(&bad, &b, &psi0, &batch, ForwardMode::train()) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_loss_and_gradients() {
        let (p, b, psi0, batch) = setup(NormKind::BatchNorm);
        let g1 = backward(&p, &b, &psi0, &batch, ForwardMode::interpolated(0.3)).unwrap();
        let g2 = backward(&p, &b, &psi0, &batch, ForwardMode::interpolated(0.3)).unwrap();
        assert_eq!(bits(&g1.grad), bits(&g2.grad));
        assert_eq!(g1.loss.to_bits(), g2.loss.to_bits());
    }
}
