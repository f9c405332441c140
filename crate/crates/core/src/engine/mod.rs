//! Dense MLP engine: parameter layout, initialization, forward and backward
//! passes with optional interpolation of normalization parameters.
//!
//! A network is `[Linear -> Norm -> ReLU] * H -> Linear`. All parameters live
//! in one flat [`ParamVector`]; the [`Layout`] records which contiguous
//! segment belongs to which layer and role, and partitions indices into
//! `phi` (linear weights and biases) and `psi` (normalization scale and
//! bias).

mod gradcheck;
mod pass;

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};

pub use gradcheck::{finite_difference_grad, grad_check, probe_batch, relative_error};
pub use pass::{backward, forward, interpolate_psi, predict, BackwardOutput, ForwardOutput, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
    None,
}

/// Architecture description; everything else is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub norm_kind: NormKind,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize, norm_kind: NormKind) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            norm_kind,
            norm_eps: default_norm_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return config("input_dim must be positive");
        }
        if self.output_dim == 0 {
            return config("output_dim must be positive");
        }
        if self.hidden_dims.is_empty() {
            return config("at least one hidden layer is required");
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&h| h == 0) {
            return config(format!("hidden_dims[{pos}] must be positive"));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return config(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.bn_momentum.is_finite() && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return config(format!("bn_momentum must be in (0, 1], got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub fn has_norm(&self) -> bool {
        self.norm_kind != NormKind::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormBias,
}

impl Role {
    pub fn is_norm(self) -> bool {
        matches!(self, Role::NormScale | Role::NormBias)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: usize,
    pub layer: usize,
    pub role: Role,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Parameter slots of one linear layer (plus its normalization, if any).
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub norm: Option<(Range<usize>, Range<usize>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    spec: ModelSpec,
    segments: Vec<Segment>,
    layers: Vec<LayerSlots>,
    phi: Vec<usize>,
    psi: Vec<usize>,
    len: usize,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut segments = Vec::new();
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |layer: usize, role: Role, len: usize, segments: &mut Vec<Segment>| {
            let seg = Segment {
                id: segments.len(),
                layer,
                role,
                offset,
                len,
            };
            offset += len;
            let r = seg.range();
            segments.push(seg);
            r
        };

        let mut fan_in = spec.input_dim;
        let widths = spec.hidden_dims.iter().copied().chain(std::iter::once(spec.output_dim));
        let n_hidden = spec.hidden_dims.len();
        for (layer, fan_out) in widths.enumerate() {
            let weight = push(layer, Role::Weight, fan_in * fan_out, &mut segments);
            let bias = push(layer, Role::Bias, fan_out, &mut segments);
            let norm = if layer < n_hidden && spec.has_norm() {
                let scale = push(layer, Role::NormScale, fan_out, &mut segments);
                let nbias = push(layer, Role::NormBias, fan_out, &mut segments);
                Some((scale, nbias))
            } else {
                None
            };
            layers.push(LayerSlots {
                fan_in,
                fan_out,
                weight,
                bias,
                norm,
            });
            fan_in = fan_out;
        }

        let len = segments.last().map_or(0, |s| s.offset + s.len);
        let mut phi = Vec::new();
        let mut psi = Vec::new();
        for seg in &segments {
            let target = if seg.role.is_norm() { &mut psi } else { &mut phi };
            target.extend(seg.range());
        }
        Ok(Self {
            spec: spec.clone(),
            segments,
            layers,
            phi,
            psi,
            len,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub(crate) fn layers(&self) -> &[LayerSlots] {
        &self.layers
    }

    /// Indices of non-normalization parameters, ascending.
    pub fn phi_indices(&self) -> &[usize] {
        &self.phi
    }

    /// Indices of normalization parameters, ascending. Interpolation anchors
    /// (`psi_init`) are ordered the same way.
    pub fn psi_indices(&self) -> &[usize] {
        &self.psi
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Role of every parameter index.
    pub fn roles(&self) -> Vec<Role> {
        let mut roles = Vec::with_capacity(self.len);
        for seg in &self.segments {
            roles.extend(std::iter::repeat_n(seg.role, seg.len));
        }
        roles
    }

    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.role == role)
            .flat_map(|s| s.range())
            .collect()
    }
}

/// Flat parameter vector together with its (shared) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return shape(format!(
                "parameter vector has {} entries, layout expects {}",
                values.len(),
                layout.len()
            ));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        self.layout.spec()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(Arc::clone(&self.layout), values)
    }

    /// The normalization parameters, in `psi_indices` order.
    pub fn psi(&self) -> Vec<f64> {
        self.layout.psi.iter().map(|&i| self.values[i]).collect()
    }

    pub fn set_psi(&mut self, psi: &[f64]) -> Result<()> {
        if psi.len() != self.layout.psi.len() {
            return shape(format!(
                "psi has {} entries, layout expects {}",
                psi.len(),
                self.layout.psi.len()
            ));
        }
        for (&i, &v) in self.layout.psi.iter().zip(psi) {
            self.values[i] = v;
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            shape("parameter vectors have different layouts")
        }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Running statistics for every batch-norm layer; empty for other norm kinds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormBuffers {
    pub layers: Vec<BnStats>,
}

impl NormBuffers {
    /// Fresh buffers (mean 0, variance 1) for the given spec.
    pub fn fresh(spec: &ModelSpec) -> Self {
        if spec.norm_kind != NormKind::BatchNorm {
            return Self::default();
        }
        let layers = spec
            .hidden_dims
            .iter()
            .map(|&h| BnStats {
                mean: vec![0.0; h],
                var: vec![1.0; h],
            })
            .collect();
        Self { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total number of stored values (means and variances).
    pub fn value_count(&self) -> usize {
        self.layers.iter().map(|l| l.mean.len() + l.var.len()).sum()
    }

    /// Means then variances, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.value_count());
        for l in &self.layers {
            out.extend_from_slice(&l.mean);
            out.extend_from_slice(&l.var);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) given the owning spec.
    pub fn unflatten(spec: &ModelSpec, values: &[f64]) -> Result<Self> {
        let mut out = Self::fresh(spec);
        if values.len() != out.value_count() {
            return shape(format!(
                "buffer payload has {} values, spec expects {}",
                values.len(),
                out.value_count()
            ));
        }
        let mut pos = 0;
        for l in &mut out.layers {
            let h = l.mean.len();
            l.mean.copy_from_slice(&values[pos..pos + h]);
            l.var.copy_from_slice(&values[pos + h..pos + 2 * h]);
            pos += 2 * h;
        }
        Ok(out)
    }

    pub(crate) fn matches(&self, spec: &ModelSpec) -> bool {
        match spec.norm_kind {
            NormKind::BatchNorm => {
                self.layers.len() == spec.hidden_dims.len()
                    && self
                        .layers
                        .iter()
                        .zip(&spec.hidden_dims)
                        .all(|(l, &h)| l.mean.len() == h && l.var.len() == h)
            }
            _ => self.layers.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// How a forward pass runs. `aws_alpha = Some(a)` replaces every
/// normalization parameter `p` with `a * p + (1 - a) * p_init`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMode {
    pub phase: Phase,
    pub aws_alpha: Option<f64>,
}

impl ForwardMode {
    pub fn train() -> Self {
        Self {
            phase: Phase::Train,
            aws_alpha: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            phase: Phase::Eval,
            aws_alpha: None,
        }
    }

    pub fn interpolated(alpha: f64) -> Self {
        Self {
            phase: Phase::Train,
            aws_alpha: Some(alpha),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if let Some(a) = self.aws_alpha {
            if !(0.0..=1.0).contains(&a) {
                return config(format!("aws_alpha must lie in [0, 1], got {a}"));
            }
            if self.phase != Phase::Train {
                return config("aws_alpha is only valid in the train phase");
            }
        }
        Ok(())
    }
}

/// Builds a freshly initialized network.
///
/// Weights are drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)` for hidden
/// layers and `b = sqrt(3 / fan_in)` for the output layer; biases start at
/// 0, normalization scales at 1 and normalization biases at 0.
pub fn build(spec: &ModelSpec, init_seed: u64) -> Result<(ParamVector, NormBuffers)> {
    let layout = Arc::new(Layout::new(spec)?);
    let mut values = vec![0.0; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let n_layers = layout.layers().len();
    for (l, slots) in layout.layers().iter().enumerate() {
        let gain = if l + 1 == n_layers { 3.0 } else { 6.0 };
        let bound = (gain / slots.fan_in as f64).sqrt();
        for v in &mut values[slots.weight.clone()] {
            *v = rng.random_range(-bound..bound);
        }
        if let Some((scale, _)) = &slots.norm {
            values[scale.clone()].fill(1.0);
        }
    }
    let buffers = NormBuffers::fresh(spec);
    Ok((ParamVector::new(layout, values)?, buffers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_for_small_batch_norm_net() {
        let spec = ModelSpec::new(2, &[4], 2, NormKind::BatchNorm);
        let (p, buffers) = build(&spec, 7).unwrap();
        assert_eq!(p.len(), 2 * 4 + 4 + 4 + 4 + 4 * 2 + 2);
        assert_eq!(p.len(), 30);
        assert_eq!(p.layout().psi_indices().len(), 8);
        assert_eq!(p.layout().phi_indices().len(), 22);
        assert_eq!(buffers.layers.len(), 1);
        assert!(buffers.layers[0].var.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn phi_psi_partition_the_index_range() {
        let spec = ModelSpec::new(3, &[5, 4], 3, NormKind::LayerNorm);
        let layout = Layout::new(&spec).unwrap();
        let mut all: Vec<usize> = layout.phi_indices().to_vec();
        all.extend_from_slice(layout.psi_indices());
        all.sort_unstable();
        assert_eq!(all, (0..layout.len()).collect::<Vec<_>>());
        let mut expected = 0;
        for seg in layout.segments() {
            assert_eq!(seg.offset, expected);
            expected += seg.len;
        }
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let spec = ModelSpec::new(2, &[4], 2, NormKind::BatchNorm);
        let (a, _) = build(&spec, 7).unwrap();
        let (b, _) = build(&spec, 7).unwrap();
        let (c, _) = build(&spec, 8).unwrap();
        let bits = |p: &ParamVector| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn fresh_init_values() {
        let spec = ModelSpec::new(2, &[4, 3], 2, NormKind::LayerNorm);
        let (p, buffers) = build(&spec, 1).unwrap();
        assert!(buffers.is_empty());
        for seg in p.layout().segments() {
            let vals = &p.values()[seg.range()];
            match seg.role {
                Role::Bias | Role::NormBias => assert!(vals.iter().all(|&v| v == 0.0)),
                Role::NormScale => assert!(vals.iter().all(|&v| v == 1.0)),
                Role::Weight => assert!(vals.iter().all(|&v| v != 0.0)),
            }
        }
    }

    #[test]
    fn no_norm_has_empty_psi() {
        let spec = ModelSpec::new(2, &[4], 2, NormKind::None);
        let (p, _) = build(&spec, 7).unwrap();
        assert!(p.layout().psi_indices().is_empty());
        assert_eq!(p.len(), 2 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            build(&ModelSpec::new(2, &[], 2, NormKind::None), 0),
            Err(crate::Error::Config(_))
        ));
        assert!(build(&ModelSpec::new(0, &[3], 2, NormKind::None), 0).is_err());
        assert!(build(&ModelSpec::new(2, &[3, 0], 2, NormKind::None), 0).is_err());
        let mut spec = ModelSpec::new(2, &[3], 2, NormKind::BatchNorm);
        spec.bn_momentum = 0.0;
        assert!(build(&spec, 0).is_err());
    }

    #[test]
    fn buffer_flatten_round_trip() {
        let spec = ModelSpec::new(2, &[3, 2], 2, NormKind::BatchNorm);
        let mut b = NormBuffers::fresh(&spec);
        b.layers[1].mean[1] = 0.25;
        b.layers[0].var[2] = 3.5;
        let back = NormBuffers::unflatten(&spec, &b.flatten()).unwrap();
        assert_eq!(back, b);
    }
}
