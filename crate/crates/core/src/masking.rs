//! Binary and signed masks, magnitude pruning, and sign transfer onto fresh
//! initializations.

use serde::{Deserialize, Serialize};

use crate::engine::{Layout, ParamVector, Role};
use crate::error::{config, shape, Error, Result};

/// Keep/prune flag per parameter. Entries that are not prunable are always
/// kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Vec<bool>,
    prunable: Vec<bool>,
}

impl BinaryMask {
    /// All-ones mask; linear-layer weights are the only prunable entries.
    pub fn dense(layout: &Layout) -> Self {
        let prunable: Vec<bool> = layout.roles().into_iter().map(|r| r == Role::Weight).collect();
        Self {
            bits: vec![true; prunable.len()],
            prunable,
        }
    }

    pub fn from_parts(bits: Vec<bool>, prunable: Vec<bool>) -> Result<Self> {
        if bits.len() != prunable.len() {
            return shape(format!("mask has {} bits but {} prunable flags", bits.len(), prunable.len()));
        }
        if let Some(i) = (0..bits.len()).find(|&i| !prunable[i] && !bits[i]) {
            return config(format!("mask entry {i} is not prunable but is set to 0"));
        }
        Ok(Self { bits, prunable })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn prunable(&self) -> &[bool] {
        &self.prunable
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable.iter().filter(|&&p| p).count()
    }

    pub fn surviving_prunable(&self) -> usize {
        self.bits.iter().zip(&self.prunable).filter(|(&b, &p)| b && p).count()
    }

    /// Zeroes every masked-out entry of `values`.
    pub fn apply(&self, values: &mut [f64]) {
        for (v, &keep) in values.iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }

    pub fn applied(&self, params: &ParamVector) -> Result<ParamVector> {
        self.check_len(params.len())?;
        let mut out = params.clone();
        self.apply(out.values_mut());
        Ok(out)
    }

    /// Whether every kept entry of `self` is also kept by `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub(crate) fn check_len(&self, d: usize) -> Result<()> {
        if self.len() == d {
            Ok(())
        } else {
            shape(format!("mask has {} entries, parameters have {d}", self.len()))
        }
    }
}

/// Surviving prunable entries divided by all prunable entries.
pub fn remaining_ratio(mask: &BinaryMask) -> Result<f64> {
    let total = mask.prunable_count();
    if total == 0 {
        return config("mask has no prunable entries");
    }
    Ok(mask.surviving_prunable() as f64 / total as f64)
}

/// Whether magnitudes are ranked across all layers at once or per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

/// One global magnitude-pruning step.
///
/// Of the `|S|` surviving prunable entries, the `round(rate * |S|)` with the
/// smallest `|params|` are dropped; ties go to the lower index first.
pub fn prune_step(params: &ParamVector, mask: &BinaryMask, rate: f64) -> Result<BinaryMask> {
    prune_step_scoped(params, mask, rate, PruneScope::Global)
}

pub fn prune_step_scoped(
    params: &ParamVector,
    mask: &BinaryMask,
    rate: f64,
    scope: PruneScope,
) -> Result<BinaryMask> {
    mask.check_len(params.len())?;
    match scope {
        PruneScope::Global => prune_values(params.values(), mask, rate),
        PruneScope::PerLayer => {
            check_rate(rate)?;
            let mut out = mask.clone();
            for seg in params.layout().segments().iter().filter(|s| s.role == Role::Weight) {
                let candidates: Vec<usize> = seg.range().filter(|&i| mask.prunable[i] && mask.bits[i]).collect();
                drop_smallest(params.values(), &mut out.bits, candidates, rate);
            }
            Ok(out)
        }
    }
}

/// Global pruning on a raw value slice aligned with `mask`.
pub fn prune_values(values: &[f64], mask: &BinaryMask, rate: f64) -> Result<BinaryMask> {
    check_rate(rate)?;
    mask.check_len(values.len())?;
    let candidates: Vec<usize> = (0..values.len()).filter(|&i| mask.prunable[i] && mask.bits[i]).collect();
    let mut out = mask.clone();
    drop_smallest(values, &mut out.bits, candidates, rate);
    Ok(out)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate.is_finite() && (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        config(format!("prune rate must lie in [0, 1), got {rate}"))
    }
}

fn drop_smallest(values: &[f64], bits: &mut [bool], mut candidates: Vec<usize>, rate: f64) {
    let k = (rate * candidates.len() as f64).round() as usize;
    if k == 0 {
        return;
    }
    let key = |&i: &usize| (values[i].abs(), i);
    candidates.select_nth_unstable_by(k - 1, |a, b| {
        let (ma, ia) = key(a);
        let (mb, ib) = key(b);
        ma.total_cmp(&mb).then(ia.cmp(&ib))
    });
    for &i in &candidates[..k] {
        bits[i] = false;
    }
}

/// Per-parameter sign in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMask {
    signs: Vec<i8>,
}

impl SignedMask {
    pub fn from_signs(signs: Vec<i8>) -> Result<Self> {
        if let Some(i) = signs.iter().position(|s| !(-1..=1).contains(s)) {
            return config(format!("sign entry {i} is {}, expected -1, 0 or 1", signs[i]));
        }
        Ok(Self { signs })
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Binary mask keeping exactly the nonzero-sign prunable entries.
    /// Non-prunable entries stay kept regardless of their sign.
    pub fn support_mask(&self, template: &BinaryMask) -> Result<BinaryMask> {
        template.check_len(self.len())?;
        let bits = self
            .signs
            .iter()
            .zip(template.prunable())
            .map(|(&s, &p)| !p || s != 0)
            .collect();
        BinaryMask::from_parts(bits, template.prunable().to_vec())
    }
}

/// `sign_0`: +1 for positive, -1 for negative, 0 for exactly zero.
pub fn sign0(values: &[f64]) -> Result<SignedMask> {
    let mut signs = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteEntry { index });
        }
        signs.push(if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        });
    }
    Ok(SignedMask { signs })
}

/// How a start point for final training is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Trained subnetwork: `theta_sub * mask`.
    Subnetwork,
    /// Fresh values under the binary mask: `theta_init * mask`.
    MaskOnly,
    /// Fresh magnitudes, transferred signs: `|theta_init| * signs`.
    SignedInit,
    /// Signed transfer on linear parameters, trained normalization kept.
    SignedKeepNorm,
    /// As `SignedInit` after setting every fresh normalization bias to `c`.
    SignedInitBiasConst(f64),
}

impl TransferMode {
    pub fn uses_signs(&self) -> bool {
        !matches!(self, TransferMode::Subnetwork | TransferMode::MaskOnly)
    }

    pub fn name(&self) -> String {
        match self {
            TransferMode::Subnetwork => "subnetwork".into(),
            TransferMode::MaskOnly => "mask_only".into(),
            TransferMode::SignedInit => "signed_init".into(),
            TransferMode::SignedKeepNorm => "signed_keep_norm".into(),
            TransferMode::SignedInitBiasConst(c) => format!("signed_init_bias_const({c})"),
        }
    }
}

pub fn transfer(
    theta_init: &ParamVector,
    theta_sub: &ParamVector,
    mask: &BinaryMask,
    signs: &SignedMask,
    mode: TransferMode,
) -> Result<ParamVector> {
    theta_init.check_same_layout(theta_sub)?;
    let d = theta_init.len();
    mask.check_len(d)?;
    if signs.len() != d {
        return shape(format!("signed mask has {} entries, parameters have {d}", signs.len()));
    }
    let layout = theta_init.layout();
    let signed = |init: &[f64]| -> Vec<f64> {
        init.iter().zip(&signs.signs).map(|(&v, &s)| v.abs() * f64::from(s)).collect()
    };
    let values = match mode {
        TransferMode::Subnetwork => return mask.applied(theta_sub),
        TransferMode::MaskOnly => return mask.applied(theta_init),
        TransferMode::SignedInit => signed(theta_init.values()),
        TransferMode::SignedKeepNorm => {
            let mut v = signed(theta_init.values());
            for &i in layout.psi_indices() {
                v[i] = theta_sub.values()[i];
            }
            v
        }
        TransferMode::SignedInitBiasConst(c) => {
            if !c.is_finite() {
                return config(format!("normalization bias constant must be finite, got {c}"));
            }
            let mut init = theta_init.values().to_vec();
            for i in layout.indices_with_role(Role::NormBias) {
                init[i] = c;
            }
            signed(&init)
        }
    };
    theta_init.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{build, ModelSpec, NormKind};

    fn flat_mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_parts(bits.iter().map(|&b| b == 1).collect(), vec![true; bits.len()]).unwrap()
    }

    fn bits(m: &BinaryMask) -> Vec<u8> {
        m.bits().iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn sign0_examples() {
        assert_eq!(sign0(&[2.5, -0.3, 0.0]).unwrap().signs(), &[1, -1, 0]);
        assert!(sign0(&[0.3, 2.0, 0.0]).unwrap().signs().iter().all(|&s| s >= 0));
        assert_eq!(sign0(&[1.0, f64::NAN]), Err(Error::NonFiniteEntry { index: 1 }));
        assert_eq!(sign0(&[-0.0]).unwrap().signs(), &[0]);
    }

    #[test]
    fn prune_examples() {
        let m = prune_values(&[0.1, -0.5, 0.05, 0.9, -0.2], &flat_mask(&[1, 1, 1, 1, 1]), 0.2).unwrap();
        assert_eq!(bits(&m), vec![1, 1, 0, 1, 1]);
        let m = prune_values(&[0.1, 0.0, 0.05, 0.9, -0.2], &flat_mask(&[1, 0, 1, 1, 1]), 0.25).unwrap();
        assert_eq!(bits(&m), vec![1, 0, 0, 1, 1]);
        let start = flat_mask(&[1, 0, 1, 1, 1]);
        assert_eq!(prune_values(&[3.0, 0.0, 1.0, 2.0, 4.0], &start, 0.0).unwrap(), start);
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let m = prune_values(&[0.5, -0.5, 0.5, 0.5], &flat_mask(&[1, 1, 1, 1]), 0.5).unwrap();
        assert_eq!(bits(&m), vec![0, 0, 1, 1]);
    }

    #[test]
    fn bad_rates_are_rejected() {
        let m = flat_mask(&[1, 1]);
        for rate in [-0.1, 1.0, f64::NAN] {
            assert!(matches!(prune_values(&[1.0, 2.0], &m, rate), Err(Error::Config(_))));
        }
    }

    #[test]
    fn non_prunable_entries_survive() {
        let spec = ModelSpec::new(2, &[4], 2, NormKind::BatchNorm);
        let (p, _) = build(&spec, 3).unwrap();
        let mut m = BinaryMask::dense(p.layout());
        for _ in 0..5 {
            m = prune_step(&p, &m, 0.5).unwrap();
        }
        for (i, &pr) in m.prunable().iter().enumerate() {
            if !pr {
                assert!(m.bits()[i]);
            }
        }
        assert_eq!(m.prunable_count(), 2 * 4 + 4 * 2);
    }

    #[test]
    fn per_layer_scope_prunes_each_layer() {
        let spec = ModelSpec::new(4, &[5], 3, NormKind::None);
        let (p, _) = build(&spec, 3).unwrap();
        let m = prune_step_scoped(&p, &BinaryMask::dense(p.layout()), 0.2, PruneScope::PerLayer).unwrap();
        // round(0.2 * 20) = 4 and round(0.2 * 15) = 3
        let w0: usize = (0..20).filter(|&i| !m.bits()[i]).count();
        let w1: usize = (25..40).filter(|&i| !m.bits()[i]).count();
        assert_eq!((w0, w1), (4, 3));
    }

    #[test]
    fn remaining_ratio_cases() {
        assert_eq!(remaining_ratio(&flat_mask(&[1, 1, 1])).unwrap(), 1.0);
        let none = BinaryMask::from_parts(vec![true; 3], vec![false; 3]).unwrap();
        assert!(matches!(remaining_ratio(&none), Err(Error::Config(_))));
        let values: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 + 1.0).collect();
        let mut m = BinaryMask::from_parts(vec![true; 1000], vec![true; 1000]).unwrap();
        for _ in 0..3 {
            m = prune_values(&values, &m, 0.2).unwrap();
        }
        assert!((remaining_ratio(&m).unwrap() - 0.512).abs() < 1e-12);
    }

    #[test]
    fn from_parts_rejects_pruned_fixed_entries() {
        assert!(BinaryMask::from_parts(vec![false], vec![false]).is_err());
        assert!(BinaryMask::from_parts(vec![true], vec![true, false]).is_err());
    }

    fn tiny() -> (ParamVector, ParamVector) {
        let spec = ModelSpec::new(1, &[1], 1, NormKind::None);
        let (p, _) = build(&spec, 0).unwrap();
        (p.with_values(vec![0.7, -0.2, 0.4, 0.0]).unwrap(), p.with_values(vec![1.0, 1.0, 1.0, 1.0]).unwrap())
    }

    #[test]
    fn signed_init_example() {
        let (init, sub) = tiny();
        let signs = SignedMask::from_signs(vec![-1, 1, 0, 0]).unwrap();
        let mask = BinaryMask::dense(init.layout());
        let out = transfer(&init, &sub, &mask, &signs, TransferMode::SignedInit).unwrap();
        assert_eq!(&out.values()[..3], &[-0.7, 0.2, 0.0]);
        let own = sign0(init.values()).unwrap();
        let same = transfer(&init, &sub, &mask, &own, TransferMode::SignedInit).unwrap();
        assert_eq!(same.values(), init.values());
    }

    #[test]
    fn signed_transfer_of_norm_params_is_vacuous() {
        let spec = ModelSpec::new(2, &[3, 3], 2, NormKind::BatchNorm);
        let (fresh, _) = build(&spec, 1).unwrap();
        let (mut trained, _) = build(&spec, 2).unwrap();
        let psi: Vec<f64> = (0..trained.psi().len()).map(|k| 0.3 + 0.1 * k as f64 - if k % 2 == 0 { 0.0 } else { 0.9 }).collect();
        trained.set_psi(&psi).unwrap();
        let layout = trained.layout().clone();
        for i in layout.indices_with_role(Role::NormScale) {
            trained.values_mut()[i] = trained.values()[i].abs() + 0.5;
        }
        let signs = sign0(trained.values()).unwrap();
        let mask = BinaryMask::dense(&layout);
        let out = transfer(&fresh, &trained, &mask, &signs, TransferMode::SignedInit).unwrap();
        assert_eq!(out.psi(), fresh.psi());

        let keep = transfer(&fresh, &trained, &mask, &signs, TransferMode::SignedKeepNorm).unwrap();
        assert_eq!(keep.psi(), trained.psi());

        let c = transfer(&fresh, &trained, &mask, &signs, TransferMode::SignedInitBiasConst(0.1)).unwrap();
        for i in layout.indices_with_role(Role::NormBias) {
            let v = c.values()[i];
            assert_eq!(v, 0.1 * f64::from(signs.signs()[i]));
        }
        for i in layout.indices_with_role(Role::NormScale) {
            assert_eq!(c.values()[i], 1.0);
        }
    }

    #[test]
    fn mask_modes_and_errors() {
        let (init, sub) = tiny();
        let mask = BinaryMask::from_parts(vec![false, true, true, true], vec![true, false, false, true]).unwrap();
        let signs = sign0(sub.values()).unwrap();
        let out = transfer(&init, &sub, &mask, &signs, TransferMode::MaskOnly).unwrap();
        assert_eq!(out.values(), &[0.0, -0.2, 0.4, 0.0]);
        let out = transfer(&init, &sub, &mask, &signs, TransferMode::Subnetwork).unwrap();
        assert_eq!(out.values(), &[0.0, 1.0, 1.0, 1.0]);
        let short = SignedMask::from_signs(vec![1]).unwrap();
        assert!(matches!(
            transfer(&init, &sub, &mask, &short, TransferMode::SignedInit),
            Err(Error::Shape(_))
        ));
        assert!(transfer(&init, &sub, &mask, &signs, TransferMode::SignedInitBiasConst(f64::INFINITY)).is_err());
    }

    #[test]
    fn support_mask_keeps_fixed_entries() {
        let mask = BinaryMask::from_parts(vec![true; 3], vec![true, true, false]).unwrap();
        let s = SignedMask::from_signs(vec![0, -1, 0]).unwrap();
        assert_eq!(s.support_mask(&mask).unwrap().bits(), &[false, true, true]);
    }
}
