//! Closed-form Gaussian backbone.
//!
//! For data distributed as `N(mu, s^2 I)` the optimal noise prediction is
//! linear in the latent, and with equal variances every guidance
//! combination is again an optimal predictor for a Gaussian whose mean is
//! the same combination of branch means. That makes the whole guidance and
//! sampling stack checkable against exact values.
//!
//! The oracle also has self-attention hook points. At layer `l` and train
//! timestep `t` its key operand is [`oracle_hook_key`] and its value operand
//! is [`oracle_hook_value_base`] followed by payload columns carrying the
//! branch's `(mean, variance)`, so every operand depends only on
//! `(t, layer, branch)`. The noise head reads the payload of the last value
//! operand that was swapped by a hook (first token), falling back to the
//! branch itself. Replacing values with ones recorded from the style branch
//! therefore turns an unconditional pass into a style pass.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInterceptor, HookSlot, LayerId};
use crate::backbone::{
    AttentionKind, Backbone, Capabilities, Conditioning, ExtraConditioning, LatentSpec, LayerMap, LayerNumbering,
};
use crate::error::{Result, SpgError};
use crate::guidance::GuidanceWeights;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{AttnTensor, Latent};

pub const ORACLE_TOKENS: usize = 4;
pub const ORACLE_BASE_DIM: usize = 4;
pub const ORACLE_DEFAULT_LAYERS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchRole {
    Conditional,
    Unconditional,
    Style,
}

/// Isotropic Gaussian data distribution for one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBranchSpec {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub role: BranchRole,
}

impl GaussianBranchSpec {
    pub fn new(mean: Vec<f64>, variance: f64, role: BranchRole) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(SpgError::invalid(format!("branch variance must be positive, got {variance}")));
        }
        if mean.is_empty() || !mean.iter().all(|m| m.is_finite()) {
            return Err(SpgError::invalid("branch mean must be a non-empty finite vector"));
        }
        Ok(GaussianBranchSpec { mean, variance, role })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBranches {
    pub conditional: GaussianBranchSpec,
    pub unconditional: GaussianBranchSpec,
    pub style: GaussianBranchSpec,
}

impl OracleBranches {
    pub fn new(conditional: GaussianBranchSpec, unconditional: GaussianBranchSpec, style: GaussianBranchSpec) -> Result<Self> {
        let d = conditional.dim();
        if unconditional.dim() != d || style.dim() != d {
            return Err(SpgError::invalid("oracle branches must share one dimension"));
        }
        Ok(OracleBranches {
            conditional,
            unconditional,
            style,
        })
    }

    /// The 2-D test layout: `mu_c = (1, 0)`, `mu_u = (0, 0)`,
    /// `mu_s = (0, 1)`, so both guidance directions have unit length.
    pub fn planar(variance: f64) -> Result<Self> {
        Self::new(
            GaussianBranchSpec::new(vec![1.0, 0.0], variance, BranchRole::Conditional)?,
            GaussianBranchSpec::new(vec![0.0, 0.0], variance, BranchRole::Unconditional)?,
            GaussianBranchSpec::new(vec![0.0, 1.0], variance, BranchRole::Style)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.conditional.dim()
    }

    pub fn by_role(&self, role: BranchRole) -> &GaussianBranchSpec {
        match role {
            BranchRole::Conditional => &self.conditional,
            BranchRole::Unconditional => &self.unconditional,
            BranchRole::Style => &self.style,
        }
    }
}

fn eps_coefficient(alpha_bar: f64, variance: f64) -> f64 {
    (1.0 - alpha_bar).sqrt() / (alpha_bar * variance + (1.0 - alpha_bar))
}

/// Optimal ε-prediction for data `N(mean, variance I)`:
/// `sqrt(1-a) (z - sqrt(a) mu) / (a s^2 + 1 - a)`.
pub fn analytic_eps(
    z_t: ArrayView1<f64>,
    t: usize,
    branch: &GaussianBranchSpec,
    schedule: &DiffusionSchedule,
) -> Result<Array1<f64>> {
    if z_t.len() != branch.dim() {
        return Err(SpgError::invalid(format!(
            "latent dimension {} != branch dimension {}",
            z_t.len(),
            branch.dim()
        )));
    }
    let a = schedule.alpha_bar(t)?;
    Ok(eps_at(z_t, a, &branch.mean, branch.variance))
}

fn eps_at(z: ArrayView1<f64>, alpha_bar: f64, mean: &[f64], variance: f64) -> Array1<f64> {
    let k = eps_coefficient(alpha_bar, variance);
    let sa = alpha_bar.sqrt();
    Array1::from_iter(z.iter().zip(mean).map(|(z, m)| k * (z - sa * m)))
}

/// Terminal mean of deterministic DDIM under the joint guidance rule with
/// equal-variance branches: `mu_u + l_cfg (mu_c - mu_u) + l_spg (mu_s - mu_u)`.
pub fn analytic_guided_mean(branches: &OracleBranches, weights: &GuidanceWeights) -> Result<Array1<f64>> {
    let v = branches.unconditional.variance;
    if branches.conditional.variance != v || branches.style.variance != v {
        return Err(SpgError::Unsupported(
            "guided mean has no closed form for unequal branch variances".into(),
        ));
    }
    let (lc, ls) = (weights.lambda_cfg(), weights.lambda_spg());
    Ok(Array1::from_iter(
        branches
            .unconditional
            .mean
            .iter()
            .zip(&branches.conditional.mean)
            .zip(&branches.style.mean)
            .map(|((u, c), s)| u + lc * (c - u) + ls * (s - u)),
    ))
}

/// Key operand of oracle layer `layer` at train timestep `t`.
pub fn oracle_hook_key(t: usize, layer: LayerId) -> AttnTensor {
    Array2::from_shape_fn((ORACLE_TOKENS, ORACLE_BASE_DIM), |(i, j)| {
        (0.001 * (t as f64 + 1.0) * (j as f64 + 1.0) + 0.7 * layer as f64 + 0.31 * i as f64).sin() as f32
    })
}

/// Leading (non-payload) columns of the value operand.
pub fn oracle_hook_value_base(t: usize, layer: LayerId) -> AttnTensor {
    Array2::from_shape_fn((ORACLE_TOKENS, ORACLE_BASE_DIM), |(i, j)| {
        (0.002 * (t as f64 + 1.0) * (i as f64 + 1.0) + 0.5 * layer as f64 + 0.17 * j as f64).cos() as f32
    })
}

/// Oracle backbone. Latents are `(1, 1, d)`.
#[derive(Debug, Clone)]
pub struct OracleBackbone {
    id: String,
    branches: OracleBranches,
    alpha_bar: Vec<f64>,
    layer_map: LayerMap,
    spec: LatentSpec,
    caps: Capabilities,
    reference: bool,
    hooks: HookSlot,
}

impl OracleBackbone {
    pub fn new(branches: OracleBranches, schedule: &DiffusionSchedule, layers: u32) -> Result<Self> {
        if layers == 0 {
            return Err(SpgError::invalid("oracle needs at least one layer"));
        }
        let layer_map = LayerMap::new(
            LayerNumbering::SelfAttentionOnly,
            (1..=layers)
                .map(|l| (format!("oracle.attn{l}"), AttentionKind::SelfAttention, 1))
                .collect(),
        );
        Ok(OracleBackbone {
            id: format!("gaussian-oracle-d{}", branches.dim()),
            spec: LatentSpec {
                channels: 1,
                downsample: 1,
                latent_multiple: 1,
            },
            branches,
            alpha_bar: schedule.alpha_bar_table().to_vec(),
            layer_map,
            caps: Capabilities {
                text_encoding: true,
                image_codec: false,
                slots: vec![],
            },
            reference: false,
            hooks: HookSlot::default(),
        })
    }

    pub fn branches(&self) -> &OracleBranches {
        &self.branches
    }

    pub fn dim(&self) -> usize {
        self.branches.dim()
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (1, 1, self.dim())
    }

    /// The oracle as seen by a pass over the style reference: its
    /// unconditional branch is the style distribution. Record style
    /// features with this view.
    pub fn reference_view(&self) -> Self {
        let mut o = self.clone();
        o.reference = true;
        o
    }

    fn role_for(&self, cond: &Conditioning) -> BranchRole {
        match (cond.is_unconditional(), self.reference) {
            (false, _) => BranchRole::Conditional,
            (true, false) => BranchRole::Unconditional,
            (true, true) => BranchRole::Style,
        }
    }

    fn value_operand(t: usize, layer: LayerId, payload: &[f32]) -> AttnTensor {
        let base = oracle_hook_value_base(t, layer);
        Array2::from_shape_fn((ORACLE_TOKENS, ORACLE_BASE_DIM + payload.len()), |(i, j)| {
            if j < ORACLE_BASE_DIM {
                base[[i, j]]
            } else {
                payload[j - ORACLE_BASE_DIM]
            }
        })
    }
}

impl Backbone for OracleBackbone {
    fn id(&self) -> &str {
        &self.id
    }

    fn latent_spec(&self) -> &LatentSpec {
        &self.spec
    }

    fn layer_map(&self) -> &LayerMap {
        &self.layer_map
    }

    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn hook_slot(&self) -> &HookSlot {
        &self.hooks
    }

    fn forward(
        &self,
        z_t: &Latent,
        t: usize,
        cond: &Conditioning,
        _extra: Option<&ExtraConditioning>,
        hooks: &mut dyn AttentionInterceptor,
    ) -> Result<Latent> {
        let d = self.dim();
        if z_t.dim() != (1, 1, d) {
            return Err(SpgError::invalid(format!(
                "oracle latent must be (1, 1, {d}), got {:?}",
                z_t.dim()
            )));
        }
        let a = *self
            .alpha_bar
            .get(t)
            .ok_or_else(|| SpgError::invalid(format!("timestep {t} outside [0, {})", self.alpha_bar.len())))?;
        let branch = self.branches.by_role(self.role_for(cond));
        let mut mean = branch.mean.clone();
        let mut variance = branch.variance;
        let payload: Vec<f32> = mean
            .iter()
            .chain(std::iter::once(&variance))
            .map(|&v| v as f32)
            .collect();

        for layer in 1..=self.layer_map.len() as LayerId {
            let mut k = oracle_hook_key(t, layer);
            let mut v = Self::value_operand(t, layer, &payload);
            hooks.on_self_attention(layer, &mut k, &mut v)?;
            if v.ncols() != ORACLE_BASE_DIM + d + 1 {
                return Err(SpgError::invalid(format!("oracle value operand width {} at layer {layer}", v.ncols())));
            }
            let seen = v.row(0);
            let seen = seen.as_slice().expect("standard layout");
            let seen = &seen[ORACLE_BASE_DIM..];
            // Full precision unless the operand was actually swapped.
            if seen.iter().zip(&payload).any(|(a, b)| a.to_bits() != b.to_bits()) {
                mean = seen[..d].iter().map(|&v| v as f64).collect();
                variance = seen[d] as f64;
                if variance.is_nan() || variance <= 0.0 {
                    return Err(SpgError::Numeric(format!("oracle payload variance {variance} at layer {layer}")));
                }
            }
        }

        let flat = z_t.view().into_shape_with_order(d).expect("(1,1,d) latent");
        let eps = eps_at(flat, a, &mean, variance);
        Ok(eps.into_shape_with_order((1, 1, d)).expect("d elements"))
    }

    fn encode_text(&self, prompt: &str) -> Result<Conditioning> {
        let flag = if prompt.is_empty() { 0.0 } else { 1.0 };
        Ok(Conditioning {
            prompt: prompt.to_string(),
            embedding: Array1::from_elem(1, flag),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleSpec;
    use approx::assert_abs_diff_eq;

    fn sched() -> DiffusionSchedule {
        ScheduleSpec::default().build().unwrap()
    }

    fn branch(mean: &[f64], var: f64, role: BranchRole) -> GaussianBranchSpec {
        GaussianBranchSpec::new(mean.to_vec(), var, role).unwrap()
    }

    fn branches(var: f64) -> OracleBranches {
        OracleBranches::new(
            branch(&[1.0, 0.0], var, BranchRole::Conditional),
            branch(&[0.0, 0.0], var, BranchRole::Unconditional),
            branch(&[0.0, 1.0], var, BranchRole::Style),
        )
        .unwrap()
    }

    #[test]
    fn eps_zero_at_scaled_mean() {
        let s = sched();
        let b = branch(&[0.3, -1.2], 0.5, BranchRole::Style);
        let a = s.alpha_bar(400).unwrap();
        let z = Array1::from_iter(b.mean.iter().map(|m| a.sqrt() * m));
        let e = analytic_eps(z.view(), 400, &b, &s).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unit_variance_simplification() {
        let s = sched();
        let b = branch(&[0.5, 2.0], 1.0, BranchRole::Conditional);
        let z = Array1::from_vec(vec![0.7, -0.4]);
        let a = s.alpha_bar(250).unwrap();
        let e = analytic_eps(z.view(), 250, &b, &s).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(e[i], (1.0 - a).sqrt() * (z[i] - a.sqrt() * b.mean[i]), epsilon = 1e-14);
        }
    }

    #[test]
    fn guided_mean_examples() {
        let b = branches(1.0);
        let m = analytic_guided_mean(&b, &GuidanceWeights::new(7.0, 3.0).unwrap()).unwrap();
        assert_eq!(m.to_vec(), vec![7.0, 3.0]);
        let m = analytic_guided_mean(&b, &GuidanceWeights::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(m.to_vec(), vec![1.0, 0.0]);
        let same = OracleBranches::new(
            branch(&[0.4, 0.4], 1.0, BranchRole::Conditional),
            branch(&[0.4, 0.4], 1.0, BranchRole::Unconditional),
            branch(&[0.4, 0.4], 1.0, BranchRole::Style),
        )
        .unwrap();
        let m = analytic_guided_mean(&same, &GuidanceWeights::new(9.0, 5.0).unwrap()).unwrap();
        assert_eq!(m.to_vec(), vec![0.4, 0.4]);
    }

    #[test]
    fn guided_mean_refuses_unequal_variance() {
        let b = OracleBranches::new(
            branch(&[1.0], 1.0, BranchRole::Conditional),
            branch(&[0.0], 2.0, BranchRole::Unconditional),
            branch(&[0.0], 1.0, BranchRole::Style),
        )
        .unwrap();
        assert!(matches!(
            analytic_guided_mean(&b, &GuidanceWeights::default()),
            Err(SpgError::Unsupported(_))
        ));
    }

    #[test]
    fn invalid_branches() {
        assert!(GaussianBranchSpec::new(vec![0.0], 0.0, BranchRole::Style).is_err());
        assert!(OracleBranches::new(
            branch(&[1.0], 1.0, BranchRole::Conditional),
            branch(&[0.0, 0.0], 1.0, BranchRole::Unconditional),
            branch(&[0.0], 1.0, BranchRole::Style),
        )
        .is_err());
    }

    #[test]
    fn backbone_matches_closed_form() {
        let s = sched();
        let o = OracleBackbone::new(branches(0.3), &s, 4).unwrap();
        let z = Latent::from_shape_vec((1, 1, 2), vec![0.2, -0.9]).unwrap();
        let c = o.encode_text("a chair").unwrap();
        let u = o.encode_text("").unwrap();
        let ec = o.predict_noise(&z, 600, &c, None, None).unwrap();
        let eu = o.predict_noise(&z, 600, &u, None, None).unwrap();
        let zc = z.view().into_shape_with_order(2).unwrap();
        assert_eq!(ec.into_raw_vec_and_offset().0, analytic_eps(zc, 600, &o.branches().conditional, &s).unwrap().to_vec());
        assert_eq!(eu.into_raw_vec_and_offset().0, analytic_eps(zc, 600, &o.branches().unconditional, &s).unwrap().to_vec());
        let er = o.reference_view().predict_noise(&z, 600, &u, None, None).unwrap();
        assert_eq!(er.into_raw_vec_and_offset().0, analytic_eps(zc, 600, &o.branches().style, &s).unwrap().to_vec());
    }
}
