//! Masked-stream semantic consistency and the overall objective combiner.

use serde::{Deserialize, Serialize};

use crate::baseline::make_pseudo_label;
use crate::label::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Component weights. A disabled component is expressed as a zero weight,
/// which removes both its loss term and its share of the normalizer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_mp: f64,
    pub lambda_mf: f64,
    pub lambda_ms: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_u: 0.5, lambda_mp: 1.0 / 3.0, lambda_mf: 0.05, lambda_ms: 0.1 / 3.0 }
    }
}

impl LossWeights {
    /// The supervised term counts once; the consistency term twice (two
    /// strong streams); each MIM term three times (three masked streams).
    pub fn normalizer(&self) -> f64 {
        1.0 + 2.0 * self.lambda_u
            + 3.0 * self.lambda_mp
            + 3.0 * self.lambda_mf
            + 3.0 * self.lambda_ms
    }
}

/// Scalar component values of one step, for logging. `total` is exactly the
/// value of the combined tensor that was backpropagated.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_s: f64,
    pub l_u: f64,
    pub l_mimpi: f64,
    pub l_mimfea: f64,
    pub l_mimse: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_u, self.l_mimpi, self.l_mimfea, self.l_mimse, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// total = (L_s + L_u + L_mimpi + L_mimfea + L_mimse) / normalizer. Each
/// component arrives already scaled by its own lambda.
pub fn total_loss<S: Scalar>(
    l_s: &Tensor<S>,
    l_u: &Tensor<S>,
    l_mimpi: &Tensor<S>,
    l_mimfea: &Tensor<S>,
    l_mimse: &Tensor<S>,
    weights: &LossWeights,
) -> Result<(Tensor<S>, LossReport)> {
    let norm = weights.normalizer();
    let total = l_s
        .add(l_u)?
        .add(l_mimpi)?
        .add(l_mimfea)?
        .add(l_mimse)?
        .scalar_mul(S::from_f64_lossy(1.0 / norm));
    let report = LossReport {
        l_s: l_s.item().to_f64_lossy(),
        l_u: l_u.item().to_f64_lossy(),
        l_mimpi: l_mimpi.item().to_f64_lossy(),
        l_mimfea: l_mimfea.item().to_f64_lossy(),
        l_mimse: l_mimse.item().to_f64_lossy(),
        total: total.item().to_f64_lossy(),
    };
    Ok((total, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticLossKind {
    CrossEntropy,
    Mse,
}

/// Ungated argmax targets for the semantic consistency loss, derived from the
/// original (unmasked) stream predictions. Plain label maps: fully detached.
pub fn semantic_targets<S: Scalar>(original: &[Tensor<S>]) -> Result<Vec<LabelMap>> {
    original.iter().map(|p| Ok(p.argmax_channels()?.0)).collect()
}

/// Masked-stream semantic consistency: each masked stream's class
/// probabilities against targets derived from its original-stream
/// counterpart.
///
/// `masked` and `original` hold three parallel streams (labeled, strong,
/// feature-perturbed), each with one probability map per batch item. With
/// `gated_psi`, cross-entropy targets keep only confident positions (the
/// ablation variant); the default applies no gate.
pub fn semantic_mim_loss<S: Scalar>(
    masked: &[Vec<Tensor<S>>; 3],
    original: &[Vec<Tensor<S>>; 3],
    lambda_ms: f64,
    kind: SemanticLossKind,
    gated_psi: Option<f64>,
) -> Result<Tensor<S>> {
    let b = masked[0].len();
    if masked.iter().chain(original.iter()).any(|s| s.len() != b) || b == 0 {
        return Err(TensorError::InvalidArgument("semantic stream lengths differ".into()));
    }
    let mut acc = Tensor::scalar(S::zero());
    for (m_stream, o_stream) in masked.iter().zip(original) {
        for (m, o) in m_stream.iter().zip(o_stream) {
            let term = match kind {
                SemanticLossKind::CrossEntropy => {
                    let target = match gated_psi {
                        Some(psi) => make_pseudo_label(o, psi)?.gated_labels(),
                        None => o.argmax_channels()?.0,
                    };
                    m.cross_entropy(&target)?
                }
                SemanticLossKind::Mse => m.mse(&o.detach())?,
            };
            acc = acc.add(&term)?;
        }
    }
    Ok(acc.scalar_mul(S::from_f64_lossy(lambda_ms / b as f64)))
}
