//! Semi-supervised baseline losses: supervised cross-entropy plus the
//! confidence-gated consistency loss over two strongly perturbed streams
//! (image-space and feature-space) supervised by weak-stream pseudo-labels.

use crate::label::{LabelMap, IGNORE_LABEL};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Argmax labels, per-position confidence, and the confidence gate derived
/// from one probability map. Plain data, fully detached from the tape.
#[derive(Clone, Debug)]
pub struct PseudoLabel<S: Scalar> {
    pub labels: LabelMap,
    pub conf: Vec<S>,
    pub gate: Vec<bool>,
}

impl<S: Scalar> PseudoLabel<S> {
    /// Labels with gate-failing positions replaced by the ignore marker.
    pub fn gated_labels(&self) -> LabelMap {
        let data = self
            .labels
            .data
            .iter()
            .zip(&self.gate)
            .map(|(&l, &g)| if g { l } else { IGNORE_LABEL })
            .collect();
        LabelMap::new(self.labels.h, self.labels.w, data)
    }

    pub fn gated_count(&self) -> usize {
        self.gate.iter().filter(|&&g| g).count()
    }
}

/// Argmax + confidence + gate from a probability map. Reads values only, so
/// no gradient ever flows back into the producing forward pass.
pub fn make_pseudo_label<S: Scalar>(probs: &Tensor<S>, psi: f64) -> Result<PseudoLabel<S>> {
    let (labels, conf) = probs.argmax_channels()?;
    let gate = conf.iter().map(|c| c.to_f64_lossy() >= psi).collect();
    Ok(PseudoLabel { labels, conf, gate })
}

/// Mean cross-entropy over a labeled batch, ignore-marked pixels excluded.
pub fn supervised_loss<S: Scalar>(probs: &[Tensor<S>], labels: &[LabelMap]) -> Result<Tensor<S>> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TensorError::InvalidArgument(format!(
            "{} predictions vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut acc = probs[0].cross_entropy(&labels[0])?;
    for (p, y) in probs.iter().zip(labels).skip(1) {
        acc = acc.add(&p.cross_entropy(y)?)?;
    }
    Ok(acc.scalar_mul(S::from_f64_lossy(1.0 / probs.len() as f64)))
}

/// Consistency loss: for each unlabeled item, cross-entropy of both strong
/// streams against the weak-stream pseudo-label at gate-passing positions,
/// scaled by `lambda_u` and averaged over the batch.
///
/// `gated_mean` selects the denominator: gated positions only (default), or
/// all positions (the per-position-sum reading of the gate).
pub fn unlabeled_loss<S: Scalar>(
    p_strong: &[Tensor<S>],
    p_feat: &[Tensor<S>],
    pseudo: &[PseudoLabel<S>],
    lambda_u: f64,
    gated_mean: bool,
) -> Result<Tensor<S>> {
    if p_strong.len() != pseudo.len() || p_feat.len() != pseudo.len() || pseudo.is_empty() {
        return Err(TensorError::InvalidArgument(format!(
            "stream lengths {}/{} vs {} pseudo-labels",
            p_strong.len(),
            p_feat.len(),
            pseudo.len()
        )));
    }
    let mut acc = Tensor::scalar(S::zero());
    for ((ps, pf), pl) in p_strong.iter().zip(p_feat).zip(pseudo) {
        let target = pl.gated_labels();
        let mut item = ps.cross_entropy(&target)?.add(&pf.cross_entropy(&target)?)?;
        if !gated_mean {
            // Rescale the gated mean into a sum over gated positions divided
            // by the full position count.
            let total = (pl.labels.h * pl.labels.w) as f64;
            item = item.scalar_mul(S::from_f64_lossy(pl.gated_count() as f64 / total));
        }
        acc = acc.add(&item)?;
    }
    Ok(acc.scalar_mul(S::from_f64_lossy(lambda_u / pseudo.len() as f64)))
}
