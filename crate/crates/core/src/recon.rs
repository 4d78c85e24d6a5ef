//! Class-wise masked image modeling in pixel space: pseudo-label driven
//! feature grouping, per-class reconstruction heads summed into one image,
//! and the three-stream pixel regression loss.

use crate::label::{LabelMap, IGNORE_LABEL};
use crate::nets::{FeaturePerturb, SegNet};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Result, Tensor, TensorError};

/// Per-class binary maps at feature resolution, channel-replicated. The maps
/// partition the plane: exactly one is 1 at every position.
pub struct ClassMaps<S: Scalar> {
    pub planes: Vec<Tensor<S>>,
    /// The downsampled label map the planes were cut from.
    pub low_labels: LabelMap,
}

impl<S: Scalar> ClassMaps<S> {
    pub fn num_classes(&self) -> usize {
        self.planes.len()
    }
}

/// Nearest-downsample a full-coverage label map and cut it into per-class
/// 0/1 planes replicated over `d` channels.
pub fn build_class_maps<S: Scalar>(
    labels: &LabelMap,
    h: usize,
    w: usize,
    d: usize,
    num_classes: usize,
) -> Result<ClassMaps<S>> {
    let low = labels.resize_nearest(h, w);
    let mut planes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut data = vec![S::zero(); h * w * d];
        for (pos, &l) in low.data.iter().enumerate() {
            if l == IGNORE_LABEL || l as usize >= num_classes {
                return Err(TensorError::BadClassIndex { index: l as usize, classes: num_classes });
            }
            if l as usize == c {
                data[pos * d..(pos + 1) * d].fill(S::one());
            }
        }
        planes.push(Tensor::from_vec(&[h, w, d], data)?);
    }
    Ok(ClassMaps { planes, low_labels: low })
}

/// fea_c = fea (x) map_c for every class; differentiable through the product.
pub fn group_features<S: Scalar>(fea: &Tensor<S>, maps: &ClassMaps<S>) -> Result<Vec<Tensor<S>>> {
    maps.planes.iter().map(|m| fea.mul(m)).collect()
}

/// r = sigmoid(sum_c Head_c(fea_c)), heads applied in ascending class order.
/// The squash bounds the regression output to the (0, 1) range of the
/// normalized targets; without any normalization layers in the network the
/// raw sum can otherwise grow without limit and destabilize training.
pub fn reconstruct<S: Scalar>(net: &SegNet<S>, grouped: &[Tensor<S>]) -> Result<Tensor<S>> {
    if grouped.len() != net.cfg.num_classes {
        return Err(TensorError::InvalidArgument(format!(
            "{} groups for {} heads",
            grouped.len(),
            net.cfg.num_classes
        )));
    }
    let mut r = net.head_apply(0, &grouped[0])?;
    for (c, g) in grouped.iter().enumerate().skip(1) {
        r = r.add(&net.head_apply(c, g)?)?;
    }
    Ok(r.sigmoid())
}

/// Ungrouped variant: every head sees the full feature map (the ablation
/// baseline for class-wise grouping).
pub fn reconstruct_ungrouped<S: Scalar>(net: &SegNet<S>, fea: &Tensor<S>) -> Result<Tensor<S>> {
    let mut r = net.head_apply(0, fea)?;
    for c in 1..net.cfg.num_classes {
        r = r.add(&net.head_apply(c, fea)?)?;
    }
    Ok(r.sigmoid())
}

/// Regression target for the feature-perturbed masked stream: the unmasked
/// weak image pushed through the identical pipeline (same channel-dropout
/// realization, same grouping), detached so the target never chases the
/// prediction.
pub fn build_fp_target<S: Scalar>(
    net: &SegNet<S>,
    x_weak: &Tensor<S>,
    keep: &[bool],
    p: f64,
    maps: &ClassMaps<S>,
    classwise: bool,
) -> Result<Tensor<S>> {
    no_grad(|| fp_reconstruction(net, x_weak, keep, p, maps, classwise))
}

/// The same pipeline on the autodiff tape, for the variant where the target
/// is trained rather than fixed.
pub fn fp_reconstruction<S: Scalar>(
    net: &SegNet<S>,
    x_weak: &Tensor<S>,
    keep: &[bool],
    p: f64,
    maps: &ClassMaps<S>,
    classwise: bool,
) -> Result<Tensor<S>> {
    let (enc, _) = net.encode::<rand::rngs::ThreadRng>(x_weak, FeaturePerturb::Reuse { p, keep })?;
    let fea = net.pixel_trunk(&enc)?;
    if classwise {
        reconstruct(net, &group_features(&fea, maps)?)
    } else {
        reconstruct_ungrouped(net, &fea)
    }
}

/// lambda_mp * [mse(r_l, x_l) + mse(r_s, x_s) + mse(r_fp, x_fp)], averaged
/// over the batch. Slices are per-item, all of equal length.
pub fn mim_pixel_loss<S: Scalar>(
    r_l: &[Tensor<S>],
    x_l: &[Tensor<S>],
    r_s: &[Tensor<S>],
    x_s: &[Tensor<S>],
    r_fp: &[Tensor<S>],
    x_fp: &[Tensor<S>],
    lambda_mp: f64,
) -> Result<Tensor<S>> {
    let b = r_l.len();
    if [x_l.len(), r_s.len(), x_s.len(), r_fp.len(), x_fp.len()].iter().any(|&n| n != b) || b == 0
    {
        return Err(TensorError::InvalidArgument("pixel-loss stream lengths differ".into()));
    }
    let mut acc = Tensor::scalar(S::zero());
    for j in 0..b {
        acc = acc
            .add(&r_l[j].mse(&x_l[j])?)?
            .add(&r_s[j].mse(&x_s[j])?)?
            .add(&r_fp[j].mse(&x_fp[j])?)?;
    }
    Ok(acc.scalar_mul(S::from_f64_lossy(lambda_mp / b as f64)))
}
