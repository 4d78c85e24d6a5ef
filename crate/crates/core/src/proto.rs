//! Mask-induced feature aggregation: visible/masked region sets per class,
//! confidence-weighted prototypes with an EMA dictionary, and the cosine
//! aggregation loss that pulls masked-region features toward their class
//! prototype.

use crate::label::{LabelMap, IGNORE_LABEL};
use crate::masking::Mask;
use crate::recon::ClassMaps;
use crate::scalar::Scalar;
use crate::tensor::{nearest_index_map, Result, Tensor, TensorError};

/// Per-class position sets at feature resolution: visible (prototype source)
/// and masked (aggregation target). Positions excluded as non-semantic
/// (ignore-marked or padded) appear in neither.
#[derive(Clone, Debug, Default)]
pub struct RegionSets {
    pub visible: Vec<Vec<usize>>,
    pub masked: Vec<Vec<usize>>,
}

/// EMA dictionary of class prototypes. Starts at zero vectors with flags
/// down; a class participates in the aggregation loss only once its flag is
/// up (the zero vector has no direction).
#[derive(Clone, Debug)]
pub struct PrototypeMemory<S: Scalar> {
    pub protos: Vec<Vec<S>>,
    pub initialized: Vec<bool>,
    pub alpha: f64,
}

impl<S: Scalar> PrototypeMemory<S> {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Self {
        PrototypeMemory {
            protos: vec![vec![S::zero(); dim]; num_classes],
            initialized: vec![false; num_classes],
            alpha,
        }
    }

    /// Decayed in-place update: proto = alpha * proto + (1 - alpha) * v.
    /// The very first update blends with the zero init, so it lands at
    /// (1 - alpha) * v, not at v.
    pub fn update(&mut self, c: usize, v: &[S]) -> Result<()> {
        let proto = self.protos.get_mut(c).ok_or(TensorError::BadClassIndex {
            index: c,
            classes: self.initialized.len(),
        })?;
        if v.len() != proto.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "prototype dim {} vs update dim {}",
                proto.len(),
                v.len()
            )));
        }
        if v.iter().any(|x| !x.to_f64_lossy().is_finite()) {
            return Err(TensorError::InvalidArgument(format!("non-finite prototype update for class {c}")));
        }
        let a = S::from_f64_lossy(self.alpha);
        let b = S::from_f64_lossy(1.0 - self.alpha);
        for (p, &vi) in proto.iter_mut().zip(v) {
            *p = a * *p + b * vi;
        }
        self.initialized[c] = true;
        Ok(())
    }
}

/// Nearest-downsample a full-resolution per-position confidence map to
/// feature resolution. Plain data; confidences are always detached.
pub fn downsample_confidence<S: Scalar>(
    conf: &[S],
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
) -> Vec<S> {
    let rows = nearest_index_map(h, h2);
    let cols = nearest_index_map(w, w2);
    let mut out = Vec::with_capacity(h2 * w2);
    for &sy in &rows {
        for &sx in &cols {
            out.push(conf[sy * w + sx]);
        }
    }
    out
}

/// Split each class's support into visible and masked position sets, dropping
/// positions whose nearest full-resolution source pixel is ignore-marked in
/// `ignore_source` (ground-truth boundaries, perturbation padding).
pub fn compute_region_sets<S: Scalar>(
    maps: &ClassMaps<S>,
    mask: &Mask,
    ignore_source: Option<&LabelMap>,
) -> RegionSets {
    let low = &maps.low_labels;
    let (h2, w2) = (low.h, low.w);
    let rows = nearest_index_map(mask.h, h2);
    let cols = nearest_index_map(mask.w, w2);
    let avail = ignore_source.map(|m| m.resize_nearest(h2, w2));
    let c = maps.num_classes();
    let mut sets = RegionSets { visible: vec![Vec::new(); c], masked: vec![Vec::new(); c] };
    for y in 0..h2 {
        for x in 0..w2 {
            let pos = y * w2 + x;
            if let Some(a) = &avail {
                if a.data[pos] == IGNORE_LABEL {
                    continue;
                }
            }
            let cls = low.data[pos] as usize;
            if mask.is_masked(rows[y], cols[x]) {
                sets.masked[cls].push(pos);
            } else {
                sets.visible[cls].push(pos);
            }
        }
    }
    sets
}

/// Confidence-weighted mean of the feature vectors at `positions`. Values
/// are read off the tensor, never the tape: prototypes are gradient-free by
/// construction. Returns None when the set is empty.
pub fn compute_prototype<S: Scalar>(
    fea: &Tensor<S>,
    conf: &[S],
    positions: &[usize],
) -> Result<Option<Vec<S>>> {
    if positions.is_empty() {
        return Ok(None);
    }
    let (_, _, d) = fea.dims3()?;
    let data = fea.data();
    let mut acc = vec![S::zero(); d];
    let mut wsum = S::zero();
    for &pos in positions {
        let w = conf[pos];
        wsum += w;
        for (a, &v) in acc.iter_mut().zip(&data[pos * d..(pos + 1) * d]) {
            *a += w * v;
        }
    }
    if wsum <= S::zero() {
        return Ok(None);
    }
    for a in &mut acc {
        *a /= wsum;
    }
    Ok(Some(acc))
}

/// (1 - cos(z, v)) / tau on plain vectors; the value-level oracle for the
/// differentiable path.
pub fn cos_loss_value(z: &[f64], v: &[f64], tau: f64) -> f64 {
    let dot: f64 = z.iter().zip(v).map(|(a, b)| a * b).sum();
    let zn: f64 = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    let vn: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (1.0 - dot / (zn * vn)) / tau
}

/// One stream's contribution to the aggregation loss: its feature tensor,
/// per-position confidences at feature resolution, and its region sets.
pub struct AggStream<'a, S: Scalar> {
    pub fea: &'a Tensor<S>,
    pub conf: &'a [S],
    pub regions: &'a RegionSets,
}

/// Confidence-weighted aggregation toward the class prototype over one
/// stream's masked set (the single-stream form; the training loss pools
/// streams via `mim_feature_loss`).
pub fn aggregation_loss<S: Scalar>(
    fea: &Tensor<S>,
    conf: &[S],
    proto: &[S],
    masked: &[usize],
    tau: f64,
) -> Result<Tensor<S>> {
    let (sum, wsum) = stream_term(fea, conf, proto, masked, tau)?;
    match sum {
        Some(t) if wsum > 0.0 => Ok(t.scalar_mul(S::from_f64_lossy(1.0 / wsum))),
        _ => Ok(Tensor::scalar(S::zero())),
    }
}

/// Weighted sum of cosine losses over one stream's kept positions plus the
/// weight total, so callers can pool denominators across streams. Zero-norm
/// feature vectors are skipped and their confidence left out of the total.
fn stream_term<S: Scalar>(
    fea: &Tensor<S>,
    conf: &[S],
    proto: &[S],
    positions: &[usize],
    tau: f64,
) -> Result<(Option<Tensor<S>>, f64)> {
    let (_, _, d) = fea.dims3()?;
    let mut kept = Vec::with_capacity(positions.len());
    let mut weights = Vec::with_capacity(positions.len());
    let mut wsum = 0.0;
    {
        let data = fea.data();
        if std::env::var_os("MASKSEG_NORM_DEBUG").is_some() && !positions.is_empty() {
            let mut norms: Vec<f64> = positions
                .iter()
                .map(|&pos| {
                    data[pos * d..(pos + 1) * d]
                        .iter()
                        .map(|&v| { let f = v.to_f64_lossy(); f * f })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            eprintln!(
                "normdbg n={} min={:.3e} p10={:.3e} p50={:.3e} max={:.3e}",
                norms.len(),
                norms[0],
                norms[norms.len() / 10],
                norms[norms.len() / 2],
                norms[norms.len() - 1]
            );
        }
        for &pos in positions {
            let z = &data[pos * d..(pos + 1) * d];
            if z.iter().all(|&v| v == S::zero()) {
                continue;
            }
            kept.push(pos);
            weights.push(conf[pos]);
            wsum += conf[pos].to_f64_lossy();
        }
    }
    if kept.is_empty() {
        return Ok((None, 0.0));
    }
    let t = fea.cosine_agg_sum(&kept, &weights, proto, S::from_f64_lossy(tau))?;
    Ok((Some(t), wsum))
}

/// The combined feature loss: per class, a confidence-weighted mean of cosine
/// losses pooled over every stream's masked set, averaged over the classes
/// that have any pooled positions and an initialized prototype, scaled by
/// `lambda_mf`.
pub fn mim_feature_loss<S: Scalar>(
    streams: &[AggStream<'_, S>],
    memory: &PrototypeMemory<S>,
    lambda_mf: f64,
    tau: f64,
) -> Result<Tensor<S>> {
    let classes = memory.protos.len();
    let mut class_losses = Vec::new();
    for c in 0..classes {
        if !memory.initialized[c] {
            continue;
        }
        let proto = &memory.protos[c];
        let mut sum: Option<Tensor<S>> = None;
        let mut wsum = 0.0;
        for s in streams {
            if s.regions.masked.len() != classes {
                return Err(TensorError::InvalidArgument(format!(
                    "stream has {} classes, memory has {classes}",
                    s.regions.masked.len()
                )));
            }
            let (t, w) = stream_term(s.fea, s.conf, proto, &s.regions.masked[c], tau)?;
            if let Some(t) = t {
                sum = Some(match sum {
                    Some(acc) => acc.add(&t)?,
                    None => t,
                });
                wsum += w;
            }
        }
        if let Some(sum) = sum {
            if wsum > 0.0 {
                class_losses.push(sum.scalar_mul(S::from_f64_lossy(1.0 / wsum)));
            }
        }
    }
    if class_losses.is_empty() {
        return Ok(Tensor::scalar(S::zero()));
    }
    let n = class_losses.len() as f64;
    let mut acc = class_losses[0].clone();
    for l in &class_losses[1..] {
        acc = acc.add(l)?;
    }
    Ok(acc.scalar_mul(S::from_f64_lossy(lambda_mf / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_mask, MaskSpec};
    use crate::recon::build_class_maps;
    use crate::rng::rng_named;
    use crate::tensor::gradcheck::finite_diff_check;

    type T64 = Tensor<f64>;

    fn labels_of(vals: &[u8], h: usize, w: usize) -> LabelMap {
        LabelMap::new(h, w, vals.to_vec())
    }

    #[test]
    fn region_sets_partition_class_support() {
        let l = labels_of(&[0, 0, 1, 1, 2, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0], 4, 4);
        let maps = build_class_maps::<f64>(&l, 4, 4, 1, 3).unwrap();
        let mut rng = rng_named(1, "regions", &[]);
        let mask = sample_mask(4, 4, MaskSpec::new(2, 0.5).unwrap(), &mut rng).unwrap();
        let sets = compute_region_sets(&maps, &mask, None);
        for c in 0..3 {
            let support = l.data.iter().filter(|&&v| v as usize == c).count();
            assert_eq!(sets.visible[c].len() + sets.masked[c].len(), support);
            for &p in &sets.visible[c] {
                assert!(!mask.is_masked(p / 4, p % 4));
                assert_eq!(l.data[p] as usize, c);
            }
            for &p in &sets.masked[c] {
                assert!(mask.is_masked(p / 4, p % 4));
            }
        }
    }

    #[test]
    fn region_sets_extremes_and_ignore_exclusion() {
        let l = LabelMap::filled(4, 4, 1);
        let maps = build_class_maps::<f64>(&l, 4, 4, 1, 2).unwrap();
        let none = Mask::from_cells(4, 4, 2, vec![false; 4]).unwrap();
        let sets = compute_region_sets(&maps, &none, None);
        assert!(sets.masked.iter().all(|m| m.is_empty()));
        assert_eq!(sets.visible[1].len(), 16);

        let full = Mask::from_cells(4, 4, 2, vec![true; 4]).unwrap();
        let sets = compute_region_sets(&maps, &full, None);
        assert!(sets.visible.iter().all(|m| m.is_empty()));
        assert_eq!(sets.masked[1].len(), 16);

        // Ignore-marked source pixels vanish from both sets.
        let mut ign = LabelMap::filled(4, 4, 0);
        ign.set(0, 0, IGNORE_LABEL);
        ign.set(3, 3, IGNORE_LABEL);
        let sets = compute_region_sets(&maps, &full, Some(&ign));
        assert_eq!(sets.masked[1].len(), 14);
    }

    #[test]
    fn prototype_weighted_mean() {
        let fea = T64::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = compute_prototype(&fea, &[1.0, 3.0], &[0, 1]).unwrap().unwrap();
        assert_eq!(v, vec![0.25, 0.75]);

        // Uniform confidence reduces to the plain mean.
        let v = compute_prototype(&fea, &[2.0, 2.0], &[0, 1]).unwrap().unwrap();
        assert_eq!(v, vec![0.5, 0.5]);

        // Single position: that vector exactly.
        let v = compute_prototype(&fea, &[0.7, 0.7], &[1]).unwrap().unwrap();
        assert_eq!(v, vec![0.0, 1.0]);

        assert!(compute_prototype(&fea, &[1.0, 1.0], &[]).unwrap().is_none());
    }

    #[test]
    fn ema_single_step_and_degenerate_alpha() {
        let mut m = PrototypeMemory::<f64>::new(2, 2, 0.99);
        assert!(!m.initialized[0]);
        m.update(0, &[1.0, 0.0]).unwrap();
        assert!(m.initialized[0]);
        assert!((m.protos[0][0] - 0.01).abs() < 1e-15 && m.protos[0][1] == 0.0);

        let mut m0 = PrototypeMemory::<f64>::new(1, 2, 0.0);
        m0.update(0, &[0.3, 0.4]).unwrap();
        assert_eq!(m0.protos[0], vec![0.3, 0.4]);

        assert!(m.update(5, &[1.0, 0.0]).is_err());
        assert!(m.update(0, &[1.0]).is_err());
        assert!(m.update(0, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn ema_matches_closed_forms() {
        // Constant v for 10 steps: proto = (1 - alpha^10) v.
        let alpha: f64 = 0.99;
        let mut m = PrototypeMemory::<f64>::new(1, 3, alpha);
        let v = [0.5, -1.5, 2.0];
        for _ in 0..10 {
            m.update(0, &v).unwrap();
        }
        let scale = 1.0 - alpha.powi(10);
        for (got, want) in m.protos[0].iter().zip(v.iter().map(|x| x * scale)) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }

        // Varying v_k against the unrolled geometric form.
        let mut m = PrototypeMemory::<f64>::new(1, 1, alpha);
        let vs = [1.0, -2.0, 0.5, 3.0, -1.0];
        for v in vs {
            m.update(0, &[v]).unwrap();
        }
        let want: f64 = vs
            .iter()
            .enumerate()
            .map(|(k, v)| (1.0 - alpha) * alpha.powi((vs.len() - 1 - k) as i32) * v)
            .sum();
        assert!((m.protos[0][0] - want).abs() < 1e-12);
    }

    #[test]
    fn cos_loss_reference_points_and_scale_invariance() {
        assert!((cos_loss_value(&[2.0, 0.0], &[1.0, 0.0], 10.0) - 0.0).abs() < 1e-15);
        assert!((cos_loss_value(&[0.0, 1.0], &[1.0, 0.0], 10.0) - 0.1).abs() < 1e-15);
        assert!((cos_loss_value(&[-3.0, 0.0], &[1.0, 0.0], 10.0) - 0.2).abs() < 1e-15);
        let a = cos_loss_value(&[0.3, 0.4], &[1.0, 2.0], 10.0);
        let b = cos_loss_value(&[30.0, 40.0], &[1.0, 2.0], 10.0);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn aggregation_loss_arithmetic() {
        // Positions 0 and 1: orthogonal (loss 0.1) and antiparallel (0.2).
        let fea = T64::from_vec(&[1, 2, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let proto = [1.0, 0.0];
        let eq = aggregation_loss(&fea, &[1.0, 1.0], &proto, &[0, 1], 10.0).unwrap().item();
        assert!((eq - 0.15).abs() < 1e-12);
        let weighted = aggregation_loss(&fea, &[3.0, 1.0], &proto, &[0, 1], 10.0).unwrap().item();
        assert!((weighted - 0.125).abs() < 1e-12);

        // Every masked vector equal to the prototype: zero.
        let same = T64::from_vec(&[1, 2, 2], vec![2.0, 0.0, 5.0, 0.0]).unwrap();
        let z = aggregation_loss(&same, &[1.0, 1.0], &proto, &[0, 1], 10.0).unwrap().item();
        assert!(z.abs() < 1e-15);
    }

    #[test]
    fn zero_norm_vectors_are_skipped_with_their_weight() {
        let fea = T64::from_vec(&[1, 3, 2], vec![0.0, 1.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        let proto = [1.0, 0.0];
        // Middle vector is zero: result must equal the two-position mean.
        let l = aggregation_loss(&fea, &[1.0, 9.0, 1.0], &proto, &[0, 1, 2], 10.0).unwrap().item();
        assert!((l - 0.15).abs() < 1e-12);
        // All positions zero-norm: loss 0, no NaN.
        let zfea = T64::zeros(&[1, 2, 2]);
        let l = aggregation_loss(&zfea, &[1.0, 1.0], &proto, &[0, 1], 10.0).unwrap().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn feature_loss_gates_and_pools_streams() {
        let mut memory = PrototypeMemory::<f64>::new(2, 2, 0.5);
        let fea_a = T64::from_vec(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let fea_b = T64::from_vec(&[1, 2, 2], vec![-1.0, 0.0, 1.0, 1.0]).unwrap();
        let ra = RegionSets { visible: vec![vec![], vec![]], masked: vec![vec![0], vec![]] };
        let rb = RegionSets { visible: vec![vec![], vec![]], masked: vec![vec![0], vec![]] };
        let streams = [
            AggStream { fea: &fea_a, conf: &[2.0, 1.0], regions: &ra },
            AggStream { fea: &fea_b, conf: &[1.0, 1.0], regions: &rb },
        ];

        // No prototype initialized yet: loss is exactly zero.
        let l = mim_feature_loss(&streams, &memory, 0.05, 10.0).unwrap();
        assert_eq!(l.item(), 0.0);

        memory.update(0, &[2.0, 0.0]).unwrap(); // proto [1,0] direction
        let l = mim_feature_loss(&streams, &memory, 1.0, 10.0).unwrap().item();
        // Pooled mean over both streams' class-0 positions:
        // stream a pos 0: z=[0,1] orthogonal, w=2 -> loss 0.1
        // stream b pos 0: z=[-1,0] antiparallel, w=1 -> loss 0.2
        let want = (2.0 * 0.1 + 1.0 * 0.2) / 3.0;
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");

        // Class average over initialized + populated classes only.
        memory.update(1, &[0.0, 3.0]).unwrap();
        let l2 = mim_feature_loss(&streams, &memory, 1.0, 10.0).unwrap().item();
        assert!((l2 - want).abs() < 1e-12, "class 1 has no positions, mean unchanged");
    }

    #[test]
    fn feature_loss_gradcheck() {
        let mut memory = PrototypeMemory::<f64>::new(3, 4, 0.9);
        memory.update(0, &[0.5, -0.2, 0.3, 0.8]).unwrap();
        memory.update(2, &[-0.4, 0.6, 0.1, -0.2]).unwrap();
        let mut rng = rng_named(9, "agg-fd", &[]);
        let fa = T64::rand_uniform(&[2, 3, 4], 0.2, 1.0, &mut rng);
        let fa = T64::param(fa.shape(), fa.to_vec()).unwrap();
        let fb = T64::rand_uniform(&[2, 3, 4], 0.2, 1.0, &mut rng);
        let fb = T64::param(fb.shape(), fb.to_vec()).unwrap();
        let ca = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let cb = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let ra = RegionSets {
            visible: vec![vec![], vec![], vec![]],
            masked: vec![vec![0, 1], vec![2], vec![3]],
        };
        let rb = RegionSets {
            visible: vec![vec![], vec![], vec![]],
            masked: vec![vec![4], vec![], vec![5, 0]],
        };
        let report = finite_diff_check(
            &[fa.clone(), fb.clone()],
            || {
                let streams = [
                    AggStream { fea: &fa, conf: &ca, regions: &ra },
                    AggStream { fea: &fb, conf: &cb, regions: &rb },
                ];
                mim_feature_loss(&streams, &memory, 0.05, 10.0)
            },
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn prototypes_never_receive_gradient() {
        // Prototype built from a tensor that requires grad: memory stores
        // plain values, so the loss backward must not reach that tensor.
        let src = T64::param(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = compute_prototype(&src, &[1.0, 1.0], &[0, 1]).unwrap().unwrap();
        let mut memory = PrototypeMemory::<f64>::new(1, 2, 0.0);
        memory.update(0, &v).unwrap();
        let fea = T64::param(&[1, 1, 2], vec![0.3, 0.9]).unwrap();
        let r = RegionSets { visible: vec![vec![]], masked: vec![vec![0]] };
        let streams = [AggStream { fea: &fea, conf: &[1.0], regions: &r }];
        mim_feature_loss(&streams, &memory, 1.0, 10.0).unwrap().backward().unwrap();
        assert!(src.grad().is_none());
        assert!(fea.grad().is_some());
    }
}
