//! Named finite-difference oracles: one case per differentiable op, one per
//! loss component, and the stitched composite objective. The command-line
//! `gradcheck` runs this suite and reports the worst error per case.

use std::time::Instant;

use rand::Rng;

use crate::baseline::{make_pseudo_label, supervised_loss, unlabeled_loss};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::nets::{NetConfig, SegNet};
use crate::objective::{semantic_mim_loss, SemanticLossKind};
use crate::proto::{mim_feature_loss, AggStream, PrototypeMemory, RegionSets};
use crate::recon::{build_class_maps, group_features, mim_pixel_loss, reconstruct};
use crate::rng::rng_named;
use crate::tensor::gradcheck::{finite_diff_check, GradCheckReport};
use crate::tensor::{Result, Tensor, TensorError};
use crate::trainer::{composite_gradcheck, TrainError};

type T = Tensor<f64>;

pub struct CheckCase {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl CheckCase {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_err < tol
    }
}

pub const TOLERANCE: f64 = 1e-4;

fn param(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> T {
    let t = T::rand_uniform(shape, lo, hi, rng);
    T::param(t.shape(), t.to_vec()).expect("fixture shape")
}

fn labels(h: usize, w: usize, classes: u8, rng: &mut impl Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes)).collect())
}

fn check(params: &[T], f: impl Fn() -> Result<T>) -> Result<GradCheckReport> {
    finite_diff_check(params, f, 1e-5, 1e-8)
}

fn elementwise() -> Result<GradCheckReport> {
    let rng = &mut rng_named(11, "oracle.elementwise", &[]);
    let a = param(&[2, 3, 2], -1.0, 1.0, rng);
    let b = param(&[2, 3, 2], -1.0, 1.0, rng);
    let c = param(&[2, 3, 2], -1.0, 1.0, rng);
    check(&[a.clone(), b.clone(), c.clone()], || {
        let chain = a.add(&b)?.mul(&c)?.scalar_mul(1.7).add_scalar(0.3).mean();
        chain.add(&a.mul(&a)?.sum().scalar_mul(0.01))
    })
}

fn relu() -> Result<GradCheckReport> {
    // Magnitudes bounded away from zero: the kink has no two-sided derivative.
    let rng = &mut rng_named(12, "oracle.relu", &[]);
    let raw = T::rand_uniform(&[3, 3, 2], 0.3, 1.3, rng);
    let signed: Vec<f64> =
        raw.to_vec().iter().enumerate().map(|(i, v)| if i % 2 == 0 { *v } else { -v }).collect();
    let x = T::param(&[3, 3, 2], signed)?;
    let t = T::rand_uniform(&[3, 3, 2], -1.0, 1.0, rng);
    check(&[x.clone()], || x.relu().mse(&t))
}

fn sigmoid() -> Result<GradCheckReport> {
    let rng = &mut rng_named(29, "oracle.sigmoid", &[]);
    let x = param(&[3, 3, 2], -3.0, 3.0, rng);
    let t = T::rand_uniform(&[3, 3, 2], 0.0, 1.0, rng);
    check(&[x.clone()], || x.sigmoid().mse(&t))
}

fn conv(stride: usize, k: usize) -> Result<GradCheckReport> {
    let rng = &mut rng_named(13, "oracle.conv", &[stride as u64, k as u64]);
    let x = param(&[6, 6, 2], -1.0, 1.0, rng);
    let w = param(&[k, k, 2, 3], -0.6, 0.6, rng);
    let b = param(&[3], -0.2, 0.2, rng);
    let (oh, ow) = if stride == 2 { (3, 3) } else { (6, 6) };
    let t = T::rand_uniform(&[oh, ow, 3], -1.0, 1.0, rng);
    check(&[x.clone(), w.clone(), b.clone()], || {
        x.conv2d(&w, Some(&b), stride, k / 2)?.mse(&t)
    })
}

fn softmax_ce() -> Result<GradCheckReport> {
    let rng = &mut rng_named(14, "oracle.softmax_ce", &[]);
    let logits = param(&[3, 3, 4], -1.5, 1.5, rng);
    let mut y = labels(3, 3, 4, rng);
    y.data[0] = IGNORE_LABEL;
    check(&[logits.clone()], || logits.softmax_channels()?.cross_entropy(&y))
}

fn mse() -> Result<GradCheckReport> {
    let rng = &mut rng_named(15, "oracle.mse", &[]);
    let x = param(&[4, 2, 3], -1.0, 1.0, rng);
    let y = param(&[4, 2, 3], -1.0, 1.0, rng);
    check(&[x.clone(), y.clone()], || x.mse(&y))
}

fn nearest_resize() -> Result<GradCheckReport> {
    let rng = &mut rng_named(16, "oracle.resize", &[]);
    let x = param(&[2, 3, 2], -1.0, 1.0, rng);
    let up = T::rand_uniform(&[5, 6, 2], -1.0, 1.0, rng);
    let down = T::rand_uniform(&[1, 2, 2], -1.0, 1.0, rng);
    check(&[x.clone()], || {
        x.nearest_resize(5, 6)?.mse(&up)?.add(&x.nearest_resize(1, 2)?.mse(&down)?)
    })
}

fn channel_dropout() -> Result<GradCheckReport> {
    let rng = &mut rng_named(17, "oracle.dropout", &[]);
    let x = param(&[3, 3, 4], -1.0, 1.0, rng);
    let t = T::rand_uniform(&[3, 3, 4], -1.0, 1.0, rng);
    let keep = [true, false, true, true];
    check(&[x.clone()], || x.channel_dropout_with_mask(&keep, 0.25)?.mse(&t))
}

fn cosine_agg() -> Result<GradCheckReport> {
    let rng = &mut rng_named(18, "oracle.cosine", &[]);
    let fea = param(&[2, 3, 4], 0.2, 1.0, rng);
    check(&[fea.clone()], || {
        fea.cosine_agg_sum(&[0, 2, 5], &[0.9, 0.5, 0.7], &[0.3, -0.2, 0.8, 0.1], 10.0)
    })
}

fn tiny_net(seed: u64) -> SegNet<f64> {
    let cfg = NetConfig {
        num_classes: 3,
        in_channels: 2,
        e_dim: 4,
        d_prime: 4,
        use_bias: true,
        head_kernel: 3,
    };
    SegNet::init(cfg, seed).expect("fixture net")
}

fn net_params(net: &SegNet<f64>) -> Vec<T> {
    net.params().into_iter().map(|p| p.tensor).collect()
}

fn net_semantic() -> Result<GradCheckReport> {
    let rng = &mut rng_named(19, "oracle.net", &[]);
    let net = tiny_net(31);
    let x = param(&[8, 8, 2], 0.0, 1.0, rng);
    let y = labels(8, 8, 3, rng);
    let mut params = vec![x.clone()];
    params.extend(net_params(&net));
    check(&params, || {
        let (enc, _) = net.encode::<rand::rngs::ThreadRng>(&x, crate::nets::FeaturePerturb::None)?;
        net.semantic_probs(&enc)?.cross_entropy(&y)
    })
}

fn classwise_recon() -> Result<GradCheckReport> {
    let rng = &mut rng_named(20, "oracle.recon", &[]);
    let net = tiny_net(37);
    let y = labels(4, 4, 3, rng);
    let maps = build_class_maps::<f64>(&y, 4, 4, 4, 3)?;
    let fea = param(&[4, 4, 4], -1.0, 1.0, rng);
    let t = T::rand_uniform(&[16, 16, 2], -1.0, 1.0, rng);
    let mut params = vec![fea.clone()];
    params.extend(net_params(&net));
    check(&params, || reconstruct(&net, &group_features(&fea, &maps)?)?.mse(&t))
}

fn loss_supervised() -> Result<GradCheckReport> {
    let rng = &mut rng_named(21, "oracle.sup", &[]);
    let l0 = param(&[3, 3, 3], -1.5, 1.5, rng);
    let l1 = param(&[3, 3, 3], -1.5, 1.5, rng);
    let mut y0 = labels(3, 3, 3, rng);
    y0.data[4] = IGNORE_LABEL;
    let y1 = labels(3, 3, 3, rng);
    let ys = [y0, y1];
    check(&[l0.clone(), l1.clone()], || {
        supervised_loss(&[l0.softmax_channels()?, l1.softmax_channels()?], &ys)
    })
}

fn loss_unlabeled(gated_mean: bool) -> Result<GradCheckReport> {
    let rng = &mut rng_named(22, "oracle.unlab", &[gated_mean as u64]);
    let weak = T::rand_uniform(&[3, 3, 3], -1.5, 1.5, rng).softmax_channels()?;
    let pl = make_pseudo_label(&weak, 0.4)?;
    let ls = param(&[3, 3, 3], -1.0, 1.0, rng);
    let lf = param(&[3, 3, 3], -1.0, 1.0, rng);
    check(&[ls.clone(), lf.clone()], || {
        unlabeled_loss(
            &[ls.softmax_channels()?],
            &[lf.softmax_channels()?],
            &[pl.clone()],
            0.5,
            gated_mean,
        )
    })
}

fn loss_mim_pixel() -> Result<GradCheckReport> {
    let rng = &mut rng_named(23, "oracle.mimpi", &[]);
    let r: Vec<T> = (0..3).map(|_| param(&[4, 4, 2], -1.0, 1.0, rng)).collect();
    let x: Vec<T> = (0..3).map(|_| T::rand_uniform(&[4, 4, 2], 0.0, 1.0, rng)).collect();
    check(&r.clone(), || {
        mim_pixel_loss(
            &r[0..1],
            &x[0..1],
            &r[1..2],
            &x[1..2],
            &r[2..3],
            &x[2..3],
            1.0 / 3.0,
        )
    })
}

fn loss_mim_feature() -> Result<GradCheckReport> {
    let rng = &mut rng_named(24, "oracle.mimfea", &[]);
    let mut memory = PrototypeMemory::<f64>::new(3, 4, 0.9);
    memory.update(0, &[0.5, -0.2, 0.3, 0.8])?;
    memory.update(2, &[-0.4, 0.6, 0.1, -0.2])?;
    let fa = param(&[2, 3, 4], 0.2, 1.0, rng);
    let fb = param(&[2, 3, 4], 0.2, 1.0, rng);
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
    check(&[fa.clone(), fb.clone()], || {
        let streams = [
            AggStream { fea: &fa, conf: &ca, regions: &ra },
            AggStream { fea: &fb, conf: &cb, regions: &rb },
        ];
        mim_feature_loss(&streams, &memory, 0.05, 10.0)
    })
}

fn loss_semantic(kind: SemanticLossKind) -> Result<GradCheckReport> {
    let rng = &mut rng_named(25, "oracle.mimse", &[matches!(kind, SemanticLossKind::Mse) as u64]);
    let masked: Vec<T> = (0..3).map(|_| param(&[3, 3, 3], -1.0, 1.0, rng)).collect();
    let orig: Vec<T> =
        (0..3).map(|_| T::rand_uniform(&[3, 3, 3], -1.5, 1.5, rng).softmax_channels().unwrap()).collect();
    check(&masked.clone(), || {
        let m = [
            vec![masked[0].softmax_channels()?],
            vec![masked[1].softmax_channels()?],
            vec![masked[2].softmax_channels()?],
        ];
        let o = [vec![orig[0].clone()], vec![orig[1].clone()], vec![orig[2].clone()]];
        semantic_mim_loss(&m, &o, 0.1 / 3.0, kind, None)
    })
}

fn composite() -> std::result::Result<GradCheckReport, TrainError> {
    composite_gradcheck()
}

type CaseFn = Box<dyn Fn() -> std::result::Result<GradCheckReport, TrainError>>;

fn cases() -> Vec<(&'static str, CaseFn)> {
    let t = |f: fn() -> Result<GradCheckReport>| -> CaseFn {
        Box::new(move || f().map_err(TrainError::from))
    };
    vec![
        ("tensor.elementwise", t(elementwise)),
        ("tensor.relu", t(relu)),
        ("tensor.sigmoid", t(sigmoid)),
        ("tensor.conv2d_s1", t(|| conv(1, 3))),
        ("tensor.conv2d_s2", t(|| conv(2, 3))),
        ("tensor.conv2d_1x1", t(|| conv(1, 1))),
        ("tensor.softmax_ce", t(softmax_ce)),
        ("tensor.mse", t(mse)),
        ("tensor.nearest_resize", t(nearest_resize)),
        ("tensor.channel_dropout", t(channel_dropout)),
        ("tensor.cosine_agg", t(cosine_agg)),
        ("nets.semantic", t(net_semantic)),
        ("recon.classwise", t(classwise_recon)),
        ("loss.supervised", t(loss_supervised)),
        ("loss.unlabeled_gated", t(|| loss_unlabeled(true))),
        ("loss.unlabeled_mean", t(|| loss_unlabeled(false))),
        ("loss.mim_pixel", t(loss_mim_pixel)),
        ("loss.mim_feature", t(loss_mim_feature)),
        ("loss.semantic_ce", t(|| loss_semantic(SemanticLossKind::CrossEntropy))),
        ("loss.semantic_mse", t(|| loss_semantic(SemanticLossKind::Mse))),
        ("composite", Box::new(composite)),
    ]
}

/// Runs every case whose name contains `filter` (all when `None`), in a
/// fixed order. Errors out on a filter matching nothing.
pub fn run_suite(filter: Option<&str>) -> std::result::Result<Vec<CheckCase>, TrainError> {
    let mut out = Vec::new();
    for (name, f) in cases() {
        if let Some(pat) = filter {
            if !name.contains(pat) {
                continue;
            }
        }
        let t0 = Instant::now();
        let report = f()?;
        out.push(CheckCase { name, report, seconds: t0.elapsed().as_secs_f64() });
    }
    if out.is_empty() {
        return Err(TensorError::InvalidArgument(format!(
            "no gradcheck case matches {:?}",
            filter.unwrap_or("")
        ))
        .into());
    }
    Ok(out)
}
