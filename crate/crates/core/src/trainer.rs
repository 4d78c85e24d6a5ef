//! The training loop. Each iteration runs two phases on independently drawn
//! batches: the consistency baseline (supervised + pseudo-label losses) and
//! the masked-modeling phase (pixel reconstruction, prototype aggregation,
//! semantic consistency on masked streams). All five components combine into
//! one normalized objective and a single backward pass.
//!
//! Every stochastic draw is a pure function of (seed, stream name, iteration,
//! item), so a step can be replanned bit-identically: `plan_step` captures
//! the gradient-free artifacts (perturbed inputs, pseudo-labels, confidence
//! maps, masks, reconstruction targets, prototype updates) and
//! `losses_from_plan` is a deterministic differentiable function of the
//! parameters given that plan. Resume and finite-difference checking both
//! lean on this split.

use std::fs::{File, OpenOptions};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::baseline::{make_pseudo_label, supervised_loss, unlabeled_loss, PseudoLabel};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CkptError};
use crate::config::TrainConfig;
use crate::data::{next_batch, resolve_split, Batch, Corpus, DataError, Sample, Split};
use crate::eval::{evaluate, EvalResult};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::masking::{apply_geometry_label, apply_mask, sample_mask, strong_perturb, weak_perturb, Mask};
use crate::nets::{FeaturePerturb, SegNet};
use crate::objective::{semantic_mim_loss, total_loss, LossReport};
use crate::optim::{poly_lr, Sgd};
use crate::proto::{
    compute_prototype, compute_region_sets, downsample_confidence, mim_feature_loss, AggStream,
    PrototypeMemory, RegionSets,
};
use crate::recon::{
    build_class_maps, fp_reconstruction, group_features, mim_pixel_loss, reconstruct,
    reconstruct_ungrouped, ClassMaps,
};
use crate::rng::rng_named;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Result as TResult, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "non-finite loss at iteration {iteration}: L_s={l_s} L_u={l_u} L_mimpi={l_mimpi} \
         L_mimfea={l_mimfea} L_mimse={l_mimse} total={total}"
    )]
    NonFinite {
        iteration: usize,
        l_s: f64,
        l_u: f64,
        l_mimpi: f64,
        l_mimfea: f64,
        l_mimse: f64,
        total: f64,
    },
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn nonfinite(iteration: usize, r: &LossReport) -> TrainError {
    TrainError::NonFinite {
        iteration,
        l_s: r.l_s,
        l_u: r.l_u,
        l_mimpi: r.l_mimpi,
        l_mimfea: r.l_mimfea,
        l_mimse: r.l_mimse,
        total: r.total,
    }
}

pub struct TrainState<S: Scalar> {
    pub cfg: TrainConfig,
    pub net: SegNet<S>,
    pub memory: PrototypeMemory<S>,
    pub optim: Sgd<S>,
    pub iteration: usize,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = SegNet::init(cfg.net_config(), cfg.seed_model)?;
        let memory = PrototypeMemory::new(cfg.classes, cfg.d_prime, cfg.alpha);
        let optim = Sgd::new(cfg.momentum, cfg.weight_decay, cfg.clip_norm);
        Ok(TrainState { cfg, net, memory, optim, iteration: 0 })
    }

    pub fn save(&self, stem: &Path) -> Result<PathBuf, TrainError> {
        Ok(write_checkpoint(
            stem,
            self.iteration,
            &self.cfg,
            &self.net.params(),
            &self.memory,
            &self.optim,
        )?)
    }

    /// Rebuilds a state from a checkpoint. With `cfg_override`, the override
    /// drives the run and the returned flag reports whether its hash matches
    /// the one embedded at save time.
    pub fn load(
        manifest_path: &Path,
        cfg_override: Option<TrainConfig>,
    ) -> Result<(Self, bool), TrainError> {
        let raw = read_checkpoint(manifest_path)?;
        let cfg = cfg_override.unwrap_or_else(|| raw.manifest.config.clone());
        let hash_matches = cfg.hash() == raw.manifest.config_hash;
        let mut state = TrainState::new(cfg)?;
        raw.restore_into(&state.net.params(), &mut state.memory, &mut state.optim)?;
        state.memory.alpha = state.cfg.alpha;
        state.iteration = raw.manifest.iteration;
        Ok((state, hash_matches))
    }

    pub fn lr_main_at(&self, iter: usize) -> f64 {
        poly_lr(self.cfg.lr_main, iter, self.cfg.iterations.max(1), self.cfg.poly_power)
    }
}

// --- the per-step plan -------------------------------------------------------

struct UnlabeledPlan<S: Scalar> {
    x_weak: Tensor<S>,
    x_strong: Tensor<S>,
    keep: Vec<bool>,
    pseudo: PseudoLabel<S>,
}

struct MimItemPlan<S: Scalar> {
    // labeled stream
    x_l: Tensor<S>,
    mask_l: Mask,
    maps_l: ClassMaps<S>,
    regions_l: RegionSets,
    conf_l: Vec<S>,
    p_l_orig: Tensor<S>,
    // strong stream
    x_w: Tensor<S>,
    x_s: Tensor<S>,
    mask_s: Mask,
    maps_w: ClassMaps<S>,
    regions_s: RegionSets,
    conf_s: Vec<S>,
    p_s_orig: Tensor<S>,
    // feature-perturbed stream
    keep: Vec<bool>,
    mask_fp: Mask,
    regions_fp: RegionSets,
    conf_fp: Vec<S>,
    p_fp_orig: Tensor<S>,
    x_fp_target: Option<Tensor<S>>,
}

pub struct StepPlan<S: Scalar> {
    labeled1: Vec<(Tensor<S>, LabelMap)>,
    unlabeled1: Vec<UnlabeledPlan<S>>,
    mim: Vec<MimItemPlan<S>>,
    /// Memory after this iteration's labeled-stream updates.
    memory_after: PrototypeMemory<S>,
    /// What the feature loss reads: the updated memory, or per-batch
    /// prototypes when the dictionary is disabled.
    feature_memory: PrototypeMemory<S>,
}

fn draw_keep(e_dim: usize, p: f64, rng: &mut impl rand::Rng) -> Vec<bool> {
    (0..e_dim).map(|_| rng.gen::<f64>() >= p).collect()
}

fn pad_exclusion(h: usize, w: usize, geo: crate::masking::Geometry) -> LabelMap {
    apply_geometry_label(&LabelMap::filled(h, w, 0), geo)
}

/// Captures every gradient-free artifact of one iteration.
pub fn plan_step<S: Scalar>(
    net: &SegNet<S>,
    memory: &PrototypeMemory<S>,
    cfg: &TrainConfig,
    batch1: &Batch<'_>,
    batch2: &Batch<'_>,
    h: usize,
    w: usize,
    iter: usize,
) -> Result<StepPlan<S>, TrainError> {
    no_grad(|| plan_step_inner(net, memory, cfg, batch1, batch2, h, w, iter))
}

fn plan_step_inner<S: Scalar>(
    net: &SegNet<S>,
    memory: &PrototypeMemory<S>,
    cfg: &TrainConfig,
    batch1: &Batch<'_>,
    batch2: &Batch<'_>,
    h: usize,
    w: usize,
    iter: usize,
) -> Result<StepPlan<S>, TrainError> {
    let it = iter as u64;
    let pcfg = cfg.perturb_config();
    let spec = cfg.mask_spec()?;
    let (eh, ew) = (h / 4, w / 4);
    let d = cfg.d_prime;
    let classes = cfg.classes;

    if batch1.labeled.len() != cfg.batch {
        return Err(TrainError::Incompatible(format!(
            "labeled pool produced {} of {} batch items",
            batch1.labeled.len(),
            cfg.batch
        )));
    }
    let labeled1 = batch1
        .labeled
        .iter()
        .map(|s| (s.image::<S>(h, w), s.label.clone()))
        .collect();

    let mut unlabeled1 = Vec::new();
    if cfg.enable_unlabeled {
        if batch1.unlabeled.len() != cfg.batch {
            return Err(TrainError::Incompatible(
                "unlabeled loss enabled but the split has no unlabeled ids".into(),
            ));
        }
        for (j, s) in batch1.unlabeled.iter().enumerate() {
            let x = s.image::<S>(h, w);
            let mut rng = rng_named(cfg.seed_mask, "p1.weak", &[it, j as u64]);
            let (x_weak, _, geo) = weak_perturb(&x, None, &pcfg, &mut rng)?;
            let x_strong = strong_perturb(
                &x_weak,
                &pcfg,
                &mut rng_named(cfg.seed_mask, "p1.strong", &[it, j as u64]),
            )?;
            let keep = draw_keep(
                cfg.e_dim,
                cfg.drop_p,
                &mut rng_named(cfg.seed_mask, "p1.drop", &[it, j as u64]),
            );
            let (enc_w, _) = net.encode::<rand::rngs::ThreadRng>(&x_weak, FeaturePerturb::None)?;
            let mut pseudo = make_pseudo_label(&net.semantic_probs(&enc_w)?, cfg.psi)?;
            let pad = pad_exclusion(h, w, geo);
            for (g, &v) in pseudo.gate.iter_mut().zip(&pad.data) {
                if v == IGNORE_LABEL {
                    *g = false;
                }
            }
            unlabeled1.push(UnlabeledPlan { x_weak, x_strong, keep, pseudo });
        }
    }

    let mut mim = Vec::new();
    let mut memory_after = memory.clone();
    // Pooled accumulators for the dictionary-free variant.
    let mut batch_sums = vec![vec![S::zero(); d]; classes];
    let mut batch_wsums = vec![S::zero(); classes];
    if cfg.any_mim() {
        if batch2.labeled.len() != cfg.batch || batch2.unlabeled.len() != cfg.batch {
            return Err(TrainError::Incompatible(
                "masked-modeling phase needs full labeled and unlabeled batches".into(),
            ));
        }
        for j in 0..cfg.batch {
            let tags = [it, j as u64];
            // Labeled stream: originals, grouping maps, mask.
            let ls = batch2.labeled[j];
            let x_l = ls.image::<S>(h, w);
            let (enc_l, _) = net.encode::<rand::rngs::ThreadRng>(&x_l, FeaturePerturb::None)?;
            let p_l_orig = net.semantic_probs(&enc_l)?;
            let (y_l, conf_l_full) = p_l_orig.argmax_channels()?;
            let maps_l = build_class_maps::<S>(&y_l, eh, ew, d, classes)?;
            let conf_l = if cfg.use_confidence {
                downsample_confidence(&conf_l_full, h, w, eh, ew)
            } else {
                vec![S::one(); eh * ew]
            };
            let mask_l =
                sample_mask(h, w, spec, &mut rng_named(cfg.seed_mask, "p2.mask_l", &tags))?;
            let regions_l = compute_region_sets(&maps_l, &mask_l, Some(&ls.label));

            // Prototype updates read the labeled masked stream's visible part.
            if cfg.enable_mimfea {
                let (enc_l_m, _) = net
                    .encode::<rand::rngs::ThreadRng>(&apply_mask(&x_l, &mask_l)?, FeaturePerturb::None)?;
                let fea_l = net.pixel_trunk(&enc_l_m)?;
                if cfg.use_dictionary {
                    for c in 0..classes {
                        if let Some(v) = compute_prototype(&fea_l, &conf_l, &regions_l.visible[c])? {
                            memory_after.update(c, &v)?;
                        }
                    }
                } else {
                    let data = fea_l.data();
                    for c in 0..classes {
                        for &pos in &regions_l.visible[c] {
                            let wgt = conf_l[pos];
                            batch_wsums[c] += wgt;
                            for (a, &v) in
                                batch_sums[c].iter_mut().zip(&data[pos * d..(pos + 1) * d])
                            {
                                *a += wgt * v;
                            }
                        }
                    }
                }
            }

            // Unlabeled weak view: grouping source for the other two streams.
            let us = batch2.unlabeled[j];
            let x_u = us.image::<S>(h, w);
            let (x_w, _, geo) = weak_perturb(
                &x_u,
                None,
                &pcfg,
                &mut rng_named(cfg.seed_mask, "p2.weak", &tags),
            )?;
            let x_s = strong_perturb(
                &x_w,
                &pcfg,
                &mut rng_named(cfg.seed_mask, "p2.strong", &tags),
            )?;
            let pad = pad_exclusion(h, w, geo);
            let (enc_w, _) = net.encode::<rand::rngs::ThreadRng>(&x_w, FeaturePerturb::None)?;
            let (y_w, _) = net.semantic_probs(&enc_w)?.argmax_channels()?;
            let maps_w = build_class_maps::<S>(&y_w, eh, ew, d, classes)?;

            let (enc_s, _) = net.encode::<rand::rngs::ThreadRng>(&x_s, FeaturePerturb::None)?;
            let p_s_orig = net.semantic_probs(&enc_s)?;
            let conf_s = if cfg.use_confidence {
                let (_, conf_full) = p_s_orig.argmax_channels()?;
                downsample_confidence(&conf_full, h, w, eh, ew)
            } else {
                vec![S::one(); eh * ew]
            };
            let mask_s =
                sample_mask(h, w, spec, &mut rng_named(cfg.seed_mask, "p2.mask_s", &tags))?;
            let regions_s = compute_region_sets(&maps_w, &mask_s, Some(&pad));

            // Feature-perturbed stream: one dropout realization shared by the
            // original forward, the regression target, and the masked stream.
            let keep = draw_keep(
                cfg.e_dim,
                cfg.drop_p,
                &mut rng_named(cfg.seed_mask, "p2.drop", &tags),
            );
            let enc_fp = enc_w.channel_dropout_with_mask(&keep, cfg.drop_p)?;
            let p_fp_orig = net.semantic_probs(&enc_fp)?;
            let conf_fp = if cfg.use_confidence {
                let (_, conf_full) = p_fp_orig.argmax_channels()?;
                downsample_confidence(&conf_full, h, w, eh, ew)
            } else {
                vec![S::one(); eh * ew]
            };
            let mask_fp =
                sample_mask(h, w, spec, &mut rng_named(cfg.seed_mask, "p2.mask_fp", &tags))?;
            let regions_fp = compute_region_sets(&maps_w, &mask_fp, Some(&pad));
            let x_fp_target = if cfg.detach_fp_target {
                let fea_fp = net.pixel_trunk(&enc_fp)?;
                let r = if cfg.classwise_mim {
                    reconstruct(net, &group_features(&fea_fp, &maps_w)?)?
                } else {
                    reconstruct_ungrouped(net, &fea_fp)?
                };
                Some(r)
            } else {
                None
            };

            mim.push(MimItemPlan {
                x_l,
                mask_l,
                maps_l,
                regions_l,
                conf_l,
                p_l_orig,
                x_w,
                x_s,
                mask_s,
                maps_w,
                regions_s,
                conf_s,
                p_s_orig,
                keep,
                mask_fp,
                regions_fp,
                conf_fp,
                p_fp_orig,
                x_fp_target,
            });
        }
    }

    let feature_memory = if cfg.use_dictionary {
        memory_after.clone()
    } else {
        let mut batch_memory = PrototypeMemory::new(classes, d, 0.0);
        for c in 0..classes {
            if batch_wsums[c] > S::zero() {
                let v: Vec<S> =
                    batch_sums[c].iter().map(|&s| s / batch_wsums[c]).collect();
                batch_memory.update(c, &v)?;
            }
        }
        batch_memory
    };

    Ok(StepPlan { labeled1, unlabeled1, mim, memory_after, feature_memory })
}

// --- the differentiable part -------------------------------------------------

/// Evaluates the full objective for the captured plan. Pure in the
/// parameters: repeated calls under the same plan yield the same value, and
/// the only stochastic choices are the ones frozen inside the plan.
pub fn losses_from_plan<S: Scalar>(
    net: &SegNet<S>,
    plan: &StepPlan<S>,
    cfg: &TrainConfig,
) -> Result<(Tensor<S>, LossReport), TrainError> {
    let weights = cfg.active_weights();
    let zero = || Tensor::scalar(S::zero());

    let mut probs_l = Vec::with_capacity(plan.labeled1.len());
    let mut labels_l = Vec::with_capacity(plan.labeled1.len());
    for (x, label) in &plan.labeled1 {
        let (enc, _) = net.encode::<rand::rngs::ThreadRng>(x, FeaturePerturb::None)?;
        probs_l.push(net.semantic_probs(&enc)?);
        labels_l.push(label.clone());
    }
    let l_s = supervised_loss(&probs_l, &labels_l)?;

    let l_u = if cfg.enable_unlabeled && !plan.unlabeled1.is_empty() {
        let mut p_strong = Vec::new();
        let mut p_feat = Vec::new();
        let mut pseudos = Vec::new();
        for u in &plan.unlabeled1 {
            let (enc_s, _) = net.encode::<rand::rngs::ThreadRng>(&u.x_strong, FeaturePerturb::None)?;
            p_strong.push(net.semantic_probs(&enc_s)?);
            let (enc_f, _) = net.encode::<rand::rngs::ThreadRng>(
                &u.x_weak,
                FeaturePerturb::Reuse { p: cfg.drop_p, keep: &u.keep },
            )?;
            p_feat.push(net.semantic_probs(&enc_f)?);
            pseudos.push(u.pseudo.clone());
        }
        unlabeled_loss(&p_strong, &p_feat, &pseudos, cfg.lambda_u, cfg.gated_mean)?
    } else {
        zero()
    };

    let (l_mimpi, l_mimfea, l_mimse) = if !plan.mim.is_empty() {
        let b = plan.mim.len();
        let mut r_l = Vec::with_capacity(b);
        let mut x_l = Vec::with_capacity(b);
        let mut r_s = Vec::with_capacity(b);
        let mut x_s = Vec::with_capacity(b);
        let mut r_fp = Vec::with_capacity(b);
        let mut x_fp = Vec::with_capacity(b);
        let mut fea_all: Vec<(Tensor<S>, &Vec<S>, &RegionSets)> = Vec::with_capacity(3 * b);
        let mut masked_probs: [Vec<Tensor<S>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut orig_probs: [Vec<Tensor<S>>; 3] = [Vec::new(), Vec::new(), Vec::new()];

        for m in &plan.mim {
            let reconstruct_stream = |fea: &Tensor<S>, maps: &ClassMaps<S>| -> TResult<Tensor<S>> {
                if cfg.classwise_mim {
                    reconstruct(net, &group_features(fea, maps)?)
                } else {
                    reconstruct_ungrouped(net, fea)
                }
            };

            let (enc_l_m, _) = net
                .encode::<rand::rngs::ThreadRng>(&apply_mask(&m.x_l, &m.mask_l)?, FeaturePerturb::None)?;
            let (enc_s_m, _) = net
                .encode::<rand::rngs::ThreadRng>(&apply_mask(&m.x_s, &m.mask_s)?, FeaturePerturb::None)?;
            let (enc_fp_m, _) = net.encode::<rand::rngs::ThreadRng>(
                &apply_mask(&m.x_w, &m.mask_fp)?,
                FeaturePerturb::Reuse { p: cfg.drop_p, keep: &m.keep },
            )?;

            if cfg.enable_mimpi || cfg.enable_mimfea {
                let fea_l = net.pixel_trunk(&enc_l_m)?;
                let fea_s = net.pixel_trunk(&enc_s_m)?;
                let fea_fp = net.pixel_trunk(&enc_fp_m)?;
                if cfg.enable_mimpi {
                    r_l.push(reconstruct_stream(&fea_l, &m.maps_l)?);
                    r_s.push(reconstruct_stream(&fea_s, &m.maps_w)?);
                    r_fp.push(reconstruct_stream(&fea_fp, &m.maps_w)?);
                    x_l.push(m.x_l.clone());
                    x_s.push(m.x_s.clone());
                    x_fp.push(match &m.x_fp_target {
                        Some(t) => t.clone(),
                        None => fp_reconstruction(net, &m.x_w, &m.keep, cfg.drop_p, &m.maps_w, cfg.classwise_mim)?,
                    });
                }
                if cfg.enable_mimfea {
                    fea_all.push((fea_l, &m.conf_l, &m.regions_l));
                    fea_all.push((fea_s, &m.conf_s, &m.regions_s));
                    fea_all.push((fea_fp, &m.conf_fp, &m.regions_fp));
                }
            }
            if cfg.enable_mimse {
                masked_probs[0].push(net.semantic_probs(&enc_l_m)?);
                masked_probs[1].push(net.semantic_probs(&enc_s_m)?);
                masked_probs[2].push(net.semantic_probs(&enc_fp_m)?);
                orig_probs[0].push(m.p_l_orig.clone());
                orig_probs[1].push(m.p_s_orig.clone());
                orig_probs[2].push(m.p_fp_orig.clone());
            }
        }

        let l_mimpi = if cfg.enable_mimpi {
            mim_pixel_loss(&r_l, &x_l, &r_s, &x_s, &r_fp, &x_fp, cfg.lambda_mp)?
        } else {
            zero()
        };
        let l_mimfea = if cfg.enable_mimfea {
            let streams: Vec<AggStream<'_, S>> = fea_all
                .iter()
                .map(|(fea, conf, regions)| AggStream { fea, conf, regions })
                .collect();
            mim_feature_loss(&streams, &plan.feature_memory, cfg.lambda_mf, cfg.tau)?
        } else {
            zero()
        };
        let l_mimse = if cfg.enable_mimse {
            semantic_mim_loss(
                &masked_probs,
                &orig_probs,
                cfg.lambda_ms,
                cfg.semantic_loss,
                cfg.semantic_gated.then_some(cfg.psi),
            )?
        } else {
            zero()
        };
        (l_mimpi, l_mimfea, l_mimse)
    } else {
        (zero(), zero(), zero())
    };

    Ok(total_loss(&l_s, &l_u, &l_mimpi, &l_mimfea, &l_mimse, &weights)?)
}

// --- stepping and the outer loop ----------------------------------------------

pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    corpus: &Corpus,
    labeled_pool: &[usize],
    unlabeled_pool: &[usize],
) -> Result<LossReport, TrainError> {
    let cfg = state.cfg.clone();
    let iter = state.iteration;
    let b = cfg.batch;
    let batch1 = next_batch(corpus, labeled_pool, unlabeled_pool, b, b, iter, cfg.seed_data, "phase1");
    let phase2_stream = if cfg.share_phase_batch { "phase1" } else { "phase2" };
    let batch2 =
        next_batch(corpus, labeled_pool, unlabeled_pool, b, b, iter, cfg.seed_data, phase2_stream);

    let plan = plan_step(&state.net, &state.memory, &cfg, &batch1, &batch2, corpus.h, corpus.w, iter)?;
    let params = state.net.params();
    for p in &params {
        p.tensor.zero_grad();
    }
    let (total, report) = losses_from_plan(&state.net, &plan, &cfg)?;
    if !report.is_finite() {
        return Err(nonfinite(iter, &report));
    }
    total.backward()?;
    state.optim.step(&params, state.lr_main_at(iter), cfg.lr_pid);
    state.memory = plan.memory_after;
    state.iteration += 1;
    Ok(report)
}

pub struct RunSummary {
    pub final_eval: Option<EvalResult>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn open_metrics(path: &Path, cfg: &TrainConfig, fresh: bool) -> Result<File, TrainError> {
    let io = |source| TrainError::Io { path: path.into(), source };
    if fresh || !path.exists() {
        let mut f = File::create(path).map_err(io)?;
        writeln!(f, "# config {}", serde_json::to_string(cfg).expect("config serializes"))
            .map_err(io)?;
        writeln!(f, "iter,lr_main,lr_pid,L_s,L_u,L_mimpi,L_mimfea,L_mimse,total").map_err(io)?;
        Ok(f)
    } else {
        OpenOptions::new().append(true).open(path).map_err(io)
    }
}

fn eval_row<S: Scalar>(
    net: &SegNet<S>,
    val: &[&Sample],
    h: usize,
    w: usize,
    iter: usize,
) -> Result<(String, EvalResult), TrainError> {
    let r = evaluate(net, val, h, w)?;
    let mut row = format!("eval,{iter},{}", r.miou);
    for c in &r.per_class {
        match c {
            Some(v) => row.push_str(&format!(",{v}")),
            None => row.push_str(",nan"),
        }
    }
    Ok((row, r))
}

/// Runs (or resumes) training against a corpus and split, writing the
/// metrics CSV and checkpoints under `out_dir`.
pub fn run_train<S: Scalar>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    split: &Split,
    val: Option<&[&Sample]>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary, TrainError> {
    if corpus.classes != cfg.classes {
        return Err(TrainError::Incompatible(format!(
            "corpus has {} classes, config says {}",
            corpus.classes, cfg.classes
        )));
    }
    if corpus.h % 4 != 0 || corpus.w % 4 != 0 {
        return Err(TrainError::Incompatible(format!(
            "corpus extent {}x{} not divisible by 4",
            corpus.h, corpus.w
        )));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.into(), source })?;
    let (labeled_pool, unlabeled_pool) = resolve_split(corpus, split)?;

    let mut state = match resume {
        Some(ckpt) => {
            let (state, hash_matches) = TrainState::<S>::load(ckpt, Some(cfg.clone()))?;
            if !hash_matches {
                eprintln!("warning: resuming {} with a config whose hash differs from the checkpoint's", ckpt.display());
            }
            state
        }
        None => TrainState::new(cfg.clone())?,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = open_metrics(&metrics_path, cfg, resume.is_none())?;
    let io = |source| TrainError::Io { path: metrics_path.clone(), source };

    let mut final_eval = None;
    while state.iteration < cfg.iterations {
        let iter = state.iteration;
        let lr_main = state.lr_main_at(iter);
        let report = train_step(&mut state, corpus, &labeled_pool, &unlabeled_pool)?;
        writeln!(
            metrics,
            "{iter},{lr_main},{},{},{},{},{},{},{}",
            cfg.lr_pid, report.l_s, report.l_u, report.l_mimpi, report.l_mimfea, report.l_mimse,
            report.total
        )
        .map_err(io)?;
        let done = state.iteration == cfg.iterations;
        if let Some(val) = val {
            if done || (cfg.eval_interval > 0 && state.iteration % cfg.eval_interval == 0) {
                let (row, r) = eval_row(&state.net, val, corpus.h, corpus.w, state.iteration)?;
                writeln!(metrics, "{row}").map_err(io)?;
                if done {
                    final_eval = Some(r);
                }
            }
        }
        if !done && cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval == 0 {
            state.save(&out_dir.join(format!("ckpt_{}", state.iteration)))?;
        }
    }
    if cfg.iterations == 0 {
        if let Some(val) = val {
            let (row, r) = eval_row(&state.net, val, corpus.h, corpus.w, 0)?;
            writeln!(metrics, "{row}").map_err(io)?;
            final_eval = Some(r);
        }
    }
    metrics.flush().map_err(io)?;
    let checkpoint_path = state.save(&out_dir.join("ckpt_final"))?;
    Ok(RunSummary { final_eval, metrics_path, checkpoint_path })
}

// --- composite finite-difference fixture --------------------------------------

/// A self-contained micro-batch (4 labeled + 4 unlabeled samples, 8x8x3,
/// 4 classes) for checking the full combined objective against central
/// differences in double precision.
pub fn composite_fixture() -> (TrainConfig, Vec<Sample>, Vec<Sample>) {
    let cfg = TrainConfig {
        classes: 4,
        e_dim: 6,
        d_prime: 6,
        batch: 4,
        iterations: 1,
        max_shift: 2,
        ..TrainConfig::default()
    };
    let mut rng = rng_named(424242, "composite", &[]);
    let mk = |idx: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let rgb: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.gen()).collect();
        let mut lab: Vec<u8> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        lab[0] = IGNORE_LABEL;
        Sample { id: format!("m{idx}"), rgb, label: LabelMap::new(8, 8, lab) }
    };
    let labeled: Vec<Sample> = (0..4).map(|i| mk(i, &mut rng)).collect();
    let unlabeled: Vec<Sample> = (4..8).map(|i| mk(i, &mut rng)).collect();
    (cfg, labeled, unlabeled)
}

pub fn composite_gradcheck() -> Result<crate::tensor::gradcheck::GradCheckReport, TrainError> {
    let (cfg, labeled, unlabeled) = composite_fixture();
    let state = TrainState::<f64>::new(cfg.clone())?;
    let batch = Batch {
        labeled: labeled.iter().collect(),
        unlabeled: unlabeled.iter().collect(),
    };
    let plan = plan_step(&state.net, &state.memory, &cfg, &batch, &batch, 8, 8, 0)?;
    let params: Vec<Tensor<f64>> = state.net.params().into_iter().map(|p| p.tensor).collect();
    let report = crate::tensor::gradcheck::finite_diff_check(
        &params,
        || losses_from_plan(&state.net, &plan, &cfg).map(|(t, _)| t).map_err(|e| match e {
            TrainError::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        }),
        1e-5,
        1e-8,
    )?;
    Ok(report)
}
