//! The tiny segmentation network: shared encoder, semantic decoder, pixel
//! trunk, and one bias-free reconstruction head per class.
//!
//! The encoder halves resolution twice, so all dense work happens at H/4 x
//! W/4; both decoders restore image resolution with nearest upsampling.

use rand::Rng;

use crate::rng::rng_named;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Image channels (also the reconstruction target depth).
    pub in_channels: usize,
    pub num_classes: usize,
    /// Encoder / decoder width.
    pub e_dim: usize,
    /// Pixel-trunk feature width (the grouping substrate).
    pub d_prime: usize,
    /// Biases on encoder/decoder/trunk convs. Heads are always bias-free.
    pub use_bias: bool,
    /// Reconstruction head kernel size (odd). 3 in training; 1 available to
    /// make gradient-routing analyses exact.
    pub head_kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            num_classes: 4,
            e_dim: 32,
            d_prime: 32,
            use_bias: true,
            head_kernel: 3,
        }
    }
}

pub struct ConvLayer<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> ConvLayer<S> {
    /// Kaiming-style fan-in uniform init: weights U(-b, b) with
    /// b = sqrt(6 / fan_in), biases U(-b', b') with b' = 1 / sqrt(fan_in).
    ///
    /// Biases are drawn rather than zeroed so that fully masked input
    /// patches, whose pre-activations collapse to the bias alone, do not
    /// start exactly on the ReLU kink where one-sided derivatives differ.
    fn init(k: usize, din: usize, dout: usize, stride: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (k * k * din) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::rand_uniform(&[k, k, din, dout], -bound, bound, rng);
        let b_bound = 1.0 / fan_in.sqrt();
        ConvLayer {
            weight: Tensor::param(w.shape(), w.to_vec()).expect("init shape"),
            bias: bias.then(|| {
                let b = Tensor::rand_uniform(&[dout], -b_bound, b_bound, rng);
                Tensor::param(b.shape(), b.to_vec()).expect("init shape")
            }),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
    }

    fn params(&self, name: &str, group: ParamGroup, out: &mut Vec<NamedParam<S>>) {
        out.push(NamedParam {
            name: format!("{name}.weight"),
            tensor: self.weight.clone(),
            decay: true,
            group,
        });
        if let Some(b) = &self.bias {
            out.push(NamedParam { name: format!("{name}.bias"), tensor: b.clone(), decay: false, group });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoder + semantic decoder: poly-decayed learning rate, trained in
    /// both phases.
    Main,
    /// Pixel trunk + heads: constant learning rate, frozen in phase one.
    Pid,
}

pub struct NamedParam<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Weight decay applies to conv weights only, never biases.
    pub decay: bool,
    pub group: ParamGroup,
}

/// How to perturb encoder features for a consistency stream.
pub enum FeaturePerturb<'a, R: Rng> {
    None,
    /// Sample a fresh channel keep-mask with drop probability `p`.
    Sample { p: f64, rng: &'a mut R },
    /// Reuse a keep-mask realized by a paired stream.
    Reuse { p: f64, keep: &'a [bool] },
}

pub struct SegNet<S: Scalar> {
    pub cfg: NetConfig,
    enc1: ConvLayer<S>,
    enc2: ConvLayer<S>,
    sed1: ConvLayer<S>,
    sed_out: ConvLayer<S>,
    trunk: ConvLayer<S>,
    heads: Vec<ConvLayer<S>>,
}

impl<S: Scalar> SegNet<S> {
    pub fn init(cfg: NetConfig, seed: u64) -> Result<SegNet<S>> {
        if cfg.num_classes < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                cfg.num_classes
            )));
        }
        if cfg.d_prime < 4 {
            return Err(TensorError::InvalidArgument(format!(
                "pixel trunk width {} too small",
                cfg.d_prime
            )));
        }
        let b = cfg.use_bias;
        // Each layer draws from its own stream so widening one never
        // reshuffles another; heads additionally get per-class streams.
        let layer = |name: &str, k, din, dout, stride, bias| {
            ConvLayer::init(k, din, dout, stride, bias, &mut rng_named(seed, name, &[]))
        };
        Ok(SegNet {
            enc1: layer("enc1", 3, cfg.in_channels, cfg.e_dim, 2, b),
            enc2: layer("enc2", 3, cfg.e_dim, cfg.e_dim, 2, b),
            sed1: layer("sed1", 3, cfg.e_dim, cfg.e_dim, 1, b),
            sed_out: layer("sed_out", 1, cfg.e_dim, cfg.num_classes, 1, b),
            trunk: layer("trunk", 3, cfg.e_dim, cfg.d_prime, 1, b),
            heads: (0..cfg.num_classes)
                .map(|c| {
                    let rng = &mut rng_named(seed, "head", &[c as u64]);
                    ConvLayer::init(cfg.head_kernel, cfg.d_prime, cfg.in_channels, 1, false, rng)
                })
                .collect(),
            cfg,
        })
    }

    /// Shared encoder. Output is H/4 x W/4 x e_dim; extents must divide by 4.
    /// Returns the realized channel keep-mask when a perturbation ran.
    pub fn encode<R: Rng>(
        &self,
        x: &Tensor<S>,
        perturb: FeaturePerturb<'_, R>,
    ) -> Result<(Tensor<S>, Option<Vec<bool>>)> {
        let (h, w, d) = x.dims3()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "encoder needs extents divisible by 4, got {h}x{w}"
            )));
        }
        if d != self.cfg.in_channels {
            return Err(TensorError::ShapeMismatch(format!(
                "image has {d} channels, net expects {}",
                self.cfg.in_channels
            )));
        }
        let enc = self.enc2.forward(&self.enc1.forward(x)?.relu())?.relu();
        match perturb {
            FeaturePerturb::None => Ok((enc, None)),
            FeaturePerturb::Sample { p, rng } => {
                let (out, keep) = enc.channel_dropout(p, rng)?;
                Ok((out, Some(keep)))
            }
            FeaturePerturb::Reuse { p, keep } => {
                Ok((enc.channel_dropout_with_mask(keep, p)?, Some(keep.to_vec())))
            }
        }
    }

    /// Semantic decoder: conv block, upsample back to image resolution, 1x1
    /// projection to class logits.
    pub fn semantic_decode(&self, enc: &Tensor<S>) -> Result<Tensor<S>> {
        let (eh, ew, _) = enc.dims3()?;
        let hid = self.sed1.forward(enc)?.relu();
        self.sed_out.forward(&hid.nearest_resize(eh * 4, ew * 4)?)
    }

    /// Class probabilities at image resolution.
    pub fn semantic_probs(&self, enc: &Tensor<S>) -> Result<Tensor<S>> {
        self.semantic_decode(enc)?.softmax_channels()
    }

    /// Pixel trunk: the shared reconstruction substrate fea, quarter res.
    pub fn pixel_trunk(&self, enc: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.trunk.forward(enc)?.relu())
    }

    /// Head for class `c` applied to (possibly class-gated) trunk features,
    /// upsampled to image resolution. Bias-free, so zero input gives zero
    /// output exactly.
    pub fn head_apply(&self, c: usize, fea_c: &Tensor<S>) -> Result<Tensor<S>> {
        let head = self.heads.get(c).ok_or(TensorError::BadClassIndex {
            index: c,
            classes: self.cfg.num_classes,
        })?;
        let (fh, fw, _) = fea_c.dims3()?;
        head.forward(fea_c)?.nearest_resize(fh * 4, fw * 4)
    }

    /// Full-image probabilities for evaluation, no perturbation.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (enc, _) = self.encode::<rand::rngs::ThreadRng>(x, FeaturePerturb::None)?;
        self.semantic_probs(&enc)
    }

    pub fn params(&self) -> Vec<NamedParam<S>> {
        let mut out = Vec::new();
        self.enc1.params("enc1", ParamGroup::Main, &mut out);
        self.enc2.params("enc2", ParamGroup::Main, &mut out);
        self.sed1.params("sed1", ParamGroup::Main, &mut out);
        self.sed_out.params("sed_out", ParamGroup::Main, &mut out);
        self.trunk.params("trunk", ParamGroup::Pid, &mut out);
        for (c, h) in self.heads.iter().enumerate() {
            h.params(&format!("head{c}"), ParamGroup::Pid, &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Analytic parameter count for a config; cross-checked against the
    /// actual tensors in tests.
    pub fn expected_param_count(cfg: &NetConfig) -> usize {
        let conv = |k: usize, din: usize, dout: usize| {
            k * k * din * dout + if cfg.use_bias { dout } else { 0 }
        };
        conv(3, cfg.in_channels, cfg.e_dim)
            + conv(3, cfg.e_dim, cfg.e_dim)
            + conv(3, cfg.e_dim, cfg.e_dim)
            + conv(1, cfg.e_dim, cfg.num_classes)
            + conv(3, cfg.e_dim, cfg.d_prime)
            + cfg.num_classes * cfg.head_kernel * cfg.head_kernel * cfg.d_prime * cfg.in_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::LabelMap;
    use crate::rng::rng_named;
    use crate::tensor::gradcheck::finite_diff_check;

    type R = rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            in_channels: 2,
            num_classes: 3,
            e_dim: 6,
            d_prime: 6,
            use_bias: true,
            head_kernel: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_heads_differ() {
        let a: SegNet<f32> = SegNet::init(tiny_cfg(), 99).unwrap();
        let b: SegNet<f32> = SegNet::init(tiny_cfg(), 99).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.to_vec(), pb.tensor.to_vec());
        }
        assert_ne!(a.heads[0].weight.to_vec(), a.heads[1].weight.to_vec());
        assert_ne!(a.heads[1].weight.to_vec(), a.heads[2].weight.to_vec());
    }

    #[test]
    fn init_scale_matches_fan_in_formula() {
        // One wide layer gives plenty of samples for a std estimate.
        let mut rng = rng_named(7, "scale", &[]);
        let layer: ConvLayer<f64> = ConvLayer::init(3, 16, 16, 1, false, &mut rng);
        let vals = layer.weight.to_vec();
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = (2.0f64 / (3.0 * 3.0 * 16.0)).sqrt(); // uniform bound / sqrt(3)
        assert!(
            (var.sqrt() - expect).abs() / expect < 0.2,
            "std {} vs fan-in formula {expect}",
            var.sqrt()
        );
    }

    #[test]
    fn shape_closure_and_param_count() {
        let cfg = tiny_cfg();
        let net: SegNet<f32> = SegNet::init(cfg, 1).unwrap();
        let x = Tensor::<f32>::full(&[12, 8, 2], 0.3);
        let (enc, keep) = net.encode::<R>(&x, FeaturePerturb::None).unwrap();
        assert_eq!(enc.shape(), &[3, 2, 6]);
        assert!(keep.is_none());
        let logits = net.semantic_decode(&enc).unwrap();
        assert_eq!(logits.shape(), &[12, 8, 3]);
        let fea = net.pixel_trunk(&enc).unwrap();
        assert_eq!(fea.shape(), &[3, 2, 6]);
        let rec = net.head_apply(0, &fea).unwrap();
        assert_eq!(rec.shape(), &[12, 8, 2]);
        assert_eq!(net.param_count(), SegNet::<f32>::expected_param_count(&cfg));
    }

    #[test]
    fn encode_rejects_bad_extents_and_channels() {
        let net: SegNet<f32> = SegNet::init(tiny_cfg(), 1).unwrap();
        let odd = Tensor::<f32>::zeros(&[10, 8, 2]);
        assert!(net.encode::<R>(&odd, FeaturePerturb::None).is_err());
        let wrong = Tensor::<f32>::zeros(&[8, 8, 3]);
        assert!(net.encode::<R>(&wrong, FeaturePerturb::None).is_err());
    }

    #[test]
    fn feature_perturb_mask_reuse_matches() {
        let net: SegNet<f32> = SegNet::init(tiny_cfg(), 5).unwrap();
        let mut rng = rng_named(5, "drop", &[]);
        let x = Tensor::<f32>::rand_uniform(&[8, 8, 2], 0.0, 1.0, &mut rng);
        let (a, keep) = net.encode(&x, FeaturePerturb::Sample { p: 0.5, rng: &mut rng }).unwrap();
        let keep = keep.unwrap();
        let (b, _) = net.encode::<R>(&x, FeaturePerturb::Reuse { p: 0.5, keep: &keep }).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        // p = 0 keeps everything.
        let (c, keep0) = net.encode(&x, FeaturePerturb::Sample { p: 0.0, rng: &mut rng }).unwrap();
        let (plain, _) = net.encode::<R>(&x, FeaturePerturb::None).unwrap();
        assert!(keep0.unwrap().iter().all(|&k| k));
        assert_eq!(c.to_vec(), plain.to_vec());
    }

    #[test]
    fn bias_free_paths_propagate_zero() {
        let cfg = NetConfig { use_bias: false, ..tiny_cfg() };
        let net: SegNet<f32> = SegNet::init(cfg, 3).unwrap();
        let x = Tensor::<f32>::zeros(&[8, 8, 2]);
        let (enc, _) = net.encode::<R>(&x, FeaturePerturb::None).unwrap();
        let fea = net.pixel_trunk(&enc).unwrap();
        assert!(fea.to_vec().iter().all(|&v| v == 0.0));
        let rec = net.head_apply(1, &fea).unwrap();
        assert!(rec.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_gradients_are_isolated() {
        let net: SegNet<f64> = SegNet::init(tiny_cfg(), 11).unwrap();
        let mut rng = rng_named(11, "iso", &[]);
        let fea = Tensor::<f64>::rand_uniform(&[2, 2, 6], 0.0, 1.0, &mut rng);
        net.head_apply(1, &fea).unwrap().sum().backward().unwrap();
        assert!(net.heads[1].weight.grad().is_some());
        assert!(net.heads[0].weight.grad().is_none());
        assert!(net.heads[2].weight.grad().is_none());
        assert!(net.head_apply(7, &fea).is_err());
    }

    #[test]
    fn zero_final_conv_gives_uniform_probs() {
        let net: SegNet<f64> = SegNet::init(tiny_cfg(), 13).unwrap();
        net.sed_out.weight.apply(|w| w.fill(0.0));
        if let Some(b) = &net.sed_out.bias {
            b.apply(|v| v.fill(0.0));
        }
        let mut rng = rng_named(13, "uniform", &[]);
        let x = Tensor::<f64>::rand_uniform(&[8, 8, 2], 0.0, 1.0, &mut rng);
        let (enc, _) = net.encode::<R>(&x, FeaturePerturb::None).unwrap();
        let p = net.semantic_probs(&enc).unwrap();
        for &v in p.to_vec().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_decode_cross_entropy_gradcheck() {
        let net: SegNet<f64> = SegNet::init(tiny_cfg(), 17).unwrap();
        let mut rng = rng_named(17, "net-fd", &[]);
        let x = Tensor::<f64>::rand_uniform(&[8, 8, 2], 0.0, 1.0, &mut rng);
        let y = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect());
        let keep = vec![true, false, true, true, false, true];
        let params: Vec<_> = net.params().iter().map(|p| p.tensor.clone()).collect();

        let report = finite_diff_check(
            &params,
            || {
                let (enc, _) =
                    net.encode::<R>(&x, FeaturePerturb::Reuse { p: 0.5, keep: &keep })?;
                let ce = net.semantic_probs(&enc)?.cross_entropy(&y)?;
                // Route the trunk and one head through the loss too.
                let fea = net.pixel_trunk(&enc)?;
                let rec = net.head_apply(0, &fea)?.add(&net.head_apply(2, &fea)?)?;
                ce.add(&rec.mse(&x)?.scalar_mul(0.5))
            },
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }
}
