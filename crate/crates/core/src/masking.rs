//! Patch-grid mask sampling plus the weak/strong input perturbations.
//!
//! Masks are constant over p x p grid cells (boundary cells cropped at the
//! image edge) and the number of masked cells is quantized to exactly
//! round(ratio * cells) per draw. Weak perturbation moves geometry (flip,
//! shifted crop) and transforms the label identically; strong perturbation is
//! photometric only, so predictions on the strong stream stay pixel-aligned
//! with pseudo-labels from the weak stream.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::label::{LabelMap, IGNORE_LABEL};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    pub patch: usize,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn new(patch: usize, ratio: f64) -> Result<Self> {
        if patch == 0 {
            return Err(TensorError::InvalidArgument("mask patch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&ratio) {
            return Err(TensorError::InvalidArgument(format!(
                "mask ratio {ratio} must lie in [0, 1)"
            )));
        }
        Ok(MaskSpec { patch, ratio })
    }
}

/// A realized patch mask over an H x W image. `true` cells are masked
/// (dropped from the input); everything else is visible.
#[derive(Clone, Debug)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    masked: Vec<bool>,
}

impl Mask {
    pub fn cell_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn masked_cell_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.masked[(y / self.patch) * self.grid_w + (x / self.patch)]
    }

    /// Fraction of image pixels that are masked. Differs from the cell ratio
    /// only when boundary cells are cropped (H or W not divisible by patch).
    pub fn masked_pixel_fraction(&self) -> f64 {
        let n = self
            .masked_positions()
            .len();
        n as f64 / (self.h * self.w) as f64
    }

    /// Flat h*w indices of masked pixels, row-major.
    pub fn masked_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.is_masked(y, x) {
                    out.push(y * self.w + x);
                }
            }
        }
        out
    }

    /// Visibility map as a 0/1 tensor broadcast over `d` channels, for
    /// element-wise multiplication with the image.
    pub fn to_tensor<S: Scalar>(&self, d: usize) -> Tensor<S> {
        let mut data = vec![S::one(); self.h * self.w * d];
        for pos in self.masked_positions() {
            for v in &mut data[pos * d..(pos + 1) * d] {
                *v = S::zero();
            }
        }
        Tensor::make_leaf(vec![self.h, self.w, d], data)
    }
}

impl Mask {
    /// Build a mask from explicit cell states (row-major over the grid).
    pub fn from_cells(h: usize, w: usize, patch: usize, cells: Vec<bool>) -> Result<Mask> {
        let grid_h = h.div_ceil(patch);
        let grid_w = w.div_ceil(patch);
        if cells.len() != grid_h * grid_w {
            return Err(TensorError::ShapeMismatch(format!(
                "{} cells for a {grid_h}x{grid_w} grid",
                cells.len()
            )));
        }
        Ok(Mask { h, w, patch, grid_h, grid_w, masked: cells })
    }
}

/// Draw a mask: ceil(H/p) x ceil(W/p) grid, exactly round(ratio * cells)
/// cells masked, chosen uniformly without replacement.
pub fn sample_mask(h: usize, w: usize, spec: MaskSpec, rng: &mut impl Rng) -> Result<Mask> {
    if h < spec.patch || w < spec.patch {
        return Err(TensorError::InvalidArgument(format!(
            "image {h}x{w} smaller than mask patch {}",
            spec.patch
        )));
    }
    let grid_h = h.div_ceil(spec.patch);
    let grid_w = w.div_ceil(spec.patch);
    let cells = grid_h * grid_w;
    let k = (spec.ratio * cells as f64).round() as usize;
    let mut masked = vec![false; cells];
    for idx in rand::seq::index::sample(rng, cells, k) {
        masked[idx] = true;
    }
    Ok(Mask { h, w, patch: spec.patch, grid_h, grid_w, masked })
}

/// x with masked pixels zeroed across all channels. Gradients flow through
/// the visible pixels untouched.
pub fn apply_mask<S: Scalar>(x: &Tensor<S>, mask: &Mask) -> Result<Tensor<S>> {
    let (h, w, d) = x.dims3()?;
    if h != mask.h || w != mask.w {
        return Err(TensorError::ShapeMismatch(format!(
            "image {h}x{w} vs mask {}x{}",
            mask.h, mask.w
        )));
    }
    x.mul(&mask.to_tensor(d))
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct PerturbConfig {
    /// Weak: horizontal flip probability.
    pub flip_prob: f64,
    /// Weak: maximum crop shift in pixels along each axis.
    pub max_shift: usize,
    /// Strong: additive brightness jitter amplitude.
    pub brightness: f64,
    /// Strong: multiplicative contrast jitter amplitude (factor in 1 +- amp).
    pub contrast: f64,
    /// Strong: additive Gaussian noise standard deviation.
    pub noise_std: f64,
    /// Strong: probability of shuffling the channel order.
    pub channel_shuffle_prob: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            flip_prob: 0.5,
            max_shift: 4,
            brightness: 0.2,
            contrast: 0.2,
            noise_std: 0.05,
            channel_shuffle_prob: 0.2,
        }
    }
}

/// Realized weak-perturbation geometry, kept so tests can reason about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub flip: bool,
    pub dy: isize,
    pub dx: isize,
}

impl Geometry {
    pub fn identity() -> Self {
        Geometry { flip: false, dy: 0, dx: 0 }
    }

    /// Fraction of output pixels that fall outside the source image.
    pub fn padded_fraction(&self, h: usize, w: usize) -> f64 {
        let vis_h = h.saturating_sub(self.dy.unsigned_abs());
        let vis_w = w.saturating_sub(self.dx.unsigned_abs());
        1.0 - (vis_h * vis_w) as f64 / (h * w) as f64
    }
}

/// Horizontal flip (prob `flip_prob`) plus a random shifted crop padded back
/// to H x W. The label gets the identical transform; padded-in label pixels
/// become the ignore marker, padded-in image pixels become zero.
pub fn weak_perturb<S: Scalar>(
    x: &Tensor<S>,
    label: Option<&LabelMap>,
    cfg: &PerturbConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<S>, Option<LabelMap>, Geometry)> {
    let (h, w, _) = x.dims3()?;
    if let Some(l) = label {
        if l.h != h || l.w != w {
            return Err(TensorError::ShapeMismatch(format!(
                "image {h}x{w} vs label {}x{}",
                l.h, l.w
            )));
        }
    }
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let s = cfg.max_shift as isize;
    let geo = Geometry {
        flip,
        dy: if s == 0 { 0 } else { rng.gen_range(-s..=s) },
        dx: if s == 0 { 0 } else { rng.gen_range(-s..=s) },
    };
    let xi = apply_geometry(x, geo)?;
    let li = label.map(|l| apply_geometry_label(l, geo));
    Ok((xi, li, geo))
}

/// Apply a realized geometry to an image tensor (used by tests to replay the
/// transform). Out-of-source pixels are zero.
pub fn apply_geometry<S: Scalar>(x: &Tensor<S>, geo: Geometry) -> Result<Tensor<S>> {
    let (h, w, d) = x.dims3()?;
    let src = x.data();
    let mut out = vec![S::zero(); h * w * d];
    for y in 0..h {
        for xx in 0..w {
            let sx0 = if geo.flip { w - 1 - xx } else { xx };
            let sy = y as isize + geo.dy;
            let sx = sx0 as isize + geo.dx;
            if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                continue;
            }
            let s_off = (sy as usize * w + sx as usize) * d;
            let d_off = (y * w + xx) * d;
            out[d_off..d_off + d].copy_from_slice(&src[s_off..s_off + d]);
        }
    }
    drop(src);
    Ok(Tensor::make_leaf(vec![h, w, d], out))
}

pub fn apply_geometry_label(l: &LabelMap, geo: Geometry) -> LabelMap {
    let mut out = LabelMap::filled(l.h, l.w, IGNORE_LABEL);
    for y in 0..l.h {
        for x in 0..l.w {
            let sx0 = if geo.flip { l.w - 1 - x } else { x };
            let sy = y as isize + geo.dy;
            let sx = sx0 as isize + geo.dx;
            if sy < 0 || sy >= l.h as isize || sx < 0 || sx >= l.w as isize {
                continue;
            }
            out.set(y, x, l.get(sy as usize, sx as usize));
        }
    }
    out
}

/// Photometric-only jitter: contrast scale, brightness offset, Gaussian
/// noise, occasional channel shuffle; clamped to [0, 1]. Never moves pixels.
pub fn strong_perturb<S: Scalar>(
    x: &Tensor<S>,
    cfg: &PerturbConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<S>> {
    let (h, w, d) = x.dims3()?;
    let contrast = 1.0 + cfg.contrast * (2.0 * rng.gen::<f64>() - 1.0);
    let brightness = cfg.brightness * (2.0 * rng.gen::<f64>() - 1.0);
    let mut chans: Vec<usize> = (0..d).collect();
    if rng.gen::<f64>() < cfg.channel_shuffle_prob {
        chans.shuffle(rng);
    }
    let src = x.data();
    let mut out = vec![S::zero(); src.len()];
    for (orow, srow) in out.chunks_exact_mut(d).zip(src.chunks_exact(d)) {
        for (j, o) in orow.iter_mut().enumerate() {
            let mut v = srow[chans[j]].to_f64_lossy() * contrast + brightness;
            if cfg.noise_std > 0.0 {
                v += cfg.noise_std * gaussian(rng);
            }
            *o = S::from_f64_lossy(v.clamp(0.0, 1.0));
        }
    }
    drop(src);
    Ok(Tensor::make_leaf(vec![h, w, d], out))
}

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_named;

    type T64 = Tensor<f64>;

    #[test]
    fn mask_counts_are_exact() {
        let mut rng = rng_named(1, "mask", &[]);
        let spec = MaskSpec::new(6, 0.4).unwrap();
        let m = sample_mask(36, 36, spec, &mut rng).unwrap();
        assert_eq!(m.cell_count(), 36);
        assert_eq!(m.masked_cell_count(), 14);
        assert!((m.masked_pixel_fraction() - 14.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let mut rng = rng_named(2, "mask", &[]);
        let spec = MaskSpec::new(4, 0.0).unwrap();
        let m = sample_mask(16, 16, spec, &mut rng).unwrap();
        assert_eq!(m.masked_cell_count(), 0);
        let x = T64::full(&[16, 16, 3], 0.5);
        let y = apply_mask(&x, &m).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn spec_validation() {
        assert!(MaskSpec::new(0, 0.4).is_err());
        assert!(MaskSpec::new(4, 1.0).is_err());
        assert!(MaskSpec::new(4, -0.1).is_err());
        let mut rng = rng_named(3, "mask", &[]);
        assert!(sample_mask(3, 8, MaskSpec::new(4, 0.4).unwrap(), &mut rng).is_err());
    }

    #[test]
    fn masks_are_patch_constant_and_cropped() {
        let mut rng = rng_named(4, "mask", &[]);
        // 10x10 with patch 4 -> 3x3 grid, boundary cells cover only 2 pixels.
        let spec = MaskSpec::new(4, 0.5).unwrap();
        let m = sample_mask(10, 10, spec, &mut rng).unwrap();
        assert_eq!((m.grid_h, m.grid_w), (3, 3));
        assert_eq!(m.masked_cell_count(), 5);
        for gy in 0..3 {
            for gx in 0..3 {
                let expect = m.is_masked(gy * 4, gx * 4);
                for y in gy * 4..(gy * 4 + 4).min(10) {
                    for x in gx * 4..(gx * 4 + 4).min(10) {
                        assert_eq!(m.is_masked(y, x), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_cell_frequency_is_uniform() {
        let spec = MaskSpec::new(6, 0.4).unwrap();
        let trials = 1000;
        let mut counts = vec![0u32; 36];
        for t in 0..trials {
            let mut rng = rng_named(5, "mask", &[t]);
            let m = sample_mask(36, 36, spec, &mut rng).unwrap();
            for (c, &b) in counts.iter_mut().zip(&m.masked) {
                if b {
                    *c += 1;
                }
            }
        }
        let p = 14.0 / 36.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "cell frequency {freq} outside 3 sigma of {p}"
            );
        }
    }

    #[test]
    fn apply_mask_zeroes_all_channels_and_is_idempotent() {
        let mut rng = rng_named(6, "mask", &[]);
        let spec = MaskSpec::new(2, 0.5).unwrap();
        let m = sample_mask(8, 8, spec, &mut rng).unwrap();
        let x = T64::rand_uniform(&[8, 8, 3], 0.1, 1.0, &mut rng);
        let once = apply_mask(&x, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        assert_eq!(once.to_vec(), twice.to_vec());
        let d = once.data();
        for pos in 0..64 {
            let masked = m.is_masked(pos / 8, pos % 8);
            for c in 0..3 {
                assert_eq!(d[pos * 3 + c] == 0.0, masked || x.data()[pos * 3 + c] == 0.0);
            }
        }
    }

    #[test]
    fn mask_gradient_blocks_masked_pixels() {
        let mut rng = rng_named(7, "mask", &[]);
        let m = sample_mask(4, 4, MaskSpec::new(2, 0.5).unwrap(), &mut rng).unwrap();
        let x = T64::param(&[4, 4, 1], vec![1.0; 16]).unwrap();
        apply_mask(&x, &m).unwrap().sum().backward().unwrap();
        let g = x.grad().unwrap();
        for pos in 0..16 {
            let expect = if m.is_masked(pos / 4, pos % 4) { 0.0 } else { 1.0 };
            assert_eq!(g[pos], expect);
        }
    }

    #[test]
    fn weak_perturb_identity_geometry() {
        let x = T64::from_vec(&[4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let l = LabelMap::new(4, 4, (0..16).map(|v| (v % 3) as u8).collect());
        let xi = apply_geometry(&x, Geometry::identity()).unwrap();
        assert_eq!(xi.to_vec(), x.to_vec());
        assert_eq!(apply_geometry_label(&l, Geometry::identity()), l);
    }

    #[test]
    fn flip_twice_restores() {
        let x = T64::from_vec(&[2, 3, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let f = Geometry { flip: true, dy: 0, dx: 0 };
        let once = apply_geometry(&x, f).unwrap();
        assert_eq!(once.to_vec(), vec![3., 2., 1., 6., 5., 4.]);
        let twice = apply_geometry(&once, f).unwrap();
        assert_eq!(twice.to_vec(), x.to_vec());
    }

    #[test]
    fn shift_pads_with_ignore_and_matches_analytic_fraction() {
        let x = T64::full(&[6, 6, 2], 1.0);
        let l = LabelMap::filled(6, 6, 2);
        let geo = Geometry { flip: false, dy: 2, dx: -1 };
        let xi = apply_geometry(&x, geo).unwrap();
        let li = apply_geometry_label(&l, geo);
        let zero_pixels = xi.to_vec().chunks(2).filter(|c| c[0] == 0.0).count();
        let ignored = li.data.iter().filter(|&&v| v == IGNORE_LABEL).count();
        assert_eq!(zero_pixels, ignored);
        let frac = geo.padded_fraction(6, 6);
        assert!((ignored as f64 / 36.0 - frac).abs() < 1e-12);
        // image and label moved identically
        for y in 0..6 {
            for xx in 0..6 {
                let img_zero = xi.data()[(y * 6 + xx) * 2] == 0.0;
                assert_eq!(img_zero, li.get(y, xx) == IGNORE_LABEL);
            }
        }
    }

    #[test]
    fn weak_perturb_respects_config_bounds() {
        let cfg = PerturbConfig { flip_prob: 1.0, max_shift: 2, ..Default::default() };
        let x = T64::full(&[8, 8, 1], 0.5);
        let l = LabelMap::filled(8, 8, 1);
        for t in 0..20 {
            let mut rng = rng_named(8, "weak", &[t]);
            let (_, li, geo) = weak_perturb(&x, Some(&l), &cfg, &mut rng).unwrap();
            assert!(geo.flip);
            assert!(geo.dy.abs() <= 2 && geo.dx.abs() <= 2);
            assert!(li.is_some());
        }
    }

    #[test]
    fn strong_perturb_zero_amplitude_is_identity() {
        let cfg = PerturbConfig {
            flip_prob: 0.0,
            max_shift: 0,
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            channel_shuffle_prob: 0.0,
        };
        let mut rng = rng_named(9, "strong", &[]);
        let x = T64::from_vec(&[2, 2, 2], vec![0.1, 0.9, 0.4, 0.6, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let y = strong_perturb(&x, &cfg, &mut rng).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn strong_perturb_clamps_and_bounds_mean_shift() {
        let cfg = PerturbConfig {
            flip_prob: 0.0,
            max_shift: 0,
            brightness: 0.1,
            contrast: 0.0,
            noise_std: 0.0,
            channel_shuffle_prob: 0.0,
        };
        let x = T64::full(&[4, 4, 3], 0.5);
        for t in 0..50 {
            let mut rng = rng_named(10, "strong", &[t]);
            let y = strong_perturb(&x, &cfg, &mut rng).unwrap();
            let v = y.to_vec();
            assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
            assert!((mean - 0.5).abs() <= 0.1 + 1e-12);
        }
    }

    #[test]
    fn strong_perturb_never_moves_pixels() {
        // With pure channel shuffle the per-pixel channel multiset is
        // preserved, so spatial structure is untouched.
        let cfg = PerturbConfig {
            flip_prob: 0.0,
            max_shift: 0,
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            channel_shuffle_prob: 1.0,
        };
        let mut rng = rng_named(11, "strong", &[]);
        let x = T64::rand_uniform(&[3, 3, 3], 0.0, 1.0, &mut rng);
        let y = strong_perturb(&x, &cfg, &mut rng).unwrap();
        let (xd, yd) = (x.to_vec(), y.to_vec());
        for (xr, yr) in xd.chunks(3).zip(yd.chunks(3)) {
            let mut a = xr.to_vec();
            let mut b = yr.to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }
}
