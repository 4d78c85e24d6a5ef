//! Synthetic segmentation corpora on disk plus loading, labeled/unlabeled
//! splits, and deterministic batch scheduling.
//!
//! Corpus layout:
//!
//! ```text
//! corpus/
//!   manifest.json        h, w, classes, sample ids
//!   img/<id>.ppm         P6 color image
//!   lab/<id>.pgm         P5 label map (255 = ignore)
//!   split.json           written by `write_split`, optional until then
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{LabelMap, IGNORE_LABEL};
use crate::netpbm;
use crate::rng::{derive, rng_from, rng_named, tag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Pnm {
        path: PathBuf,
        #[source]
        source: netpbm::PnmError,
    },
    #[error("bad manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: label value {value} at byte {offset} is outside 0..{classes} and not 255")]
    BadLabel { path: PathBuf, offset: usize, value: u8, classes: usize },
    #[error("{path} already exists; pass overwrite to replace it")]
    Collision { path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.into(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.into(), source })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Interleaved RGB, row major.
    pub rgb: Vec<u8>,
    pub label: LabelMap,
}

impl Sample {
    /// Image as an `[h, w, 3]` tensor scaled to [0, 1].
    pub fn image<S: Scalar>(&self, h: usize, w: usize) -> Tensor<S> {
        let data = self
            .rgb
            .iter()
            .map(|&b| S::from_f64_lossy(b as f64 / 255.0))
            .collect();
        Tensor::from_vec(&[h, w, 3], data).unwrap()
    }
}

#[derive(Debug)]
pub struct Corpus {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

// --- synthesis ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub seed: u64,
    /// Per-image brightness/tint drift, raw 0..255 units. Large values make
    /// a handful of labeled images unrepresentative of the full corpus.
    pub global_jitter: f64,
    /// Per-shape color jitter.
    pub shape_jitter: f64,
    /// Per-pixel uniform noise.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 264,
            h: 64,
            w: 64,
            classes: 4,
            seed: 7,
            global_jitter: 80.0,
            shape_jitter: 30.0,
            pixel_noise: 14.0,
        }
    }
}

/// Anchor colors per class. Class 0 is the background tone; foreground
/// classes are spread around the hue wheel so any C >= 2 works.
pub fn class_color(c: usize, classes: usize) -> [f64; 3] {
    if c == 0 {
        return [62.0, 62.0, 72.0];
    }
    let fg = (classes - 1).max(1);
    let hue = (c - 1) as f64 / fg as f64 * 360.0;
    hsv_to_rgb(hue, 0.75, 0.82)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Triangle { v: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        match self {
            Shape::Disk { cy, cx, r } => {
                let (dy, dx) = (fy - cy, fx - cx);
                dy * dy + dx * dx <= r * r
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= *y0 && y < *y1 && x >= *x0 && x < *x1,
            Shape::Triangle { v } => {
                let sign = |a: (f64, f64), b: (f64, f64)| {
                    (fx - b.0) * (a.1 - b.1) - (a.0 - b.0) * (fy - b.1)
                };
                let d0 = sign(v[0], v[1]);
                let d1 = sign(v[1], v[2]);
                let d2 = sign(v[2], v[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn render_sample(cfg: &SynthConfig, index: usize) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (cfg.h, cfg.w);
    let mut rng = rng_named(cfg.seed, "sample", &[index as u64]);

    let tint: [f64; 3] = [
        rng.gen_range(-cfg.global_jitter..=cfg.global_jitter),
        rng.gen_range(-cfg.global_jitter..=cfg.global_jitter),
        rng.gen_range(-cfg.global_jitter..=cfg.global_jitter),
    ];

    let n_shapes = rng.gen_range(2..=4);
    let min_side = h.min(w) as f64;
    let mut shapes = Vec::new();
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..cfg.classes.max(2));
        let kind = rng.gen_range(0..3);
        let cy = rng.gen_range(0.15..0.85) * h as f64;
        let cx = rng.gen_range(0.15..0.85) * w as f64;
        let r = rng.gen_range(0.12..0.30) * min_side;
        let shape = match kind {
            0 => Shape::Disk { cy, cx, r },
            1 => {
                let hh = rng.gen_range(0.10..0.28) * h as f64;
                let hw = rng.gen_range(0.10..0.28) * w as f64;
                Shape::Rect {
                    y0: (cy - hh).max(0.0) as usize,
                    x0: (cx - hw).max(0.0) as usize,
                    y1: ((cy + hh) as usize).min(h),
                    x1: ((cx + hw) as usize).min(w),
                }
            }
            _ => {
                let mut v = [(0.0, 0.0); 3];
                for vv in &mut v {
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let rad = rng.gen_range(0.6..1.0) * r;
                    *vv = (cx + rad * ang.cos(), cy + rad * ang.sin());
                }
                Shape::Triangle { v }
            }
        };
        let jitter: [f64; 3] = [
            rng.gen_range(-cfg.shape_jitter..=cfg.shape_jitter),
            rng.gen_range(-cfg.shape_jitter..=cfg.shape_jitter),
            rng.gen_range(-cfg.shape_jitter..=cfg.shape_jitter),
        ];
        shapes.push((shape, class as u8, jitter));
    }

    let mut labels = vec![0u8; h * w];
    let mut colors = vec![[0.0f64; 3]; h * w];
    let bg = class_color(0, cfg.classes);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut color = bg;
            // Subtle background texture so class 0 is not a constant.
            let stripe = ((y / 4 + x / 4) % 2) as f64 * 8.0;
            for ch in 0..3 {
                color[ch] += stripe;
            }
            for (shape, class, jitter) in &shapes {
                if shape.contains(y, x) {
                    labels[i] = *class;
                    let base = class_color(*class as usize, cfg.classes);
                    for ch in 0..3 {
                        color[ch] = base[ch] + jitter[ch];
                    }
                }
            }
            colors[i] = color;
        }
    }

    // One-pixel ignore band wherever the label changes between 4-neighbors.
    let painted = labels.clone();
    for y in 0..h {
        for x in 0..w {
            let c = painted[y * w + x];
            let mut boundary = false;
            if y > 0 && painted[(y - 1) * w + x] != c {
                boundary = true;
            }
            if x > 0 && painted[y * w + x - 1] != c {
                boundary = true;
            }
            if y + 1 < h && painted[(y + 1) * w + x] != c {
                boundary = true;
            }
            if x + 1 < w && painted[y * w + x + 1] != c {
                boundary = true;
            }
            if boundary {
                labels[y * w + x] = IGNORE_LABEL;
            }
        }
    }

    let mut rgb = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for ch in 0..3 {
            let noise = rng.gen_range(-cfg.pixel_noise..=cfg.pixel_noise);
            let v = colors[i][ch] + tint[ch] + noise;
            rgb[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    (rgb, labels)
}

/// Writes a full corpus directory. Refuses to touch an existing corpus
/// unless `overwrite` is set.
pub fn synth_generate(dir: &Path, cfg: &SynthConfig, overwrite: bool) -> Result<Manifest, DataError> {
    if cfg.classes < 2 || cfg.classes > 200 {
        return Err(DataError::Invalid(format!("classes {} outside 2..=200", cfg.classes)));
    }
    if cfg.n == 0 || cfg.h < 8 || cfg.w < 8 {
        return Err(DataError::Invalid("need n >= 1 and extents >= 8".into()));
    }
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !overwrite {
        return Err(DataError::Collision { path: dir.into() });
    }
    for sub in ["img", "lab"] {
        fs::create_dir_all(dir.join(sub))
            .map_err(|source| DataError::Io { path: dir.join(sub), source })?;
    }
    let mut ids = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let id = format!("s{i:05}");
        let (rgb, labels) = render_sample(cfg, i);
        write_file(&dir.join("img").join(format!("{id}.ppm")), &netpbm::encode_ppm(cfg.h, cfg.w, &rgb))?;
        write_file(&dir.join("lab").join(format!("{id}.pgm")), &netpbm::encode_pgm(cfg.h, cfg.w, &labels))?;
        ids.push(id);
    }
    let manifest = Manifest { h: cfg.h, w: cfg.w, classes: cfg.classes, ids };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, json.as_bytes())?;
    Ok(manifest)
}

// --- loading ---------------------------------------------------------------

pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| DataError::Manifest { path: manifest_path.clone(), message: e.to_string() })?;
    if manifest.classes < 2 {
        return Err(DataError::Manifest {
            path: manifest_path.clone(),
            message: format!("classes {} < 2", manifest.classes),
        });
    }
    if manifest.ids.is_empty() {
        return Err(DataError::Manifest { path: manifest_path, message: "no sample ids".into() });
    }
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let img_path = dir.join("img").join(format!("{id}.ppm"));
        let (h, w, rgb) = netpbm::parse_ppm(&read_file(&img_path)?)
            .map_err(|source| DataError::Pnm { path: img_path.clone(), source })?;
        if (h, w) != (manifest.h, manifest.w) {
            return Err(DataError::Manifest {
                path: img_path,
                message: format!("image is {h}x{w}, manifest says {}x{}", manifest.h, manifest.w),
            });
        }
        let lab_path = dir.join("lab").join(format!("{id}.pgm"));
        let lab_bytes = read_file(&lab_path)?;
        let (lh, lw, gray) = netpbm::parse_pgm(&lab_bytes)
            .map_err(|source| DataError::Pnm { path: lab_path.clone(), source })?;
        if (lh, lw) != (manifest.h, manifest.w) {
            return Err(DataError::Manifest {
                path: lab_path,
                message: format!("label is {lh}x{lw}, manifest says {}x{}", manifest.h, manifest.w),
            });
        }
        let payload_start = lab_bytes.len() - gray.len();
        for (i, &v) in gray.iter().enumerate() {
            if v != IGNORE_LABEL && v as usize >= manifest.classes {
                return Err(DataError::BadLabel {
                    path: lab_path,
                    offset: payload_start + i,
                    value: v,
                    classes: manifest.classes,
                });
            }
        }
        samples.push(Sample { id: id.clone(), rgb, label: LabelMap::new(lh, lw, gray) });
    }
    Ok(Corpus { h: manifest.h, w: manifest.w, classes: manifest.classes, samples })
}

// --- splits ----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Split {
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
}

/// Uniform labeled subset of size `n_labeled`; the rest is the unlabeled pool.
pub fn make_split(manifest_ids: &[String], n_labeled: usize, seed: u64) -> Result<Split, DataError> {
    if n_labeled == 0 || n_labeled > manifest_ids.len() {
        return Err(DataError::Invalid(format!(
            "n_labeled {n_labeled} outside 1..={}",
            manifest_ids.len()
        )));
    }
    let mut ids: Vec<String> = manifest_ids.to_vec();
    let mut rng = rng_named(seed, "split", &[]);
    ids.shuffle(&mut rng);
    let unlabeled = ids.split_off(n_labeled);
    Ok(Split { seed, labeled: ids, unlabeled })
}

pub fn write_split(dir: &Path, split: &Split) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(split).expect("split serializes");
    write_file(&dir.join("split.json"), json.as_bytes())
}

pub fn read_split(dir: &Path) -> Result<Split, DataError> {
    let path = dir.join("split.json");
    serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| DataError::Manifest { path, message: e.to_string() })
}

/// Resolves split ids to corpus indices, rejecting unknown ids.
pub fn resolve_split(corpus: &Corpus, split: &Split) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    let resolve = |ids: &[String]| -> Result<Vec<usize>, DataError> {
        ids.iter()
            .map(|id| {
                corpus
                    .index_of(id)
                    .ok_or_else(|| DataError::Invalid(format!("split id {id} not in corpus")))
            })
            .collect()
    };
    Ok((resolve(&split.labeled)?, resolve(&split.unlabeled)?))
}

// --- batch schedule ---------------------------------------------------------

/// Pool positions for draw `t = iter * batch + j`, computed statelessly so a
/// resumed run continues the exact sequence. Each epoch is an independent
/// shuffle of the pool; a pool smaller than the consumption rate just cycles
/// through epochs faster.
pub fn schedule_positions(pool_len: usize, batch: usize, iter: usize, seed: u64, stream: &str) -> Vec<usize> {
    assert!(pool_len > 0 && batch > 0);
    let stream_tag = tag(stream);
    let mut perm_epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(batch);
    for j in 0..batch {
        let t = iter * batch + j;
        let epoch = t / pool_len;
        if epoch != perm_epoch {
            perm = (0..pool_len).collect();
            let mut rng = rng_from(derive(seed, &[stream_tag]), &[epoch as u64]);
            perm.shuffle(&mut rng);
            perm_epoch = epoch;
        }
        out.push(perm[t % pool_len]);
    }
    out
}

pub struct Batch<'a> {
    pub labeled: Vec<&'a Sample>,
    pub unlabeled: Vec<&'a Sample>,
}

pub fn next_batch<'a>(
    corpus: &'a Corpus,
    labeled_pool: &[usize],
    unlabeled_pool: &[usize],
    batch_l: usize,
    batch_u: usize,
    iter: usize,
    seed: u64,
    stream: &str,
) -> Batch<'a> {
    let pick = |pool: &[usize], b: usize, sub: &str| -> Vec<&'a Sample> {
        if b == 0 || pool.is_empty() {
            return Vec::new();
        }
        schedule_positions(pool.len(), b, iter, seed, &format!("{stream}/{sub}"))
            .into_iter()
            .map(|p| &corpus.samples[pool[p]])
            .collect()
    };
    Batch {
        labeled: pick(labeled_pool, batch_l, "labeled"),
        unlabeled: pick(unlabeled_pool, batch_u, "unlabeled"),
    }
}
