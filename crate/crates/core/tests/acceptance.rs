//! Acceptance gates, one test per criterion. Each prints a single
//! `criterion N ...: pass` line on success (visible with `--nocapture`);
//! the test harness itself reports pass/fail per criterion.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use tempfile::tempdir;

use maskseg::ablation::{builtin_grid, run_ablation};
use maskseg::config::{apply_overrides, TrainConfig};
use maskseg::data::{load_corpus, make_split, synth_generate, Corpus, Sample, Split, SynthConfig};
use maskseg::label::LabelMap;
use maskseg::masking::{sample_mask, MaskSpec};
use maskseg::netpbm::{encode_pgm, encode_ppm, parse_pgm, parse_ppm};
use maskseg::nets::{NetConfig, SegNet};
use maskseg::objective::{total_loss, LossWeights};
use maskseg::oracle;
use maskseg::proto::PrototypeMemory;
use maskseg::recon::{build_class_maps, group_features};
use maskseg::rng::rng_named;
use maskseg::trainer::run_train;
use maskseg::{Tensor32, Tensor64};

// Published results for this family of methods come from ResNet-101
// backbones with ImageNet initialization, trained on full VOC/Cityscapes
// across multiple GPUs. None of that fits a desk-scale crate, so benchmark
// parity is explicitly out of scope; acceptance rests on the oracle and
// property gates plus the directional experiment in criterion 8.
#[test]
fn c01_benchmark_parity_out_of_scope() {
    println!("criterion 1 (benchmark parity excluded; property gates and desk-scale directional runs are the acceptance basis): pass");
}

#[test]
fn c02_gradient_oracle() {
    let t0 = Instant::now();
    let cases = oracle::run_suite(None).expect("oracle suite runs");
    let secs = t0.elapsed().as_secs_f64();
    assert!(cases.iter().any(|c| c.name == "composite"), "composite case present");
    for c in &cases {
        assert!(
            c.passed(oracle::TOLERANCE),
            "{}: max rel err {:.3e} at {:?}",
            c.name,
            c.report.max_rel_err,
            c.report.worst
        );
    }
    assert!(secs < 120.0, "oracle suite took {secs:.1}s, budget 120s");
    println!(
        "criterion 2 (gradient oracle: {} cases below 1e-4 in {secs:.1}s): pass",
        cases.len()
    );
}

#[test]
fn c03_classwise_partition_is_exact() {
    let rng = &mut rng_named(3103, "acceptance.partition", &[]);
    let (h, w, d, classes) = (5usize, 7usize, 6usize, 4usize);
    for draw in 0..100 {
        let lab = LabelMap::new(
            h * 2,
            w * 2,
            (0..h * 2 * w * 2).map(|_| rng.gen_range(0..classes) as u8).collect(),
        );
        let maps = build_class_maps::<f64>(&lab, h, w, d, classes).unwrap();
        let fea = Tensor64::rand_uniform(&[h, w, d], -2.0, 2.0, rng);
        let groups = group_features(&fea, &maps).unwrap();

        let mut sum = groups[0].clone();
        for g in &groups[1..] {
            sum = sum.add(g).unwrap();
        }
        assert_eq!(sum.to_vec(), fea.to_vec(), "draw {draw}: sum of groups != fea");

        for pos in 0..h * w {
            let active = groups
                .iter()
                .filter(|g| g.data()[pos * d..(pos + 1) * d].iter().any(|&v| v != 0.0))
                .count();
            assert!(active <= 1, "draw {draw}: overlapping support at {pos}");
        }
    }
    println!("criterion 3 (class grouping: exact feature partition and disjoint supports over 100 draws): pass");
}

#[test]
fn c04_head_gradients_respect_class_support() {
    let k = 1usize; // probed class
    for (head_kernel, dilate) in [(1usize, 0usize), (3, 1)] {
        let cfg = NetConfig {
            in_channels: 2,
            num_classes: 3,
            e_dim: 5,
            d_prime: 4,
            use_bias: false,
            head_kernel,
        };
        let net = SegNet::<f64>::init(cfg, 77).unwrap();
        let (mut zero_checked, mut support_grad) = (0usize, 0.0f64);
        for trial in 0..10u64 {
            let rng = &mut rng_named(3104, "acceptance.routing", &[head_kernel as u64, trial]);
            let lab =
                LabelMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..3u8)).collect());
            let maps = build_class_maps::<f64>(&lab, 4, 4, 4, 3).unwrap();
            let fea = Tensor64::rand_uniform(&[4, 4, 4], 0.1, 1.0, rng);
            let fea = Tensor64::param(fea.shape(), fea.to_vec()).unwrap();
            let groups = group_features(&fea, &maps).unwrap();
            net.head_apply(k, &groups[k]).unwrap().sum().backward().unwrap();
            let g = fea.grad().unwrap();
            let low = &maps.low_labels;
            for y in 0..4usize {
                for x in 0..4usize {
                    let near_support = (y.saturating_sub(dilate)..=(y + dilate).min(3)).any(|yy| {
                        (x.saturating_sub(dilate)..=(x + dilate).min(3))
                            .any(|xx| low.get(yy, xx) as usize == k)
                    });
                    let cell = &g[(y * 4 + x) * 4..(y * 4 + x + 1) * 4];
                    if near_support {
                        support_grad += cell.iter().map(|v| v.abs()).sum::<f64>();
                    } else {
                        zero_checked += 1;
                        assert!(
                            cell.iter().all(|&v| v == 0.0),
                            "{head_kernel}x{head_kernel} head, trial {trial}: leak at ({y},{x}): {cell:?}"
                        );
                    }
                }
            }
        }
        assert!(zero_checked > 0, "{head_kernel}x{head_kernel}: no zero region sampled");
        assert!(support_grad > 0.0, "{head_kernel}x{head_kernel}: no gradient on support");
    }
    println!("criterion 4 (head gradients: exact zeros outside class support for 1x1, outside 1-pixel dilation for 3x3): pass");
}

#[test]
fn c05_mask_cell_count_and_frequency() {
    let spec = MaskSpec::new(6, 0.4).unwrap();
    let n = 1000usize;
    let mut cell_hits = vec![0u32; 36];
    for seed in 0..n as u64 {
        let rng = &mut rng_named(seed, "acceptance.mask", &[]);
        let m = sample_mask(36, 36, spec, rng).unwrap();
        assert_eq!(m.cell_count(), 36);
        assert_eq!(m.masked_cell_count(), 14, "seed {seed}");
        for cy in 0..6usize {
            for cx in 0..6usize {
                if m.is_masked(cy * 6, cx * 6) {
                    cell_hits[cy * 6 + cx] += 1;
                }
            }
        }
    }
    let p = 14.0 / 36.0;
    let bound = 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    for (i, &hits) in cell_hits.iter().enumerate() {
        let f = hits as f64 / n as f64;
        assert!(
            (f - p).abs() <= bound,
            "cell {i}: frequency {f:.4} outside {p:.4} +- {bound:.4}"
        );
    }
    println!("criterion 5 (36x36 patch-6 ratio-0.4 masks: exactly 14/36 cells, per-cell frequency within 3 sigma over 1000 seeds): pass");
}

#[test]
fn c06_prototype_ema_closed_form() {
    let alpha = 0.99f64;
    let v: Vec<f64> = (0..7).map(|i| 0.3 * i as f64 - 0.9).collect();
    let mut mem = PrototypeMemory::<f64>::new(3, 7, alpha);
    for _ in 0..10 {
        mem.update(1, &v).unwrap();
    }
    let scale = 1.0 - alpha.powi(10);
    for (p, vi) in mem.protos[1].iter().zip(&v) {
        assert!((p - scale * vi).abs() < 1e-12, "{p} vs {}", scale * vi);
    }
    assert!(mem.initialized[1] && !mem.initialized[0] && !mem.initialized[2]);
    println!("criterion 6 (EMA prototype after 10 constant updates matches (1 - 0.99^10) v within 1e-12): pass");
}

#[test]
fn c07_objective_normalizer_arithmetic() {
    let w = LossWeights::default();
    assert_eq!(w.normalizer(), 3.25);

    let vals = [0.7, 0.22, 0.35, 0.011, 0.06];
    let ts: Vec<Tensor64> = vals.iter().map(|&v| Tensor64::scalar(v)).collect();
    let (total, report) = total_loss(&ts[0], &ts[1], &ts[2], &ts[3], &ts[4], &w).unwrap();
    let expect = vals.iter().sum::<f64>() / 3.25;
    assert!(
        (total.item() - expect).abs() <= 4.0 * f64::EPSILON * expect,
        "{} vs {expect}",
        total.item()
    );
    assert_eq!(report.total, total.item());

    // Zeroing one weight at a time must shrink the normalizer by exactly
    // that component's share.
    let shares = [2.0 * w.lambda_u, 3.0 * w.lambda_mp, 3.0 * w.lambda_mf, 3.0 * w.lambda_ms];
    for (i, share) in shares.iter().enumerate() {
        let mut w2 = w;
        match i {
            0 => w2.lambda_u = 0.0,
            1 => w2.lambda_mp = 0.0,
            2 => w2.lambda_mf = 0.0,
            _ => w2.lambda_ms = 0.0,
        }
        assert_eq!(w2.normalizer(), 3.25 - share, "component {i}");
    }
    println!("criterion 7 (normalizer 3.25 at default weights; scalar components reproduce the total; disabling recomputes the normalizer): pass");
}

// --- desk-scale experiment fixtures -----------------------------------------

struct DeskData {
    corpus: Corpus,
    split: Split,
    val: Corpus,
}

fn desk_data(dir: &Path, n: usize, h: usize, w: usize, classes: usize, n_labeled: usize) -> DeskData {
    let scfg = SynthConfig { n, h, w, classes, ..SynthConfig::default() };
    synth_generate(&dir.join("corpus"), &scfg, false).unwrap();
    let corpus = load_corpus(&dir.join("corpus")).unwrap();
    let ids: Vec<String> = corpus.samples.iter().map(|s| s.id.clone()).collect();
    let split = make_split(&ids, n_labeled, 2).unwrap();
    let vcfg = SynthConfig { n: 40, h, w, classes, seed: 1234, ..SynthConfig::default() };
    synth_generate(&dir.join("val"), &vcfg, false).unwrap();
    let val = load_corpus(&dir.join("val")).unwrap();
    DeskData { corpus, split, val }
}

fn desk_run(data: &DeskData, cfg: &TrainConfig, out: &Path) -> f64 {
    let val: Vec<&Sample> = data.val.samples.iter().collect();
    let summary = run_train::<f32>(cfg, &data.corpus, &data.split, Some(&val), out, None)
        .unwrap_or_else(|e| panic!("run into {} failed: {e}", out.display()));
    summary.final_eval.expect("final eval").miou
}

#[test]
fn c08_desk_scale_directional_experiment() {
    let t0 = Instant::now();
    let dir = tempdir().unwrap();
    let data = desk_data(dir.path(), 264, 64, 64, 4, 8);

    let base = TrainConfig {
        classes: 4,
        e_dim: 16,
        d_prime: 16,
        iterations: 2000,
        eval_interval: 0,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };
    let variants: [(&str, Box<dyn Fn(&mut TrainConfig)>); 3] = [
        ("sup_only", Box::new(|c: &mut TrainConfig| {
            c.enable_unlabeled = false;
            c.enable_mimpi = false;
            c.enable_mimfea = false;
            c.enable_mimse = false;
        })),
        ("consistency", Box::new(|c: &mut TrainConfig| {
            c.enable_mimpi = false;
            c.enable_mimfea = false;
            c.enable_mimse = false;
        })),
        ("full", Box::new(|_| {})),
    ];

    let mut means = Vec::new();
    for (name, tweak) in &variants {
        let mut sum = 0.0;
        for seed in 1..=3u64 {
            let mut cfg = base.clone();
            tweak(&mut cfg);
            cfg.seed_model = seed;
            cfg.seed_data = 100 + seed;
            cfg.seed_mask = 200 + seed;
            let miou = desk_run(&data, &cfg, &dir.path().join(format!("{name}_{seed}")));
            println!("  {name} seed {seed}: miou {miou:.4}");
            sum += miou;
        }
        means.push(sum / 3.0);
    }
    let (sup, cons, full) = (means[0], means[1], means[2]);
    let secs = t0.elapsed().as_secs_f64();

    assert!(sup < cons, "supervised-only {sup:.4} not below consistency baseline {cons:.4}");
    assert!(cons <= full, "consistency baseline {cons:.4} above full objective {full:.4}");
    assert!(
        full >= sup + 0.03,
        "full objective {full:.4} less than 3 points over supervised-only {sup:.4}"
    );
    // Budget is 30 minutes on four cores; the crate is single-threaded, so
    // wall time on one core is the conservative bound.
    assert!(secs < 1800.0, "desk experiment took {secs:.0}s");
    println!(
        "criterion 8 (desk runs, 3-seed means: sup {sup:.4} < consistency {cons:.4} <= full {full:.4}, gap {:.1} points, {secs:.0}s): pass",
        (full - sup) * 100.0
    );
}

#[test]
fn c09_ablation_grids_complete_and_deterministic() {
    let dir = tempdir().unwrap();
    let data = desk_data(dir.path(), 10, 16, 16, 3, 4);
    let val: Vec<&Sample> = data.val.samples.iter().collect();
    let base = TrainConfig {
        classes: 3,
        e_dim: 4,
        d_prime: 4,
        batch: 2,
        iterations: 2,
        max_shift: 2,
        eval_interval: 0,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };

    for (grid_name, cells) in [("components", 6usize), ("masking", 9), ("semantic", 3)] {
        let grid = builtin_grid(grid_name).unwrap();
        assert_eq!(grid.cells.len(), cells, "{grid_name} shape");
        let mut csvs = Vec::new();
        for tag in ["a", "b"] {
            let out = dir.path().join(format!("{grid_name}_{tag}"));
            let outcomes =
                run_ablation::<f32>(&base, &grid, &data.corpus, &data.split, Some(&val), &out)
                    .unwrap();
            for o in &outcomes {
                assert!(o.error.is_none(), "{grid_name}/{}: {:?}", o.name, o.error);
                assert!(o.miou.is_some(), "{grid_name}/{}: no miou", o.name);
            }
            let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
            assert_eq!(csv.lines().count(), cells + 1, "{grid_name} row count");
            csvs.push(csv);
        }
        assert_eq!(csvs[0], csvs[1], "{grid_name}: reruns differ");
    }

    // The all-MIM-off cell must be byte-identical to the same config run
    // standalone: a disabled component may not perturb anything.
    let grid = builtin_grid("components").unwrap();
    assert_eq!(grid.cells[0].name, "baseline");
    let solo_cfg = apply_overrides(&base, &grid.cells[0].overrides).unwrap();
    let solo = dir.path().join("solo");
    run_train::<f32>(&solo_cfg, &data.corpus, &data.split, Some(&val), &solo, None).unwrap();
    let cell_csv = std::fs::read(dir.path().join("components_a/baseline/metrics.csv")).unwrap();
    let solo_csv = std::fs::read(solo.join("metrics.csv")).unwrap();
    assert_eq!(cell_csv, solo_csv, "baseline cell differs from standalone run");

    println!("criterion 9 (ablation grids 6/9/3 cells: complete, deterministic reruns, baseline cell bit-identical to standalone): pass");
}

#[test]
fn c10_determinism_and_bit_exact_resume() {
    let dir = tempdir().unwrap();
    let data = desk_data(dir.path(), 10, 16, 16, 3, 4);
    let val: Vec<&Sample> = data.val.samples.iter().collect();
    let cfg = TrainConfig {
        classes: 3,
        e_dim: 4,
        d_prime: 4,
        batch: 2,
        iterations: 24,
        eval_interval: 6,
        checkpoint_interval: 8,
        max_shift: 2,
        ..TrainConfig::default()
    };
    let run = |out: &PathBuf, resume: Option<&Path>| {
        run_train::<f32>(&cfg, &data.corpus, &data.split, Some(&val), out, resume).unwrap()
    };

    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    run(&a, None);
    run(&b, None);
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb, "identical configs produced different metrics");

    // Resume from the mid-run checkpoint into a fresh directory: the row
    // stream from iteration 8 on and the final checkpoint must match the
    // uninterrupted run bit for bit.
    run(&c, Some(&a.join("ckpt_8.json")));
    let mc = std::fs::read_to_string(c.join("metrics.csv")).unwrap();
    let a_lines: Vec<&str> = ma.lines().collect();
    let from8 = a_lines.iter().position(|l| l.starts_with("8,")).unwrap();
    assert_eq!(a_lines[from8..], mc.lines().skip(2).collect::<Vec<_>>()[..], "resumed rows differ");
    for ext in ["json", "bin"] {
        let fa = std::fs::read(a.join(format!("ckpt_final.{ext}"))).unwrap();
        let fc = std::fs::read(c.join(format!("ckpt_final.{ext}"))).unwrap();
        assert_eq!(fa, fc, "final checkpoint .{ext} differs after resume");
    }
    println!("criterion 10 (byte-identical metrics across reruns; mid-run resume continues bit-exactly): pass");
}

#[test]
fn c11_netpbm_fuzz_and_round_trip() {
    let rng = &mut rng_named(3111, "acceptance.fuzz", &[]);
    let (mut accepted, mut rejected) = (0usize, 0usize);
    for case in 0..1000u64 {
        let h = rng.gen_range(1..6usize);
        let w = rng.gen_range(1..6usize);
        let color = case % 2 == 0;
        let ch = if color { 3 } else { 1 };
        let payload: Vec<u8> = (0..h * w * ch).map(|_| rng.gen()).collect();
        let mut f = if color { encode_ppm(h, w, &payload) } else { encode_pgm(h, w, &payload) };
        match rng.gen_range(0..5) {
            0 => f.truncate(rng.gen_range(0..f.len())),
            1 => {
                let i = rng.gen_range(0..f.len());
                f[i] = rng.gen();
            }
            2 => f.extend((0..rng.gen_range(1..8)).map(|_| rng.gen::<u8>())),
            3 => {
                let i = rng.gen_range(0..f.len());
                f.insert(i, rng.gen());
            }
            _ => {
                // Magic swap: parse a P6 payload as P5 and vice versa.
                f[1] = if color { b'5' } else { b'6' };
            }
        }
        let result = if color { parse_ppm(&f) } else { parse_pgm(&f) };
        match result {
            Ok((ph, pw, data)) => {
                assert_eq!(data.len(), ph * pw * ch, "case {case}: inconsistent accept");
                accepted += 1;
            }
            Err(e) => {
                assert!(e.offset <= f.len(), "case {case}: offset {} past end", e.offset);
                assert!(!e.message.is_empty(), "case {case}: empty message");
                rejected += 1;
            }
        }
    }
    assert!(rejected > 500, "only {rejected} of 1000 corruptions rejected");

    // Generate -> load -> re-encode: bytes identical to the files on disk.
    let dir = tempdir().unwrap();
    let scfg = SynthConfig { n: 6, h: 16, w: 16, classes: 3, ..SynthConfig::default() };
    synth_generate(dir.path(), &scfg, false).unwrap();
    let corpus = load_corpus(dir.path()).unwrap();
    assert_eq!(corpus.samples.len(), 6);
    for s in &corpus.samples {
        let ppm = encode_ppm(16, 16, &s.rgb);
        let on_disk = std::fs::read(dir.path().join("img").join(format!("{}.ppm", s.id))).unwrap();
        assert_eq!(ppm, on_disk, "{}: image round trip", s.id);
        let pgm = encode_pgm(16, 16, &s.label.data);
        let on_disk = std::fs::read(dir.path().join("lab").join(format!("{}.pgm", s.id))).unwrap();
        assert_eq!(pgm, on_disk, "{}: label round trip", s.id);
    }
    println!("criterion 11 (netpbm fuzz: 1000 cases, {accepted} benign accepts, {rejected} descriptive rejects, no crashes; round trip exact): pass");
}
