//! Acceptance checks. Runs without the libtest harness so every check prints
//! exactly one `PASS` or `FAIL` line; the process fails if any check fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use alen::estimators::{mcnet_forward, scnet_forward, SCNetSpec};
use alen::gli::{self, LabelerConfig, Threshold};
use alen::gradsuite::{row_names, run_suite, SuiteOptions};
use alen::image::{Plane, RgbImage};
use alen::losses::{SsimParams, SsimWindow};
use alen::metrics::{delta_e, loe, psnr, ssim_index, uqi};
use alen::nn::{build_default_weights, BoundParams};
use alen::persistence::{self, NamedTensorStore};
use alen::pipeline::{
    enhance, enhance_global, enhance_local, fuse, global_illumination, ClassifierMode,
    FusionWeights, ModelBundle,
};
use alen::route::Route;
use alen::slcformer::{count_flops, count_parameters, SLCformerConfig};
use alen::tensor::Tape;
use alen::trainer::{
    synthetic_classifier_set, synthetic_pairs, train_network, ClassifierObjective, EstimatorLoss,
    LabeledInput, McnetObjective, Pair, ScnetObjective, TrainConfig, Trainer,
};
use alen::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, t0: Instant) -> Result<(), String> {
    ensure(
        t0.elapsed() < limit,
        format!("took {:.1?}, limit {limit:?}", t0.elapsed()),
    )
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    RgbImage::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let names = row_names();
    for required in ["scnet", "mcnet", "swin_block_pair"] {
        ensure(
            names.contains(&required),
            format!("suite has no `{required}` row"),
        )?;
    }
    let mut worst = (0.0f64, String::new());
    for seed in 0..10 {
        let rows = run_suite(&SuiteOptions {
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        for r in rows {
            ensure(
                r.passed && r.max_rel_error < 1e-5,
                format!(
                    "seed {seed}: {} max rel error {:.3e}",
                    r.name, r.max_rel_error
                ),
            )?;
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, r.name.to_string());
            }
        }
    }
    within(Duration::from_secs(120), t0)?;
    Ok(format!(
        "{} rows x 10 seeds, worst {:.2e} ({}), {:.1?}",
        names.len(),
        worst.0,
        worst.1,
        t0.elapsed()
    ))
}

// --------------------------------------------------------------- accounting

fn slcformer_accounting() -> Outcome {
    let t0 = Instant::now();
    let cfg = SLCformerConfig::default();
    let params = count_parameters(&cfg) as f64;
    let flops = count_flops(&cfg, 224) as f64;
    let dp = params / 3.06e6 - 1.0;
    let df = flops / 0.49e9 - 1.0;
    ensure(
        dp.abs() <= 0.05,
        format!("parameters {params} off by {:+.1}%", 100.0 * dp),
    )?;
    ensure(
        df.abs() <= 0.15,
        format!("flops {flops} off by {:+.1}%", 100.0 * df),
    )?;
    within(Duration::from_secs(1), t0)?;
    Ok(format!(
        "{params} parameters ({:+.1}%), {:.3}G multiply-accumulates at 224 ({:+.1}%)",
        100.0 * dp,
        flops / 1e9,
        100.0 * df
    ))
}

// ---------------------------------------------------------------- labeling

fn gray_oracle(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.pixel(y, x);
            out.push(((0.299 * r + 0.587 * g + 0.114 * b) * 255.0).round() as u8);
        }
    }
    out
}

fn labeler_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut global, mut none) = (0, 0);
    for trial in 0..1000 {
        // A small palette so that some bins are heavily populated.
        let palette: Vec<[f64; 3]> = (0..rng.random_range(1..12))
            .map(|_| {
                if rng.random_bool(0.5) {
                    [0, 1, 2].map(|_| rng.random_range(0..=255u8) as f64 / 255.0)
                } else {
                    [0, 1, 2].map(|_| rng.random_range(0.0..1.0))
                }
            })
            .collect();
        let pick: Vec<usize> = (0..256)
            .map(|_| rng.random_range(0..palette.len()))
            .collect();
        let img = RgbImage::from_fn(16, 16, |c, y, x| palette[pick[y * 16 + x]][c]).unwrap();
        let t = rng.random_range(1..=40u64);
        let cutoff = rng.random_range(0..=255u8);

        let gray = gray_oracle(&img);
        let got_gray = gli::to_grayscale(&img);
        ensure(
            got_gray.pixels() == gray.as_slice(),
            format!("trial {trial}: grayscale differs"),
        )?;

        let mut tally = [0u64; 256];
        for (bin, slot) in tally.iter_mut().enumerate() {
            *slot = gray.iter().filter(|&&p| p as usize == bin).count() as u64;
        }
        let counts = gli::histogram(&got_gray);
        ensure(counts == tally, format!("trial {trial}: histogram differs"))?;

        let mut i_thr = None;
        for (bin, &c) in tally.iter().enumerate() {
            if c >= t {
                i_thr = Some(bin as u8);
            }
        }
        ensure(
            gli::threshold_intensity(&counts, t) == i_thr,
            format!("trial {trial}: threshold differs"),
        )?;

        let route = match i_thr {
            Some(i) if i > cutoff => Route::Local,
            _ => Route::Global,
        };
        let cfg = LabelerConfig {
            threshold: Threshold::Count(t),
            intensity_cutoff: cutoff,
        };
        ensure(
            gli::label(&img, &cfg) == (route, i_thr),
            format!("trial {trial}: label differs"),
        )?;
        global += (route == Route::Global) as usize;
        none += i_thr.is_none() as usize;
    }
    within(Duration::from_secs(10), t0)?;
    Ok(format!(
        "1000 images agree ({global} global, {none} without a threshold), {:.1?}",
        t0.elapsed()
    ))
}

// ----------------------------------------------------------------- metrics

fn luma_oracle(img: &RgbImage) -> Vec<f64> {
    (0..img.height() * img.width())
        .map(|i| {
            let (y, x) = (i / img.width(), i % img.width());
            let [r, g, b] = img.pixel(y, x);
            0.299 * r + 0.587 * g + 0.114 * b
        })
        .collect()
}

/// Windows as lists of (pixel index, weight): every placement of a `k×k`
/// Gaussian, or the whole image with uniform weights when `k` is 0.
fn oracle_windows(h: usize, w: usize, k: usize, sigma: f64) -> Vec<Vec<(usize, f64)>> {
    if k == 0 {
        return vec![(0..h * w).map(|i| (i, 1.0 / (h * w) as f64)).collect()];
    }
    let c = (k - 1) as f64 / 2.0;
    let mut g2 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            g2[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = g2.iter().sum();
    let mut out = Vec::new();
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let mut win = Vec::new();
            for i in 0..k {
                for j in 0..k {
                    win.push(((y0 + i) * w + x0 + j, g2[i * k + j] / total));
                }
            }
            out.push(win);
        }
    }
    out
}

fn window_stats(a: &[f64], b: &[f64], win: &[(usize, f64)]) -> (f64, f64, f64, f64, f64) {
    let ma: f64 = win.iter().map(|&(i, w)| w * a[i]).sum();
    let mb: f64 = win.iter().map(|&(i, w)| w * b[i]).sum();
    let va: f64 = win.iter().map(|&(i, w)| w * (a[i] - ma).powi(2)).sum();
    let vb: f64 = win.iter().map(|&(i, w)| w * (b[i] - mb).powi(2)).sum();
    let cov: f64 = win
        .iter()
        .map(|&(i, w)| w * (a[i] - ma) * (b[i] - mb))
        .sum();
    (ma, mb, va, vb, cov)
}

fn ssim_oracle(a: &RgbImage, b: &RgbImage, k: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let (la, lb) = (luma_oracle(a), luma_oracle(b));
    let wins = oracle_windows(a.height(), a.width(), k, sigma);
    let mut acc = 0.0;
    let mut n = 0;
    for win in &wins {
        let (ma, mb, va, vb, cov) = window_stats(&la, &lb, win);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        if c1 == 0.0 && den == 0.0 {
            continue;
        }
        acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / den;
        n += 1;
    }
    acc / n as f64
}

fn lab_oracle(rgb: [f64; 3]) -> [f64; 3] {
    let m = [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ];
    let to_xyz = |c: [f64; 3]| {
        let lin = c.map(|v| {
            if v > 0.04045 {
                ((v + 0.055) / 1.055).powf(2.4)
            } else {
                v / 12.92
            }
        });
        [0, 1, 2].map(|r| (0..3).map(|k| m[r][k] * lin[k]).sum::<f64>())
    };
    let xyz = to_xyz(rgb);
    let white = to_xyz([1.0, 1.0, 1.0]);
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.powf(1.0 / 3.0)
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (
        f(xyz[0] / white[0]),
        f(xyz[1] / white[1]),
        f(xyz[2] / white[2]),
    );
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn loe_oracle(o: &RgbImage, e: &RgbImage, grid: usize) -> f64 {
    let (h, w) = (o.height(), o.width());
    let site = |i: usize, n: usize| {
        (((i as f64 + 0.5) * n as f64 / grid as f64).floor() as usize).min(n - 1)
    };
    let light =
        |img: &RgbImage, y: usize, x: usize| img.pixel(y, x).into_iter().fold(f64::MIN, f64::max);
    let mut pts = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            pts.push((site(i, h), site(j, w)));
        }
    }
    let mut inversions = 0usize;
    for &(py, px) in &pts {
        for &(qy, qx) in &pts {
            let before = light(o, py, px) >= light(o, qy, qx);
            let after = light(e, py, px) >= light(e, qy, qx);
            inversions += (before != after) as usize;
        }
    }
    inversions as f64 / pts.len() as f64
}

fn metric_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let tol = 1e-9;
    let mut worst = 0.0f64;
    let mut check = |name: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err < tol, format!("{name}: {got} vs oracle {want}"))
    };
    let sliding = SsimParams {
        window: SsimWindow::Gaussian {
            size: 3,
            sigma: 1.5,
        },
        ..SsimParams::default()
    };
    let sliding_uqi = SsimParams {
        c1: 0.0,
        c2: 0.0,
        ..sliding
    };
    let full_uqi = SsimParams {
        c1: 0.0,
        c2: 0.0,
        ..SsimParams::default()
    };
    for _ in 0..20 {
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);

        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / 192.0;
        check("psnr", psnr(&a, &b).unwrap(), 10.0 * (1.0 / mse).log10())?;
        check(
            "ssim (whole image)",
            ssim_index(&a, &b, &SsimParams::default()).unwrap(),
            ssim_oracle(&a, &b, 0, 0.0, 1e-4, 9e-4),
        )?;
        check(
            "ssim (3x3 Gaussian)",
            ssim_index(&a, &b, &sliding).unwrap(),
            ssim_oracle(&a, &b, 3, 1.5, 1e-4, 9e-4),
        )?;
        check(
            "uqi (whole image)",
            uqi(&a, &b, &full_uqi).unwrap().value,
            ssim_oracle(&a, &b, 0, 0.0, 0.0, 0.0),
        )?;
        check(
            "uqi (3x3 Gaussian)",
            uqi(&a, &b, &sliding_uqi).unwrap().value,
            ssim_oracle(&a, &b, 3, 1.5, 0.0, 0.0),
        )?;

        let mut de = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let (p, q) = (lab_oracle(a.pixel(y, x)), lab_oracle(b.pixel(y, x)));
                de +=
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            }
        }
        check("delta e", delta_e(&a, &b).unwrap(), de / 64.0)?;
        for grid in [8, 4, 3] {
            check("loe", loe(&a, &b, grid).unwrap(), loe_oracle(&a, &b, grid))?;
        }

        // Identities.
        ensure(
            psnr(&a, &a).unwrap() == f64::INFINITY,
            "psnr(x,x) is not infinite",
        )?;
        check(
            "ssim(x,x)",
            ssim_index(&a, &a, &SsimParams::default()).unwrap(),
            1.0,
        )?;
        check(
            "ssim(x,x) sliding",
            ssim_index(&a, &a, &sliding).unwrap(),
            1.0,
        )?;
        check("uqi(x,x)", uqi(&a, &a, &full_uqi).unwrap().value, 1.0)?;
        ensure(delta_e(&a, &a).unwrap() == 0.0, "delta e (x,x) is not 0")?;
        ensure(loe(&a, &a, 8).unwrap() == 0.0, "loe(x,x) is not 0")?;
        let brighter = RgbImage::from_fn(8, 8, |c, y, x| a.pixel(y, x)[c].powf(0.45)).unwrap();
        ensure(
            loe(&a, &brighter, 8).unwrap() == 0.0,
            "loe changes under a monotone remapping",
        )?;
    }
    within(Duration::from_secs(30), t0)?;
    Ok(format!(
        "20 fixture pairs, worst deviation {worst:.1e}, identities exact, {:.1?}",
        t0.elapsed()
    ))
}

// ---------------------------------------------------------------- pipeline

fn hsv_oracle(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    let v = r.max(g).max(b);
    let c = v - r.min(g).min(b);
    let s = if v == 0.0 { 0.0 } else { c / v };
    let h = if c == 0.0 {
        0.0
    } else if v == r {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if v == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    [h, s, v]
}

fn rgb_oracle([h, s, v]: [f64; 3]) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h / 60.0).rem_euclid(6.0);
        (v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn max_diff(a: &RgbImage, b: &RgbImage) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn pipeline_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_g, mut worst_l, mut worst_f) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5 {
        let bundle: ModelBundle =
            ModelBundle::seeded(seed, ClassifierMode::Histogram, SLCformerConfig::default());
        let img = random_image(&mut rng, 8, 8);
        let hsv: Vec<[f64; 3]> = (0..64)
            .map(|i| hsv_oracle(img.pixel(i / 8, i % 8)))
            .collect();
        let v = Plane::new(8, 8, hsv.iter().map(|p| p[2]).collect()).unwrap();

        // Global route: value estimate, averaged with the input value, refined in RGB.
        let v_hat = scnet_forward(&v, &bundle.scnet_global).unwrap();
        let i_g = RgbImage::from_fn(8, 8, |c, y, x| {
            let [h, s, val] = hsv[y * 8 + x];
            rgb_oracle([h, s, (val + v_hat.at(y, x)) / 2.0])[c]
        })
        .unwrap();
        let want = mcnet_forward(&i_g, &bundle.mcnet_illum).unwrap();
        let got = enhance_global(&img, &bundle).unwrap();
        worst_g = worst_g.max(max_diff(&got, &want));
        worst_g = worst_g.max(max_diff(&global_illumination(&img, &bundle).unwrap(), &i_g));

        // Local route: value estimate replaces the value plane, no averaging.
        let v_hat = scnet_forward(&v, &bundle.scnet_local).unwrap();
        let want = RgbImage::from_fn(8, 8, |c, y, x| {
            let [h, s, _] = hsv[y * 8 + x];
            rgb_oracle([h, s, v_hat.at(y, x)])[c]
        })
        .unwrap();
        worst_l = worst_l.max(max_diff(&enhance_local(&img, &bundle).unwrap(), &want));

        // Fusion.
        let a = random_image(&mut rng, 8, 8);
        let c = random_image(&mut rng, 8, 8);
        let w = FusionWeights {
            lambda_g: 0.7,
            lambda_l: 0.2,
            lambda_c: 0.3,
        };
        for (route, lb) in [(Route::Global, 0.7), (Route::Local, 0.2)] {
            let got = fuse(&a, &c, &w, route).unwrap();
            let want = RgbImage::from_fn(8, 8, |ch, y, x| {
                (a.pixel(y, x)[ch] * lb + c.pixel(y, x)[ch] * 0.3).clamp(0.0, 1.0)
            })
            .unwrap();
            worst_f = worst_f.max(max_diff(&got, &want));
        }
        let id = FusionWeights {
            lambda_g: 1.0,
            lambda_l: 1.0,
            lambda_c: 0.0,
        };
        for route in [Route::Global, Route::Local] {
            ensure(
                fuse(&a, &c, &id, route).unwrap() == a,
                "unit branch weight with zero color weight is not the identity",
            )?;
        }
        let r = enhance(&img, &bundle, &id).unwrap();
        ensure(
            r.output == r.branch_output,
            "pipeline with identity weights differs from its branch output",
        )?;
    }
    ensure(
        worst_g < 1e-12,
        format!("global route deviates by {worst_g:.2e}"),
    )?;
    ensure(
        worst_l < 1e-12,
        format!("local route deviates by {worst_l:.2e}"),
    )?;
    ensure(worst_f < 1e-15, format!("fusion deviates by {worst_f:.2e}"))?;
    Ok(format!(
        "5 seeds, global {worst_g:.1e}, local {worst_l:.1e}, fusion {worst_f:.1e}, identity exact"
    ))
}

// ------------------------------------------------------------- trainability

fn toy_trainability() -> Outcome {
    let t0 = Instant::now();

    let data = synthetic_pairs(32, 32, 0.0, 42);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: usize::MAX,
        batch_size: 1,
        seed: 3,
        max_steps: Some(2000),
        ..Default::default()
    };
    let weights = build_default_weights(&SCNetSpec, 1);
    let mut t = Trainer::new(
        ScnetObjective {
            loss: EstimatorLoss::Local,
        },
        weights,
        cfg,
    )
    .map_err(|e| e.to_string())?;
    let initial = t.evaluate(&data).map_err(|e| e.to_string())?;
    let mut last = initial;
    while !t.budget_exhausted() && last >= 0.5 * initial {
        t.run_epoch(&data).map_err(|e| e.to_string())?;
        last = t.evaluate(&data).map_err(|e| e.to_string())?;
    }
    ensure(
        last < 0.5 * initial,
        format!(
            "estimator loss {initial:.4} -> {last:.4} after {} steps",
            t.steps()
        ),
    )?;
    let scnet = format!(
        "estimator loss {initial:.4} -> {last:.4} in {} steps",
        t.steps()
    );

    // Depth-reduced classifier at resolution 32.
    let ccfg = SLCformerConfig {
        stage_channels: [16, 32, 64, 64],
        stage_heads: [1, 2, 4, 4],
        stage_depths: [2, 2, 2, 2],
        patch_size: 4,
        window_size: 4,
        mlp_ratio: 4.0,
        input_resolution: 32,
    };
    let set = synthetic_classifier_set(20, 32, 7);
    let samples: Vec<LabeledInput> = set
        .iter()
        .map(|(img, r)| LabeledInput::new(img, *r, &ccfg).unwrap())
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: usize::MAX,
        batch_size: 4,
        seed: 3,
        max_steps: Some(500),
        ..Default::default()
    };
    let objective = ClassifierObjective { cfg: ccfg.clone() };
    let mut t =
        Trainer::new(objective, build_default_weights(&ccfg, 1), cfg).map_err(|e| e.to_string())?;
    let accuracy = |t: &Trainer<f64, ClassifierObjective>| {
        samples
            .iter()
            .filter(|s| {
                let mut tape = Tape::inference();
                let p = BoundParams::bind(&mut tape, &t.weights, false);
                let prob = t
                    .objective
                    .probability(&mut tape, &p, &s.input)
                    .unwrap()
                    .value()
                    .item();
                (prob >= 0.5) == (s.y == 1.0)
            })
            .count() as f64
            / samples.len() as f64
    };
    let mut acc = accuracy(&t);
    while !t.budget_exhausted() && acc < 0.9 {
        t.run_epoch(&samples).map_err(|e| e.to_string())?;
        acc = accuracy(&t);
    }
    ensure(
        acc >= 0.9,
        format!(
            "classifier accuracy {:.0}% after {} steps",
            100.0 * acc,
            t.steps()
        ),
    )?;
    within(Duration::from_secs(600), t0)?;
    Ok(format!(
        "{scnet}; reduced classifier {:.0}% in {} steps; {:.1?}",
        100.0 * acc,
        t.steps(),
        t0.elapsed()
    ))
}

// ------------------------------------------------------------- determinism

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_alen"))
        .args(args)
        .output()
        .expect("spawn alen")
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism_and_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let inputs = root.join("in");
    std::fs::create_dir_all(&inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (i, ext) in ["png", "ppm", "png"].iter().enumerate() {
        let img = RgbImage::from_fn(12, 10, |_, _, _| {
            rng.random_range(0..=255u8) as f64 / 255.0 * (0.3 + 0.3 * i as f64)
        })
        .unwrap();
        persistence::save_image(&img, &inputs.join(format!("img{i}.{ext}"))).unwrap();
    }

    let mut runs = Vec::new();
    for run in 0..2 {
        let dir = root.join(format!("run{run}"));
        let jobs = if run == 0 { "1" } else { "2" };
        let mut captured = Vec::new();
        for args in [
            vec![
                "enhance",
                &s(&inputs),
                "--out",
                &s(&dir.join("enh")),
                "--seed",
                "7",
                "--jobs",
                jobs,
            ],
            vec![
                "enhance",
                &s(&inputs),
                "--out",
                &s(&dir.join("enh_net")),
                "--seed",
                "7",
                "--classifier",
                "network",
            ],
            vec![
                "classify",
                &s(&inputs),
                "--classifier",
                "network",
                "--seed",
                "7",
            ],
            vec![
                "classify",
                &s(&inputs),
                "--threshold",
                "3",
                "--cutoff",
                "60",
            ],
            vec![
                "label-dataset",
                &s(&inputs),
                "--out",
                &s(&dir.join("labels.csv")),
            ],
            vec![
                "train",
                "--preset",
                "scnet-global",
                "--synthetic",
                "3",
                "--size",
                "16",
                "--steps",
                "4",
                "--seed",
                "3",
                "--out",
                &s(&dir.join("train")),
            ],
            vec![
                "evaluate",
                &s(&dir.join("enh")),
                "--original",
                &s(&inputs),
                "--reference",
                &s(&inputs),
                "--out",
                &s(&dir.join("eval")),
            ],
        ] {
            let out = cli(&args);
            ensure(
                out.status.success(),
                format!(
                    "`alen {}` failed: {}",
                    args.join(" "),
                    String::from_utf8_lossy(&out.stderr)
                ),
            )?;
            captured.push(String::from_utf8_lossy(&out.stdout).replace(&s(&dir), "<run>"));
        }
        let mut files = Vec::new();
        for sub in ["enh", "enh_net", "train", "eval"] {
            files.extend(tree_bytes(&dir.join(sub)));
        }
        files.push((
            "labels.csv".into(),
            std::fs::read(dir.join("labels.csv")).unwrap(),
        ));
        runs.push((captured, files));
    }
    ensure(
        runs[0].0 == runs[1].0,
        "command output differs between runs",
    )?;
    ensure(
        runs[0].1.len() == runs[1].1.len(),
        "runs wrote different file sets",
    )?;
    for (a, b) in runs[0].1.iter().zip(&runs[1].1) {
        ensure(a == b, format!("{} differs between runs", a.0))?;
    }
    let n_files = runs[0].1.len();

    // Store round-trip, including values that only survive a bit-exact format.
    let mut store = NamedTensorStore::new();
    let special = vec![
        0.0,
        -0.0,
        f64::MIN_POSITIVE / 3.0,
        f64::MAX,
        -f64::INFINITY,
        f64::NAN,
        1.0 / 3.0,
    ];
    store
        .insert("z.special", Tensor::new(vec![7], special).unwrap())
        .unwrap();
    for (name, n) in [("b.weights", 60), ("a.bias", 5)] {
        let data = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        store
            .insert(name, Tensor::new(vec![n], data).unwrap())
            .unwrap();
    }
    store
        .insert("empty", Tensor::new(vec![0], vec![]).unwrap())
        .unwrap();
    let path = root.join("store.alen");
    persistence::save_store(&store, &path).unwrap();
    let back: NamedTensorStore = persistence::load_store(&path).map_err(|e| e.to_string())?;
    ensure(back.names().eq(store.names()), "store order changed")?;
    for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(
            a.shape() == b.shape() && bits(a) == bits(b),
            "store values changed",
        )?;
    }
    ensure(back.to_bytes() == store.to_bytes(), "store bytes changed")?;

    // 8-bit image round-trips.
    for ext in ["png", "ppm"] {
        let img =
            RgbImage::from_fn(7, 9, |_, _, _| rng.random_range(0..=255u8) as f64 / 255.0).unwrap();
        let p = root.join(format!("lattice.{ext}"));
        persistence::save_image(&img, &p).unwrap();
        let back: RgbImage = persistence::load_image(&p).map_err(|e| e.to_string())?;
        ensure(
            back.data()
                .iter()
                .zip(img.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("{ext} round-trip changed pixels"),
        )?;
    }
    Ok(format!("7 commands x 2 runs, {n_files} output files identical; store and png/ppm round-trips bit-exact"))
}

// ---------------------------------------------------------------- ablation

fn fusion_ablation() -> Outcome {
    let t0 = Instant::now();
    let data = synthetic_pairs(16, 32, 0.0, 11);
    let held_out = synthetic_pairs(8, 32, 0.0, 12);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 3,
        batch_size: 1,
        seed: 5,
        ..Default::default()
    };
    let err = |e: alen::Error| e.to_string();
    let mut b: ModelBundle =
        ModelBundle::seeded(9, ClassifierMode::Histogram, SLCformerConfig::default());
    let global_loss = || ScnetObjective {
        loss: EstimatorLoss::global_or_color(),
    };
    b.scnet_global = train_network(global_loss(), b.scnet_global.clone(), &data, &cfg, None)
        .map_err(err)?
        .weights;
    b.scnet_local = train_network(
        ScnetObjective {
            loss: EstimatorLoss::Local,
        },
        b.scnet_local.clone(),
        &data,
        &cfg,
        None,
    )
    .map_err(err)?
    .weights;
    let color_loss = || McnetObjective {
        loss: EstimatorLoss::global_or_color(),
    };
    b.mcnet_color = train_network(color_loss(), b.mcnet_color.clone(), &data, &cfg, None)
        .map_err(err)?
        .weights;
    let illum: Vec<Pair> = data
        .iter()
        .map(|p| Pair {
            input: global_illumination(&p.input, &b).unwrap(),
            target: p.target.clone(),
        })
        .collect();
    b.mcnet_illum = train_network(color_loss(), b.mcnet_illum.clone(), &illum, &cfg, None)
        .map_err(err)?
        .weights;

    let branch_only = FusionWeights {
        lambda_g: 1.0,
        lambda_l: 1.0,
        lambda_c: 0.0,
    };
    let (mut full, mut branch, mut routes) = (0.0, 0.0, [0usize; 2]);
    let all: Vec<&Pair> = data.iter().chain(&held_out).collect();
    for p in &all {
        let f = enhance(&p.input, &b, &FusionWeights::default()).map_err(err)?;
        let o = enhance(&p.input, &b, &branch_only).map_err(err)?;
        full += psnr(&f.output, &p.target).map_err(err)?;
        branch += psnr(&o.output, &p.target).map_err(err)?;
        routes[(f.decision.route == Route::Local) as usize] += 1;
    }
    let (full, branch) = (full / all.len() as f64, branch / all.len() as f64);
    ensure(
        full >= branch - 0.1,
        format!("fused {full:.3} dB < branch-only {branch:.3} dB - 0.1"),
    )?;
    Ok(format!(
        "fused {full:.3} dB vs branch-only {branch:.3} dB over {} images ({} global, {} local), {:.1?}",
        all.len(),
        routes[0],
        routes[1],
        t0.elapsed()
    ))
}

fn main() {
    let checks: [Check; 8] = [
        ("gradient suite", gradient_suite),
        ("classifier accounting", slcformer_accounting),
        ("labeler oracle", labeler_oracle),
        ("metric oracles", metric_oracles),
        ("pipeline oracle", pipeline_oracle),
        ("toy trainability", toy_trainability),
        ("determinism and round-trips", determinism_and_round_trips),
        ("fusion ablation", fusion_ablation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("acceptance {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("acceptance {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} passed",
        checks.len() - failed,
        checks.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
