//! Finite-difference checks of every differentiable operation, the losses,
//! and the networks end to end.
//!
//! Each row builds a scalar from the operation under test (non-scalar
//! outputs are contracted against a fixed random probe) and compares the
//! tape gradient of every input with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::estimators::{mcnet_tape, scnet_tape, MCNetSpec, SCNetSpec};
use crate::losses::{
    bce_loss, mse_loss, perceptual_loss, ssim_loss, FeatureExtractor, SsimParams, SsimWindow,
};
use crate::nn::{build_default_weights, BoundParams};
use crate::persistence::NamedTensorStore;
use crate::slcformer::{swin_block_pair, SLCformerConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Corrupts ReLU gradients so the relevant rows must fail.
    pub relu_fault: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            step: 1e-5,
            relu_fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub zero_within_noise: usize,
    pub passed: bool,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Loss,
    max_coords: Option<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ y ⊙ r` for a fixed pseudo-random `r` depending only on the shape.
fn probe(t: &mut Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ y.value().numel() as u64);
    let r = t.constant(uniform(&mut rng, y.shape(), -1.0, 1.0));
    let m = t.mul(y, &r)?;
    Ok(t.sum(&m))
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
        max_coords: None,
    }
}

/// Inputs are the data tensor followed by every store entry, in store order.
fn network_case(
    name: &'static str,
    x: Tensor,
    store: NamedTensorStore,
    max_coords: usize,
    f: impl Fn(&mut Tape<f64>, &BoundParams<f64>, &Var<f64>) -> Result<Var<f64>> + 'static,
) -> Case {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    Case {
        name,
        inputs,
        f: Box::new(move |t, v| {
            let p =
                BoundParams::from_vars(names.iter().cloned().zip(v[1..].iter().cloned()).collect());
            let y = f(t, &p, &v[0])?;
            probe(t, &y)
        }),
        max_coords: Some(max_coords),
    }
}

fn swin_config() -> SLCformerConfig {
    SLCformerConfig {
        stage_channels: [8, 8, 8, 8],
        stage_heads: [2, 2, 2, 2],
        stage_depths: [2, 0, 0, 0],
        patch_size: 2,
        window_size: 2,
        mlp_ratio: 2.0,
        input_resolution: 8,
    }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut v = vec![
        case(
            "add",
            vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 3], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.add(&v[0], &v[1])?;
                probe(t, &y)
            },
        ),
        case(
            "sub",
            vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 3], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.sub(&v[0], &v[1])?;
                probe(t, &y)
            },
        ),
        case(
            "mul",
            vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 3], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.mul(&v[0], &v[1])?;
                probe(t, &y)
            },
        ),
        case(
            "div",
            vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[2, 3], 0.5, 2.0),
            ],
            |t, v| {
                let y = t.div(&v[0], &v[1])?;
                probe(t, &y)
            },
        ),
        case(
            "add_broadcast",
            vec![
                uniform(r, &[2, 3, 4], -1.0, 1.0),
                uniform(r, &[3, 4], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.add_broadcast(&v[0], &v[1])?;
                probe(t, &y)
            },
        ),
        case("scale", vec![uniform(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.scale(&v[0], -1.7);
            probe(t, &y)
        }),
        case("add_scalar", vec![uniform(r, &[5], -1.0, 1.0)], |t, v| {
            let y = t.add_scalar(&v[0], 0.3);
            let y = t.mul(&y, &y)?;
            probe(t, &y)
        }),
        case("relu", vec![uniform(r, &[12], -1.0, 1.0)], |t, v| {
            let y = t.relu(&v[0]);
            probe(t, &y)
        }),
        case("gelu", vec![uniform(r, &[12], -3.0, 3.0)], |t, v| {
            let y = t.gelu(&v[0]);
            probe(t, &y)
        }),
        case("sigmoid", vec![uniform(r, &[12], -4.0, 4.0)], |t, v| {
            let y = t.sigmoid(&v[0]);
            probe(t, &y)
        }),
        case("ln", vec![uniform(r, &[8], 0.2, 3.0)], |t, v| {
            let y = t.ln(&v[0]);
            probe(t, &y)
        }),
        case("clamp", vec![uniform(r, &[12], -1.0, 1.0)], |t, v| {
            let y = t.clamp(&v[0], -0.5, 0.5);
            probe(t, &y)
        }),
        case("sum", vec![uniform(r, &[3, 2], -1.0, 1.0)], |t, v| {
            let y = t.mul(&v[0], &v[0])?;
            Ok(t.sum(&y))
        }),
        case("mean", vec![uniform(r, &[3, 2], -1.0, 1.0)], |t, v| {
            let y = t.mul(&v[0], &v[0])?;
            Ok(t.mean(&y))
        }),
        case("mean_rows", vec![uniform(r, &[4, 3], -1.0, 1.0)], |t, v| {
            let y = t.mean_rows(&v[0])?;
            probe(t, &y)
        }),
        case(
            "conv2d",
            vec![
                uniform(r, &[2, 5, 5], -1.0, 1.0),
                uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(r, &[3], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1)?;
                probe(t, &y)
            },
        ),
        case(
            "conv2d_strided",
            vec![
                uniform(r, &[2, 2, 6, 6], -1.0, 1.0),
                uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.conv2d(&v[0], &v[1], None, 2, 0)?;
                probe(t, &y)
            },
        ),
        case(
            "linear",
            vec![
                uniform(r, &[2, 3, 4], -1.0, 1.0),
                uniform(r, &[5, 4], -1.0, 1.0),
                uniform(r, &[5], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.linear(&v[0], &v[1], Some(&v[2]))?;
                probe(t, &y)
            },
        ),
        case(
            "bmm",
            vec![
                uniform(r, &[2, 3, 4], -1.0, 1.0),
                uniform(r, &[2, 4, 5], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.bmm(&v[0], &v[1], false)?;
                probe(t, &y)
            },
        ),
        case(
            "bmm_transposed",
            vec![
                uniform(r, &[2, 3, 4], -1.0, 1.0),
                uniform(r, &[2, 5, 4], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.bmm(&v[0], &v[1], true)?;
                probe(t, &y)
            },
        ),
        case(
            "layer_norm",
            vec![
                uniform(r, &[3, 6], -1.0, 1.0),
                uniform(r, &[6], 0.5, 1.5),
                uniform(r, &[6], -0.5, 0.5),
            ],
            |t, v| {
                let y = t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
                probe(t, &y)
            },
        ),
        case("softmax", vec![uniform(r, &[3, 5], -2.0, 2.0)], |t, v| {
            let y = t.softmax(&v[0]);
            probe(t, &y)
        }),
        case("reshape", vec![uniform(r, &[2, 6], -1.0, 1.0)], |t, v| {
            let y = t.reshape(&v[0], &[3, 4])?;
            probe(t, &y)
        }),
        case(
            "permute",
            vec![uniform(r, &[2, 3, 4], -1.0, 1.0)],
            |t, v| {
                let y = t.permute(&v[0], &[2, 0, 1])?;
                probe(t, &y)
            },
        ),
        case(
            "index_select",
            vec![uniform(r, &[4, 3], -1.0, 1.0)],
            |t, v| {
                let y = t.index_select(&v[0], &[3, 0, 0, 2, 3])?;
                probe(t, &y)
            },
        ),
        case(
            "window_partition",
            vec![uniform(r, &[4, 4, 2], -1.0, 1.0)],
            |t, v| {
                let y = t.window_partition(&v[0], 2)?;
                probe(t, &y)
            },
        ),
        case(
            "window_reverse",
            vec![uniform(r, &[4, 4, 2], -1.0, 1.0)],
            |t, v| {
                let y = t.window_reverse(&v[0], 4, 4)?;
                probe(t, &y)
            },
        ),
        case(
            "cyclic_shift",
            vec![uniform(r, &[4, 4, 2], -1.0, 1.0)],
            |t, v| {
                let y = t.cyclic_shift(&v[0], -1, 2)?;
                probe(t, &y)
            },
        ),
        case(
            "concat",
            vec![
                uniform(r, &[2, 3], -1.0, 1.0),
                uniform(r, &[1, 3], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.concat(&[&v[0], &v[1]])?;
                probe(t, &y)
            },
        ),
        case(
            "concat_channels",
            vec![
                uniform(r, &[2, 2, 2], -1.0, 1.0),
                uniform(r, &[3, 2, 2], -1.0, 1.0),
            ],
            |t, v| {
                let y = t.concat_channels(&v[0], &v[1])?;
                probe(t, &y)
            },
        ),
        case("narrow", vec![uniform(r, &[5, 2], -1.0, 1.0)], |t, v| {
            let y = t.narrow(&v[0], 1, 3)?;
            probe(t, &y)
        }),
    ];

    let labels: Vec<f64> = (0..4).map(|i| (i % 2) as f64).collect();
    v.push(case(
        "loss_bce",
        vec![uniform(r, &[4], 0.1, 0.9)],
        move |t, v| bce_loss(t, &v[0], &labels),
    ));
    v.push(case(
        "loss_mse",
        vec![
            uniform(r, &[2, 4, 4], 0.0, 1.0),
            uniform(r, &[2, 4, 4], 0.0, 1.0),
        ],
        |t, v| mse_loss(t, &v[0], &v[1]),
    ));
    v.push(case(
        "loss_ssim_full_window",
        vec![
            uniform(r, &[1, 6, 6], 0.0, 1.0),
            uniform(r, &[1, 6, 6], 0.0, 1.0),
        ],
        |t, v| ssim_loss(t, &v[0], &v[1], &SsimParams::default()),
    ));
    v.push(case(
        "loss_ssim_sliding",
        vec![
            uniform(r, &[2, 6, 6], 0.0, 1.0),
            uniform(r, &[2, 6, 6], 0.0, 1.0),
        ],
        |t, v| {
            let p = SsimParams {
                window: SsimWindow::Gaussian {
                    size: 3,
                    sigma: 1.5,
                },
                ..SsimParams::default()
            };
            ssim_loss(t, &v[0], &v[1], &p)
        },
    ));
    let fx = FeatureExtractor::<f64>::seeded(seed);
    v.push(case(
        "loss_perceptual",
        vec![
            uniform(r, &[3, 5, 5], 0.0, 1.0),
            uniform(r, &[3, 5, 5], 0.0, 1.0),
        ],
        move |t, v| perceptual_loss(t, &v[0], &v[1], &fx, &[0, 1, 2]),
    ));

    let x = uniform(r, &[1, 8, 8], 0.0, 1.0);
    v.push(network_case(
        "scnet",
        x,
        build_default_weights(&SCNetSpec, seed),
        3,
        scnet_tape,
    ));
    let x = uniform(r, &[3, 8, 8], 0.0, 1.0);
    v.push(network_case(
        "mcnet",
        x,
        build_default_weights(&MCNetSpec, seed),
        3,
        mcnet_tape,
    ));

    let cfg = swin_config();
    let full: NamedTensorStore = build_default_weights(&cfg, seed);
    let mut block = NamedTensorStore::new();
    for (name, t) in full
        .iter()
        .filter(|(n, _)| n.starts_with("slc.stage0.block"))
    {
        // O(1) weights: at the default 0.02 scale attention is nearly uniform and
        // many gradients sit at the finite-difference noise floor.
        let t = if name.contains(".ln") {
            uniform(r, t.shape(), 0.5, 1.5)
        } else {
            uniform(r, t.shape(), -0.5, 0.5)
        };
        block.insert(name, t).expect("unique names");
    }
    let z = uniform(r, &[4, 4, 8], -1.0, 1.0);
    v.push(network_case(
        "swin_block_pair",
        z,
        block,
        4,
        move |t, p, z| swin_block_pair(t, p, &cfg, 0, 0, z),
    ));
    v
}

/// Names of every row, in run order.
pub fn row_names() -> Vec<&'static str> {
    cases(0).iter().map(|c| c.name).collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (i, c) in cases(opts.seed).into_iter().enumerate() {
        let gc = GradCheckOptions {
            step: opts.step,
            max_coords: c.max_coords,
            seed: opts.seed.wrapping_mul(31).wrapping_add(i as u64),
            skip_kinks: true,
            relu_fault: opts.relu_fault,
        };
        let GradCheckReport {
            max_rel_error,
            checked,
            skipped_kinks,
            zero_within_noise,
        } = grad_check(&c.f, &c.inputs, &gc)?;
        rows.push(GradRow {
            name: c.name.to_string(),
            max_rel_error,
            checked,
            skipped_kinks,
            zero_within_noise,
            passed: checked > 0 && max_rel_error < opts.tolerance,
        });
    }
    Ok(rows)
}

/// Fixed-width PASS/FAIL table.
pub fn format_table(rows: &[GradRow]) -> String {
    let mut out = format!(
        "{:<24} {:>6} {:>14} {:>8} {:>6} {:>6}\n",
        "operation", "result", "max_rel_err", "checked", "kinks", "zeros"
    );
    for r in rows {
        out += &format!(
            "{:<24} {:>6} {:>14.3e} {:>8} {:>6} {:>6}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            r.zero_within_noise
        );
    }
    out
}
