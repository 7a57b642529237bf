//! Training losses, all built from tape operations so they differentiate.
//!
//! * BCE for the classifier
//! * MSE (`L_c`)
//! * SSIM loss (`L_s = 1 − mean SSIM`)
//! * perceptual loss (`L_p`) over a fixed feature extractor
//!
//! The local estimator trains on `L_s`; the global and color estimators
//! train on `L_c + L_s + L_p`.

use rand::SeedableRng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{build_default_weights, BoundParams, ConvLayer, NetworkSpec, ParamSpec};
use crate::persistence::NamedTensorStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

pub const BCE_EPS: f64 = 1e-7;

/// Averaging window used by SSIM statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SsimWindow {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub window: SsimWindow,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
            window: SsimWindow::Gaussian {
                size: 11,
                sigma: 1.5,
            },
            dynamic_range: 1.0,
        }
    }
}

/// Concrete averaging weights for an `h×w` image.
#[derive(Clone, Debug, PartialEq)]
pub enum WindowKernel {
    /// `k×k` row-major weights summing to one, slid with stride 1 and no padding.
    Square { k: usize, weights: Vec<f64> },
    /// One window covering the whole image with equal weights.
    Full,
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument(
                "SSIM constants must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Falls back to a single full-image window when the image is smaller than the window.
    pub fn kernel(&self, h: usize, w: usize) -> WindowKernel {
        let (k, weights) = match self.window {
            SsimWindow::Gaussian { size, sigma } => {
                let c = (size as f64 - 1.0) / 2.0;
                let g: Vec<f64> = (0..size)
                    .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let total: f64 = g.iter().sum();
                let g: Vec<f64> = g.iter().map(|v| v / total).collect();
                let w2 = (0..size * size)
                    .map(|i| g[i / size] * g[i % size])
                    .collect();
                (size, w2)
            }
            SsimWindow::Uniform { size } => (size, vec![1.0 / (size * size) as f64; size * size]),
        };
        if k == 0 || h < k || w < k {
            WindowKernel::Full
        } else {
            WindowKernel::Square { k, weights }
        }
    }
}

/// Window-averages each channel of `[C,H,W]`.
fn window_mean<S: Scalar>(tape: &mut Tape<S>, x: &Var<S>, kernel: &WindowKernel) -> Result<Var<S>> {
    let [c, h, w] = *x.shape() else {
        return shape_err(format!("SSIM expects [C,H,W], got {:?}", x.shape()));
    };
    match kernel {
        WindowKernel::Square { k, weights } => {
            let kt = tape.constant(Tensor::new(
                vec![1, 1, *k, *k],
                weights.iter().map(|&v| lit(v)).collect(),
            )?);
            let xb = tape.reshape(x, &[c, 1, h, w])?;
            tape.conv2d(&xb, &kt, None, 1, 0)
        }
        WindowKernel::Full => {
            let n = h * w;
            let wt = tape.constant(Tensor::full(&[1, n], S::one() / lit(n as f64)));
            let flat = tape.reshape(x, &[c, n])?;
            tape.linear(&flat, &wt, None)
        }
    }
}

/// Per-window SSIM values of two `[C,H,W]` tensors.
pub fn ssim_map<S: Scalar>(
    tape: &mut Tape<S>,
    a: &Var<S>,
    b: &Var<S>,
    p: &SsimParams,
) -> Result<Var<S>> {
    p.validate()?;
    if a.shape() != b.shape() {
        return shape_err(format!("SSIM of {:?} and {:?}", a.shape(), b.shape()));
    }
    let [_, h, w] = *a.shape() else {
        return shape_err(format!("SSIM expects [C,H,W], got {:?}", a.shape()));
    };
    let kernel = p.kernel(h, w);
    let (c1, c2): (S, S) = (lit(p.c1), lit(p.c2));
    let two: S = lit(2.0);

    let mx = window_mean(tape, a, &kernel)?;
    let my = window_mean(tape, b, &kernel)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let exx = window_mean(tape, &aa, &kernel)?;
    let eyy = window_mean(tape, &bb, &kernel)?;
    let exy = window_mean(tape, &ab, &kernel)?;
    let mxx = tape.mul(&mx, &mx)?;
    let myy = tape.mul(&my, &my)?;
    let mxy = tape.mul(&mx, &my)?;
    let sxx = tape.sub(&exx, &mxx)?;
    let syy = tape.sub(&eyy, &myy)?;
    let sxy = tape.sub(&exy, &mxy)?;

    let t = tape.scale(&mxy, two);
    let num1 = tape.add_scalar(&t, c1);
    let t = tape.scale(&sxy, two);
    let num2 = tape.add_scalar(&t, c2);
    let t = tape.add(&mxx, &myy)?;
    let den1 = tape.add_scalar(&t, c1);
    let t = tape.add(&sxx, &syy)?;
    let den2 = tape.add_scalar(&t, c2);
    let num = tape.mul(&num1, &num2)?;
    let den = tape.mul(&den1, &den2)?;
    tape.div(&num, &den)
}

/// Mean SSIM over all windows and channels.
pub fn ssim_mean<S: Scalar>(
    tape: &mut Tape<S>,
    a: &Var<S>,
    b: &Var<S>,
    p: &SsimParams,
) -> Result<Var<S>> {
    let map = ssim_map(tape, a, b, p)?;
    Ok(tape.mean(&map))
}

/// `1 − mean SSIM`.
pub fn ssim_loss<S: Scalar>(
    tape: &mut Tape<S>,
    a: &Var<S>,
    b: &Var<S>,
    p: &SsimParams,
) -> Result<Var<S>> {
    let m = ssim_mean(tape, a, b, p)?;
    let neg = tape.scale(&m, -S::one());
    Ok(tape.add_scalar(&neg, S::one()))
}

/// Mean of squared differences.
pub fn mse_loss<S: Scalar>(tape: &mut Tape<S>, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(&d, &d)?;
    Ok(tape.mean(&sq))
}

/// Binary cross-entropy of probabilities `y_hat` (shape `[N]`) against 0/1 labels.
pub fn bce_loss<S: Scalar>(tape: &mut Tape<S>, y_hat: &Var<S>, y: &[S]) -> Result<Var<S>> {
    let n = y_hat.value().numel();
    if n != y.len() || n == 0 {
        return shape_err(format!("BCE over {n} predictions and {} labels", y.len()));
    }
    let eps: S = lit(BCE_EPS);
    let p = tape.clamp(y_hat, eps, S::one() - eps);
    let p = tape.reshape(&p, &[n])?;
    let log_p = tape.ln(&p);
    let neg = tape.scale(&p, -S::one());
    let q = tape.add_scalar(&neg, S::one());
    let log_q = tape.ln(&q);
    let yt = tape.constant(Tensor::new(vec![n], y.to_vec())?);
    let yc = tape.constant(Tensor::new(
        vec![n],
        y.iter().map(|&v| S::one() - v).collect(),
    )?);
    let a = tape.mul(&log_p, &yt)?;
    let b = tape.mul(&log_q, &yc)?;
    let t = tape.add(&a, &b)?;
    let s = tape.sum(&t);
    Ok(tape.scale(&s, -S::one() / lit(n as f64)))
}

/// One feature-extractor layer; `relu` applies after the conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorLayer {
    pub conv: ConvLayer,
    pub relu: bool,
}

/// A fixed convolutional network whose layer outputs serve as features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<S: Scalar = f64> {
    layers: Vec<ExtractorLayer>,
    weights: NamedTensorStore<S>,
}

struct ExtractorSpec<'a>(&'a [ExtractorLayer]);

impl NetworkSpec for ExtractorSpec<'_> {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.0.iter().flat_map(|l| l.conv.param_specs()).collect()
    }
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(layers: Vec<ExtractorLayer>, weights: NamedTensorStore<S>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "feature extractor needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].conv.c_out != pair[1].conv.c_in {
                return shape_err(format!(
                    "extractor layer {} emits {} channels but {} expects {}",
                    pair[0].conv.name, pair[0].conv.c_out, pair[1].conv.name, pair[1].conv.c_in
                ));
            }
        }
        ExtractorSpec(&layers).validate(&weights)?;
        Ok(FeatureExtractor { layers, weights })
    }

    /// Three seeded 3×3 conv+ReLU layers, 3 → 8 → 16 → 16 channels.
    pub fn seeded(seed: u64) -> Self {
        let layers = vec![
            ExtractorLayer {
                conv: ConvLayer::new("fx.conv1", 3, 8, 3),
                relu: true,
            },
            ExtractorLayer {
                conv: ConvLayer::new("fx.conv2", 8, 16, 3),
                relu: true,
            },
            ExtractorLayer {
                conv: ConvLayer::new("fx.conv3", 16, 16, 3),
                relu: true,
            },
        ];
        let mut weights: NamedTensorStore<S> = build_default_weights(&ExtractorSpec(&layers), seed);
        // Small random biases keep some units active on dark inputs.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for (name, t) in weights.iter_mut() {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v = lit(rand::Rng::random_range(&mut rng, 0.0..0.1));
                }
            }
        }
        FeatureExtractor { layers, weights }
    }

    /// A single linear 1×1 identity conv on `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let conv = ConvLayer::new("fx.identity", channels, channels, 1);
        let mut weights = NamedTensorStore::new();
        let w = Tensor::from_fn(&[channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                S::one()
            } else {
                S::zero()
            }
        });
        weights.insert(conv.weight_name(), w).expect("fresh store");
        weights
            .insert(conv.bias_name(), Tensor::zeros(&[channels]))
            .expect("fresh store");
        FeatureExtractor {
            layers: vec![ExtractorLayer { conv, relu: false }],
            weights,
        }
    }

    pub fn layers(&self) -> &[ExtractorLayer] {
        &self.layers
    }

    pub fn weights(&self) -> &NamedTensorStore<S> {
        &self.weights
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].conv.c_in
    }

    /// Outputs of every layer for a `[C,H,W]` input. A single-channel input
    /// is replicated when the extractor expects more channels.
    pub fn features(
        &self,
        tape: &mut Tape<S>,
        p: &BoundParams<S>,
        x: &Var<S>,
    ) -> Result<Vec<Var<S>>> {
        let want = self.input_channels();
        let mut h = if x.shape().first() == Some(&1) && want > 1 {
            let copies: Vec<&Var<S>> = std::iter::repeat_n(x, want).collect();
            tape.concat(&copies)?
        } else {
            x.clone()
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            h = l.conv.apply(tape, p, &h)?;
            if l.relu {
                h = tape.relu(&h);
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// `Σ_j ‖φ_j(a) − φ_j(b)‖² / (C_j·H_j·W_j)` over the tapped layers.
pub fn perceptual_loss<S: Scalar>(
    tape: &mut Tape<S>,
    a: &Var<S>,
    b: &Var<S>,
    fx: &FeatureExtractor<S>,
    taps: &[usize],
) -> Result<Var<S>> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "perceptual loss of {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    if let Some(&bad) = taps.iter().find(|&&j| j >= fx.layers.len()) {
        return Err(Error::InvalidArgument(format!(
            "tap {bad} out of range for a {}-layer extractor",
            fx.layers.len()
        )));
    }
    if taps.is_empty() {
        return Err(Error::InvalidArgument(
            "perceptual loss needs at least one tap".into(),
        ));
    }
    let p = BoundParams::bind(tape, &fx.weights, false);
    let fa = fx.features(tape, &p, a)?;
    let fb = fx.features(tape, &p, b)?;
    let mut total: Option<Var<S>> = None;
    for &j in taps {
        let term = mse_loss(tape, &fa[j], &fb[j])?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Every layer of the extractor.
pub fn all_taps<S: Scalar>(fx: &FeatureExtractor<S>) -> Vec<usize> {
    (0..fx.layers.len()).collect()
}

/// Local-route loss: exactly the SSIM loss.
pub fn loss_local<S: Scalar>(tape: &mut Tape<S>, y_hat: &Var<S>, y: &Var<S>) -> Result<Var<S>> {
    ssim_loss(tape, y_hat, y, &SsimParams::default())
}

/// Global-route and color loss: `(MSE + SSIM loss) + perceptual`, unweighted.
pub fn loss_global_or_color<S: Scalar>(
    tape: &mut Tape<S>,
    y_hat: &Var<S>,
    y: &Var<S>,
    fx: &FeatureExtractor<S>,
) -> Result<Var<S>> {
    let c = mse_loss(tape, y_hat, y)?;
    let s = ssim_loss(tape, y_hat, y, &SsimParams::default())?;
    let pl = perceptual_loss(tape, y_hat, y, fx, &all_taps(fx))?;
    let t = tape.add(&c, &s)?;
    tape.add(&t, &pl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random())
    }

    fn value(f: impl FnOnce(&mut Tape<f64>) -> Result<Var<f64>>) -> f64 {
        let mut tape = Tape::inference();
        f(&mut tape).unwrap().value().item()
    }

    /// Direct per-window SSIM with explicit weights.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
        let (k, wts) = match p.kernel(h, w) {
            WindowKernel::Square { k, weights } => (k, weights),
            WindowKernel::Full => (0, vec![]),
        };
        let windows: Vec<Vec<(usize, f64)>> = if k == 0 {
            vec![(0..h * w).map(|i| (i, 1.0 / (h * w) as f64)).collect()]
        } else {
            let mut v = Vec::new();
            for y in 0..=h - k {
                for x in 0..=w - k {
                    v.push(
                        (0..k * k)
                            .map(|i| ((y + i / k) * w + x + i % k, wts[i]))
                            .collect(),
                    );
                }
            }
            v
        };
        let mut acc = 0.0;
        for win in &windows {
            let e = |f: &dyn Fn(usize) -> f64| win.iter().map(|&(i, wt)| wt * f(i)).sum::<f64>();
            let mx = e(&|i| a[i]);
            let my = e(&|i| b[i]);
            let sxx = e(&|i| a[i] * a[i]) - mx * mx;
            let syy = e(&|i| b[i] * b[i]) - my * my;
            let sxy = e(&|i| a[i] * b[i]) - mx * my;
            acc += ((2.0 * mx * my + p.c1) * (2.0 * sxy + p.c2))
                / ((mx * mx + my * my + p.c1) * (sxx + syy + p.c2));
        }
        acc / windows.len() as f64
    }

    #[test]
    fn bce_values() {
        let l = value(|t| {
            let p = t.constant(Tensor::full(&[3], 0.5));
            bce_loss(t, &p, &[1.0, 0.0, 1.0])
        });
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = value(|t| {
            let p = t.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
            bce_loss(t, &p, &[1.0, 0.0])
        });
        assert!((0.0..=1.01e-7).contains(&l), "{l}");
        let mut t = Tape::<f64>::inference();
        let p = t.constant(Tensor::full(&[3], 0.5));
        assert!(bce_loss(&mut t, &p, &[1.0]).is_err());
    }

    #[test]
    fn bce_gradient_closed_form() {
        let yh: Vec<f64> = vec![0.3, 0.8, 0.55];
        let y = [1.0, 0.0, 1.0];
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::new(vec![3], yh.clone()).unwrap());
        let l = bce_loss(&mut tape, &p, &y).unwrap();
        let g = tape.backward(&l).unwrap().wrt(&p);
        for i in 0..3 {
            let expect = (yh[i] - y[i]) / (yh[i] * (1.0 - yh[i])) / 3.0;
            assert!((g.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_values() {
        let z = value(|t| {
            let a = t.constant(rand_t(1, &[2, 3]));
            mse_loss(t, &a, &a)
        });
        assert_eq!(z, 0.0);
        let one = value(|t| {
            let a = t.constant(Tensor::zeros(&[1]));
            let b = t.constant(Tensor::ones(&[1]));
            mse_loss(t, &a, &b)
        });
        assert_eq!(one, 1.0);
        let d = 0.25;
        let off = value(|t| {
            let a = t.constant(Tensor::full(&[4, 4], 0.5));
            let b = t.constant(Tensor::full(&[4, 4], 0.5 + d));
            mse_loss(t, &a, &b)
        });
        assert_eq!(off, d * d);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let p = SsimParams::default();
        let a = rand_t(2, &[3, 12, 13]);
        let b = rand_t(3, &[3, 12, 13]);
        let same = value(|t| {
            let x = t.constant(a.clone());
            ssim_loss(t, &x, &x, &p)
        });
        assert!(same.abs() < 1e-12);
        let ab = value(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            ssim_loss(t, &x, &y, &p)
        });
        let ba = value(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            ssim_loss(t, &y, &x, &p)
        });
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let p = SsimParams::default();
        for (h, w) in [(8, 8), (16, 14)] {
            let a = rand_t(4, &[1, h, w]);
            let b = rand_t(5, &[1, h, w]);
            let got = value(|t| {
                let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
                ssim_mean(t, &x, &y, &p)
            });
            let want = ssim_oracle(a.data(), b.data(), h, w, &p);
            assert!((got - want).abs() < 1e-10, "{h}x{w}: {got} vs {want}");
        }
    }

    #[test]
    fn ssim_zero_vs_one_plane() {
        let p = SsimParams::default();
        let l = value(|t| {
            let x = t.constant(Tensor::zeros(&[1, 8, 8]));
            let y = t.constant(Tensor::ones(&[1, 8, 8]));
            ssim_loss(t, &x, &y, &p)
        });
        let expect = 1.0 - p.c1 / (1.0 + p.c1);
        assert!((l - expect).abs() < 1e-12);
        assert!(l > 0.999);
    }

    #[test]
    fn perceptual_identity_reduces_to_mse() {
        let fx = FeatureExtractor::<f64>::identity(3);
        let a = rand_t(6, &[3, 4, 4]);
        let b = rand_t(7, &[3, 4, 4]);
        let (pl, m) = {
            let mut t = Tape::inference();
            let (x, y) = (t.constant(a), t.constant(b));
            let pl = perceptual_loss(&mut t, &x, &y, &fx, &[0])
                .unwrap()
                .value()
                .item();
            let m = mse_loss(&mut t, &x, &y).unwrap().value().item();
            (pl, m)
        };
        assert_eq!(pl, m);
    }

    #[test]
    fn perceptual_matches_two_pass_oracle() {
        let fx = FeatureExtractor::<f64>::seeded(DEFAULT_EXTRACTOR_SEED);
        let a = rand_t(8, &[3, 4, 4]);
        let b = rand_t(9, &[3, 4, 4]);
        let got = value(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            perceptual_loss(t, &x, &y, &fx, &[0, 2])
        });
        let feats = |x: &Tensor| -> Vec<Tensor> {
            let mut h = x.clone();
            let mut out = vec![];
            for l in fx.layers() {
                let w = fx.weights().get(&l.conv.weight_name()).unwrap();
                let bb = fx.weights().get(&l.conv.bias_name()).unwrap();
                h = crate::tensor::ops::relu(
                    &crate::tensor::ops::conv2d(&h, w, Some(bb), 1, 1).unwrap(),
                );
                out.push(h.clone());
            }
            out
        };
        let (fa, fb) = (feats(&a), feats(&b));
        let want: f64 = [0usize, 2]
            .iter()
            .map(|&j| {
                let n = fa[j].numel() as f64;
                fa[j]
                    .data()
                    .iter()
                    .zip(fb[j].data())
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    / n
            })
            .sum();
        assert!((got - want).abs() < 1e-12);
        let mut t = Tape::inference();
        let x = t.constant(a);
        assert!(perceptual_loss(&mut t, &x, &x, &fx, &[3]).is_err());
        assert_eq!(
            perceptual_loss(&mut t, &x, &x, &fx, &[0, 1, 2])
                .unwrap()
                .value()
                .item(),
            0.0
        );
    }

    #[test]
    fn global_loss_is_sum_of_parts() {
        let fx = FeatureExtractor::<f64>::seeded(1);
        let a = rand_t(10, &[3, 6, 6]);
        let b = rand_t(11, &[3, 6, 6]);
        let mut t = Tape::inference();
        let (x, y) = (t.constant(a), t.constant(b));
        let total = loss_global_or_color(&mut t, &x, &y, &fx)
            .unwrap()
            .value()
            .item();
        let c = mse_loss(&mut t, &x, &y).unwrap().value().item();
        let s = ssim_loss(&mut t, &x, &y, &SsimParams::default())
            .unwrap()
            .value()
            .item();
        let pl = perceptual_loss(&mut t, &x, &y, &fx, &[0, 1, 2])
            .unwrap()
            .value()
            .item();
        assert_eq!(total.to_bits(), ((c + s) + pl).to_bits());
        let local = loss_local(&mut t, &x, &y).unwrap().value().item();
        assert_eq!(local.to_bits(), s.to_bits());
        assert_eq!(
            loss_global_or_color(&mut t, &x, &x, &fx)
                .unwrap()
                .value()
                .item(),
            0.0
        );
    }
}
