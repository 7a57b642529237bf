//! Toy-scale training: Adam, a one-shot learning-rate halving, random crops,
//! and synthetic datasets.
//!
//! Every sample in a mini-batch gets its own tape; the per-sample gradients
//! are summed in batch order and divided by the batch size, so a run is
//! bit-reproducible from its seed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::colorspace::rgb_to_hsv;
use crate::error::{shape_err, Error, Result};
use crate::estimators::{mcnet_tape, scnet_tape, MCNetSpec, SCNetSpec};
use crate::image::RgbImage;
use crate::losses::{
    bce_loss, loss_global_or_color, loss_local, FeatureExtractor, DEFAULT_EXTRACTOR_SEED,
};
use crate::nn::{BoundParams, NetworkSpec};
use crate::persistence::{save_store, NamedTensorStore};
use crate::route::Route;
use crate::scalar::{lit, Scalar};
use crate::slcformer::{logit_tape, prepare_input, SLCformerConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Adam moments for every entry of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &NamedTensorStore<S>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<S: Scalar>(
    params: &mut NamedTensorStore<S>,
    grads: &NamedTensorStore<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "Adam over {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((name, p), (gname, g)) in params.iter().zip(grads.iter()) {
        if name != gname || p.shape() != g.shape() {
            return shape_err(format!(
                "gradient `{gname}` {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2): (S, S) = (lit(state.beta1), lit(state.beta2));
    let bc1: S = lit(1.0 - state.beta1.powi(t));
    let bc2: S = lit(1.0 - state.beta2.powi(t));
    let (lr, eps): (S, S) = (lit(lr), lit(state.eps));
    for (i, ((_, p), (_, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: Option<usize>,
    pub halve_after: Option<usize>,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 1,
            crop: None,
            halve_after: None,
            seed: 0,
            max_steps: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} is not ≥ 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if self.crop == Some(0) {
            return Err(Error::InvalidArgument(
                "crop size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Base rate before `halve_after`, half of it from then on.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.halve_after {
        Some(h) if epoch >= h => cfg.learning_rate / 2.0,
        _ => cfg.learning_rate,
    }
}

/// An input image and its enhancement target.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<S: Scalar = f64> {
    pub input: RgbImage<S>,
    pub target: RgbImage<S>,
}

/// The same uniformly drawn `size×size` window cut from both images.
pub fn random_crop<S: Scalar, R: Rng>(pair: &Pair<S>, size: usize, rng: &mut R) -> Result<Pair<S>> {
    let (h, w) = (pair.input.height(), pair.input.width());
    if !pair.input.same_dims(&pair.target) {
        return shape_err("pair images differ in size");
    }
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {size}x{size} from {h}x{w}"
        )));
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    Ok(Pair {
        input: pair.input.crop(y0, x0, size, size)?,
        target: pair.target.crop(y0, x0, size, size)?,
    })
}

/// A training example that may be cropped before use.
pub trait Sample: Clone + Send + Sync {
    fn crop<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Self>;
}

impl<S: Scalar> Sample for Pair<S> {
    fn crop<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Self> {
        random_crop(self, size, rng)
    }
}

/// A resized classifier input and its label (1 = global).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInput<S: Scalar = f64> {
    pub input: Tensor<S>,
    pub y: S,
}

impl<S: Scalar> LabeledInput<S> {
    pub fn new(img: &RgbImage<S>, route: Route, cfg: &SLCformerConfig) -> Result<Self> {
        Ok(LabeledInput {
            input: prepare_input(img, cfg)?,
            y: if route == Route::Global {
                S::one()
            } else {
                S::zero()
            },
        })
    }
}

impl<S: Scalar> Sample for LabeledInput<S> {
    fn crop<R: Rng>(&self, _size: usize, _rng: &mut R) -> Result<Self> {
        Err(Error::InvalidArgument(
            "classifier inputs are resized, not cropped".into(),
        ))
    }
}

/// A network plus the loss it trains on.
pub trait Objective<S: Scalar> {
    type Sample: Sample;
    fn validate(&self, weights: &NamedTensorStore<S>) -> Result<()>;
    fn loss(
        &self,
        tape: &mut Tape<S>,
        params: &BoundParams<S>,
        sample: &Self::Sample,
    ) -> Result<Var<S>>;
}

/// Estimator losses.
#[derive(Clone, Debug, PartialEq)]
pub enum EstimatorLoss<S: Scalar = f64> {
    /// SSIM loss only.
    Local,
    /// MSE + SSIM + perceptual.
    GlobalOrColor(FeatureExtractor<S>),
}

impl<S: Scalar> EstimatorLoss<S> {
    pub fn global_or_color() -> Self {
        EstimatorLoss::GlobalOrColor(FeatureExtractor::seeded(DEFAULT_EXTRACTOR_SEED))
    }

    fn apply(&self, tape: &mut Tape<S>, y_hat: &Var<S>, y: &Var<S>) -> Result<Var<S>> {
        match self {
            EstimatorLoss::Local => loss_local(tape, y_hat, y),
            EstimatorLoss::GlobalOrColor(fx) => loss_global_or_color(tape, y_hat, y, fx),
        }
    }
}

/// SCNet on value planes: HSV value of the input against HSV value of the target.
/// The loss sees the raw, unclamped network output.
pub struct ScnetObjective<S: Scalar = f64> {
    pub loss: EstimatorLoss<S>,
}

impl<S: Scalar> Objective<S> for ScnetObjective<S> {
    type Sample = Pair<S>;

    fn validate(&self, weights: &NamedTensorStore<S>) -> Result<()> {
        SCNetSpec.validate(weights)
    }

    fn loss(&self, tape: &mut Tape<S>, params: &BoundParams<S>, s: &Pair<S>) -> Result<Var<S>> {
        let x = tape.constant(rgb_to_hsv(&s.input).value_plane().to_tensor());
        let y = tape.constant(rgb_to_hsv(&s.target).value_plane().to_tensor());
        let y_hat = scnet_tape(tape, params, &x)?;
        self.loss.apply(tape, &y_hat, &y)
    }
}

/// MCNet on RGB images.
pub struct McnetObjective<S: Scalar = f64> {
    pub loss: EstimatorLoss<S>,
}

impl<S: Scalar> Objective<S> for McnetObjective<S> {
    type Sample = Pair<S>;

    fn validate(&self, weights: &NamedTensorStore<S>) -> Result<()> {
        MCNetSpec.validate(weights)
    }

    fn loss(&self, tape: &mut Tape<S>, params: &BoundParams<S>, s: &Pair<S>) -> Result<Var<S>> {
        let x = tape.constant(s.input.to_tensor());
        let y = tape.constant(s.target.to_tensor());
        let y_hat = mcnet_tape(tape, params, &x)?;
        self.loss.apply(tape, &y_hat, &y)
    }
}

/// SLCformer under binary cross-entropy.
pub struct ClassifierObjective {
    pub cfg: SLCformerConfig,
}

impl ClassifierObjective {
    /// Probability of the global route for a prepared input.
    pub fn probability<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &BoundParams<S>,
        input: &Tensor<S>,
    ) -> Result<Var<S>> {
        let x = tape.constant(input.clone());
        let logit = logit_tape(tape, params, &self.cfg, &x)?;
        Ok(tape.sigmoid(&logit))
    }
}

impl<S: Scalar> Objective<S> for ClassifierObjective {
    type Sample = LabeledInput<S>;

    fn validate(&self, weights: &NamedTensorStore<S>) -> Result<()> {
        self.cfg.validate()?;
        self.cfg.validate_weights(weights)
    }

    fn loss(
        &self,
        tape: &mut Tape<S>,
        params: &BoundParams<S>,
        s: &LabeledInput<S>,
    ) -> Result<Var<S>> {
        let p = self.probability(tape, params, &s.input)?;
        bce_loss(tape, &p, &[s.y])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// CSV with header `epoch,mean_loss,lr`.
pub fn history_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in history {
        w.serialize(r)?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "mean_loss", "lr"])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Optimization state that advances one epoch at a time.
pub struct Trainer<S: Scalar, O: Objective<S>> {
    pub objective: O,
    pub weights: NamedTensorStore<S>,
    pub adam: AdamState<S>,
    pub cfg: TrainConfig,
    pub history: Vec<EpochRecord>,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: usize,
}

impl<S: Scalar, O: Objective<S>> Trainer<S, O> {
    pub fn new(objective: O, weights: NamedTensorStore<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        objective.validate(&weights)?;
        Ok(Trainer {
            adam: AdamState::new(&weights),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            objective,
            weights,
            cfg,
            history: Vec::new(),
            epoch: 0,
            steps: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn budget_exhausted(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.steps >= m)
    }

    /// Loss and per-parameter gradients of one sample.
    pub fn sample_gradients(&self, sample: &O::Sample) -> Result<(f64, NamedTensorStore<S>)> {
        let mut tape = Tape::new();
        let params = BoundParams::bind(&mut tape, &self.weights, true);
        let loss = self.objective.loss(&mut tape, &params, sample)?;
        let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
        let grads = tape.backward(&loss)?;
        Ok((value, params.gradients(&grads)))
    }

    /// One shuffled pass over `data`, stopping early if the step budget runs out.
    pub fn run_epoch(&mut self, data: &[O::Sample]) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let lr = lr_schedule(&self.cfg, self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(self.cfg.batch_size) {
            if self.budget_exhausted() {
                break;
            }
            let mut acc: Option<NamedTensorStore<S>> = None;
            for &i in batch {
                let sample = match self.cfg.crop {
                    Some(c) => data[i].crop(c, &mut self.rng)?,
                    None => data[i].clone(),
                };
                let (value, g) = self.sample_gradients(&sample)?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch,
                        step: self.steps,
                        value,
                    });
                }
                loss_sum += value;
                seen += 1;
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for ((_, t), (_, u)) in a.iter_mut().zip(g.iter()) {
                            t.data_mut()
                                .iter_mut()
                                .zip(u.data())
                                .for_each(|(x, &y)| *x = *x + y);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let inv: S = S::one() / lit(batch.len() as f64);
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|x| *x = *x * inv);
            }
            adam_step(&mut self.weights, &grads, &mut self.adam, lr)?;
            self.steps += 1;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            mean_loss: if seen > 0 {
                loss_sum / seen as f64
            } else {
                f64::NAN
            },
            lr,
        };
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Mean loss over `data` with the current weights, uncropped.
    pub fn evaluate(&self, data: &[O::Sample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("evaluation set is empty".into()));
        }
        let mut total = 0.0;
        for s in data {
            let mut tape = Tape::inference();
            let params = BoundParams::bind(&mut tape, &self.weights, false);
            total += self
                .objective
                .loss(&mut tape, &params, s)?
                .value()
                .item()
                .to_f64()
                .unwrap_or(f64::NAN);
        }
        Ok(total / data.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar = f64> {
    pub weights: NamedTensorStore<S>,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    /// Uncropped mean loss before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Runs `cfg.epochs` epochs (or until the step budget is spent). With a
/// checkpoint directory and `checkpoint_every`, writes `epoch_NNNN.alen` files.
pub fn train_network<S: Scalar, O: Objective<S>>(
    objective: O,
    weights: NamedTensorStore<S>,
    data: &[O::Sample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    let mut t = Trainer::new(objective, weights, cfg.clone())?;
    let initial_loss = t.evaluate(data)?;
    for _ in 0..cfg.epochs {
        if t.budget_exhausted() {
            break;
        }
        let rec = t.run_epoch(data)?;
        log::info!(
            "epoch {} loss {:.6} lr {}",
            rec.epoch,
            rec.mean_loss,
            rec.lr
        );
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if every > 0 && (rec.epoch + 1) % every == 0 {
                std::fs::create_dir_all(dir)?;
                save_store(
                    &t.weights,
                    &dir.join(format!("epoch_{:04}.alen", rec.epoch + 1)),
                )?;
            }
        }
    }
    let final_loss = t.evaluate(data)?;
    Ok(TrainOutcome {
        initial_loss,
        final_loss,
        steps: t.steps,
        history: t.history,
        weights: t.weights,
    })
}

/// Which network a preset trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetKind {
    Classifier,
    ScnetLocal,
    ScnetGlobal,
    McnetIllum,
    McnetColor,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub kind: PresetKind,
    pub config: TrainConfig,
    /// Side length of the training images.
    pub resolution: usize,
}

pub const PRESET_NAMES: [&str; 5] = [
    "classifier",
    "scnet-local",
    "scnet-global",
    "mcnet-illum",
    "mcnet-color",
];

pub fn preset(name: &str) -> Result<Preset> {
    let base = TrainConfig::default();
    let (kind, config, resolution) = match name {
        "classifier" => (
            PresetKind::Classifier,
            TrainConfig {
                learning_rate: 1e-4,
                epochs: 75,
                batch_size: 32,
                ..base
            },
            224,
        ),
        "scnet-local" => (
            PresetKind::ScnetLocal,
            TrainConfig {
                learning_rate: 1e-3,
                epochs: 40,
                batch_size: 8,
                ..base
            },
            224,
        ),
        "scnet-global" => (
            PresetKind::ScnetGlobal,
            TrainConfig {
                learning_rate: 1e-3,
                epochs: 40,
                batch_size: 8,
                crop: Some(128),
                halve_after: Some(20),
                ..base
            },
            128,
        ),
        "mcnet-illum" => (
            PresetKind::McnetIllum,
            TrainConfig {
                learning_rate: 1e-3,
                epochs: 40,
                batch_size: 8,
                crop: Some(128),
                halve_after: Some(20),
                ..base
            },
            128,
        ),
        "mcnet-color" => (
            PresetKind::McnetColor,
            TrainConfig {
                learning_rate: 1e-4,
                epochs: 40,
                batch_size: 8,
                crop: Some(128),
                halve_after: Some(20),
                ..base
            },
            128,
        ),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    let name = PRESET_NAMES
        .iter()
        .find(|&&n| n == name)
        .copied()
        .expect("matched above");
    Ok(Preset {
        name,
        kind,
        config,
        resolution,
    })
}

/// Smooth random scene in `[0.15, 0.95]`: a tilted gradient plus a few Gaussian blobs.
pub fn synthetic_scene<R: Rng>(size: usize, rng: &mut R) -> RgbImage {
    let tint: [f64; 3] = [
        rng.random_range(0.7..1.0),
        rng.random_range(0.7..1.0),
        rng.random_range(0.7..1.0),
    ];
    let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                rng.random_range(-0.3..0.3),
            )
        })
        .collect();
    let base = rng.random_range(0.4..0.7);
    let s = size.max(2) as f64 - 1.0;
    RgbImage::from_fn(size, size, |c, y, x| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let mut l = base + gx * (u - 0.5) + gy * (v - 0.5);
        for &(bx, by, r, a) in &blobs {
            l += a * (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * r * r)).exp();
        }
        (l * tint[c]).clamp(0.15, 0.95)
    })
    .expect("clamped to unit range")
}

/// Gamma-darkened pairs: `input = target^γ + noise`, γ ∈ [2, 3.5].
pub fn synthetic_pairs(n: usize, size: usize, noise: f64, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let target = synthetic_scene(size, &mut rng);
            let gamma = rng.random_range(2.0..3.5);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let input = RgbImage::from_fn(size, size, |c, y, x| {
                let v = target.channel(c)[y * size + x].powf(gamma);
                let e = if noise > 0.0 {
                    noise * (noise_rng.random::<f64>() - 0.5) * 2.0
                } else {
                    0.0
                };
                (v + e).clamp(0.0, 1.0)
            })
            .expect("clamped to unit range");
            Pair { input, target }
        })
        .collect()
}

/// Alternating uniformly dark (global) and half-bright (local) images.
pub fn synthetic_classifier_set(n: usize, size: usize, seed: u64) -> Vec<(RgbImage, Route)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut tex = ChaCha8Rng::seed_from_u64(rng.random());
            if i % 2 == 0 {
                let level: f64 = rng.random_range(0.03..0.25);
                let img = RgbImage::from_fn(size, size, |_, _, _| {
                    (level + tex.random_range(-0.03..0.03)).clamp(0.0, 1.0)
                })
                .expect("clamped");
                (img, Route::Global)
            } else {
                let (dark, bright): (f64, f64) =
                    (rng.random_range(0.02..0.2), rng.random_range(0.7..0.95));
                let vertical = rng.random_bool(0.5);
                let flip = rng.random_bool(0.5);
                let img = RgbImage::from_fn(size, size, |_, y, x| {
                    let t = if vertical { x } else { y };
                    let lit_side = (t >= size / 2) != flip;
                    let v = if lit_side { bright } else { dark };
                    (v + tex.random_range(-0.03..0.03)).clamp(0.0, 1.0)
                })
                .expect("clamped");
                (img, Route::Local)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gli::{label, LabelerConfig};
    use crate::nn::build_default_weights;

    fn scalar_store(x: f64) -> NamedTensorStore {
        let mut s = NamedTensorStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_store(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_store(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar_store(2.0), &mut st, 0.01).unwrap();
        let want = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p.get("x").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..200 {
            let x = p.get("x").unwrap().item();
            adam_step(&mut p, &scalar_store(2.0 * x), &mut st, 0.1).unwrap();
        }
        assert!(p.get("x").unwrap().item().abs() < 1e-2);
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let mut g = NamedTensorStore::new();
        g.insert("y", Tensor::scalar(1.0)).unwrap();
        assert!(adam_step(&mut p, &g, &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule_halves_once() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            halve_after: Some(20),
            ..Default::default()
        };
        assert_eq!(lr_schedule(&cfg, 19), 1e-3);
        assert_eq!(lr_schedule(&cfg, 20), 5e-4);
        assert_eq!(lr_schedule(&cfg, 500), 5e-4);
        let flat = TrainConfig {
            halve_after: None,
            ..cfg
        };
        assert_eq!(lr_schedule(&flat, 100), 1e-3);
        assert_eq!(preset("scnet-global").unwrap().config.learning_rate, 1e-3);
        assert!(preset("nope").is_err());
    }

    #[test]
    fn crop_behaviour() {
        let pair = synthetic_pairs(1, 8, 0.0, 3).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop(&pair, 8, &mut rng).unwrap(), pair);
        let a = random_crop(&pair, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&pair, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(random_crop(&pair, 9, &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_cover_all_positions() {
        // Tag each pixel with its position so the crop origin can be read back.
        let img = RgbImage::from_fn(8, 8, |c, y, x| {
            if c == 0 {
                y as f64 / 8.0
            } else {
                x as f64 / 8.0
            }
        })
        .unwrap();
        let pair = Pair {
            input: img.clone(),
            target: img,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [[0u32; 5]; 5];
        for _ in 0..10_000 {
            let c = random_crop(&pair, 4, &mut rng).unwrap();
            let (y0, x0) = (
                (c.input.channel(0)[0] * 8.0) as usize,
                (c.input.channel(1)[0] * 8.0) as usize,
            );
            assert_eq!(c.input, c.target);
            counts[y0][x0] += 1;
        }
        for row in counts {
            for n in row {
                assert!((300..500).contains(&n), "{n}");
            }
        }
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let data = synthetic_pairs(2, 4, 0.0, 1);
        let w: NamedTensorStore = build_default_weights(&SCNetSpec, 4);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 2,
            ..Default::default()
        };
        let out = train_network(
            ScnetObjective {
                loss: EstimatorLoss::Local,
            },
            w.clone(),
            &data,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_pairs(3, 6, 0.01, 2);
        let w: NamedTensorStore = build_default_weights(&MCNetSpec, 5);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 2,
            crop: Some(4),
            seed: 7,
            ..Default::default()
        };
        let run = || {
            train_network(
                McnetObjective {
                    loss: EstimatorLoss::global_or_color(),
                },
                w.clone(),
                &data,
                &cfg,
                None,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.weights.to_bytes(), b.weights.to_bytes());
        assert_eq!(a.history, b.history);
        assert_ne!(a.weights, w);
    }

    #[test]
    fn checkpoints_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthetic_pairs(1, 4, 0.0, 1);
        let w: NamedTensorStore = build_default_weights(&SCNetSpec, 4);
        let cfg = TrainConfig {
            epochs: 2,
            checkpoint_every: Some(1),
            ..Default::default()
        };
        let out = train_network(
            ScnetObjective {
                loss: EstimatorLoss::Local,
            },
            w,
            &data,
            &cfg,
            Some(dir.path()),
        )
        .unwrap();
        assert!(dir.path().join("epoch_0001.alen").exists());
        assert!(dir.path().join("epoch_0002.alen").exists());
        let csv = String::from_utf8(history_csv(&out.history).unwrap()).unwrap();
        assert!(csv.starts_with("epoch,mean_loss,lr\n0,"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(history_csv(&[]).unwrap(), b"epoch,mean_loss,lr\n");
    }

    #[test]
    fn step_budget_is_respected() {
        let data = synthetic_pairs(4, 4, 0.0, 1);
        let w: NamedTensorStore = build_default_weights(&SCNetSpec, 4);
        let cfg = TrainConfig {
            epochs: 10,
            max_steps: Some(3),
            ..Default::default()
        };
        let out = train_network(
            ScnetObjective {
                loss: EstimatorLoss::Local,
            },
            w,
            &data,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(out.steps, 3);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn synthetic_classifier_labels_agree_with_histogram_rule() {
        for (img, route) in synthetic_classifier_set(20, 16, 3) {
            assert_eq!(label(&img, &LabelerConfig::default()).0, route);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let w: NamedTensorStore = build_default_weights(&SCNetSpec, 4);
        let cfg = TrainConfig::default();
        assert!(train_network(
            ScnetObjective {
                loss: EstimatorLoss::Local
            },
            w,
            &[],
            &cfg,
            None
        )
        .is_err());
    }
}
