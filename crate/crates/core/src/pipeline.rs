//! Classify, enhance along the chosen route, always enhance color, then fuse.
//!
//! ```text
//! global: V → SCNet_G → (V + V′)/2 → RGB(H, S, ·) → MCNet_illum   = G′
//! local:  V → SCNet_L →             RGB(H, S, V′)                  = L′
//! color:  img → MCNet_color                                        = C′
//! output: clamp(λ_route · branch + λ_C · C′)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::colorspace::{average_v, hsv_to_rgb, rgb_to_hsv};
use crate::error::{shape_err, Error, Result};
use crate::estimators::{mcnet_forward, scnet_forward, MCNetSpec, SCNetSpec};
use crate::gli::{self, LabelerConfig};
use crate::image::RgbImage;
use crate::nn::{build_default_weights, NetworkSpec};
use crate::persistence::{load_store, save_store, NamedTensorStore};
use crate::route::Route;
use crate::scalar::{lit, Scalar};
use crate::slcformer::{classify, SLCformerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_c: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            lambda_g: 0.5,
            lambda_l: 0.5,
            lambda_c: 0.5,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_l", self.lambda_l),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weight of the branch taken on `route`.
    pub fn branch(&self, route: Route) -> f64 {
        match route {
            Route::Global => self.lambda_g,
            Route::Local => self.lambda_l,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    /// SLCformer weights decide the route.
    Network,
    /// The histogram labeling rule decides the route.
    #[default]
    Histogram,
}

impl std::str::FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(ClassifierMode::Network),
            "histogram" => Ok(ClassifierMode::Histogram),
            other => Err(Error::InvalidArgument(format!(
                "unknown classifier mode `{other}`"
            ))),
        }
    }
}

pub const CLASSIFIER_FILE: &str = "classifier.alen";
pub const SCNET_GLOBAL_FILE: &str = "scnet_global.alen";
pub const SCNET_LOCAL_FILE: &str = "scnet_local.alen";
pub const MCNET_ILLUM_FILE: &str = "mcnet_illum.alen";
pub const MCNET_COLOR_FILE: &str = "mcnet_color.alen";

/// Every weight store the pipeline needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<S: Scalar = f64> {
    pub classifier: Option<NamedTensorStore<S>>,
    pub classifier_cfg: SLCformerConfig,
    pub scnet_global: NamedTensorStore<S>,
    pub scnet_local: NamedTensorStore<S>,
    pub mcnet_illum: NamedTensorStore<S>,
    pub mcnet_color: NamedTensorStore<S>,
    pub mode: ClassifierMode,
    pub labeler: LabelerConfig,
}

impl<S: Scalar> ModelBundle<S> {
    /// Randomly initialized estimators; classifier weights only in network mode.
    pub fn seeded(seed: u64, mode: ClassifierMode, classifier_cfg: SLCformerConfig) -> Self {
        let classifier =
            (mode == ClassifierMode::Network).then(|| build_default_weights(&classifier_cfg, seed));
        ModelBundle {
            classifier,
            classifier_cfg,
            scnet_global: build_default_weights(&SCNetSpec, seed.wrapping_add(1)),
            scnet_local: build_default_weights(&SCNetSpec, seed.wrapping_add(2)),
            mcnet_illum: build_default_weights(&MCNetSpec, seed.wrapping_add(3)),
            mcnet_color: build_default_weights(&MCNetSpec, seed.wrapping_add(4)),
            mode,
            labeler: LabelerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        SCNetSpec.validate(&self.scnet_global)?;
        SCNetSpec.validate(&self.scnet_local)?;
        MCNetSpec.validate(&self.mcnet_illum)?;
        MCNetSpec.validate(&self.mcnet_color)?;
        if self.mode == ClassifierMode::Network {
            self.classifier_cfg.validate()?;
            let w = self.classifier.as_ref().ok_or_else(|| {
                Error::InvalidArgument("network classifier mode needs classifier weights".into())
            })?;
            self.classifier_cfg.validate_weights(w)?;
        }
        Ok(())
    }

    /// Reads a bundle directory; the classifier file is optional.
    pub fn load_dir(
        dir: &Path,
        mode: ClassifierMode,
        classifier_cfg: SLCformerConfig,
    ) -> Result<Self> {
        let cls = dir.join(CLASSIFIER_FILE);
        let bundle = ModelBundle {
            classifier: if cls.exists() {
                Some(load_store(&cls)?)
            } else {
                None
            },
            classifier_cfg,
            scnet_global: load_store(&dir.join(SCNET_GLOBAL_FILE))?,
            scnet_local: load_store(&dir.join(SCNET_LOCAL_FILE))?,
            mcnet_illum: load_store(&dir.join(MCNET_ILLUM_FILE))?,
            mcnet_color: load_store(&dir.join(MCNET_COLOR_FILE))?,
            mode,
            labeler: LabelerConfig::default(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(c) = &self.classifier {
            save_store(c, &dir.join(CLASSIFIER_FILE))?;
        }
        save_store(&self.scnet_global, &dir.join(SCNET_GLOBAL_FILE))?;
        save_store(&self.scnet_local, &dir.join(SCNET_LOCAL_FILE))?;
        save_store(&self.mcnet_illum, &dir.join(MCNET_ILLUM_FILE))?;
        save_store(&self.mcnet_color, &dir.join(MCNET_COLOR_FILE))
    }

    /// SHA-256 digests of every store, keyed by role.
    pub fn digests(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(c) = &self.classifier {
            out.push(("classifier", c.digest()));
        }
        out.push(("scnet_global", self.scnet_global.digest()));
        out.push(("scnet_local", self.scnet_local.digest()));
        out.push(("mcnet_illum", self.mcnet_illum.digest()));
        out.push(("mcnet_color", self.mcnet_color.digest()));
        out
    }
}

/// What the routing decision was based on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Evidence {
    /// Classifier probability of the global route.
    Probability { value: f64 },
    /// Histogram threshold intensity (`None` when no bin reached the threshold).
    Threshold { i_thr: Option<u8> },
    /// The caller chose the route.
    Forced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RouteDecision {
    pub route: Route,
    pub evidence: Evidence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementResult<S: Scalar = f64> {
    pub output: RgbImage<S>,
    pub decision: RouteDecision,
    pub branch_output: RgbImage<S>,
    pub color_output: RgbImage<S>,
    pub weights_used: FusionWeights,
}

/// Global-route illumination `I_G`: the image with its value plane replaced
/// by the mean of the original and estimated values, before refinement.
pub fn global_illumination<S: Scalar>(
    img: &RgbImage<S>,
    bundle: &ModelBundle<S>,
) -> Result<RgbImage<S>> {
    let hsv = rgb_to_hsv(img);
    let v = hsv.value_plane();
    let v_hat = scnet_forward(&v, &bundle.scnet_global)?;
    let avg = average_v(&v, &v_hat)?;
    Ok(hsv_to_rgb(&hsv.with_value(&avg)?))
}

/// Global-route enhancement `G′`.
pub fn enhance_global<S: Scalar>(
    img: &RgbImage<S>,
    bundle: &ModelBundle<S>,
) -> Result<RgbImage<S>> {
    mcnet_forward(&global_illumination(img, bundle)?, &bundle.mcnet_illum)
}

/// Local-route enhancement `L′`; hue and saturation pass through.
pub fn enhance_local<S: Scalar>(img: &RgbImage<S>, bundle: &ModelBundle<S>) -> Result<RgbImage<S>> {
    let hsv = rgb_to_hsv(img);
    let v_hat = scnet_forward(&hsv.value_plane(), &bundle.scnet_local)?;
    Ok(hsv_to_rgb(&hsv.with_value(&v_hat)?))
}

/// Color enhancement `C′`.
pub fn enhance_color<S: Scalar>(img: &RgbImage<S>, bundle: &ModelBundle<S>) -> Result<RgbImage<S>> {
    mcnet_forward(img, &bundle.mcnet_color)
}

/// `λ_route · branch + λ_C · color` as a `[3,H,W]` tensor, before clamping.
pub fn fuse_unclamped<S: Scalar>(
    branch: &RgbImage<S>,
    color: &RgbImage<S>,
    w: &FusionWeights,
    route: Route,
) -> Result<Tensor<S>> {
    if !branch.same_dims(color) {
        return shape_err(format!(
            "cannot fuse {}x{} with {}x{}",
            branch.height(),
            branch.width(),
            color.height(),
            color.width()
        ));
    }
    let (lb, lc): (S, S) = (lit(w.branch(route)), lit(w.lambda_c));
    let data = branch
        .data()
        .iter()
        .zip(color.data())
        .map(|(&b, &c)| b * lb + c * lc)
        .collect();
    Tensor::new(vec![3, branch.height(), branch.width()], data)
}

/// Weighted fusion clamped to `[0,1]`.
pub fn fuse<S: Scalar>(
    branch: &RgbImage<S>,
    color: &RgbImage<S>,
    w: &FusionWeights,
    route: Route,
) -> Result<RgbImage<S>> {
    RgbImage::from_tensor_clamped(&fuse_unclamped(branch, color, w, route)?)
}

/// Routes an image with the bundle's classifier mode.
pub fn decide<S: Scalar>(img: &RgbImage<S>, bundle: &ModelBundle<S>) -> Result<RouteDecision> {
    match bundle.mode {
        ClassifierMode::Network => {
            let w = bundle.classifier.as_ref().ok_or_else(|| {
                Error::InvalidArgument("network classifier mode needs classifier weights".into())
            })?;
            let l = classify(img, w, &bundle.classifier_cfg)?;
            Ok(RouteDecision {
                route: l.label,
                evidence: Evidence::Probability {
                    value: l.probability,
                },
            })
        }
        ClassifierMode::Histogram => {
            let (route, i_thr) = gli::label(img, &bundle.labeler);
            Ok(RouteDecision {
                route,
                evidence: Evidence::Threshold { i_thr },
            })
        }
    }
}

/// Runs the pipeline with a given routing decision.
pub fn enhance_with_decision<S: Scalar>(
    img: &RgbImage<S>,
    bundle: &ModelBundle<S>,
    w: &FusionWeights,
    decision: RouteDecision,
) -> Result<EnhancementResult<S>> {
    w.validate()?;
    let branch_output = match decision.route {
        Route::Global => enhance_global(img, bundle)?,
        Route::Local => enhance_local(img, bundle)?,
    };
    let color_output = enhance_color(img, bundle)?;
    let output = fuse(&branch_output, &color_output, w, decision.route)?;
    Ok(EnhancementResult {
        output,
        decision,
        branch_output,
        color_output,
        weights_used: *w,
    })
}

/// Forces the route instead of classifying.
pub fn enhance_with_route<S: Scalar>(
    img: &RgbImage<S>,
    bundle: &ModelBundle<S>,
    w: &FusionWeights,
    route: Route,
) -> Result<EnhancementResult<S>> {
    bundle.validate()?;
    enhance_with_decision(
        img,
        bundle,
        w,
        RouteDecision {
            route,
            evidence: Evidence::Forced,
        },
    )
}

pub fn enhance<S: Scalar>(
    img: &RgbImage<S>,
    bundle: &ModelBundle<S>,
    w: &FusionWeights,
) -> Result<EnhancementResult<S>> {
    bundle.validate()?;
    let decision = decide(img, bundle)?;
    enhance_with_decision(img, bundle, w, decision)
}
