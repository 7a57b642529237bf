//! Convolutional illumination and color estimators.
//!
//! SCNet maps a single value plane to a corrected plane. Its first four 3×3
//! layers widen 1→256 channels, and the 1×1 layers narrow back down while
//! concatenating the mirrored feature maps:
//!
//! ```text
//! c1..c4 = relu(conv1..conv4)          1 → 32 → 64 → 128 → 256
//! c5     = relu(conv5(c4))             256 → 128
//! c6     = relu(conv6([c5, c3]))       256 → 64
//! c7     = relu(conv7([c6, c2]))       128 → 32
//! out    = conv8([c7, c1])             64 → 1, linear
//! ```
//!
//! MCNet runs one shared single-channel branch over R, G and B, then mixes the
//! three results with a 3×3 fusion conv and a sigmoid:
//!
//! ```text
//! x0 = relu(initial(ch))               1 → 32
//! c1 = relu(conv1(x0))                 32 → 32
//! c2 = relu(conv2(c1))                 32 → 64
//! c3 = relu(conv3(c2) + ca1(c1))       64 → 64,  ca1: 1×1 32 → 64
//! c4 = relu(conv4(c3) + ca2(c3))       64 → 128, ca2: 1×1 64 → 128
//! c5 = relu(conv5(c4))                 128 → 64
//! a  = relu(adapter(c5))               1×1 64 → 32
//! c6 = relu(conv6(a))                  32 → 32
//! y  = final(c6)                       1×1 32 → 1, linear
//! out = sigmoid(fusion([y_R, y_G, y_B]))
//! ```

use crate::error::{shape_err, Result};
use crate::image::{Plane, RgbImage};
use crate::nn::{BoundParams, ConvLayer, NetworkSpec, ParamSpec};
use crate::persistence::NamedTensorStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub use crate::nn::build_default_weights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SCNetSpec;

impl SCNetSpec {
    pub fn layers(&self) -> Vec<ConvLayer> {
        [
            (1, 32, 3),
            (32, 64, 3),
            (64, 128, 3),
            (128, 256, 3),
            (256, 128, 1),
            (256, 64, 1),
            (128, 32, 1),
            (64, 1, 1),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(c_in, c_out, k))| {
            ConvLayer::new(format!("scnet.conv{}", i + 1), c_in, c_out, k)
        })
        .collect()
    }
}

impl NetworkSpec for SCNetSpec {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers().iter().flat_map(|l| l.param_specs()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MCNetSpec;

impl MCNetSpec {
    pub fn layers(&self) -> Vec<ConvLayer> {
        [
            ("initial", 1, 32, 3),
            ("conv1", 32, 32, 3),
            ("conv2", 32, 64, 3),
            ("conv3", 64, 64, 3),
            ("conv4", 64, 128, 3),
            ("conv5", 128, 64, 3),
            ("adapter", 64, 32, 1),
            ("conv6", 32, 32, 3),
            ("final", 32, 1, 1),
            ("ca1", 32, 64, 1),
            ("ca2", 64, 128, 1),
            ("fusion", 3, 3, 3),
        ]
        .iter()
        .map(|&(n, c_in, c_out, k)| ConvLayer::new(format!("mcnet.{n}"), c_in, c_out, k))
        .collect()
    }

    fn layer(&self, name: &str) -> ConvLayer {
        self.layers()
            .into_iter()
            .find(|l| l.name == format!("mcnet.{name}"))
            .expect("known layer")
    }
}

impl NetworkSpec for MCNetSpec {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.layers().iter().flat_map(|l| l.param_specs()).collect()
    }
}

/// SCNet on the tape. `v` is `[1,H,W]`; the result is the raw (unclamped) `[1,H,W]` output.
pub fn scnet_tape<S: Scalar>(tape: &mut Tape<S>, p: &BoundParams<S>, v: &Var<S>) -> Result<Var<S>> {
    let l = SCNetSpec.layers();
    let conv_relu = |tape: &mut Tape<S>, i: usize, x: &Var<S>| -> Result<Var<S>> {
        let y = l[i].apply(tape, p, x)?;
        Ok(tape.relu(&y))
    };
    let c1 = conv_relu(tape, 0, v)?;
    let c2 = conv_relu(tape, 1, &c1)?;
    let c3 = conv_relu(tape, 2, &c2)?;
    let c4 = conv_relu(tape, 3, &c3)?;
    let c5 = conv_relu(tape, 4, &c4)?;
    let cat = tape.concat_channels(&c5, &c3)?;
    let c6 = conv_relu(tape, 5, &cat)?;
    let cat = tape.concat_channels(&c6, &c2)?;
    let c7 = conv_relu(tape, 6, &cat)?;
    let cat = tape.concat_channels(&c7, &c1)?;
    l[7].apply(tape, p, &cat)
}

/// Corrects a value plane; the output is clamped to `[0,1]`.
pub fn scnet_forward<S: Scalar>(v: &Plane<S>, weights: &NamedTensorStore<S>) -> Result<Plane<S>> {
    SCNetSpec.validate(weights)?;
    let mut tape = Tape::inference();
    let p = BoundParams::bind(&mut tape, weights, false);
    let x = tape.constant(v.to_tensor());
    let y = scnet_tape(&mut tape, &p, &x)?;
    let y = tape.clamp(&y, S::zero(), S::one());
    Plane::from_tensor(y.value())
}

/// The shared per-channel branch: `[N,1,H,W]` in, `[N,1,H,W]` out (pre-fusion).
pub fn mcnet_branch_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    x: &Var<S>,
) -> Result<Var<S>> {
    let spec = MCNetSpec;
    let conv = |tape: &mut Tape<S>, name: &str, x: &Var<S>| spec.layer(name).apply(tape, p, x);
    let x0 = conv(tape, "initial", x)?;
    let x0 = tape.relu(&x0);
    let c1 = conv(tape, "conv1", &x0)?;
    let c1 = tape.relu(&c1);
    let c2 = conv(tape, "conv2", &c1)?;
    let c2 = tape.relu(&c2);
    let a = conv(tape, "conv3", &c2)?;
    let skip = conv(tape, "ca1", &c1)?;
    let c3 = tape.add(&a, &skip)?;
    let c3 = tape.relu(&c3);
    let a = conv(tape, "conv4", &c3)?;
    let skip = conv(tape, "ca2", &c3)?;
    let c4 = tape.add(&a, &skip)?;
    let c4 = tape.relu(&c4);
    let c5 = conv(tape, "conv5", &c4)?;
    let c5 = tape.relu(&c5);
    let ad = conv(tape, "adapter", &c5)?;
    let ad = tape.relu(&ad);
    let c6 = conv(tape, "conv6", &ad)?;
    let c6 = tape.relu(&c6);
    conv(tape, "final", &c6)
}

/// MCNet on the tape: `[3,H,W]` in, `[3,H,W]` out in (0,1).
pub fn mcnet_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    img: &Var<S>,
) -> Result<Var<S>> {
    let [3, h, w] = *img.shape() else {
        return shape_err(format!("MCNet expects [3,H,W], got {:?}", img.shape()));
    };
    let batched = tape.reshape(img, &[3, 1, h, w])?;
    let branches = mcnet_branch_tape(tape, p, &batched)?;
    let stacked = tape.reshape(&branches, &[3, h, w])?;
    let fused = MCNetSpec.layer("fusion").apply(tape, p, &stacked)?;
    Ok(tape.sigmoid(&fused))
}

pub fn mcnet_forward<S: Scalar>(
    img: &RgbImage<S>,
    weights: &NamedTensorStore<S>,
) -> Result<RgbImage<S>> {
    MCNetSpec.validate(weights)?;
    let mut tape = Tape::inference();
    let p = BoundParams::bind(&mut tape, weights, false);
    let x = tape.constant(img.to_tensor());
    let y = mcnet_tape(&mut tape, &p, &x)?;
    RgbImage::from_tensor(y.value())
}

/// Pre-fusion branch outputs as `[3,H,W]` (R, G, B order).
pub fn mcnet_branch_outputs<S: Scalar>(
    img: &RgbImage<S>,
    weights: &NamedTensorStore<S>,
) -> Result<Tensor<S>> {
    MCNetSpec.validate(weights)?;
    let mut tape = Tape::inference();
    let p = BoundParams::bind(&mut tape, weights, false);
    let (h, w) = (img.height(), img.width());
    let x = tape.constant(img.to_tensor().reshape(&[3, 1, h, w])?);
    let y = mcnet_branch_tape(&mut tape, &p, &x)?;
    y.value().clone().reshape(&[3, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_default_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(h, w, |_, _, _| rng.random()).unwrap()
    }

    fn zeroed(store: &NamedTensorStore) -> NamedTensorStore {
        let mut z = store.clone();
        for (_, t) in z.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        z
    }

    #[test]
    fn parameter_counts_match_hand_count() {
        let hand = |layers: &[(usize, usize, usize)]| -> usize {
            layers
                .iter()
                .map(|&(ci, co, k)| (k * k * ci + 1) * co)
                .sum()
        };
        let sc = [
            (1, 32, 3),
            (32, 64, 3),
            (64, 128, 3),
            (128, 256, 3),
            (256, 128, 1),
            (256, 64, 1),
            (128, 32, 1),
            (64, 1, 1),
        ];
        assert_eq!(SCNetSpec.parameter_count(), hand(&sc));
        assert_eq!(SCNetSpec.parameter_count(), 441_377);
        let mc = [
            (1, 32, 3),
            (32, 32, 3),
            (32, 64, 3),
            (64, 64, 3),
            (64, 128, 3),
            (128, 64, 3),
            (64, 32, 1),
            (32, 32, 3),
            (32, 1, 1),
            (32, 64, 1),
            (64, 128, 1),
            (3, 3, 3),
        ];
        assert_eq!(MCNetSpec.parameter_count(), hand(&mc));
    }

    #[test]
    fn scnet_preserves_size_and_zero_weights_give_zero() {
        let w: NamedTensorStore = build_default_weights(&SCNetSpec, 3);
        for (h, wd) in [(1, 1), (3, 5), (7, 2)] {
            let v = random_image(1, h, wd).plane(0);
            let out = scnet_forward(&v, &w).unwrap();
            assert_eq!((out.height(), out.width()), (h, wd));
            assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let v = random_image(2, 4, 4).plane(1);
        let out = scnet_forward(&v, &zeroed(&w)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scnet_skips_are_live() {
        let w: NamedTensorStore = build_default_weights(&SCNetSpec, 4);
        let v = random_image(5, 6, 6).plane(0);
        let base = scnet_forward(&v, &w).unwrap();
        // conv6 consumes [c5 (128), c3 (128)]; zero the c3 half of its kernel.
        let mut ablated = w.clone();
        let k = ablated.get_mut("scnet.conv6.w").unwrap();
        let data = k.data_mut();
        for o in 0..64 {
            for c in 128..256 {
                data[o * 256 + c] = 0.0;
            }
        }
        let out = scnet_forward(&v, &ablated).unwrap();
        assert_ne!(out, base);
    }

    #[test]
    fn mcnet_range_and_shape() {
        let w: NamedTensorStore = build_default_weights(&MCNetSpec, 9);
        let img = random_image(3, 5, 7);
        let out = mcnet_forward(&img, &w).unwrap();
        assert_eq!((out.height(), out.width()), (5, 7));
        assert!(out.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn mcnet_branches_share_weights() {
        let w: NamedTensorStore = build_default_weights(&MCNetSpec, 2);
        let img = random_image(8, 4, 4);
        let perm = [2, 0, 1];
        let swapped = RgbImage::from_planes(
            &img.plane(perm[0]),
            &img.plane(perm[1]),
            &img.plane(perm[2]),
        )
        .unwrap();
        let a = mcnet_branch_outputs(&img, &w).unwrap();
        let b = mcnet_branch_outputs(&swapped, &w).unwrap();
        let n = 16;
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(&b.data()[i * n..(i + 1) * n], &a.data()[p * n..(p + 1) * n]);
        }
        // Permuting the fusion conv's input channels accordingly leaves the output unchanged.
        let mut w2 = w.clone();
        let k = w2.get_mut("mcnet.fusion.w").unwrap();
        let orig = k.clone();
        for o in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                for j in 0..9 {
                    k.data_mut()[(o * 3 + i) * 9 + j] = orig.data()[(o * 3 + p) * 9 + j];
                }
            }
        }
        let y1 = mcnet_forward(&img, &w).unwrap();
        let y2 = mcnet_forward(&swapped, &w2).unwrap();
        assert!(y1
            .data()
            .iter()
            .zip(y2.data())
            .all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn missing_weight_is_named() {
        let mut w: NamedTensorStore = build_default_weights(&SCNetSpec, 1);
        let mut trimmed = NamedTensorStore::new();
        for (n, t) in w.iter_mut() {
            if n != "scnet.conv7.b" {
                trimmed.insert(n, t.clone()).unwrap();
            }
        }
        let err = scnet_forward(&Plane::filled(2, 2, 0.5), &trimmed).unwrap_err();
        assert!(err.to_string().contains("scnet.conv7.b"));
    }
}
