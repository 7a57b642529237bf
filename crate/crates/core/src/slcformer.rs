//! Windowed-attention illumination classifier.
//!
//! A Swin-style hierarchy: a strided patch-embedding conv, four stages of
//! paired (regular, shifted) window-attention blocks with patch merging in
//! between, a final norm, mean pooling over tokens and a one-logit head.
//!
//! Token grids are `[H,W,C]` tensors throughout.
//!
//! # Weight names
//!
//! | name | shape |
//! |------|-------|
//! | `slc.embed.w`, `slc.embed.b` | `[C₀,3,p,p]`, `[C₀]` |
//! | `slc.embed.ln.{w,b}` | `[C₀]` |
//! | `slc.stage{s}.block{n}.ln1.{w,b}`, `.ln2.{w,b}` | `[C]` |
//! | `slc.stage{s}.block{n}.qkv.{w,b}` | `[3C,C]`, `[3C]` |
//! | `slc.stage{s}.block{n}.rpb.w` | `[(2M−1)², heads]` |
//! | `slc.stage{s}.block{n}.proj.{w,b}` | `[C,C]`, `[C]` |
//! | `slc.stage{s}.block{n}.mlp1.{w,b}` | `[rC,C]`, `[rC]` |
//! | `slc.stage{s}.block{n}.mlp2.{w,b}` | `[C,rC]`, `[C]` |
//! | `slc.merge{i}.ln.{w,b}` | `[4C]` |
//! | `slc.merge{i}.proj.w` | `[2C,4C]` (no bias) |
//! | `slc.head.ln.{w,b}`, `slc.head.fc.{w,b}` | `[C₃]`, `[1,C₃]`, `[1]` |
//!
//! `M` is the stage's effective window: the configured window, or the whole
//! grid when the grid is smaller. Odd-numbered blocks are shifted by `⌊M/2⌋`
//! unless the window already covers the grid.

use crate::error::{shape_err, Error, Result};
use crate::image::RgbImage;
use crate::nn::{BoundParams, Init, NetworkSpec, ParamSpec};
use crate::persistence::NamedTensorStore;
use crate::route::IlluminationLabel;
use crate::scalar::{lit, Scalar};
use crate::tensor::ops::resize_bilinear;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -100.0;
const LINEAR_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SLCformerConfig {
    pub stage_channels: [usize; 4],
    pub stage_heads: [usize; 4],
    pub stage_depths: [usize; 4],
    pub patch_size: usize,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub input_resolution: usize,
}

impl Default for SLCformerConfig {
    fn default() -> Self {
        SLCformerConfig {
            stage_channels: [32, 64, 128, 256],
            stage_heads: [1, 2, 4, 8],
            stage_depths: [2, 2, 6, 2],
            patch_size: 4,
            window_size: 7,
            mlp_ratio: 4.0,
            input_resolution: 224,
        }
    }
}

impl SLCformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.window_size == 0 || self.mlp_ratio <= 0.0 {
            return bad("patch size, window size and MLP ratio must be positive".into());
        }
        if !self.input_resolution.is_multiple_of(self.patch_size) {
            return bad(format!(
                "input resolution {} not divisible by patch size {}",
                self.input_resolution, self.patch_size
            ));
        }
        for s in 0..4 {
            let (c, h, d) = (
                self.stage_channels[s],
                self.stage_heads[s],
                self.stage_depths[s],
            );
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!(
                    "stage {s}: {c} channels not divisible by {h} heads"
                ));
            }
            if d % 2 != 0 {
                return bad(format!(
                    "stage {s}: depth {d} is odd; blocks come in regular/shifted pairs"
                ));
            }
            let r = self.stage_resolution_at(s, self.input_resolution);
            if r == 0 || !r.is_multiple_of(self.effective_window_at(s, self.input_resolution)) {
                return bad(format!(
                    "stage {s}: {r}x{r} grid not divisible by window {}",
                    self.window_size
                ));
            }
            if s < 3 && !r.is_multiple_of(2) {
                return bad(format!("stage {s}: odd grid {r} cannot be merged"));
            }
        }
        Ok(())
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.stage_resolution_at(stage, self.input_resolution)
    }

    fn stage_resolution_at(&self, stage: usize, resolution: usize) -> usize {
        (resolution / self.patch_size) >> stage
    }

    pub fn effective_window(&self, stage: usize) -> usize {
        self.effective_window_at(stage, self.input_resolution)
    }

    fn effective_window_at(&self, stage: usize, resolution: usize) -> usize {
        self.window_size
            .min(self.stage_resolution_at(stage, resolution))
            .max(1)
    }

    fn shift_for(&self, stage: usize, block: usize) -> usize {
        let m = self.effective_window(stage);
        if block % 2 == 1 && m < self.stage_resolution(stage) {
            m / 2
        } else {
            0
        }
    }

    pub fn mlp_hidden(&self, channels: usize) -> usize {
        (channels as f64 * self.mlp_ratio).round() as usize
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("slc.stage{stage}.block{block}")
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_out: usize, d_in: usize, bias: bool) {
    out.push(ParamSpec::new(
        format!("{prefix}.w"),
        &[d_out, d_in],
        Init::TruncNormal { std: LINEAR_STD },
    ));
    if bias {
        out.push(ParamSpec::new(format!("{prefix}.b"), &[d_out], Init::Zeros));
    }
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.w"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[d], Init::Zeros));
}

impl NetworkSpec for SLCformerConfig {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let (p, c0) = (self.patch_size, self.stage_channels[0]);
        v.push(ParamSpec::new(
            "slc.embed.w",
            &[c0, 3, p, p],
            Init::KaimingUniform { fan_in: 3 * p * p },
        ));
        v.push(ParamSpec::new("slc.embed.b", &[c0], Init::Zeros));
        ln_specs(&mut v, "slc.embed.ln", c0);
        for s in 0..4 {
            let c = self.stage_channels[s];
            let heads = self.stage_heads[s];
            let m = self.effective_window(s);
            let hidden = self.mlp_hidden(c);
            for n in 0..self.stage_depths[s] {
                let b = block_prefix(s, n);
                ln_specs(&mut v, &format!("{b}.ln1"), c);
                linear_specs(&mut v, &format!("{b}.qkv"), 3 * c, c, true);
                v.push(ParamSpec::new(
                    format!("{b}.rpb.w"),
                    &[(2 * m - 1) * (2 * m - 1), heads],
                    Init::TruncNormal { std: LINEAR_STD },
                ));
                linear_specs(&mut v, &format!("{b}.proj"), c, c, true);
                ln_specs(&mut v, &format!("{b}.ln2"), c);
                linear_specs(&mut v, &format!("{b}.mlp1"), hidden, c, true);
                linear_specs(&mut v, &format!("{b}.mlp2"), c, hidden, true);
            }
            if s < 3 {
                ln_specs(&mut v, &format!("slc.merge{s}.ln"), 4 * c);
                linear_specs(
                    &mut v,
                    &format!("slc.merge{s}.proj"),
                    self.stage_channels[s + 1],
                    4 * c,
                    false,
                );
            }
        }
        let c3 = self.stage_channels[3];
        ln_specs(&mut v, "slc.head.ln", c3);
        linear_specs(&mut v, "slc.head.fc", 1, c3, true);
        v
    }
}

/// Exact learnable-scalar count of the network built from `cfg`.
pub fn count_parameters(cfg: &SLCformerConfig) -> usize {
    cfg.parameter_count()
}

/// Multiply-accumulate count of one forward pass at `resolution`.
///
/// Counts convolutions, linear layers and the two attention products
/// (`QKᵀ` and `AV`); normalization, activations, softmax and pooling are not
/// counted.
pub fn count_flops(cfg: &SLCformerConfig, resolution: usize) -> u64 {
    let p = cfg.patch_size as u64;
    let g = (resolution / cfg.patch_size) as u64;
    let c0 = cfg.stage_channels[0] as u64;
    let mut total = g * g * c0 * 3 * p * p;
    for s in 0..4 {
        let r = cfg.stage_resolution_at(s, resolution) as u64;
        let n = r * r;
        let c = cfg.stage_channels[s] as u64;
        let m = cfg.effective_window_at(s, resolution) as u64;
        let hidden = cfg.mlp_hidden(c as usize) as u64;
        let block = n * c * 3 * c + 2 * n * m * m * c + n * c * c + 2 * n * c * hidden;
        total += block * cfg.stage_depths[s] as u64;
        if s < 3 {
            let half = (r / 2) * (r / 2);
            total += half * 4 * c * cfg.stage_channels[s + 1] as u64;
        }
    }
    total + cfg.stage_channels[3] as u64
}

/// Relative-position index for an `M×M` window: entry `i·M²+j` selects the
/// table row for the offset between tokens `i` and `j`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * (2 * m - 1) + dx);
        }
    }
    idx
}

/// Additive mask `[nW, M², M²]` keeping attention inside the regions that
/// were contiguous before a cyclic shift of `shift`.
pub fn shift_attention_mask<S: Scalar>(res: usize, window: usize, shift: usize) -> Tensor<S> {
    let region = |v: usize| -> usize {
        if v < res - window {
            0
        } else if v < res - shift {
            1
        } else {
            2
        }
    };
    let nw = res / window;
    let t = window * window;
    let mut data = Vec::with_capacity(nw * nw * t * t);
    for wy in 0..nw {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|k| {
                    let (y, x) = (wy * window + k / window, wx * window + k % window);
                    region(y) * 3 + region(x)
                })
                .collect();
            for &a in &ids {
                for &b in &ids {
                    data.push(if a == b { S::zero() } else { lit(MASK_VALUE) });
                }
            }
        }
    }
    Tensor::new(vec![nw * nw, t, t], data).expect("mask shape")
}

/// Window layout for one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub heads: usize,
    pub window: usize,
    /// Cyclic shift; 0 for regular windows.
    pub shift: usize,
    /// Apply the cross-boundary mask when shifted.
    pub masked: bool,
}

/// Multi-head self-attention within windows of an `[H,W,C]` grid, using the
/// `qkv`, `rpb` and `proj` parameters under `prefix`.
pub fn window_attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    prefix: &str,
    x: &Var<S>,
    geom: AttentionGeometry,
) -> Result<Var<S>> {
    let [h, w, c] = *x.shape() else {
        return shape_err(format!("attention expects [H,W,C], got {:?}", x.shape()));
    };
    let AttentionGeometry {
        heads,
        window: m,
        shift,
        masked,
    } = geom;
    if heads == 0 || c % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    if m == 0 || h % m != 0 || w % m != 0 {
        return shape_err(format!("{h}x{w} grid not divisible by window {m}"));
    }
    let d = c / heads;
    let t = m * m;
    let nw = (h / m) * (w / m);
    let s = shift as isize;

    let x = if shift > 0 {
        tape.cyclic_shift(x, -s, -s)?
    } else {
        x.clone()
    };
    let wins = tape.window_partition(&x, m)?;
    let qkv = tape.linear(
        &wins,
        p.get(&format!("{prefix}.qkv.w"))?,
        Some(p.get(&format!("{prefix}.qkv.b"))?),
    )?;
    let qkv = tape.reshape(&qkv, &[nw, t, 3, heads, d])?;
    let qkv = tape.permute(&qkv, &[2, 0, 3, 1, 4])?;
    let qkv = tape.reshape(&qkv, &[3 * nw * heads, t, d])?;
    let q = tape.narrow(&qkv, 0, nw * heads)?;
    let k = tape.narrow(&qkv, nw * heads, nw * heads)?;
    let v = tape.narrow(&qkv, 2 * nw * heads, nw * heads)?;
    let q = tape.scale(&q, S::one() / lit::<S>(d as f64).sqrt());
    let attn = tape.bmm(&q, &k, true)?;
    let attn = tape.reshape(&attn, &[nw, heads, t, t])?;

    let table = p.get(&format!("{prefix}.rpb.w"))?;
    if table.shape() != [(2 * m - 1) * (2 * m - 1), heads] {
        return shape_err(format!(
            "{prefix}.rpb.w has shape {:?}, window {m} with {heads} heads needs [{}, {heads}]",
            table.shape(),
            (2 * m - 1) * (2 * m - 1)
        ));
    }
    let bias = tape.index_select(table, &relative_position_index(m))?;
    let bias = tape.permute(&bias, &[1, 0])?;
    let bias = tape.reshape(&bias, &[heads, t, t])?;
    let mut attn = tape.add_broadcast(&attn, &bias)?;
    if shift > 0 && masked {
        let mask: Tensor<S> = shift_attention_mask(h, m, shift);
        let md = mask.data();
        let expanded = Tensor::from_fn(&[nw, heads, t, t], |i| {
            let win = i / (heads * t * t);
            md[win * t * t + i % (t * t)]
        });
        let mask = tape.constant(expanded);
        attn = tape.add(&attn, &mask)?;
    }
    let attn = tape.softmax(&attn);
    let attn = tape.reshape(&attn, &[nw * heads, t, t])?;
    let out = tape.bmm(&attn, &v, false)?;
    let out = tape.reshape(&out, &[nw, heads, t, d])?;
    let out = tape.permute(&out, &[0, 2, 1, 3])?;
    let out = tape.reshape(&out, &[nw, t, c])?;
    let out = tape.linear(
        &out,
        p.get(&format!("{prefix}.proj.w"))?,
        Some(p.get(&format!("{prefix}.proj.b"))?),
    )?;
    let out = tape.window_reverse(&out, h, w)?;
    if shift > 0 {
        tape.cyclic_shift(&out, s, s)
    } else {
        Ok(out)
    }
}

fn layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    prefix: &str,
    x: &Var<S>,
) -> Result<Var<S>> {
    tape.layer_norm(
        x,
        p.get(&format!("{prefix}.w"))?,
        p.get(&format!("{prefix}.b"))?,
        lit(LN_EPS),
    )
}

/// One transformer block:
/// `ẑ = attn(LN(z)) + z`, then `z' = MLP(LN(ẑ)) + ẑ`.
pub fn swin_block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    prefix: &str,
    z: &Var<S>,
    geom: AttentionGeometry,
) -> Result<Var<S>> {
    let y = layer_norm(tape, p, &format!("{prefix}.ln1"), z)?;
    let y = window_attention(tape, p, prefix, &y, geom)?;
    let z = tape.add(z, &y)?;
    let y = layer_norm(tape, p, &format!("{prefix}.ln2"), &z)?;
    let y = tape.linear(
        &y,
        p.get(&format!("{prefix}.mlp1.w"))?,
        Some(p.get(&format!("{prefix}.mlp1.b"))?),
    )?;
    let y = tape.gelu(&y);
    let y = tape.linear(
        &y,
        p.get(&format!("{prefix}.mlp2.w"))?,
        Some(p.get(&format!("{prefix}.mlp2.b"))?),
    )?;
    tape.add(&z, &y)
}

/// A regular block followed by a shifted block (blocks `2·pair` and `2·pair+1` of `stage`).
pub fn swin_block_pair<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    cfg: &SLCformerConfig,
    stage: usize,
    pair: usize,
    z: &Var<S>,
) -> Result<Var<S>> {
    let mut z = z.clone();
    for n in [2 * pair, 2 * pair + 1] {
        let geom = AttentionGeometry {
            heads: cfg.stage_heads[stage],
            window: cfg.effective_window(stage),
            shift: cfg.shift_for(stage, n),
            masked: true,
        };
        z = swin_block(tape, p, &block_prefix(stage, n), &z, geom)?;
    }
    Ok(z)
}

/// Strided conv over `[3,R,R]`, then layer norm over channels: `[R/p, R/p, C₀]`.
pub fn patch_embed<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    cfg: &SLCformerConfig,
    img: &Var<S>,
) -> Result<Var<S>> {
    let [3, h, w] = *img.shape() else {
        return shape_err(format!(
            "patch embedding expects [3,H,W], got {:?}",
            img.shape()
        ));
    };
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return shape_err(format!(
            "{h}x{w} image not divisible by patch size {}",
            cfg.patch_size
        ));
    }
    let e = tape.conv2d(
        img,
        p.get("slc.embed.w")?,
        Some(p.get("slc.embed.b")?),
        cfg.patch_size,
        0,
    )?;
    let e = tape.permute(&e, &[1, 2, 0])?;
    layer_norm(tape, p, "slc.embed.ln", &e)
}

/// `[H,W,C]` → `[H/2,W/2,2C']`: gathers each 2×2 neighborhood (top-left,
/// bottom-left, top-right, bottom-right), normalizes and projects.
pub fn patch_merging<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    index: usize,
    x: &Var<S>,
) -> Result<Var<S>> {
    let [h, w, c] = *x.shape() else {
        return shape_err(format!(
            "patch merging expects [H,W,C], got {:?}",
            x.shape()
        ));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("cannot merge odd grid {h}x{w}"));
    }
    let y = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let y = tape.permute(&y, &[0, 2, 3, 1, 4])?;
    let y = tape.reshape(&y, &[h / 2, w / 2, 4 * c])?;
    let y = layer_norm(tape, p, &format!("slc.merge{index}.ln"), &y)?;
    tape.linear(&y, p.get(&format!("slc.merge{index}.proj.w"))?, None)
}

/// Head logit for a `[3,R,R]` input already at the configured resolution.
pub fn logit_tape<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BoundParams<S>,
    cfg: &SLCformerConfig,
    img: &Var<S>,
) -> Result<Var<S>> {
    let mut z = patch_embed(tape, p, cfg, img)?;
    for s in 0..4 {
        for pair in 0..cfg.stage_depths[s] / 2 {
            z = swin_block_pair(tape, p, cfg, s, pair, &z)?;
        }
        if s < 3 {
            z = patch_merging(tape, p, s, &z)?;
        }
    }
    let z = layer_norm(tape, p, "slc.head.ln", &z)?;
    let [h, w, c] = *z.shape() else {
        unreachable!("token grid is rank 3")
    };
    let z = tape.reshape(&z, &[h * w, c])?;
    let pooled = tape.mean_rows(&z)?;
    tape.linear(
        &pooled,
        p.get("slc.head.fc.w")?,
        Some(p.get("slc.head.fc.b")?),
    )
}

/// Bilinear resize of an image to the configured square input.
pub fn prepare_input<S: Scalar>(img: &RgbImage<S>, cfg: &SLCformerConfig) -> Result<Tensor<S>> {
    let r = cfg.input_resolution;
    resize_bilinear(&img.to_tensor(), r, r)
}

/// Probability of the global route and the resulting label.
pub fn classify<S: Scalar>(
    img: &RgbImage<S>,
    weights: &NamedTensorStore<S>,
    cfg: &SLCformerConfig,
) -> Result<IlluminationLabel> {
    cfg.validate()?;
    cfg.validate_weights(weights)?;
    let mut tape = Tape::inference();
    let p = BoundParams::bind(&mut tape, weights, false);
    let x = tape.constant(prepare_input(img, cfg)?);
    let logit = logit_tape(&mut tape, &p, cfg, &x)?;
    let logit = tape.sigmoid(&logit);
    Ok(IlluminationLabel::from_probability(
        logit.value().data()[0].to_f64().unwrap_or(f64::NAN),
    ))
}

impl SLCformerConfig {
    pub fn validate_weights<S: Scalar>(&self, weights: &NamedTensorStore<S>) -> Result<()> {
        NetworkSpec::validate(self, weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_default_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SLCformerConfig {
        SLCformerConfig {
            stage_channels: [8, 16, 16, 16],
            stage_heads: [2, 2, 4, 4],
            stage_depths: [2, 0, 0, 2],
            patch_size: 2,
            window_size: 2,
            mlp_ratio: 2.0,
            input_resolution: 16,
        }
    }

    fn random_grid(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = SLCformerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_resolution(0), 56);
        assert_eq!(cfg.stage_resolution(3), 7);
        assert!((0..4).all(|s| cfg.effective_window(s) == 7));
        let mut odd = cfg.clone();
        odd.stage_depths[2] = 5;
        assert!(odd.validate().is_err());
    }

    #[test]
    fn relative_index_is_offset_only() {
        let m = 3;
        let idx = relative_position_index(m);
        assert_eq!(idx.len(), 81);
        assert_eq!(*idx.iter().max().unwrap(), 24);
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], (m - 1) * (2 * m - 1) + m - 1);
        }
        // tokens (0,0)->(1,1) and (1,1)->(2,2) share an offset
        assert_eq!(idx[4], idx[4 * 9 + 8]);
    }

    #[test]
    fn mask_blocks_cross_region_pairs() {
        let mask: Tensor = shift_attention_mask(4, 2, 1);
        assert_eq!(mask.shape(), &[4, 4, 4]);
        assert!(mask.data()[..16].iter().all(|&v| v == 0.0));
        assert!(mask.data()[48..].iter().any(|&v| v == -100.0));
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = small_cfg();
        let mut w: NamedTensorStore = build_default_weights(&cfg, 1);
        for (name, t) in w.iter_mut() {
            if name.contains("qkv")
                || name.contains("proj")
                || name.contains("mlp")
                || name.contains("rpb")
            {
                *t = Tensor::zeros(t.shape());
            }
        }
        let mut tape = Tape::inference();
        let p = BoundParams::bind(&mut tape, &w, false);
        let z = tape.constant(random_grid(2, &[8, 8, 8]));
        let out = swin_block_pair(&mut tape, &p, &cfg, 0, 0, &z).unwrap();
        assert_eq!(out.value(), z.value());
    }

    #[test]
    fn window_of_one_reduces_to_projections() {
        let cfg = small_cfg();
        let w: NamedTensorStore = build_default_weights(&cfg, 3);
        let mut tape = Tape::inference();
        let x = random_grid(4, &[2, 2, 8]);
        let xv = tape.constant(x.clone());
        let geom = AttentionGeometry {
            heads: 2,
            window: 1,
            shift: 0,
            masked: false,
        };
        // rpb for a 1x1 window has a single row
        let mut w1 = w.clone();
        *w1.get_mut("slc.stage0.block0.rpb.w").unwrap() = Tensor::zeros(&[1, 2]);
        let p1 = BoundParams::bind(&mut tape, &w1, false);
        let out = window_attention(&mut tape, &p1, "slc.stage0.block0", &xv, geom).unwrap();
        let qkv_w = w.get("slc.stage0.block0.qkv.w").unwrap();
        let qkv_b = w.get("slc.stage0.block0.qkv.b").unwrap();
        let vw = Tensor::new(vec![8, 8], qkv_w.data()[128..].to_vec()).unwrap();
        let vb = Tensor::new(vec![8], qkv_b.data()[16..].to_vec()).unwrap();
        let v = crate::tensor::ops::linear(&x, &vw, Some(&vb)).unwrap();
        let expect = crate::tensor::ops::linear(
            &v,
            w.get("slc.stage0.block0.proj.w").unwrap(),
            Some(w.get("slc.stage0.block0.proj.b").unwrap()),
        )
        .unwrap();
        assert!(out.value().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let cfg = small_cfg();
        let mut w: NamedTensorStore = build_default_weights(&cfg, 5);
        *w.get_mut("slc.stage0.block0.rpb.w").unwrap() = Tensor::zeros(&[9, 2]);
        let mut tape = Tape::inference();
        let p = BoundParams::bind(&mut tape, &w, false);
        let token = random_grid(6, &[8]);
        let grid = Tensor::from_fn(&[4, 4, 8], |i| token.data()[i % 8]);
        let x = tape.constant(grid);
        let geom = AttentionGeometry {
            heads: 2,
            window: 2,
            shift: 0,
            masked: true,
        };
        let out = window_attention(&mut tape, &p, "slc.stage0.block0", &x, geom).unwrap();
        let first = &out.data()[..8];
        for tok in out.data().chunks(8) {
            assert!(tok.iter().zip(first).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        // unmasked shifted attention agrees with regular attention on a constant grid
        let shifted = AttentionGeometry {
            shift: 1,
            masked: false,
            ..geom
        };
        let out2 = window_attention(&mut tape, &p, "slc.stage0.block0", &x, shifted).unwrap();
        assert!(out2.value().max_abs_diff(out.value()) < 1e-14);
    }

    #[test]
    fn merging_shapes() {
        let cfg = SLCformerConfig::default();
        let w: NamedTensorStore = build_default_weights(&cfg, 0);
        let mut tape = Tape::inference();
        let p = BoundParams::bind(&mut tape, &w, false);
        let x = tape.constant(random_grid(1, &[56, 56, 32]));
        let y = patch_merging(&mut tape, &p, 0, &x).unwrap();
        assert_eq!(y.shape(), &[28, 28, 64]);
        assert_eq!(y.value().numel() * 2, x.value().numel());
        let odd = tape.constant(random_grid(1, &[5, 4, 32]));
        assert!(patch_merging(&mut tape, &p, 0, &odd).is_err());
    }

    #[test]
    fn patch_embed_token_count() {
        let cfg = SLCformerConfig::default();
        let w: NamedTensorStore = build_default_weights(&cfg, 0);
        let mut tape = Tape::inference();
        let p = BoundParams::bind(&mut tape, &w, false);
        let x = tape.constant(Tensor::full(&[3, 224, 224], 0.3));
        let e = patch_embed(&mut tape, &p, &cfg, &x).unwrap();
        assert_eq!(e.shape(), &[56, 56, 32]);
    }

    #[test]
    fn zero_head_gives_half() {
        let cfg = small_cfg();
        let mut w: NamedTensorStore = build_default_weights(&cfg, 7);
        *w.get_mut("slc.head.fc.w").unwrap() = Tensor::zeros(&[1, 16]);
        let img = RgbImage::filled(20, 12, [0.2, 0.4, 0.1]).unwrap();
        let l = classify(&img, &w, &cfg).unwrap();
        assert_eq!(l.probability, 0.5);
        assert_eq!(l.label, crate::route::Route::Global);
    }

    #[test]
    fn classify_is_deterministic_and_bounded() {
        let cfg = small_cfg();
        let w: NamedTensorStore = build_default_weights(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = RgbImage::from_fn(16, 16, |_, _, _| rng.random()).unwrap();
        let a = classify(&img, &w, &cfg).unwrap();
        let b = classify(&img, &w, &cfg).unwrap();
        assert_eq!(a.probability.to_bits(), b.probability.to_bits());
        assert!(a.probability > 0.0 && a.probability < 1.0);
    }

    #[test]
    fn missing_head_weight_is_named() {
        let cfg = small_cfg();
        let w: NamedTensorStore = build_default_weights(&cfg, 8);
        let mut trimmed = NamedTensorStore::new();
        for (n, t) in w.iter() {
            if n != "slc.head.fc.b" {
                trimmed.insert(n, t.clone()).unwrap();
            }
        }
        let img = RgbImage::filled(16, 16, [0.5; 3]).unwrap();
        let err = classify(&img, &trimmed, &cfg).unwrap_err();
        assert!(err.to_string().contains("slc.head.fc.b"));
    }
}
