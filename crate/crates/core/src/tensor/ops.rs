//! Forward and backward kernels.
//!
//! The public functions here are the eager, tape-free versions of every
//! differentiable operation; [`Tape`](super::Tape) calls the same kernels so
//! that recorded and unrecorded evaluation agree bit for bit.

use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};

/// Upper bound on im2col buffer elements per chunk of output rows.
const IM2COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return shape_err(format!(
                    "conv2d input must be [C,H,W] or [N,C,H,W], got {input:?}"
                ))
            }
        };
        let [c_out, kc, kh, kw] = *kernel else {
            return shape_err(format!(
                "conv2d kernel must be [C_out,C_in,k,k], got {kernel:?}"
            ));
        };
        if kh != kw || kh == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be square with k ≥ 1, got {kh}x{kw}"
            )));
        }
        if kc != c_in {
            return shape_err(format!(
                "conv2d input has {c_in} channels, kernel expects {kc}"
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let padded_h = h + 2 * padding;
        let padded_w = w + 2 * padding;
        if padded_h < kh || padded_w < kh {
            return shape_err(format!(
                "conv2d output size is non-positive for {h}x{w} input, k={kh}, padding={padding}"
            ));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            h_out: (padded_h - kh) / stride + 1,
            w_out: (padded_w - kh) / stride + 1,
        })
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.h_out, self.w_out]
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn rows_per_chunk(&self) -> usize {
        (IM2COL_BUDGET / (self.patch() * self.w_out).max(1)).clamp(1, self.h_out)
    }

    /// Fills `cols` ([patch, rows·w_out]) for output rows `r0..r0+rows` of one image.
    fn im2col<S: Scalar>(&self, x: &[S], r0: usize, rows: usize, cols: &mut [S]) {
        let npos = rows * self.w_out;
        let (k, s, p) = (self.k, self.stride, self.padding);
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for r in 0..rows {
                        let iy = ((r0 + r) * s + ky) as isize - p as isize;
                        let line = &mut dst[r * self.w_out..(r + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                S::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the image gradient `dx`.
    fn col2im<S: Scalar>(&self, cols: &[S], r0: usize, rows: usize, dx: &mut [S]) {
        let npos = rows * self.w_out;
        let (k, s, p) = (self.k, self.stride, self.padding);
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for r in 0..rows {
                        let iy = ((r0 + r) * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[r * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[C_in,H,W]` or `[N,C_in,H,W]`, `kernel` is `[C_out,C_in,k,k]`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return shape_err(format!(
                "conv2d bias has {} elements, expected {}",
                b.numel(),
                g.c_out
            ));
        }
    }
    let data = conv2d_forward(&g, input.data(), kernel.data(), bias.map(|b| b.data()));
    Tensor::new(g.out_shape(input.ndim() == 4), data)
}

pub(crate) fn conv2d_forward<S: Scalar>(
    g: &ConvGeometry,
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
) -> Vec<S> {
    let in_size = g.c_in * g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    let out_size = g.c_out * out_plane;
    let patch = g.patch();
    let mut out = vec![S::zero(); g.batch * out_size];
    let chunk = g.rows_per_chunk();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); patch * chunk * g.w_out]
    };
    for n in 0..g.batch {
        let xi = &x[n * in_size..(n + 1) * in_size];
        let oi = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = b {
            for (co, plane) in oi.chunks_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let mut r0 = 0;
        while r0 < g.h_out {
            let rows = chunk.min(g.h_out - r0);
            let npos = rows * g.w_out;
            let start = r0 * g.w_out;
            if g.is_pointwise() {
                S::gemm(
                    g.c_out,
                    patch,
                    npos,
                    w,
                    patch as isize,
                    1,
                    &xi[start..],
                    (g.h * g.w) as isize,
                    1,
                    S::one(),
                    &mut oi[start..],
                    out_plane as isize,
                    1,
                );
            } else {
                let cols = &mut cols[..patch * npos];
                g.im2col(xi, r0, rows, cols);
                S::gemm(
                    g.c_out,
                    patch,
                    npos,
                    w,
                    patch as isize,
                    1,
                    cols,
                    npos as isize,
                    1,
                    S::one(),
                    &mut oi[start..],
                    out_plane as isize,
                    1,
                );
            }
            r0 += rows;
        }
    }
    out
}

/// Gradients of a convolution. Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeometry,
    x: &[S],
    w: &[S],
    dy: &[S],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Vec<S>) {
    let in_size = g.c_in * g.h * g.w;
    let out_plane = g.h_out * g.w_out;
    let out_size = g.c_out * out_plane;
    let patch = g.patch();
    let mut dx = want_dx.then(|| vec![S::zero(); g.batch * in_size]);
    let mut dw = want_dw.then(|| vec![S::zero(); g.c_out * patch]);
    let mut db = vec![S::zero(); g.c_out];
    let chunk = g.rows_per_chunk();
    let mut cols = vec![S::zero(); patch * chunk * g.w_out];
    for n in 0..g.batch {
        let xi = &x[n * in_size..(n + 1) * in_size];
        let di = &dy[n * out_size..(n + 1) * out_size];
        for (co, plane) in di.chunks(out_plane).enumerate() {
            db[co] = db[co] + plane.iter().copied().fold(S::zero(), |a, v| a + v);
        }
        let mut r0 = 0;
        while r0 < g.h_out {
            let rows = chunk.min(g.h_out - r0);
            let npos = rows * g.w_out;
            let start = r0 * g.w_out;
            let dchunk = &di[start..];
            if let Some(dw) = dw.as_mut() {
                if g.is_pointwise() {
                    S::gemm(
                        g.c_out,
                        npos,
                        patch,
                        dchunk,
                        out_plane as isize,
                        1,
                        &xi[start..],
                        1,
                        (g.h * g.w) as isize,
                        S::one(),
                        dw,
                        patch as isize,
                        1,
                    );
                } else {
                    let cols = &mut cols[..patch * npos];
                    g.im2col(xi, r0, rows, cols);
                    S::gemm(
                        g.c_out,
                        npos,
                        patch,
                        dchunk,
                        out_plane as isize,
                        1,
                        cols,
                        1,
                        npos as isize,
                        S::one(),
                        dw,
                        patch as isize,
                        1,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx[n * in_size..(n + 1) * in_size];
                if g.is_pointwise() {
                    S::gemm(
                        patch,
                        g.c_out,
                        npos,
                        w,
                        1,
                        patch as isize,
                        dchunk,
                        out_plane as isize,
                        1,
                        S::one(),
                        &mut dxi[start..],
                        (g.h * g.w) as isize,
                        1,
                    );
                } else {
                    let cols = &mut cols[..patch * npos];
                    S::gemm(
                        patch,
                        g.c_out,
                        npos,
                        w,
                        1,
                        patch as isize,
                        dchunk,
                        out_plane as isize,
                        1,
                        S::zero(),
                        cols,
                        npos as isize,
                        1,
                    );
                    g.col2im(cols, r0, rows, dxi);
                }
            }
            r0 += rows;
        }
    }
    (dx, dw, db)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    // Branch on sign so exp never overflows.
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<S: Scalar>(v: S) -> S {
    let half: S = lit(0.5);
    half * v * (S::one() + (v * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<S: Scalar>(v: S) -> S {
    let half: S = lit(0.5);
    let cdf = half * (S::one() + (v * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(v * v) * half).exp() * lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + v * pdf
}

/// Normalization statistics kept for the backward pass.
pub(crate) struct LayerNormCache<S> {
    pub xhat: Vec<S>,
    pub rstd: Vec<S>,
}

/// Layer normalization over the last axis followed by `gamma·x̂ + beta`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let (out, _) = layer_norm_forward(x, gamma, beta, eps)?;
    Ok(out)
}

pub(crate) fn layer_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return shape_err(format!(
            "layer_norm over last dim {d} given gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps <= S::zero() {
        return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let rows = x.numel() / d.max(1);
    let dn: S = lit(d as f64);
    let mut xhat = vec![S::zero(); x.numel()];
    let mut rstd = vec![S::zero(); rows];
    let mut out = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().fold(S::zero(), |a, v| a + v) / dn;
        let var = row
            .iter()
            .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
            / dn;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { xhat, rstd },
    ))
}

/// `x · Wᵀ + b` over the last axis.
pub fn linear<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (d_out, d_in) = linear_dims(x, weight, bias)?;
    let rows = x.numel() / d_in.max(1);
    let data = linear_forward(
        x.data(),
        weight.data(),
        bias.map(|b| b.data()),
        rows,
        d_in,
        d_out,
    );
    let mut shape = x.shape().to_vec();
    *shape
        .last_mut()
        .expect("linear input has at least one axis") = d_out;
    Tensor::new(shape, data)
}

pub(crate) fn linear_dims<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<(usize, usize)> {
    let [d_out, d_in] = *weight.shape() else {
        return shape_err(format!(
            "linear weight must be [D_out,D_in], got {:?}",
            weight.shape()
        ));
    };
    if x.ndim() == 0 || x.last_dim() != d_in {
        return shape_err(format!(
            "linear expects last dim {d_in}, got input {:?}",
            x.shape()
        ));
    }
    if let Some(b) = bias {
        if b.numel() != d_out {
            return shape_err(format!(
                "linear bias has {} elements, expected {d_out}",
                b.numel()
            ));
        }
    }
    Ok((d_out, d_in))
}

pub(crate) fn linear_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); rows * d_out];
    if let Some(b) = b {
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    S::gemm(
        rows,
        d_in,
        d_out,
        x,
        d_in as isize,
        1,
        w,
        1,
        d_in as isize,
        S::one(),
        &mut out,
        d_out as isize,
        1,
    );
    out
}

/// Softmax over the last axis, stabilized by subtracting the row maximum.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let d = x.last_dim().max(1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Concatenates `[C_a,H,W]` and `[C_b,H,W]` along the channel axis, `a` first.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    concat_axis0(&[a, b])
}

/// Concatenation along the leading axis; trailing axes must agree.
pub fn concat_axis0<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    };
    if first.ndim() == 0 {
        return shape_err("concat needs at least one axis");
    }
    let tail = &first.shape()[1..];
    let mut lead = 0;
    for p in parts {
        if p.ndim() != first.ndim() || &p.shape()[1..] != tail {
            return shape_err(format!(
                "concat trailing dims differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            ));
        }
        lead += p.shape()[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = lead;
    Tensor::new(shape, data)
}

/// Elements `start..start+len` along the leading axis.
pub fn narrow_axis0<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
    if x.ndim() == 0 || start + len > x.shape()[0] {
        return shape_err(format!(
            "narrow {start}..{} out of range for {:?}",
            start + len,
            x.shape()
        ));
    }
    let inner: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::new(
        shape,
        x.data()[start * inner..(start + len) * inner].to_vec(),
    )
}

/// Index map of window partitioning: output element `i` reads input element `map[i]`.
pub(crate) fn window_partition_map(h: usize, w: usize, c: usize, window: usize) -> Vec<usize> {
    let (nh, nw) = (h / window, w / window);
    let mut map = Vec::with_capacity(h * w * c);
    for wy in 0..nh {
        for wx in 0..nw {
            for ty in 0..window {
                for tx in 0..window {
                    let y = wy * window + ty;
                    let x = wx * window + tx;
                    let base = (y * w + x) * c;
                    map.extend(base..base + c);
                }
            }
        }
    }
    map
}

/// Index map of a toroidal roll by `(dy, dx)`: `out[y][x] = in[y-dy][x-dx]`.
pub(crate) fn cyclic_shift_map(h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<usize> {
    let mut map = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            let base = (sy * w + sx) * c;
            map.extend(base..base + c);
        }
    }
    map
}

pub(crate) fn gather<S: Scalar>(src: &[S], map: &[usize]) -> Vec<S> {
    map.iter().map(|&i| src[i]).collect()
}

pub(crate) fn scatter<S: Scalar>(grad: &[S], map: &[usize], len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); len];
    for (g, &i) in grad.iter().zip(map) {
        out[i] = out[i] + *g;
    }
    out
}

pub(crate) fn hwc_dims<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => shape_err(format!("expected [H,W,C], got {:?}", x.shape())),
    }
}

/// Splits `[H,W,C]` into `(H/window)·(W/window)` row-major windows of
/// `window²` row-major tokens.
pub fn window_partition<S: Scalar>(x: &Tensor<S>, window: usize) -> Result<Tensor<S>> {
    let (h, w, c) = hwc_dims(x)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return shape_err(format!("{h}x{w} grid is not divisible by window {window}"));
    }
    let map = window_partition_map(h, w, c, window);
    Tensor::new(
        vec![(h / window) * (w / window), window * window, c],
        gather(x.data(), &map),
    )
}

/// Inverse of [`window_partition`].
pub fn window_reverse<S: Scalar>(wins: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let [n_win, tokens, c] = *wins.shape() else {
        return shape_err(format!("expected [nW, window², C], got {:?}", wins.shape()));
    };
    let window = (tokens as f64).sqrt().round() as usize;
    if window * window != tokens
        || n_win * tokens != h * w
        || !h.is_multiple_of(window)
        || !w.is_multiple_of(window)
    {
        return shape_err(format!(
            "{n_win} windows of {tokens} tokens cannot tile a {h}x{w} grid"
        ));
    }
    let map = window_partition_map(h, w, c, window);
    Tensor::new(vec![h, w, c], scatter(wins.data(), &map, h * w * c))
}

/// Toroidal roll of an `[H,W,C]` grid; shifts are taken modulo the grid size.
pub fn cyclic_shift<S: Scalar>(x: &Tensor<S>, dy: isize, dx: isize) -> Result<Tensor<S>> {
    let (h, w, c) = hwc_dims(x)?;
    let map = cyclic_shift_map(h, w, c, dy, dx);
    Tensor::new(vec![h, w, c], gather(x.data(), &map))
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<S: Scalar>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let map = permute_map(x.shape(), perm)?;
    let shape = perm.iter().map(|&p| x.shape()[p]).collect();
    Tensor::new(shape, gather(x.data(), &map))
}

pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd
        || perm
            .iter()
            .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
    {
        return shape_err(format!("{perm:?} is not a permutation of {nd} axes"));
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(map)
}

/// Batched matrix product: `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ` when `transpose_b`.
pub fn bmm<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, transpose_b: bool) -> Result<Tensor<S>> {
    let dims = bmm_dims(a.shape(), b.shape(), transpose_b)?;
    let data = bmm_forward(a.data(), b.data(), dims, transpose_b);
    Tensor::new(vec![dims.0, dims.1, dims.3], data)
}

/// `(batch, m, k, n)` for a batched product.
pub(crate) fn bmm_dims(
    a: &[usize],
    b: &[usize],
    transpose_b: bool,
) -> Result<(usize, usize, usize, usize)> {
    let ([ba, m, k], [bb, r, c]) = (a, b) else {
        return shape_err(format!("bmm operands must be rank 3, got {a:?} and {b:?}"));
    };
    let (kb, n) = if transpose_b { (*c, *r) } else { (*r, *c) };
    if ba != bb || *k != kb {
        return shape_err(format!(
            "bmm shapes {a:?} and {b:?} incompatible (transpose_b={transpose_b})"
        ));
    }
    Ok((*ba, *m, *k, n))
}

pub(crate) fn bmm_forward<S: Scalar>(
    a: &[S],
    b: &[S],
    (batch, m, k, n): (usize, usize, usize, usize),
    transpose_b: bool,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * m * n];
    let (rsb, csb) = if transpose_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    for i in 0..batch {
        S::gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            k as isize,
            1,
            &b[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            S::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
    out
}

/// Bilinear resampling of a `[C,H,W]` tensor (half-pixel centers, edge clamp).
pub fn resize_bilinear<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let [c, h, w] = *x.shape() else {
        return shape_err(format!("resize expects [C,H,W], got {:?}", x.shape()));
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return shape_err("resize with an empty extent");
    }
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = src(oy, h, out_h);
            let fy: S = lit(fy);
            for ox in 0..out_w {
                let (x0, x1, fx) = src(ox, w, out_w);
                let fx: S = lit(fx);
                let top = plane[y0 * w + x0] * (S::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (S::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (S::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
