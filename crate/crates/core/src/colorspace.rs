//! Hexcone RGB ↔ HSV conversion and value-plane helpers.

use crate::error::{shape_err, Result};
use crate::image::{HsvImage, Plane, RgbImage};
use crate::scalar::{lit, Scalar};

/// Converts one pixel; hue in degrees, 0 for achromatic pixels.
pub fn rgb_to_hsv_pixel<S: Scalar>(r: S, g: S, b: S) -> (S, S, S) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let v = max;
    let s = if max > S::zero() {
        chroma / max
    } else {
        S::zero()
    };
    if chroma <= S::zero() {
        return (S::zero(), s, v);
    }
    let sixty: S = lit(60.0);
    let full: S = lit(360.0);
    let mut h = if max == r {
        sixty * ((g - b) / chroma)
    } else if max == g {
        sixty * ((b - r) / chroma + lit(2.0))
    } else {
        sixty * ((r - g) / chroma + lit(4.0))
    };
    if h < S::zero() {
        h = h + full;
    }
    if h >= full {
        h = S::zero();
    }
    (h, s, v)
}

/// Converts one pixel back to RGB.
pub fn hsv_to_rgb_pixel<S: Scalar>(h: S, s: S, v: S) -> (S, S, S) {
    if s <= S::zero() {
        return (v, v, v);
    }
    let sector = h / lit(60.0);
    let i = sector.floor();
    let f = sector - i;
    let p = v * (S::one() - s);
    let q = v * (S::one() - s * f);
    let t = v * (S::one() - s * (S::one() - f));
    let (r, g, b) = match i.to_i64().unwrap_or(0).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let clamp = |x: S| x.max(S::zero()).min(S::one());
    (clamp(r), clamp(g), clamp(b))
}

pub fn rgb_to_hsv<S: Scalar>(img: &RgbImage<S>) -> HsvImage<S> {
    let n = img.height() * img.width();
    let mut data = vec![S::zero(); 3 * n];
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv_pixel(r[i], g[i], b[i]);
        data[i] = h;
        data[n + i] = s;
        data[2 * n + i] = v;
    }
    HsvImage::new(img.height(), img.width(), data).expect("hexcone output is in range")
}

pub fn hsv_to_rgb<S: Scalar>(img: &HsvImage<S>) -> RgbImage<S> {
    let n = img.height() * img.width();
    let mut data = vec![S::zero(); 3 * n];
    let (h, s, v) = (img.hue(), img.saturation(), img.value());
    for i in 0..n {
        let (r, g, b) = hsv_to_rgb_pixel(h[i], s[i], v[i]);
        data[i] = r;
        data[n + i] = g;
        data[2 * n + i] = b;
    }
    RgbImage::new(img.height(), img.width(), data).expect("clamped output is in range")
}

/// Elementwise `(a + b) / 2`.
pub fn average_v<S: Scalar>(a: &Plane<S>, b: &Plane<S>) -> Result<Plane<S>> {
    if !a.same_dims(b) {
        return shape_err(format!(
            "cannot average {}x{} and {}x{} planes",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    let half: S = lit(0.5);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x + y) * half)
        .collect();
    Plane::new(a.height(), a.width(), data)
}
