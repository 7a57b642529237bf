//! Image-quality metrics: PSNR, SSIM, UQI and ΔE (full-reference) plus LOE
//! (no-reference against the original input).
//!
//! SSIM and UQI of RGB images are computed on the Rec. 601 luma plane.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::image::{Plane, RgbImage};
use crate::losses::{ssim_mean, SsimParams, WindowKernel};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tape;

pub const DEFAULT_LOE_GRID: usize = 50;

fn same_dims<S: Scalar>(a: &RgbImage<S>, b: &RgbImage<S>) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        shape_err(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ))
    }
}

fn f<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// `10·log10(1/MSE)` over all channels; `+∞` for identical images.
pub fn psnr<S: Scalar>(a: &RgbImage<S>, b: &RgbImage<S>) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f(x) - f(y)).powi(2))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Rec. 601 luma.
pub fn luma<S: Scalar>(img: &RgbImage<S>) -> Plane<S> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let (kr, kg, kb): (S, S, S) = (lit(0.299), lit(0.587), lit(0.114));
    let data = (0..r.len())
        .map(|i| kr * r[i] + kg * g[i] + kb * b[i])
        .collect();
    Plane::new(img.height(), img.width(), data).expect("same pixel count")
}

/// Mean windowed SSIM of two planes, sharing the loss kernel.
pub fn ssim_planes<S: Scalar>(a: &Plane<S>, b: &Plane<S>, p: &SsimParams) -> Result<f64> {
    if !a.same_dims(b) {
        return shape_err("SSIM of planes with different sizes");
    }
    let mut tape = Tape::inference();
    let x = tape.constant(a.to_tensor());
    let y = tape.constant(b.to_tensor());
    Ok(f(ssim_mean(&mut tape, &x, &y, p)?.value().item()))
}

pub fn ssim_index<S: Scalar>(a: &RgbImage<S>, b: &RgbImage<S>, p: &SsimParams) -> Result<f64> {
    same_dims(a, b)?;
    ssim_planes(&luma(a), &luma(b), p)
}

/// UQI value and how many windows went into it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UqiResult {
    pub value: f64,
    pub windows: usize,
    /// Windows with a zero denominator (both inputs constant), left out of the mean.
    pub skipped: usize,
}

fn windows(h: usize, w: usize, kernel: &WindowKernel) -> Vec<Vec<(usize, f64)>> {
    match kernel {
        WindowKernel::Full => vec![(0..h * w).map(|i| (i, 1.0 / (h * w) as f64)).collect()],
        WindowKernel::Square { k, weights } => {
            let k = *k;
            let mut out = Vec::with_capacity((h - k + 1) * (w - k + 1));
            for y in 0..=h - k {
                for x in 0..=w - k {
                    out.push(
                        (0..k * k)
                            .map(|i| ((y + i / k) * w + x + i % k, weights[i]))
                            .collect(),
                    );
                }
            }
            out
        }
    }
}

/// SSIM with both stabilizing constants at zero, over the same windows as SSIM.
pub fn uqi_planes<S: Scalar>(a: &Plane<S>, b: &Plane<S>, p: &SsimParams) -> Result<UqiResult> {
    if !a.same_dims(b) {
        return shape_err("UQI of planes with different sizes");
    }
    let (h, w) = (a.height(), a.width());
    let xs: Vec<f64> = a.data().iter().map(|&v| f(v)).collect();
    let ys: Vec<f64> = b.data().iter().map(|&v| f(v)).collect();
    let wins = windows(h, w, &p.kernel(h, w));
    let (mut acc, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for win in &wins {
        let x0 = xs[win[0].0];
        let y0 = ys[win[0].0];
        if win.iter().all(|&(i, _)| xs[i] == x0 && ys[i] == y0) {
            skipped += 1;
            continue;
        }
        let mx: f64 = win.iter().map(|&(i, wt)| wt * xs[i]).sum();
        let my: f64 = win.iter().map(|&(i, wt)| wt * ys[i]).sum();
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for &(i, wt) in win {
            let (dx, dy) = (xs[i] - mx, ys[i] - my);
            sxx += wt * dx * dx;
            syy += wt * dy * dy;
            sxy += wt * dx * dy;
        }
        let den = (mx * mx + my * my) * (sxx + syy);
        if den == 0.0 {
            skipped += 1;
            continue;
        }
        acc += (2.0 * (mx * my)) * (2.0 * sxy) / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "UQI undefined: every window is degenerate".into(),
        ));
    }
    Ok(UqiResult {
        value: acc / used as f64,
        windows: wins.len(),
        skipped,
    })
}

pub fn uqi<S: Scalar>(a: &RgbImage<S>, b: &RgbImage<S>, p: &SsimParams) -> Result<UqiResult> {
    same_dims(a, b)?;
    uqi_planes(&luma(a), &luma(b), p)
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// CIELAB of an sRGB pixel under D65; the white point is the transform of sRGB white.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(linearize);
    let xyz = SRGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let white = SRGB_TO_XYZ.map(|row| row[0] + row[1] + row[2]);
    let d: f64 = 6.0 / 29.0;
    let g = |t: f64| {
        if t > d * d * d {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let [fx, fy, fz] = [
        g(xyz[0] / white[0]),
        g(xyz[1] / white[1]),
        g(xyz[2] / white[2]),
    ];
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Mean per-pixel CIE76 color difference.
pub fn delta_e<S: Scalar>(a: &RgbImage<S>, b: &RgbImage<S>) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.height() * a.width();
    let px = |img: &RgbImage<S>, i: usize| [0, 1, 2].map(|c| f(img.channel(c)[i]));
    let total: f64 = (0..n)
        .map(|i| {
            let (la, lb) = (srgb_to_lab(px(a, i)), srgb_to_lab(px(b, i)));
            ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-pixel maximum over the color channels.
pub fn lightness<S: Scalar>(img: &RgbImage<S>) -> Vec<f64> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    (0..r.len())
        .map(|i| f(r[i]).max(f(g[i])).max(f(b[i])))
        .collect()
}

/// Nearest-neighbor sample coordinates along an axis of length `n`.
pub fn loe_sites(n: usize, grid: usize) -> Vec<usize> {
    (0..grid)
        .map(|i| ((2 * i + 1) * n / (2 * grid)).min(n - 1))
        .collect()
}

/// Lightness order error on a `grid×grid` lattice of sample sites.
pub fn loe<S: Scalar>(original: &RgbImage<S>, enhanced: &RgbImage<S>, grid: usize) -> Result<f64> {
    same_dims(original, enhanced)?;
    if grid == 0 {
        return Err(Error::InvalidArgument("LOE grid must be at least 1".into()));
    }
    let w = original.width();
    let (lo, le) = (lightness(original), lightness(enhanced));
    let ys = loe_sites(original.height(), grid);
    let xs = loe_sites(w, grid);
    let mut so = Vec::with_capacity(grid * grid);
    let mut se = Vec::with_capacity(grid * grid);
    for &y in &ys {
        for &x in &xs {
            so.push(lo[y * w + x]);
            se.push(le[y * w + x]);
        }
    }
    let m = so.len();
    let mut count = 0u64;
    for p in 0..m {
        for q in 0..m {
            count += ((so[p] >= so[q]) != (se[p] >= se[q])) as u64;
        }
    }
    Ok(count as f64 / m as f64)
}

/// Full-reference scores of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Fiqa {
    pub psnr: f64,
    pub ssim: f64,
    pub uqi: f64,
    pub delta_e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub image: String,
    pub fiqa: Option<Fiqa>,
    pub loe: Option<f64>,
}

/// Scores `enhanced` against an optional reference and an optional original.
pub fn evaluate_image<S: Scalar>(
    name: &str,
    enhanced: &RgbImage<S>,
    reference: Option<&RgbImage<S>>,
    original: Option<&RgbImage<S>>,
) -> Result<MetricRow> {
    let p = SsimParams::default();
    let fiqa = match reference {
        Some(r) => Some(Fiqa {
            psnr: psnr(enhanced, r)?,
            ssim: ssim_index(enhanced, r, &p)?,
            uqi: uqi(enhanced, r, &p).map(|u| u.value).unwrap_or(f64::NAN),
            delta_e: delta_e(enhanced, r)?,
        }),
        None => None,
    };
    let loe = original
        .map(|o| loe(o, enhanced, DEFAULT_LOE_GRID))
        .transpose()?;
    Ok(MetricRow {
        image: name.to_string(),
        fiqa,
        loe,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricMeans {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uqi: Option<f64>,
    pub delta_e: Option<f64>,
    pub loe: Option<f64>,
    /// Rows whose PSNR was infinite and therefore left out of the PSNR mean.
    pub infinite_psnr: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    fn has_fiqa(&self) -> bool {
        self.rows.iter().any(|r| r.fiqa.is_some())
    }

    fn has_loe(&self) -> bool {
        self.rows.iter().any(|r| r.loe.is_some())
    }

    pub fn means(&self) -> MetricMeans {
        let fiqa = || self.rows.iter().filter_map(|r| r.fiqa);
        MetricMeans {
            psnr: mean(fiqa().map(|q| q.psnr).filter(|v| v.is_finite())),
            ssim: mean(fiqa().map(|q| q.ssim)),
            uqi: mean(fiqa().map(|q| q.uqi).filter(|v| !v.is_nan())),
            delta_e: mean(fiqa().map(|q| q.delta_e)),
            loe: mean(self.rows.iter().filter_map(|r| r.loe)),
            infinite_psnr: fiqa().filter(|q| q.psnr.is_infinite()).count(),
        }
    }

    /// CSV; full-reference columns appear only when some row has a reference.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let (fiqa, has_loe) = (self.has_fiqa(), self.has_loe());
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["image"];
        if fiqa {
            header.extend(["psnr", "ssim", "uqi", "delta_e"]);
        }
        if has_loe {
            header.push("loe");
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_num);
        for r in &self.rows {
            let mut rec = vec![r.image.clone()];
            if fiqa {
                let q = r.fiqa;
                rec.extend([
                    opt(q.map(|q| q.psnr)),
                    opt(q.map(|q| q.ssim)),
                    opt(q.map(|q| q.uqi)),
                    opt(q.map(|q| q.delta_e)),
                ]);
            }
            if has_loe {
                rec.push(opt(r.loe));
            }
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Markdown table with FIQA and NIQA column groups and a mean row.
    pub fn to_markdown(&self) -> String {
        let (fiqa, has_loe) = (self.has_fiqa(), self.has_loe());
        let mut groups = vec![""];
        let mut cols = vec!["Image"];
        if fiqa {
            groups.extend(["FIQA", "", "", ""]);
            cols.extend(["PSNR↑", "SSIM↑", "UQI↑", "DeltaE↓"]);
        }
        if has_loe {
            groups.push("NIQA");
            cols.push("LOE↓");
        }
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let to_s = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut out = line(&to_s(&groups));
        out += &line(&to_s(&cols));
        out += &line(&vec!["---".to_string(); cols.len()]);
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), fmt_num);
        let mut push_row = |name: String, q: [Option<f64>; 4], l: Option<f64>| {
            let mut cells = vec![name];
            if fiqa {
                cells.extend(q.map(opt));
            }
            if has_loe {
                cells.push(opt(l));
            }
            out += &line(&cells);
        };
        for r in &self.rows {
            let q = r.fiqa;
            push_row(
                r.image.clone(),
                [
                    q.map(|q| q.psnr),
                    q.map(|q| q.ssim),
                    q.map(|q| q.uqi),
                    q.map(|q| q.delta_e),
                ],
                r.loe,
            );
        }
        let m = self.means();
        push_row("**mean**".into(), [m.psnr, m.ssim, m.uqi, m.delta_e], m.loe);
        if m.infinite_psnr > 0 {
            out += &format!(
                "\n{} image(s) with infinite PSNR excluded from the PSNR mean.\n",
                m.infinite_psnr
            );
        }
        out
    }
}
