//! Image containers.
//!
//! Color images are stored planar (`[3,H,W]`), matching the tensor layout the
//! networks consume.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_unit_range<S: Scalar>(data: &[S], what: &str) -> Result<()> {
    if let Some(v) = data
        .iter()
        .find(|v| !(v.is_finite() && **v >= S::zero() && **v <= S::one()))
    {
        return Err(Error::InvalidArgument(format!(
            "{what} value {v} outside [0,1]"
        )));
    }
    Ok(())
}

/// A single `H×W` channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<S: Scalar = f64> {
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Plane<S> {
    pub fn new(height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "{height}x{width} plane given {} values",
                data.len()
            ));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: S) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn at(&self, y: usize, x: usize) -> S {
        self.data[y * self.width + x]
    }

    /// `[1,H,W]` tensor view of the plane.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("plane shape")
    }

    pub fn from_tensor(t: &Tensor<S>) -> Result<Self> {
        match *t.shape() {
            [1, h, w] | [h, w] => Plane::new(h, w, t.data().to_vec()),
            _ => shape_err(format!(
                "expected a single-channel tensor, got {:?}",
                t.shape()
            )),
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// RGB image with every value in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage<S: Scalar = f64> {
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> RgbImage<S> {
    /// Planar data: all of R, then G, then B.
    pub fn new(height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return shape_err(format!(
                "{height}x{width} RGB image given {} values",
                data.len()
            ));
        }
        check_unit_range(&data, "RGB")?;
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [S; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn from_planes(r: &Plane<S>, g: &Plane<S>, b: &Plane<S>) -> Result<Self> {
        if !r.same_dims(g) || !r.same_dims(b) {
            return shape_err("RGB planes differ in size");
        }
        let mut data = Vec::with_capacity(3 * r.data.len());
        data.extend_from_slice(&r.data);
        data.extend_from_slice(&g.data);
        data.extend_from_slice(&b.data);
        Self::new(r.height, r.width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[S] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane(&self, c: usize) -> Plane<S> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [S; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `[3,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Builds an image from a `[3,H,W]` tensor; values must already lie in `[0,1]`.
    pub fn from_tensor(t: &Tensor<S>) -> Result<Self> {
        let [3, h, w] = *t.shape() else {
            return shape_err(format!("expected [3,H,W], got {:?}", t.shape()));
        };
        Self::new(h, w, t.data().to_vec())
    }

    /// Like [`RgbImage::from_tensor`] but clamps into `[0,1]` first.
    pub fn from_tensor_clamped(t: &Tensor<S>) -> Result<Self> {
        Self::from_tensor(&t.map(|v| v.max(S::zero()).min(S::one())))
    }

    pub fn cast<T: Scalar>(&self) -> RgbImage<T> {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or(T::zero()))
                .collect(),
        }
    }

    /// Top-left `h×w` window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return shape_err(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} image",
                self.height, self.width
            ));
        }
        Self::from_fn(h, w, |c, y, x| {
            self.data[c * self.height * self.width + (y0 + y) * self.width + x0 + x]
        })
    }
}

/// HSV image: hue in degrees `[0,360)`, saturation and value in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsvImage<S: Scalar = f64> {
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> HsvImage<S> {
    pub fn new(height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        let n = height * width;
        if data.len() != 3 * n {
            return shape_err(format!(
                "{height}x{width} HSV image given {} values",
                data.len()
            ));
        }
        let full_turn = S::from_f64(360.0).expect("360 representable");
        if let Some(h) = data[..n]
            .iter()
            .find(|h| !(h.is_finite() && **h >= S::zero() && **h < full_turn))
        {
            return Err(Error::InvalidArgument(format!("hue {h} outside [0,360)")));
        }
        check_unit_range(&data[n..], "saturation/value")?;
        Ok(HsvImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hue(&self) -> &[S] {
        &self.data[..self.height * self.width]
    }

    pub fn saturation(&self) -> &[S] {
        let n = self.height * self.width;
        &self.data[n..2 * n]
    }

    pub fn value(&self) -> &[S] {
        let n = self.height * self.width;
        &self.data[2 * n..]
    }

    pub fn value_plane(&self) -> Plane<S> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.value().to_vec(),
        }
    }

    /// Same hue and saturation with the value channel replaced.
    pub fn with_value(&self, v: &Plane<S>) -> Result<Self> {
        if v.height != self.height || v.width != self.width {
            return shape_err("value plane does not match HSV image size");
        }
        check_unit_range(&v.data, "value")?;
        let n = self.height * self.width;
        let mut data = self.data.clone();
        data[2 * n..].copy_from_slice(&v.data);
        Ok(HsvImage {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// 8-bit grayscale image used for histogram analysis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "{height}x{width} gray image given {} values",
                data.len()
            ));
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }
}
