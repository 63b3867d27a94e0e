//! Shared value types: frames, boxes, masks, and the small amount of planar
//! geometry every stage needs.
//!
//! Pixel convention: origin at the top-left corner, x to the right, y down.
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its center is at
//! `(i + 0.5, j + 0.5)`. Polar angles are `atan2(dy, dx)` in that frame, which
//! makes a point straight *above* the center (smaller y) sit at `-pi/2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraId {
    Student,
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A timestamped intensity image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pub timestamp: f64,
    pub camera: CameraId,
}

impl Frame {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        timestamp: f64,
        camera: CameraId,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "frame data has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            timestamp,
            camera,
        })
    }

    /// Single-channel frame filled with `value`.
    pub fn filled(width: usize, height: usize, value: f32, timestamp: f64, camera: CameraId) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions must be positive");
        let value = value.clamp(0.0, 1.0);
        Self {
            width,
            height,
            channels: 1,
            data: vec![value; width * height],
            timestamp,
            camera,
        }
    }

    /// Builds a single-channel frame, clamping every value into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        timestamp: f64,
        camera: CameraId,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
            timestamp,
            camera,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; callers must keep values inside `[0, 1]`.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    pub fn center(&self) -> Point {
        Point::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Luma with weights (0.299, 0.587, 0.114); a gray frame is returned as is.
    pub fn to_luma(&self) -> Frame {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Frame {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
            timestamp: self.timestamp,
            camera: self.camera,
        }
    }

    /// Copies the rectangle `[x0, x0+w) x [y0, y0+h)`; the rectangle must fit.
    pub fn sub_image(&self, x0: usize, y0: usize, w: usize, h: usize) -> Frame {
        assert!(x0 + w <= self.width && y0 + h <= self.height && w > 0 && h > 0);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Frame {
            width: w,
            height: h,
            channels: self.channels,
            data,
            timestamp: self.timestamp,
            camera: self.camera,
        }
    }

    /// Bilinear sample of channel `c` at continuous coordinates, with the
    /// pixel-center convention. `None` outside the sampled domain.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> Option<f32> {
        let fx = x - 0.5;
        let fy = y - 0.5;
        if fx < -0.5 || fy < -0.5 || fx > self.width as f64 - 0.5 || fy > self.height as f64 - 0.5 {
            return None;
        }
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let top = self.get(x0, y0, c) * (1.0 - ax) + self.get(x1, y0, c) * ax;
        let bot = self.get(x0, y1, c) * (1.0 - ax) + self.get(x1, y1, c) * ax;
        Some(top * (1.0 - ay) + bot * ay)
    }
}

/// Axis-aligned detection box: center, size, and confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Self {
        Self { cx, cy, w, h, score }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
            score,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && (0.0..=1.0).contains(&self.score)
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Corners in order top-left, top-right, bottom-right, bottom-left.
    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x0(), self.y0()),
            Point::new(self.x1(), self.y0()),
            Point::new(self.x1(), self.y1()),
            Point::new(self.x0(), self.y1()),
        ]
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn translated(mut self, dx: f64, dy: f64) -> Self {
        self.cx += dx;
        self.cy += dy;
        self
    }

    /// Scales width and height about the center.
    pub fn inflated(mut self, factor: f64) -> Self {
        self.w *= factor;
        self.h *= factor;
        self
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0() < other.x1() && other.x0() < self.x1() && self.y0() < other.y1() && other.y0() < self.y1()
    }

    /// Smallest box covering both; keeps the higher score.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox::from_corners(
            self.x0().min(other.x0()),
            self.y0().min(other.y0()),
            self.x1().max(other.x1()),
            self.y1().max(other.y1()),
            self.score.max(other.score),
        )
    }
}

/// Intersection over union of the axis-aligned extents.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Smallest unrotated box enclosing `corners`; score is set to 1.
pub fn enclosing_axis_aligned(corners: &[Point]) -> Result<BBox> {
    let first = corners
        .first()
        .ok_or_else(|| Error::invalid("enclosing box needs at least one point"))?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
    for p in &corners[1..] {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    if !(x1 - x0 > 0.0 && y1 - y0 > 0.0) {
        return Err(Error::DegenerateBox);
    }
    Ok(BBox::from_corners(x0, y0, x1, y1, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarCoord {
    pub rho: f64,
    pub theta: f64,
}

/// Polar coordinates of `p` about `center`; theta lies in `(-pi, pi]`.
pub fn to_polar(p: Point, center: Point) -> PolarCoord {
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    let rho = dx.hypot(dy);
    if rho == 0.0 {
        return PolarCoord { rho: 0.0, theta: 0.0 };
    }
    let mut theta = dy.atan2(dx);
    if theta <= -std::f64::consts::PI {
        theta += 2.0 * std::f64::consts::PI;
    }
    PolarCoord { rho, theta }
}

pub fn from_polar(pc: PolarCoord, center: Point) -> Point {
    Point::new(center.x + pc.rho * pc.theta.cos(), center.y + pc.rho * pc.theta.sin())
}

/// One boolean per pixel, packed into 64-bit words in row-major order.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut m = Self::new(width, height);
        m.words.iter_mut().for_each(|w| *w = !0);
        m.clear_tail();
        m
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// From one byte per pixel; any nonzero byte is true.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::invalid(format!(
                "mask has {} bytes, expected {}",
                bytes.len(),
                width * height
            )));
        }
        let mut m = Self::new(width, height);
        for (i, &b) in bytes.iter().enumerate() {
            if b != 0 {
                m.words[i >> 6] |= 1 << (i & 63);
            }
        }
        Ok(m)
    }

    /// One byte per pixel, 1 for true.
    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.width * self.height).map(|i| self.get_index(i) as u8).collect()
    }

    fn clear_tail(&mut self) {
        let n = self.width * self.height;
        if !n.is_multiple_of(64) {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << (n % 64)) - 1;
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, v: bool) {
        if v {
            self.words[i >> 6] |= 1 << (i & 63);
        } else {
            self.words[i >> 6] &= !(1 << (i & 63));
        }
    }

    /// Copies row `y` into `out`: pixel `x` lands in bit `x % 64` of word
    /// `x / 64`. `out` holds `width.div_ceil(64)` words.
    pub(crate) fn row_bits(&self, y: usize, out: &mut [u64]) {
        let start = y * self.width;
        for (k, o) in out.iter_mut().enumerate() {
            let pos = start + 64 * k;
            let (q, s) = (pos >> 6, pos & 63);
            let mut v = self.words[q] >> s;
            if s > 0 && q + 1 < self.words.len() {
                v |= self.words[q + 1] << (64 - s);
            }
            let left = self.width - 64 * k;
            if left < 64 {
                v &= (1u64 << left) - 1;
            }
            *o = v;
        }
    }

    /// ORs a row in the [`Self::row_bits`] layout into row `y`. Bits past the
    /// row width must be clear.
    pub(crate) fn or_row_bits(&mut self, y: usize, bits: &[u64]) {
        let start = y * self.width;
        for (k, &v) in bits.iter().enumerate() {
            let pos = start + 64 * k;
            let (q, s) = (pos >> 6, pos & 63);
            self.words[q] |= v << s;
            if s > 0 && q + 1 < self.words.len() {
                self.words[q + 1] |= v >> (64 - s);
            }
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.get_index(y * self.width + x)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.set_index(y * self.width + x, v)
    }

    /// Value at the pixel containing a continuous point; false outside.
    pub fn contains_point(&self, p: Point) -> bool {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return false;
        }
        let (x, y) = (p.x.floor() as usize, p.y.floor() as usize);
        x < self.width && y < self.height && self.get(x, y)
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(u64, u64) -> u64) -> Result<BinaryMask> {
        self.check_dims(other)?;
        let words = self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect();
        let mut m = BinaryMask {
            width: self.width,
            height: self.height,
            words,
        };
        m.clear_tail();
        Ok(m)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a | b)
    }

    /// `self` minus `other`.
    pub fn and_not(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a & !b)
    }

    pub fn not(&self) -> BinaryMask {
        let mut m = BinaryMask {
            width: self.width,
            height: self.height,
            words: self.words.iter().map(|w| !w).collect(),
        };
        m.clear_tail();
        m
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.words.iter().zip(&other.words).all(|(&a, &b)| a & !b == 0)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.words.iter().zip(&other.words).all(|(&a, &b)| a & b == 0)
    }

    /// Linear indices of true pixels in ascending order.
    pub fn iter_true(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(wi * 64 + b)
            })
        })
    }

    /// Fraction of the pixels inside `b` (clipped to the mask) that are true.
    /// Pixels are counted when their center lies in the box.
    pub fn coverage_of(&self, b: &BBox) -> f64 {
        let x0 = (b.x0() - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y0() - 0.5).ceil().max(0.0) as usize;
        let x1 = ((b.x1() - 0.5).floor() as isize).min(self.width as isize - 1);
        let y1 = ((b.y1() - 0.5).floor() as isize).min(self.height as isize - 1);
        if x1 < x0 as isize || y1 < y0 as isize {
            return 1.0;
        }
        let (mut total, mut hit) = (0usize, 0usize);
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                total += 1;
                hit += self.get(x, y) as usize;
            }
        }
        hit as f64 / total as f64
    }
}

/// Static labeling of student pixels into the shared view and its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    overlap: BinaryMask,
}

impl RegionPartition {
    pub fn new(overlap: BinaryMask) -> Result<Self> {
        if overlap.is_empty() {
            return Err(Error::EmptyOverlap);
        }
        Ok(Self { overlap })
    }

    pub fn overlap(&self) -> &BinaryMask {
        &self.overlap
    }

    pub fn outside(&self) -> BinaryMask {
        self.overlap.not()
    }

    pub fn is_overlap(&self, p: Point) -> bool {
        self.overlap.contains_point(p)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.overlap.dims()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn polar_axis_offset() {
        let pc = to_polar(Point::new(650.0, 640.0), Point::new(640.0, 640.0));
        assert_abs_diff_eq!(pc.rho, 10.0);
        assert_abs_diff_eq!(pc.theta, 0.0);
    }

    #[test]
    fn polar_at_origin() {
        let pc = to_polar(Point::new(640.0, 640.0), Point::new(640.0, 640.0));
        assert_eq!((pc.rho, pc.theta), (0.0, 0.0));
    }

    #[test]
    fn polar_upward_is_negative_half_pi() {
        // y grows downward, so a point above the center has a negative angle.
        let pc = to_polar(Point::new(640.0, 630.0), Point::new(640.0, 640.0));
        assert_abs_diff_eq!(pc.rho, 10.0);
        let oracle = (630.0f64 - 640.0).atan2(0.0);
        assert_abs_diff_eq!(pc.theta, oracle);
        assert_abs_diff_eq!(pc.theta, -FRAC_PI_2);
    }

    #[test]
    fn polar_negative_x_axis_is_pi() {
        let pc = to_polar(Point::new(0.0, 0.0), Point::new(1.0, 0.0));
        assert_abs_diff_eq!(pc.theta, PI);
    }

    #[test]
    fn iou_spot_values() {
        let a = BBox::new(3.0, 4.0, 2.0, 5.0, 0.9);
        assert_abs_diff_eq!(box_iou(&a, &a), 1.0);
        let far = BBox::new(30.0, 4.0, 2.0, 5.0, 0.9);
        assert_eq!(box_iou(&a, &far), 0.0);
        let u0 = BBox::new(0.0, 0.0, 1.0, 1.0, 1.0);
        let u1 = BBox::new(0.5, 0.0, 1.0, 1.0, 1.0);
        assert_abs_diff_eq!(box_iou(&u0, &u1), 1.0 / 3.0, epsilon = 1e-12);
    }

    /// Counts sub-pixel samples on a fine lattice, independent of the
    /// interval arithmetic in `box_iou`.
    fn raster_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
        let x0 = a.x0().min(b.x0());
        let y0 = a.y0().min(b.y0());
        let x1 = a.x1().max(b.x1());
        let y1 = a.y1().max(b.y1());
        let inside = |bb: &BBox, x: f64, y: f64| x >= bb.x0() && x < bb.x1() && y >= bb.y0() && y < bb.y1();
        let (mut inter, mut uni) = (0usize, 0usize);
        let mut y = y0 + step / 2.0;
        while y < y1 {
            let mut x = x0 + step / 2.0;
            while x < x1 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                uni += (ia || ib) as usize;
                x += step;
            }
            y += step;
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_matches_raster_oracle() {
        let u0 = BBox::new(0.0, 0.0, 1.0, 1.0, 1.0);
        let u1 = BBox::new(0.5, 0.0, 1.0, 1.0, 1.0);
        assert_abs_diff_eq!(raster_iou(&u0, &u1, 1.0 / 400.0), 1.0 / 3.0, epsilon = 1e-3);
        let a = BBox::new(2.0, 3.0, 4.0, 2.0, 1.0);
        let b = BBox::new(3.1, 3.7, 2.4, 3.0, 1.0);
        assert_abs_diff_eq!(box_iou(&a, &b), raster_iou(&a, &b, 1.0 / 200.0), epsilon = 2e-3);
    }

    #[test]
    fn enclosing_cases() {
        let rect = BBox::new(5.0, 6.0, 4.0, 2.0, 1.0);
        let e = enclosing_axis_aligned(&rect.corners()).unwrap();
        assert_abs_diff_eq!(e.cx, 5.0);
        assert_abs_diff_eq!(e.w, 4.0);
        assert_abs_diff_eq!(e.h, 2.0);
        assert_eq!(e.score, 1.0);

        // Unit square rotated by 45 degrees about its center.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let rotated = [
            Point::new(0.0, -h),
            Point::new(h, 0.0),
            Point::new(0.0, h),
            Point::new(-h, 0.0),
        ];
        let e = enclosing_axis_aligned(&rotated).unwrap();
        assert_abs_diff_eq!(e.w, 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(e.h, 2f64.sqrt(), epsilon = 1e-12);

        let same = [Point::new(1.0, 1.0); 4];
        assert!(matches!(enclosing_axis_aligned(&same), Err(Error::DegenerateBox)));
        assert!(enclosing_axis_aligned(&[]).is_err());
    }

    #[test]
    fn mask_set_ops() {
        let a = BinaryMask::from_fn(13, 7, |x, _| x < 5);
        let b = BinaryMask::from_fn(13, 7, |_, y| y < 3);
        assert_eq!(a.count(), 35);
        assert_eq!(a.and(&b).unwrap().count(), 15);
        assert_eq!(a.or(&b).unwrap().count(), 35 + 39 - 15);
        assert_eq!(a.and_not(&b).unwrap().count(), 20);
        assert_eq!(a.not().count(), 91 - 35);
        assert!(a.and(&b).unwrap().is_subset_of(&a));
        assert!(a.is_disjoint(&a.not()));
        assert_eq!(BinaryMask::full(13, 7).count(), 91);
        let idx: Vec<_> = b.and(&a).unwrap().iter_true().take(3).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(a.or(&BinaryMask::new(2, 2)).is_err());
    }

    #[test]
    fn empty_partition_is_rejected() {
        assert!(matches!(RegionPartition::new(BinaryMask::new(4, 4)), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(2, 2, 1, vec![0.0; 3], 0.0, CameraId::Student).is_err());
        assert!(Frame::new(2, 2, 1, vec![1.5; 4], 0.0, CameraId::Student).is_err());
        assert!(Frame::new(2, 2, 2, vec![0.0; 8], 0.0, CameraId::Student).is_err());
        let rgb = Frame::new(1, 1, 3, vec![1.0, 0.0, 0.0], 0.0, CameraId::Teacher).unwrap();
        assert_abs_diff_eq!(rgb.to_luma().get(0, 0, 0), 0.299, epsilon = 1e-6);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64, 0.0..=1.0f64)
            .prop_map(|(cx, cy, w, h, s)| BBox::new(cx, cy, w, h, s))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - box_iou(&b, &a)).abs() < 1e-12);
            prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn polar_round_trip(x in -2000.0..2000.0f64, y in -2000.0..2000.0f64, cx in 0.0..1280.0f64, cy in 0.0..1280.0f64) {
            let c = Point::new(cx, cy);
            let pc = to_polar(Point::new(x, y), c);
            prop_assert!(pc.rho >= 0.0);
            prop_assert!(pc.theta > -PI && pc.theta <= PI);
            let back = from_polar(pc, c);
            prop_assert!((back.x - x).abs() < 1e-9 && (back.y - y).abs() < 1e-9);
        }

        #[test]
        fn enclosing_idempotent_on_axis_aligned(b in arb_box()) {
            let e1 = enclosing_axis_aligned(&b.corners()).unwrap();
            let e2 = enclosing_axis_aligned(&e1.corners()).unwrap();
            prop_assert!((e1.cx - e2.cx).abs() < 1e-9 && (e1.w - e2.w).abs() < 1e-9);
            prop_assert!((e1.cy - e2.cy).abs() < 1e-9 && (e1.h - e2.h).abs() < 1e-9);
            prop_assert!((e1.w - b.w).abs() < 1e-9 && (e1.h - b.h).abs() < 1e-9);
        }
    }
}
