//! ViBe background subtraction and square dilation of the resulting mask.
//!
//! The sample bank is kept in 8-bit units with each pixel's samples
//! contiguous, so both the classification pass and the sparse refreshes walk
//! memory in order. Segmentation runs over the whole frame before any update is
//! applied, which keeps neighbor propagation independent of scan order.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VibeParams {
    /// Samples kept per pixel.
    pub n: usize,
    /// Match radius in 8-bit intensity units.
    pub radius: u8,
    pub min_matches: usize,
    /// Subsampling factor: background pixels refresh with probability 1/phi.
    pub phi: u32,
}

impl Default for VibeParams {
    fn default() -> Self {
        Self {
            n: 20,
            radius: 20,
            min_matches: 2,
            phi: 16,
        }
    }
}

impl VibeParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_matches < 1 || self.n < self.min_matches {
            return Err(Error::invalid("vibe requires n >= min_matches >= 1"));
        }
        if self.phi < 1 {
            return Err(Error::invalid("vibe subsampling factor must be >= 1"));
        }
        Ok(())
    }
}

/// Raw foreground mask and its dilation; `raw` is always a subset of `dilated`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMasks {
    pub raw: BinaryMask,
    pub dilated: BinaryMask,
}

impl MotionMasks {
    pub fn from_raw(raw: BinaryMask, kernel: usize) -> Result<Self> {
        let dilated = dilate(&raw, kernel)?;
        Ok(Self { raw, dilated })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            raw: BinaryMask::new(width, height),
            dilated: BinaryMask::new(width, height),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.raw.dims()
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn luma_u8(frame: &Frame, out: &mut Vec<u8>) {
    out.clear();
    if frame.channels() == 1 {
        out.extend(frame.data().iter().map(|&v| (v * 255.0 + 0.5) as u8));
    } else {
        out.extend(frame.data().chunks_exact(3).map(|p| {
            let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            (l.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
        }));
    }
}

#[derive(Clone, Debug)]
pub struct VibeModel {
    params: VibeParams,
    width: usize,
    height: usize,
    /// `samples[i * n + k]` is sample `k` of pixel `i`.
    samples: Vec<u8>,
    scratch: Vec<u8>,
}

impl VibeModel {
    /// Fills every pixel's bank with values drawn from its 8-neighborhood.
    pub fn init<R: Rng + ?Sized>(first_frame: &Frame, params: VibeParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let (w, h) = first_frame.dims();
        if w < 3 || h < 3 {
            return Err(Error::FrameTooSmall(w, h));
        }
        let npix = w * h;
        let mut gray = Vec::with_capacity(npix);
        luma_u8(first_frame, &mut gray);
        let mut samples = vec![0u8; params.n * npix];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for k in 0..params.n {
                    let j = random_neighbor(x, y, w, h, rng);
                    samples[i * params.n + k] = gray[j];
                }
            }
        }
        Ok(Self {
            params,
            width: w,
            height: h,
            samples,
            scratch: gray,
        })
    }

    pub fn params(&self) -> &VibeParams {
        &self.params
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Samples of pixel `(x, y)`, in bank order.
    pub fn bank(&self, x: usize, y: usize) -> Vec<u8> {
        let i = y * self.width + x;
        self.samples[i * self.params.n..(i + 1) * self.params.n].to_vec()
    }

    /// Classifies `frame`, then refreshes the model from its background pixels.
    /// Returns the raw foreground mask.
    pub fn segment_update<R: Rng + ?Sized>(&mut self, frame: &Frame, rng: &mut R) -> Result<BinaryMask> {
        if frame.dims() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: frame.dims(),
            });
        }
        let mut gray = std::mem::take(&mut self.scratch);
        luma_u8(frame, &mut gray);
        let (w, h) = self.dims();
        let mut raw = BinaryMask::new(w, h);
        let mut refresh = Refresh::new(1.0 / self.params.phi as f64, rng);
        // Row y - 2 is refreshed once row y is classified: its neighbor
        // writes reach only rows that are already classified, so the result
        // equals a full classification pass followed by a full refresh pass,
        // while the bank rows are still in cache.
        for y in 0..h {
            self.segment_rows(&gray, y..y + 1, &mut raw);
            if y >= 2 {
                self.refresh_rows(&gray, &raw, y - 2..y - 1, &mut refresh, rng);
            }
        }
        self.refresh_rows(&gray, &raw, h.saturating_sub(2)..h, &mut refresh, rng);
        self.scratch = gray;
        Ok(raw)
    }

    /// Classification only; the model is left untouched.
    pub fn segment_frame(&self, frame: &Frame) -> Result<BinaryMask> {
        if frame.dims() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: frame.dims(),
            });
        }
        let mut gray = Vec::with_capacity(self.width * self.height);
        luma_u8(frame, &mut gray);
        let mut raw = BinaryMask::new(self.width, self.height);
        self.segment_rows(&gray, 0..self.height, &mut raw);
        Ok(raw)
    }

    fn segment_rows(&self, gray: &[u8], rows: std::ops::Range<usize>, raw: &mut BinaryMask) {
        let n = self.params.n;
        let need = self.params.min_matches;
        let r = self.params.radius;
        let (a, b) = (rows.start * self.width, rows.end * self.width);
        let banks = self.samples[a * n..b * n].chunks_exact(n);
        for (i, (bank, &v)) in (a..b).zip(banks.zip(&gray[a..b])) {
            let mut matches = 0;
            for &s in bank {
                matches += (v.abs_diff(s) < r) as usize;
                if matches == need {
                    break;
                }
            }
            if matches < need {
                raw.set_index(i, true);
            }
        }
    }

    fn refresh_rows<R: Rng + ?Sized>(
        &mut self,
        gray: &[u8],
        raw: &BinaryMask,
        rows: std::ops::Range<usize>,
        st: &mut Refresh,
        rng: &mut R,
    ) {
        let n = self.params.n;
        for i in rows.start * self.width..rows.end * self.width {
            if raw.get_index(i) {
                continue;
            }
            let v = gray[i];
            st.until_self -= 1;
            if st.until_self == 0 {
                let k = rng.random_range(0..n);
                self.samples[i * n + k] = v;
                st.until_self = geometric_gap(st.p, rng);
            }
            st.until_neighbor -= 1;
            if st.until_neighbor == 0 {
                let (x, y) = (i % self.width, i / self.width);
                let j = random_neighbor(x, y, self.width, self.height, rng);
                let k = rng.random_range(0..n);
                self.samples[j * n + k] = v;
                st.until_neighbor = geometric_gap(st.p, rng);
            }
        }
    }
}

/// Refresh state carried across rows. Each background pixel is picked
/// independently with probability `p` for each of the two updates; geometric
/// gaps between picks avoid drawing a random number per pixel.
struct Refresh {
    p: f64,
    until_self: u64,
    until_neighbor: u64,
}

impl Refresh {
    fn new<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Self {
        let until_self = geometric_gap(p, rng);
        let until_neighbor = geometric_gap(p, rng);
        Self {
            p,
            until_self,
            until_neighbor,
        }
    }
}

/// Number of Bernoulli(p) trials up to and including the first success.
fn geometric_gap<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random();
    let u = u.max(f64::MIN_POSITIVE);
    (u.ln() / (1.0 - p).ln()).floor() as u64 + 1
}

fn random_neighbor<R: Rng + ?Sized>(x: usize, y: usize, w: usize, h: usize, rng: &mut R) -> usize {
    loop {
        let (dx, dy) = NEIGHBORS[rng.random_range(0..8)];
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
            return ny as usize * w + nx as usize;
        }
    }
}

/// ORs `row` shifted by `d` bits in both directions into `dst`.
fn or_shifted(row: &[u64], d: usize, dst: &mut [u64]) {
    let n = row.len();
    let (q, s) = (d / 64, d % 64);
    for i in 0..n {
        // toward higher x: bit x comes from x - d
        if i >= q {
            let mut v = row[i - q] << s;
            if s > 0 && i > q {
                v |= row[i - q - 1] >> (64 - s);
            }
            dst[i] |= v;
        }
        // toward lower x: bit x comes from x + d
        if i + q < n {
            let mut v = row[i + q] >> s;
            if s > 0 && i + q + 1 < n {
                v |= row[i + q + 1] << (64 - s);
            }
            dst[i] |= v;
        }
    }
}

/// Dilation by a `kernel x kernel` square; the window is truncated at the borders.
pub fn dilate(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    if kernel.is_multiple_of(2) {
        return Err(Error::EvenKernel(kernel));
    }
    let (w, h) = mask.dims();
    let r = kernel / 2;
    if r == 0 || mask.is_empty() {
        return Ok(mask.clone());
    }

    // Rows as word arrays; horizontal pass ORs the row shifted by -r..=r.
    let wpr = w.div_ceil(64);
    let tail = if w % 64 == 0 { !0u64 } else { (1u64 << (w % 64)) - 1 };
    let mut row = vec![0u64; wpr];
    let mut horiz = vec![0u64; wpr * h];
    for y in 0..h {
        mask.row_bits(y, &mut row);
        let dst = &mut horiz[y * wpr..(y + 1) * wpr];
        if row.iter().all(|&v| v == 0) {
            continue;
        }
        for d in 0..=r {
            or_shifted(&row, d, dst);
        }
        dst[wpr - 1] &= tail;
    }

    // vertical pass: OR of the 2r + 1 rows around each row, clamped
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        row.iter_mut().for_each(|v| *v = 0);
        for src in horiz[y.saturating_sub(r) * wpr..(y + r + 1).min(h) * wpr].chunks_exact(wpr) {
            for (o, &v) in row.iter_mut().zip(src) {
                *o |= v;
            }
        }
        out.or_row_bits(y, &row);
    }
    Ok(out)
}

/// Owns a ViBe model and produces both masks for every frame.
#[derive(Clone, Debug)]
pub struct MotionDetector {
    model: VibeModel,
    kernel: usize,
}

impl MotionDetector {
    pub fn new<R: Rng + ?Sized>(first_frame: &Frame, params: VibeParams, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel));
        }
        Ok(Self {
            model: VibeModel::init(first_frame, params, rng)?,
            kernel,
        })
    }

    pub fn process<R: Rng + ?Sized>(&mut self, frame: &Frame, rng: &mut R) -> Result<MotionMasks> {
        let raw = self.model.segment_update(frame, rng)?;
        MotionMasks::from_raw(raw, self.kernel)
    }

    pub fn model(&self) -> &VibeModel {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CameraId;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gray(w: usize, h: usize, v: f32) -> Frame {
        Frame::filled(w, h, v, 0.0, CameraId::Student)
    }

    #[test]
    fn constant_frame_fills_bank_with_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = VibeModel::init(&gray(16, 12, 0.4), VibeParams::default(), &mut rng).unwrap();
        let expected = (0.4f32 * 255.0 + 0.5) as u8;
        for (x, y) in [(0, 0), (7, 5), (15, 11)] {
            assert!(m.bank(x, y).iter().all(|&s| s == expected));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let f = Frame::from_fn(20, 20, 0.0, CameraId::Student, |x, y| ((x * 7 + y * 13) % 50) as f32 / 50.0);
        let a = VibeModel::init(&f, VibeParams::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = VibeModel::init(&f, VibeParams::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = VibeModel::init(&f, VibeParams::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn tiny_frames_and_bad_params_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            VibeModel::init(&gray(2, 2, 0.5), VibeParams::default(), &mut rng),
            Err(Error::FrameTooSmall(2, 2))
        ));
        let bad = VibeParams {
            min_matches: 30,
            ..Default::default()
        };
        assert!(VibeModel::init(&gray(8, 8, 0.5), bad, &mut rng).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = VibeModel::init(&gray(8, 8, 0.5), VibeParams::default(), &mut rng).unwrap();
        assert!(matches!(
            m.segment_update(&gray(9, 8, 0.5), &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn repeated_identical_frame_is_background() {
        let f = Frame::from_fn(32, 32, 0.0, CameraId::Student, |x, y| 0.2 + (x + 2 * y) as f32 / 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = VibeModel::init(&f, VibeParams::default(), &mut rng).unwrap();
        let mut last = usize::MAX;
        for _ in 0..200 {
            last = m.segment_update(&f, &mut rng).unwrap().count();
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn static_noise_has_low_false_positive_density() {
        let (w, h) = (96, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0f32, 1.0 / 255.0).unwrap();
        let frame = |rng: &mut ChaCha8Rng| {
            Frame::from_fn(w, h, 0.0, CameraId::Student, |x, y| {
                0.3 + 0.2 * ((x / 8 + y / 8) % 2) as f32 + noise.sample(rng)
            })
        };
        let f0 = frame(&mut rng);
        let mut m = VibeModel::init(&f0, VibeParams::default(), &mut rng).unwrap();
        for _ in 0..50 {
            let f = frame(&mut rng);
            m.segment_update(&f, &mut rng).unwrap();
        }
        let mut fg = 0;
        for _ in 0..20 {
            let f = frame(&mut rng);
            fg += m.segment_update(&f, &mut rng).unwrap().count();
        }
        assert!((fg as f64) / (20.0 * (w * h) as f64) < 1e-3);
    }

    #[test]
    fn bright_square_is_detected() {
        let (w, h) = (64, 64);
        let bg = gray(w, h, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = VibeModel::init(&bg, VibeParams::default(), &mut rng).unwrap();
        for _ in 0..10 {
            m.segment_update(&bg, &mut rng).unwrap();
        }
        let sq = Frame::from_fn(w, h, 0.0, CameraId::Student, |x, y| {
            if (20..40).contains(&x) && (20..40).contains(&y) {
                0.8
            } else {
                0.3
            }
        });
        let raw = m.segment_update(&sq, &mut rng).unwrap();
        // oracle: every pixel whose jump exceeds the radius
        let mut hit = 0;
        for y in 20..40 {
            for x in 20..40 {
                hit += raw.get(x, y) as usize;
            }
        }
        assert!(hit as f64 >= 0.95 * 400.0);
        assert_eq!(raw.count(), hit);
    }

    #[test]
    fn dilation_spot_cases() {
        let mut m = BinaryMask::new(40, 40);
        m.set(20, 20, true);
        let d = dilate(&m, 11).unwrap();
        assert_eq!(d.count(), 121);
        assert!(d.get(15, 15) && d.get(25, 25) && !d.get(26, 20));

        let mut corner = BinaryMask::new(40, 40);
        corner.set(0, 0, true);
        assert_eq!(dilate(&corner, 11).unwrap().count(), 36);

        assert!(dilate(&BinaryMask::new(40, 40), 11).unwrap().is_empty());
        assert!(matches!(dilate(&m, 10), Err(Error::EvenKernel(10))));
        assert_eq!(dilate(&m, 1).unwrap(), m);
    }

    /// Brute-force dilation with the truncated square window.
    fn dilate_oracle(m: &BinaryMask, k: usize) -> BinaryMask {
        let r = (k / 2) as isize;
        let (w, h) = m.dims();
        BinaryMask::from_fn(w, h, |x, y| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && m.get(nx as usize, ny as usize) {
                        return true;
                    }
                }
            }
            false
        })
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (3usize..30, 3usize..30, prop::collection::vec(any::<u8>(), 900)).prop_map(|(w, h, bytes)| {
            let b: Vec<u8> = bytes[..w * h].iter().map(|v| (*v < 20) as u8).collect();
            BinaryMask::from_bytes(w, h, &b).unwrap()
        })
    }

    proptest! {
        #[test]
        fn dilation_matches_oracle_and_is_extensive(m in arb_mask(), k in prop::sample::select(vec![1usize, 3, 5, 11])) {
            let d = dilate(&m, k).unwrap();
            prop_assert_eq!(&d, &dilate_oracle(&m, k));
            prop_assert!(m.is_subset_of(&d));
        }

        #[test]
        fn wide_rows_match_oracle(
            (w, h, seeds) in (60usize..200, 3usize..12).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(0..w * h, 0..8))),
            k in prop::sample::select(vec![3usize, 11, 65, 129, 131]),
        ) {
            let mut m = BinaryMask::new(w, h);
            for i in seeds {
                m.set_index(i, true);
            }
            prop_assert_eq!(dilate(&m, k).unwrap(), dilate_oracle(&m, k));
        }

        #[test]
        fn dilation_is_monotone(m in arb_mask(), drop in 0usize..900) {
            // a subset: clear one of the true pixels
            let mut sub = m.clone();
            if let Some(i) = m.iter_true().nth(drop % m.count().max(1)) {
                sub.set_index(i, false);
            }
            prop_assert!(dilate(&sub, 5).unwrap().is_subset_of(&dilate(&m, 5).unwrap()));
        }
    }
}
