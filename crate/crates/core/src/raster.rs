//! RGB rasters, binary masks, and the exact mask arithmetic used for
//! localization scoring and fidelity accounting.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RasterError {
    #[error("shape mismatch: {left_w}x{left_h} vs {right_w}x{right_h}")]
    Shape {
        left_w: u32,
        left_h: u32,
        right_w: u32,
        right_h: u32,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("codec error: {0}")]
    Codec(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(RasterError::Shape {
            left_w: a.0,
            left_h: a.1,
            right_w: b.0,
            right_h: b.1,
        });
    }
    Ok(())
}

/// Row-major 8-bit RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(RasterError::Argument(format!(
                "pixel buffer holds {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Uniformly colored image.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(width, height, pixels)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel by linear row-major index.
    pub fn at(&self, idx: usize) -> [u8; 3] {
        let i = idx * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Copy with every pixel under `mask` replaced by `rgb`.
    pub fn fill_masked(&self, mask: &BinaryMask, rgb: [u8; 3]) -> Result<Self> {
        check_dims(self.dims(), mask.dims())?;
        let mut out = self.clone();
        for (idx, _) in mask.bits().iter().enumerate().filter(|(_, b)| **b) {
            out.pixels[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
        }
        Ok(out)
    }
}

/// Row-major boolean raster aligned to an image.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::Argument(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if bits.len() != width as usize * height as usize {
            return Err(RasterError::Argument(format!(
                "mask holds {} elements, expected {}",
                bits.len(),
                width as usize * height as usize
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![false; width as usize * height as usize])
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![true; width as usize * height as usize])
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    /// Axis-aligned filled rectangle `[x0, x1) x [y0, y1)`, clipped to the raster.
    pub fn rect(width: u32, height: u32, x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        Self::from_fn(width, height, |x, y| {
            let (x, y) = (x as i64, y as i64);
            x >= x0 && x < x1 && y >= y0 && y < y1
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a && b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a && !b)
    }

    /// `self` ⊆ `other`.
    pub fn is_subset_of(&self, other: &Self) -> Result<bool> {
        check_dims(self.dims(), other.dims())?;
        Ok(self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b))
    }

    /// Tight bounding box `(x0, y0, x1, y1)`, inclusive, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bbox
    }

    fn zip_with(&self, other: &Self, op: impl Fn(bool, bool) -> bool) -> Result<Self> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| op(*a, *b))
                .collect(),
        })
    }

    /// Chebyshev dilation: a square structuring element of side `2r + 1`,
    /// applied as a row pass followed by a column pass.
    pub fn dilate(&self, radius: u32) -> Self {
        if radius == 0 || self.is_empty() {
            return self.clone();
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        let mut rows = vec![false; w * h];
        for y in 0..h {
            let row = &self.bits[y * w..(y + 1) * w];
            // running count of set pixels in the window [x - r, x + r]
            let prefix: Vec<usize> = std::iter::once(0)
                .chain(row.iter().scan(0usize, |acc, b| {
                    *acc += *b as usize;
                    Some(*acc)
                }))
                .collect();
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                rows[y * w + x] = prefix[hi] > prefix[lo];
            }
        }
        let mut out = vec![false; w * h];
        for x in 0..w {
            let mut prefix = Vec::with_capacity(h + 1);
            prefix.push(0usize);
            for y in 0..h {
                prefix.push(prefix[y] + rows[y * w + x] as usize);
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r + 1).min(h);
                out[y * w + x] = prefix[hi] > prefix[lo];
            }
        }
        Self {
            width: self.width,
            height: self.height,
            bits: out,
        }
    }
}

/// Per-element OR of two co-dimensional masks.
pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.union(b)
}

/// Chebyshev dilation by `radius` pixels; radius 0 is the identity.
pub fn mask_dilate(m: &BinaryMask, radius: i64) -> Result<BinaryMask> {
    if radius < 0 {
        return Err(RasterError::Argument(format!(
            "dilation radius must be non-negative, got {radius}"
        )));
    }
    let radius = u32::try_from(radius)
        .map_err(|_| RasterError::Argument(format!("dilation radius {radius} too large")))?;
    Ok(m.dilate(radius))
}

/// Intersection over union. Two empty masks agree perfectly (1.0).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        uni += (*x || *y) as usize;
    }
    if uni == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / uni as f64)
}

/// Fraction of pixels outside `edited_region` whose RGB triples are
/// bit-identical in `before` and `after`. 1.0 when nothing lies outside.
pub fn outside_mask_identical_ratio(
    before: &RasterImage,
    after: &RasterImage,
    edited_region: &BinaryMask,
) -> Result<f64> {
    check_dims(before.dims(), after.dims())?;
    check_dims(before.dims(), edited_region.dims())?;
    let (mut outside, mut same) = (0usize, 0usize);
    for (idx, inside) in edited_region.bits.iter().enumerate() {
        if *inside {
            continue;
        }
        outside += 1;
        let i = idx * 3;
        if before.pixels[i..i + 3] == after.pixels[i..i + 3] {
            same += 1;
        }
    }
    if outside == 0 {
        return Ok(1.0);
    }
    Ok(same as f64 / outside as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_str(w: u32, rows: &[&str]) -> BinaryMask {
        let bits = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        BinaryMask::new(w, rows.len() as u32, bits).unwrap()
    }

    /// Dilation by direct neighborhood scan, independent of the two-pass path.
    fn dilate_brute(m: &BinaryMask, r: i64) -> BinaryMask {
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            let (x, y) = (x as i64, y as i64);
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0
                        && ny >= 0
                        && nx < m.width() as i64
                        && ny < m.height() as i64
                        && m.get(nx as u32, ny as u32)
                })
            })
        })
        .unwrap()
    }

    fn arb_mask(w: u32, h: u32) -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec(any::<bool>(), (w * h) as usize)
            .prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
    }

    #[test]
    fn image_rejects_bad_buffers() {
        assert!(RasterImage::new(0, 2, vec![]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 11]).is_err());
        assert!(RasterImage::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn union_identity_and_idempotence() {
        let m = mask_from_str(3, &["#..", ".#.", "..#"]);
        let e = BinaryMask::empty(3, 3).unwrap();
        assert_eq!(mask_union(&m, &e).unwrap(), m);
        assert_eq!(mask_union(&m, &m).unwrap(), m);
    }

    #[test]
    fn union_of_disjoint_pixels_has_area_two() {
        let a = mask_from_str(3, &["#..", "...", "..."]);
        let b = mask_from_str(3, &["...", "...", "..#"]);
        let u = mask_union(&a, &b).unwrap();
        let brute = (0..3)
            .flat_map(|y| (0..3).map(move |x| (x, y)))
            .filter(|&(x, y)| a.get(x, y) || b.get(x, y))
            .count();
        assert_eq!(brute, 2);
        assert_eq!(u.area(), brute);
    }

    #[test]
    fn union_rejects_mismatched_shapes() {
        let a = BinaryMask::empty(3, 3).unwrap();
        let b = BinaryMask::empty(3, 4).unwrap();
        assert!(matches!(mask_union(&a, &b), Err(RasterError::Shape { .. })));
    }

    #[test]
    fn dilate_center_pixel_gives_three_by_three_block() {
        let m = mask_from_str(5, &[".....", ".....", "..#..", ".....", "....."]);
        let expected = mask_from_str(5, &[".....", ".###.", ".###.", ".###.", "....."]);
        assert_eq!(dilate_brute(&m, 1), expected);
        assert_eq!(mask_dilate(&m, 1).unwrap(), expected);
    }

    #[test]
    fn dilate_zero_identity_full_saturation_negative_error() {
        let m = mask_from_str(4, &["#...", "....", "..#."]);
        assert_eq!(mask_dilate(&m, 0).unwrap(), m);
        let full = BinaryMask::full(4, 3).unwrap();
        assert_eq!(mask_dilate(&full, 3).unwrap(), full);
        assert!(matches!(mask_dilate(&m, -1), Err(RasterError::Argument(_))));
    }

    #[test]
    fn iou_examples() {
        let m = mask_from_str(4, &["##..", "...."]);
        assert_eq!(mask_iou(&m, &m).unwrap(), 1.0);
        let d = mask_from_str(4, &["....", "..##"]);
        assert_eq!(mask_iou(&m, &d).unwrap(), 0.0);
        // 3x1 bar and 2x1 bar overlapping in one pixel: |∩| = 1, |∪| = 4
        let a = mask_from_str(5, &["###.."]);
        let b = mask_from_str(5, &["..##."]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.25);
        let e = BinaryMask::empty(2, 2).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn outside_ratio_examples() {
        let before = RasterImage::from_fn(4, 4, |x, y| [x as u8 * 10, y as u8 * 10, 7]).unwrap();
        let m = mask_from_str(4, &["....", ".##.", ".##.", "...."]);
        assert_eq!(outside_mask_identical_ratio(&before, &before, &m).unwrap(), 1.0);

        let recolored = before.fill_masked(&m, [255, 0, 255]).unwrap();
        assert_eq!(outside_mask_identical_ratio(&before, &recolored, &m).unwrap(), 1.0);

        // uniform repaint with an empty mask: only pixels that already had the
        // repaint color survive
        let repaint = [10, 20, 7];
        let after = RasterImage::filled(4, 4, repaint).unwrap();
        let empty = BinaryMask::empty(4, 4).unwrap();
        let coincident = (0..16).filter(|&i| before.at(i) == repaint).count();
        assert_eq!(coincident, 1);
        assert_eq!(
            outside_mask_identical_ratio(&before, &after, &empty).unwrap(),
            coincident as f64 / 16.0
        );

        let full = BinaryMask::full(4, 4).unwrap();
        assert_eq!(outside_mask_identical_ratio(&before, &after, &full).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn union_laws(a in arb_mask(6, 5), b in arb_mask(6, 5), c in arb_mask(6, 5)) {
            prop_assert_eq!(mask_union(&a, &b).unwrap(), mask_union(&b, &a).unwrap());
            prop_assert_eq!(
                mask_union(&mask_union(&a, &b).unwrap(), &c).unwrap(),
                mask_union(&a, &mask_union(&b, &c).unwrap()).unwrap()
            );
            prop_assert_eq!(mask_union(&a, &a).unwrap(), a);
        }

        #[test]
        fn dilation_matches_brute_force_and_is_monotone(m in arb_mask(9, 7), r1 in 0i64..4, r2 in 0i64..4) {
            let (lo, hi) = (r1.min(r2), r1.max(r2));
            let d_lo = mask_dilate(&m, lo).unwrap();
            let d_hi = mask_dilate(&m, hi).unwrap();
            prop_assert_eq!(&d_lo, &dilate_brute(&m, lo));
            prop_assert!(m.is_subset_of(&d_lo).unwrap());
            prop_assert!(d_lo.is_subset_of(&d_hi).unwrap());
        }

        #[test]
        fn iou_symmetric_and_one_iff_equal(a in arb_mask(5, 5), b in arb_mask(5, 5)) {
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(ab == 1.0, a == b);
            }
        }

        #[test]
        fn identical_images_have_unit_ratio(px in proptest::collection::vec(any::<u8>(), 5 * 4 * 3), m in arb_mask(5, 4)) {
            let img = RasterImage::new(5, 4, px).unwrap();
            prop_assert_eq!(outside_mask_identical_ratio(&img, &img, &m).unwrap(), 1.0);
        }
    }
}
