//! Binary component masks: IoU weights, bounding boxes, mask-centred part
//! crops and the shared-offset training crop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// H×W boolean grid; `true` marks object pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Inclusive pixel bounds of a mask's support.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    /// Centre with floor rounding.
    pub fn center(&self) -> (usize, usize) {
        (
            (self.row_min + self.row_max) / 2,
            (self.col_min + self.col_max) / 2,
        )
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}×{width} mask needs {} bits, got {}", height * width, bits.len()),
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        BinaryMask {
            height,
            width,
            bits,
        }
    }

    /// Thresholds an 8-bit grayscale raster: values ≥ 128 are object pixels.
    pub fn from_gray(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&p| p >= 128).collect())
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other, "mask union")?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    /// The `out_h × out_w` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<BinaryMask> {
        if top + out_h > self.height || left + out_w > self.width {
            return Err(Error::shape(
                "mask window",
                format!(
                    "{out_h}×{out_w} at ({top},{left}) exceeds {}×{}",
                    self.height, self.width
                ),
            ));
        }
        Ok(BinaryMask::from_fn(out_h, out_w, |r, c| {
            self.get(top + r, left + c)
        }))
    }
}

/// Intersection over union; two empty masks give 0.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b, "iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Tightest box around the mask's true pixels, or `None` if it has none.
pub fn bounding_box(m: &BinaryMask) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for r in 0..m.height {
        for c in 0..m.width {
            if !m.get(r, c) {
                continue;
            }
            bb = Some(match bb {
                None => BoundingBox {
                    row_min: r,
                    col_min: c,
                    row_max: r,
                    col_max: c,
                },
                Some(b) => BoundingBox {
                    row_min: b.row_min.min(r),
                    col_min: b.col_min.min(c),
                    row_max: b.row_max.max(r),
                    col_max: b.col_max.max(c),
                },
            });
        }
    }
    bb
}

/// Copies the `[C, out_h, out_w]` window at `(top, left)` out of a `[C, H, W]` image.
pub fn crop_window<T: Scalar>(
    image: &Tensor<T>,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image, "crop")?;
    if top + out_h > h || left + out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "crop",
            format!("{out_h}×{out_w} at ({top},{left}) exceeds {h}×{w}"),
        ));
    }
    let src = image.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for r in 0..out_h {
            let start = ch * h * w + (top + r) * w + left;
            data.extend_from_slice(&src[start..start + out_w]);
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

fn image_dims<T: Scalar>(image: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("image must be [C,H,W], got {s:?}"))),
    }
}

/// Top-left corner of an `out`-sized window centred on `center` and shifted
/// (never shrunk) to stay inside a `size` extent.
fn centred_start(center: usize, out: usize, size: usize) -> usize {
    center.saturating_sub(out / 2).min(size - out)
}

/// Crops `out` pixels around the centre of the mask's bounding box. An empty
/// mask yields an all-zero crop of the requested size.
pub fn crop_part<T: Scalar>(
    image: &Tensor<T>,
    mask: &BinaryMask,
    out: (usize, usize),
) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image, "crop_part")?;
    let (oh, ow) = out;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::shape(
            "crop_part",
            format!("crop {oh}×{ow} does not fit image {h}×{w}"),
        ));
    }
    if mask.dims() != (h, w) {
        return Err(Error::shape(
            "crop_part",
            format!("mask {:?} vs image {h}×{w}", mask.dims()),
        ));
    }
    match bounding_box(mask) {
        None => Ok(Tensor::zeros(&[c, oh, ow])),
        Some(bb) => {
            let (cr, cc) = bb.center();
            crop_window(image, centred_start(cr, oh, h), centred_start(cc, ow, w), oh, ow)
        }
    }
}

/// Source and output sizes of the training-time crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub source: (usize, usize),
    pub out: (usize, usize),
}

impl Default for CropWindow {
    fn default() -> Self {
        CropWindow {
            source: (144, 144),
            out: (128, 128),
        }
    }
}

impl CropWindow {
    pub fn max_offset(&self) -> (usize, usize) {
        (self.source.0 - self.out.0, self.source.1 - self.out.1)
    }

    /// Deterministic evaluation offset.
    pub fn center_offset(&self) -> (usize, usize) {
        let (dr, dc) = self.max_offset();
        (dr / 2, dc / 2)
    }

    /// Uniform offset in `[0, source − out]` on each axis.
    pub fn random_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let (dr, dc) = self.max_offset();
        (rng.random_range(0..=dr), rng.random_range(0..=dc))
    }

    /// Applies one offset to the image and every mask.
    pub fn apply<T: Scalar>(
        &self,
        image: &Tensor<T>,
        masks: &[BinaryMask],
        offset: (usize, usize),
    ) -> Result<(Tensor<T>, Vec<BinaryMask>)> {
        let (_, h, w) = image_dims(image, "random_crop")?;
        if (h, w) != self.source {
            return Err(Error::shape(
                "random_crop",
                format!("expected {:?} input, got {h}×{w}", self.source),
            ));
        }
        let (oh, ow) = self.out;
        let cropped = crop_window(image, offset.0, offset.1, oh, ow)?;
        let shifted = masks
            .iter()
            .map(|m| m.window(offset.0, offset.1, oh, ow))
            .collect::<Result<Vec<_>>>()?;
        Ok((cropped, shifted))
    }
}

/// Random training crop sharing one offset across the image and its masks.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    window: &CropWindow,
    image: &Tensor<T>,
    masks: &[BinaryMask],
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<BinaryMask>, (usize, usize))> {
    let offset = window.random_offset(rng);
    let (img, m) = window.apply(image, masks, offset)?;
    Ok((img, m, offset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(h: usize, w: usize, r0: usize, r1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, _| (r0..=r1).contains(&r))
    }

    #[test]
    fn iou_examples() {
        let a = rows(16, 16, 0, 7);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &rows(16, 16, 8, 15)).unwrap(), 0.0);
        let b = rows(16, 16, 4, 11);
        assert!((iou(&a, &b).unwrap() - 64.0 / 192.0).abs() < 1e-15);
        let e = BinaryMask::empty(16, 16);
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::empty(8, 16)).is_err());
    }

    #[test]
    fn bounding_box_examples() {
        let mut m = BinaryMask::empty(12, 12);
        assert_eq!(bounding_box(&m), None);
        m.set(3, 5, true);
        let bb = bounding_box(&m).unwrap();
        assert_eq!((bb.row_min, bb.col_min, bb.row_max, bb.col_max), (3, 5, 3, 5));
        let mut m = BinaryMask::empty(12, 12);
        m.set(2, 2, true);
        m.set(9, 4, true);
        let bb = bounding_box(&m).unwrap();
        assert_eq!((bb.row_min, bb.col_min, bb.row_max, bb.col_max), (2, 2, 9, 4));
        let full = BinaryMask::from_fn(5, 7, |_, _| true);
        let bb = bounding_box(&full).unwrap();
        assert_eq!((bb.row_min, bb.col_min, bb.row_max, bb.col_max), (0, 0, 4, 6));
    }

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[1, h, w], |i| i as f32)
    }

    #[test]
    fn crop_part_whole_image_is_identity() {
        let img = ramp(8, 8);
        let full = BinaryMask::from_fn(8, 8, |_, _| true);
        assert_eq!(crop_part(&img, &full, (8, 8)).unwrap(), img);
    }

    #[test]
    fn crop_part_empty_mask_gives_zeros() {
        let img = ramp(8, 8);
        let out = crop_part(&img, &BinaryMask::empty(8, 8), (3, 5)).unwrap();
        assert_eq!(out.shape(), &[1, 3, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_part_floor_centre() {
        let img = ramp(8, 8);
        let m = BinaryMask::from_fn(8, 8, |r, c| (2..=3).contains(&r) && (2..=3).contains(&c));
        let out = crop_part(&img, &m, (4, 4)).unwrap();
        assert_eq!(out, crop_window(&img, 0, 0, 4, 4).unwrap());
        assert_eq!(out.data()[..4], [0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn crop_part_shifts_at_border() {
        let img = ramp(8, 8);
        let mut m = BinaryMask::empty(8, 8);
        m.set(7, 7, true);
        let out = crop_part(&img, &m, (4, 4)).unwrap();
        assert_eq!(out, crop_window(&img, 4, 4, 4, 4).unwrap());
        assert!(crop_part(&img, &m, (9, 4)).is_err());
    }

    #[test]
    fn random_crop_offsets() {
        let win = CropWindow::default();
        let img = Tensor::<f32>::zeros(&[1, 144, 144]);
        let mut m = BinaryMask::empty(144, 144);
        m.set(143, 143, true);
        let (out, masks) = win.apply(&img, &[m.clone()], (16, 16)).unwrap();
        assert_eq!(out.shape(), &[1, 128, 128]);
        assert!(masks[0].get(127, 127));
        let (_, masks) = win.apply(&img, &[m], (0, 0)).unwrap();
        assert!(masks[0].is_empty());
        assert_eq!(win.center_offset(), (8, 8));
        assert!(win.apply(&Tensor::<f32>::zeros(&[1, 128, 128]), &[], (0, 0)).is_err());

        let offsets = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| win.random_offset(&mut rng)).collect::<Vec<_>>()
        };
        let a = offsets(3);
        assert_eq!(a, offsets(3));
        assert!(a.iter().all(|&(r, c)| r <= 16 && c <= 16));
    }
}
