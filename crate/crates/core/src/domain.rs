//! Images, masks and the two kinds of semantic labels, plus the pure raster
//! operations shared by every stage of the pipeline.

use semfill_nn::{Scalar, Tensor};

use crate::error::{rejected, Result};

/// RGB raster with values in `[0, 1]`, stored channel-major (`3 x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Validates range and shape. Side lengths must be multiples of 4.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
            return Err(rejected(format!(
                "image sides must be positive multiples of 4, got {height}x{width}"
            )));
        }
        if pixels.len() != 3 * height * width {
            return Err(rejected(format!(
                "{height}x{width} image needs {} values, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(rejected(format!(
                "pixel value {} at {i} outside [0,1]",
                pixels[i]
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_size(&self, other_h: usize, other_w: usize) -> bool {
        self.height == other_h && self.width == other_w
    }

    /// Per-pixel channel mean, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| {
                (self.pixels[i] as f64
                    + self.pixels[plane + i] as f64
                    + self.pixels[2 * plane + i] as f64)
                    / 3.0
            })
            .collect()
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Binary hole mask: exactly the pixels of `rect` are missing (1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    rect: Rect,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if rect.top + rect.height > height || rect.left + rect.width > width {
            return Err(rejected(format!(
                "mask rectangle {rect:?} not inside {height}x{width} canvas"
            )));
        }
        let bits = (0..height * width)
            .map(|i| rect.contains(i / width, i % width) as u8)
            .collect();
        Ok(Self {
            height,
            width,
            rect,
            bits,
        })
    }

    /// Mask with no missing pixels.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            rect: Rect {
                top: 0,
                left: 0,
                height: 0,
                width: 0,
            },
            bits: vec![0; height * width],
        }
    }

    /// Rebuilds a mask from a bit grid, which must hold a single filled
    /// rectangle (or nothing).
    pub fn from_bits(height: usize, width: usize, bits: &[u8]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(rejected("mask bit count does not match its size"));
        }
        let on: Vec<usize> = (0..bits.len()).filter(|&i| bits[i] != 0).collect();
        let Some(&first) = on.first() else {
            return Ok(Self::empty(height, width));
        };
        let (mut top, mut left, mut bottom, mut right) = (first / width, first % width, 0, 0);
        for &i in &on {
            let (y, x) = (i / width, i % width);
            top = top.min(y);
            left = left.min(x);
            bottom = bottom.max(y);
            right = right.max(x);
        }
        let rect = Rect {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        };
        if rect.area() != on.len() {
            return Err(rejected("mask is not a single filled rectangle"));
        }
        Self::new(height, width, rect)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn rect(&self) -> Rect {
        self.rect
    }
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn missing_count(&self) -> usize {
        self.rect.area()
    }
}

/// Per-attribute probabilities (or exact bits for ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    values: Vec<f32>,
}

impl AttributeVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(rejected(format!("attribute value {v} outside [0,1]")));
        }
        Ok(Self { values })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        Self {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Entries above one half.
    pub fn bits(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.5).collect()
    }
}

/// Per-pixel class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(rejected(format!(
                "{height}x{width} map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(rejected(format!("class count {classes} out of range")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(rejected(format!(
                "label {l} not below class count {classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// Channel-major `channels x height x width` grid of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// All channel values at one spatial position.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(y, x, c)).collect()
    }
}

/// Zero-fills the missing region.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    check_mask(image, mask)?;
    let mut out = image.clone();
    let plane = image.height * image.width;
    for c in 0..Image::CHANNELS {
        for (v, &b) in out.pixels[c * plane..(c + 1) * plane]
            .iter_mut()
            .zip(&mask.bits)
        {
            if b != 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// `restored` inside the hole, `input_corrupted` everywhere else.
pub fn composite(restored: &Image, input_corrupted: &Image, mask: &Mask) -> Result<Image> {
    check_mask(restored, mask)?;
    check_mask(input_corrupted, mask)?;
    let mut out = input_corrupted.clone();
    let plane = out.height * out.width;
    for c in 0..Image::CHANNELS {
        let range = c * plane..(c + 1) * plane;
        for ((v, &r), &b) in out.pixels[range.clone()]
            .iter_mut()
            .zip(&restored.pixels[range])
            .zip(&mask.bits)
        {
            if b != 0 {
                *v = r;
            }
        }
    }
    Ok(out)
}

fn check_mask(image: &Image, mask: &Mask) -> Result<()> {
    if !image.same_size(mask.height, mask.width) {
        return Err(rejected(format!(
            "image is {}x{} but mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// One-hot expansion of a label map into `classes` channels.
pub fn one_hot(seg: &SegmentationMap, classes: usize) -> Result<Grid> {
    if let Some(l) = seg.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(rejected(format!(
            "label {l} not below class count {classes}"
        )));
    }
    let plane = seg.height * seg.width;
    let mut data = vec![0.0; classes * plane];
    for (i, &l) in seg.labels.iter().enumerate() {
        data[l as usize * plane + i] = 1.0;
    }
    Ok(Grid {
        channels: classes,
        height: seg.height,
        width: seg.width,
        data,
    })
}

/// Tiles `v` over an `m x m` grid, one channel per attribute.
pub fn spatial_replicate(v: &AttributeVector, m: usize) -> Result<Grid> {
    if m == 0 {
        return Err(rejected("replication side must be at least 1"));
    }
    let plane = m * m;
    let mut data = Vec::with_capacity(v.len() * plane);
    for &a in &v.values {
        data.extend(std::iter::repeat_n(a, plane));
    }
    Ok(Grid {
        channels: v.len(),
        height: m,
        width: m,
        data,
    })
}

/// Stacks images into an `N x 3 x H x W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| rejected("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if !img.same_size(h, w) {
            return Err(rejected(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        data.extend(img.pixels.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::from_vec([images.len(), 3, h, w], data)?)
}

/// Stacks equally shaped grids into an `N x C x H x W` tensor.
pub fn grids_to_tensor<T: Scalar>(grids: &[&Grid]) -> Result<Tensor<T>> {
    let first = grids.first().ok_or_else(|| rejected("empty grid batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(grids.len() * c * h * w);
    for g in grids {
        if (g.channels, g.height, g.width) != (c, h, w) {
            return Err(rejected("batch mixes grid shapes"));
        }
        data.extend(g.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::from_vec([grids.len(), c, h, w], data)?)
}

/// Splits an `N x 3 x H x W` tensor back into images, clamping to `[0, 1]`.
pub fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
    if t.c() != 3 {
        return Err(rejected(format!("expected 3 channels, got {}", t.c())));
    }
    (0..t.n())
        .map(|i| {
            let px = t
                .sample(i)
                .iter()
                .map(|v| (v.as_f64() as f32).clamp(0.0, 1.0))
                .collect();
            Image::new(t.h(), t.w(), px)
        })
        .collect()
}
