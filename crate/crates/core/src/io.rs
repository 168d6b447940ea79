//! PNG and PGM persistence for images, masks and label maps.

use std::fs;
use std::path::Path;

use crate::domain::{Image, Mask, SegmentationMap};
use crate::error::{io_err, Error, Result};

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([
            to_u8(image.get(y, x, 0)),
            to_u8(image.get(y, x, 1)),
            to_u8(image.get(y, x, 2)),
        ]);
    }
    buf.save(path)
        .map_err(|e| parse_err(path, format!("png encode: {e}")))
}

/// Loads an 8-bit image, mapping each channel value `v` to `v / 255`.
pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| parse_err(path, format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, pixels)
}

/// Loads a mask from a grayscale PNG; any nonzero pixel is missing.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| parse_err(path, format!("mask decode: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits: Vec<u8> = img.pixels().map(|p| (p[0] != 0) as u8).collect();
    Mask::from_bits(h, w, &bits)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.bits().iter().map(|&b| b * 255).collect(),
    )
    .expect("buffer size matches mask");
    img.save(path)
        .map_err(|e| parse_err(path, format!("png encode: {e}")))
}

/// Binary PGM (`P5`, maxval 255), one label per byte.
pub fn save_pgm(seg: &SegmentationMap, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", seg.width(), seg.height()).into_bytes();
    bytes.extend_from_slice(seg.labels());
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_pgm(path: &Path, classes: usize) -> Result<SegmentationMap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(parse_err(
            path,
            format!("expected P5 magic, got {}", fields[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, format!("bad PGM header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval > 255 {
        return Err(parse_err(path, "16-bit PGM not supported"));
    }
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| parse_err(path, "truncated PGM data"))?;
    SegmentationMap::new(h, w, classes, data.to_vec())
}
