//! Pixel-level restoration metrics in the [0, 1] intensity domain.

use serde::{Serialize, Serializer};

use crate::domain::{composite, Image, Mask, Rect};
use crate::error::{rejected, Result};

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(z: &Image, y: &Image) -> Result<()> {
    if z.height() != y.height() || z.width() != y.width() {
        return Err(rejected(format!(
            "metric operands differ in size: {}x{} vs {}x{}",
            z.height(),
            z.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn mean_l1(z: &Image, y: &Image) -> Result<f64> {
    same_shape(z, y)?;
    let n = z.pixels().len() as f64;
    Ok(z.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n)
}

/// Mean squared difference over all pixels and channels.
pub fn mean_l2(z: &Image, y: &Image) -> Result<f64> {
    same_shape(z, y)?;
    let n = z.pixels().len() as f64;
    Ok(z.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// PSNR in dB for a given mean squared error; infinite when it is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// `10 log10(1 / MSE)` with peak value 1.
pub fn psnr(z: &Image, y: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mean_l2(z, y)?))
}

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y, x);
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + row;
            }
        }
        Self { w, data }
    }

    fn window(&self, y: usize, x: usize, k: usize) -> f64 {
        let s = self.w + 1;
        self.data[(y + k) * s + x + k] - self.data[y * s + x + k] - self.data[(y + k) * s + x]
            + self.data[y * s + x]
    }
}

/// Mean local SSIM of the channel-mean grayscale images over every 8x8
/// window (stride 1, uniform weights, population statistics).
pub fn ssim(z: &Image, y: &Image) -> Result<f64> {
    same_shape(z, y)?;
    ssim_gray(&z.grayscale(), &y.grayscale(), z.height(), z.width())
}

/// SSIM on row-major grayscale planes.
pub fn ssim_gray(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(rejected(format!(
            "image {h}x{w} is smaller than the {k}x{k} SSIM window"
        )));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(rejected("grayscale plane length does not match its size"));
    }
    let at = |p: &[f64], y: usize, x: usize| p[y * w + x];
    let sa = Integral::new(h, w, |y, x| at(a, y, x));
    let sb = Integral::new(h, w, |y, x| at(b, y, x));
    let saa = Integral::new(h, w, |y, x| at(a, y, x) * at(a, y, x));
    let sbb = Integral::new(h, w, |y, x| at(b, y, x) * at(b, y, x));
    let sab = Integral::new(h, w, |y, x| at(a, y, x) * at(b, y, x));
    let n = (k * k) as f64;
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = sa.window(y, x, k) / n;
            let mb = sb.window(y, x, k) / n;
            let va = saa.window(y, x, k) / n - ma * ma;
            let vb = sbb.window(y, x, k) / n - mb * mb;
            let cov = sab.window(y, x, k) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Channel values inside `r` (channel-major) and the channel-mean plane.
fn crop(img: &Image, r: Rect) -> (Vec<f64>, Vec<f64>) {
    let mut px = Vec::with_capacity(3 * r.area());
    for c in 0..3 {
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                px.push(img.get(y, x, c) as f64);
            }
        }
    }
    let plane = r.area();
    let gray = (0..plane)
        .map(|i| (px[i] + px[plane + i] + px[2 * plane + i]) / 3.0)
        .collect();
    (px, gray)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Generator output as is, over the full image.
    Raw,
    /// Output inside the hole, original context outside, full image.
    Composited,
    /// Pixels inside the hole only.
    Hole,
    /// The masked input itself, as a do-nothing baseline.
    Masked,
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

/// All four metrics for one variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub variant: Variant,
    pub mean_l1: f64,
    pub mean_l2: f64,
    /// dB; `"inf"` in JSON for identical images.
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(variant: Variant, z: &Image, y: &Image) -> Result<Self> {
        let mse = mean_l2(z, y)?;
        Ok(Self {
            variant,
            mean_l1: mean_l1(z, y)?,
            mean_l2: mse,
            psnr: psnr_from_mse(mse),
            ssim: ssim(z, y)?,
        })
    }

    /// Element-wise mean over reports of the same variant.
    pub fn mean(variant: Variant, rows: &[MetricReport]) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            variant,
            mean_l1: avg(|r| r.mean_l1),
            mean_l2: avg(|r| r.mean_l2),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
        }
    }
}

/// Metric set for one restored image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PixelEvaluation {
    pub raw: MetricReport,
    pub composited: MetricReport,
    /// Inside the hole; SSIM is computed on the hole crop when it is at
    /// least one window wide, NaN otherwise.
    pub hole: MetricReport,
    pub masked: MetricReport,
}

/// Scores generator output `z` for target `y` and masked input `x`.
pub fn evaluate(z: &Image, x: &Image, y: &Image, mask: &Mask) -> Result<PixelEvaluation> {
    let comp = composite(z, x, mask)?;
    let r = mask.rect();
    let ((zp, zg), (yp, yg)) = (crop(&comp, r), crop(y, r));
    let n = zp.len().max(1) as f64;
    let hole_l1 = zp.iter().zip(&yp).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let hole_mse = zp
        .iter()
        .zip(&yp)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let hole = MetricReport {
        variant: Variant::Hole,
        mean_l1: hole_l1,
        mean_l2: hole_mse,
        psnr: psnr_from_mse(hole_mse),
        ssim: if r.height >= SSIM_WINDOW && r.width >= SSIM_WINDOW {
            ssim_gray(&zg, &yg, r.height, r.width)?
        } else {
            f64::NAN
        },
    };
    Ok(PixelEvaluation {
        raw: MetricReport::compute(Variant::Raw, z, y)?,
        composited: MetricReport::compute(Variant::Composited, &comp, y)?,
        hole,
        masked: MetricReport::compute(Variant::Masked, x, y)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(v: f32) -> Image {
        Image::filled(16, 16, v).unwrap()
    }

    #[test]
    fn identical_and_opposite_images() {
        let (a, b) = (flat(0.0), flat(1.0));
        assert_eq!(mean_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(mean_l1(&a, &b).unwrap(), 1.0);
        assert_eq!(mean_l2(&a, &b).unwrap(), 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert!((ssim(&b, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_of_sixteen_levels() {
        let y = flat(100.0 / 255.0);
        let z = flat(116.0 / 255.0);
        let expect = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&z, &y).unwrap() - expect).abs() < 1e-4);
        assert!((expect - 24.05).abs() < 0.01);
    }

    #[test]
    fn inverted_checkerboard_has_negative_ssim() {
        let mut y = flat(0.0);
        for yy in 0..16 {
            for xx in 0..16 {
                let v = if (yy + xx) % 2 == 0 { 0.9 } else { 0.1 };
                for c in 0..3 {
                    y.set(yy, xx, c, v);
                }
            }
        }
        let inv = Image::new(16, 16, y.pixels().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&y, &inv).unwrap() < 0.0);
    }

    #[test]
    fn small_images_and_size_mismatch_are_rejected() {
        let small = Image::filled(4, 4, 0.5).unwrap();
        assert!(ssim(&small, &small).is_err());
        assert!(mean_l1(&small, &flat(0.5)).is_err());
    }

    #[test]
    fn json_marks_infinite_psnr() {
        let r = MetricReport::compute(Variant::Raw, &flat(0.2), &flat(0.2)).unwrap();
        let j = serde_json::to_value(r).unwrap();
        assert_eq!(j["psnr"], "inf");
        assert_eq!(j["variant"], "raw");
    }

    fn arb_pair() -> impl Strategy<Value = (Image, Image)> {
        let n = 3 * 16 * 16;
        (
            proptest::collection::vec(0.0f32..=1.0, n),
            proptest::collection::vec(0.0f32..=1.0, n),
        )
            .prop_map(|(a, b)| {
                (
                    Image::new(16, 16, a).unwrap(),
                    Image::new(16, 16, b).unwrap(),
                )
            })
    }

    fn permute_channels(img: &Image) -> Image {
        let plane = img.height() * img.width();
        let p = img.pixels();
        let mut out = Vec::with_capacity(p.len());
        for c in [2, 0, 1] {
            out.extend_from_slice(&p[c * plane..(c + 1) * plane]);
        }
        Image::new(img.height(), img.width(), out).unwrap()
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_consistent((z, y) in arb_pair()) {
            prop_assert_eq!(psnr(&z, &y).unwrap(), psnr(&y, &z).unwrap());
            prop_assert!((ssim(&z, &y).unwrap() - ssim(&y, &z).unwrap()).abs() < 1e-12);
            prop_assert_eq!(psnr(&z, &y).unwrap(), -10.0 * mean_l2(&z, &y).unwrap().log10());
            let s = ssim(&z, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn metrics_ignore_a_shared_channel_permutation((z, y) in arb_pair()) {
            let (pz, py) = (permute_channels(&z), permute_channels(&y));
            prop_assert!((mean_l1(&z, &y).unwrap() - mean_l1(&pz, &py).unwrap()).abs() < 1e-12);
            prop_assert!((mean_l2(&z, &y).unwrap() - mean_l2(&pz, &py).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&z, &y).unwrap() - ssim(&pz, &py).unwrap()).abs() < 1e-9);
        }
    }
}
