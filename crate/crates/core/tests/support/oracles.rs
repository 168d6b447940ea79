//! Scalar-loop reference implementations of the pixel metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semfill::domain::Image;
use semfill::metrics::{SSIM_C1, SSIM_C2, SSIM_WINDOW};

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// A perturbed copy, so pairs are correlated like a restoration and its target.
fn perturbed(rng: &mut ChaCha8Rng, y: &Image, amount: f32) -> Image {
    let px = y
        .pixels()
        .iter()
        .map(|&v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
        .collect();
    Image::new(y.height(), y.width(), px).unwrap()
}

pub fn ref_l1(z: &Image, y: &Image) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        for r in 0..z.height() {
            for x in 0..z.width() {
                s += (z.get(r, x, c) as f64 - y.get(r, x, c) as f64).abs();
            }
        }
    }
    s / (3 * z.height() * z.width()) as f64
}

pub fn ref_l2(z: &Image, y: &Image) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        for r in 0..z.height() {
            for x in 0..z.width() {
                let d = z.get(r, x, c) as f64 - y.get(r, x, c) as f64;
                s += d * d;
            }
        }
    }
    s / (3 * z.height() * z.width()) as f64
}

pub fn ref_psnr(z: &Image, y: &Image) -> f64 {
    10.0 * (1.0 / ref_l2(z, y)).log10()
}

fn gray(img: &Image, r: usize, x: usize) -> f64 {
    (img.get(r, x, 0) as f64 + img.get(r, x, 1) as f64 + img.get(r, x, 2) as f64) / 3.0
}

/// Two-pass window statistics for every 8x8 window.
pub fn ref_ssim(z: &Image, y: &Image) -> f64 {
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let (h, w) = (z.height(), z.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - k {
        for x0 in 0..=w - k {
            let mut a = Vec::with_capacity(k * k);
            let mut b = Vec::with_capacity(k * k);
            for r in r0..r0 + k {
                for x in x0..x0 + k {
                    a.push(gray(z, r, x));
                    b.push(gray(y, r, x));
                }
            }
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
            let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
            let cov = a
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - ma) * (q - mb))
                .sum::<f64>()
                / n;
            total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// 50 seeded pairs of mixed sizes, half of them correlated.
pub fn pairs() -> Vec<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..50)
        .map(|i| {
            let (h, w) = [(32, 32), (16, 24), (12, 40)][i % 3];
            let y = random_image(&mut rng, h, w);
            let z = if i % 2 == 0 {
                perturbed(&mut rng, &y, 0.2)
            } else {
                random_image(&mut rng, h, w)
            };
            (z, y)
        })
        .collect()
}
