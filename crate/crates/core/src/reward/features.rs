//! Hand-built image descriptor projected to a fixed-width unit vector.
//!
//! Layout of the raw 168-vector:
//! - 24: per-channel 8-bin histograms of value / mean luminance (fractions)
//! - 6: per-channel mean and standard deviation
//! - 8: log2-spaced histogram of relative-luminance gradient magnitude
//! - 64: 8x8 box-downsampled relative luminance
//! - 64: relative-luminance spectrum magnitude, 16 radial x 4 angular bins
//! - 2: colour-opponent means, `R - G` and `(R + G) / 2 - B`

use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{invalid, Error, Result};
use crate::raster::RgbImage;
use crate::rng::stream;

pub const RAW_DIM: usize = 168;
pub const EMBED_DIM: usize = 256;
pub const PROJECTION_SEED: u64 = 0x6d61_7466_6f72_6765;

const GRAD_BIN_BASE: f64 = 0.005;
const RADIAL_BINS: usize = 16;
const ANGULAR_BINS: usize = 4;

pub type Embedding = Vec<f64>;

static PROJECTION_ASSET: &[u8] = include_bytes!("../../assets/projection.bin");

/// The shipped `EMBED_DIM x RAW_DIM` projection, row-major.
pub fn projection() -> &'static [f64] {
    static CELL: OnceLock<Vec<f64>> = OnceLock::new();
    CELL.get_or_init(|| {
        assert_eq!(PROJECTION_ASSET.len(), EMBED_DIM * RAW_DIM * 8, "projection asset has the wrong size");
        PROJECTION_ASSET
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    })
}

/// Gaussian matrix whose columns are orthonormalized (modified Gram-Schmidt),
/// so the projection preserves norms of raw feature vectors.
pub fn generate_projection(seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[]);
    let mut cols: Vec<Vec<f64>> = (0..RAW_DIM)
        .map(|_| (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for j in 0..RAW_DIM {
        for i in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let d: f64 = done[i].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (v, q) in rest[0].iter_mut().zip(&done[i]) {
                *v -= d * q;
            }
        }
        let n = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= n);
    }
    let mut out = vec![0.0; EMBED_DIM * RAW_DIM];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * RAW_DIM + j] = *v;
        }
    }
    out
}

fn histogram(values: impl Iterator<Item = f64>, bin: impl Fn(f64) -> usize, out: &mut [f64]) {
    let mut n = 0usize;
    for v in values {
        out[bin(v).min(out.len() - 1)] += 1.0;
        n += 1;
    }
    out.iter_mut().for_each(|c| *c /= n as f64);
}

fn spectrum_bins(lum: &[f64], w: usize, h: usize, out: &mut [f64]) {
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    let mut buf: Vec<Complex<f64>> = lum.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut tmp = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = buf[y * w + x];
        }
        col.process(&mut tmp);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
    let norm = ((w * h) as f64).sqrt();
    let mut sums = vec![0.0; RADIAL_BINS * ANGULAR_BINS];
    let mut counts = vec![0usize; RADIAL_BINS * ANGULAR_BINS];
    let signed = |k: usize, n: usize| {
        if k < n.div_ceil(2) {
            k as f64 / n as f64
        } else {
            (k as f64 - n as f64) / n as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (signed(x, w), signed(y, h));
            let r = (fx * fx + fy * fy).sqrt();
            if r == 0.0 {
                continue;
            }
            let rb = ((r / 0.5 * RADIAL_BINS as f64) as usize).min(RADIAL_BINS - 1);
            let theta = fy.atan2(fx).rem_euclid(PI);
            let ab = ((theta / PI * ANGULAR_BINS as f64) as usize).min(ANGULAR_BINS - 1);
            sums[rb * ANGULAR_BINS + ab] += buf[y * w + x].norm() / norm;
            counts[rb * ANGULAR_BINS + ab] += 1;
        }
    }
    for (o, (s, c)) in out.iter_mut().zip(sums.iter().zip(&counts)) {
        *o = if *c > 0 { s / *c as f64 } else { 0.0 };
    }
}

/// The unprojected descriptor.
pub fn raw_features(img: &RgbImage) -> Result<Vec<f64>> {
    if !img.is_finite() {
        return Err(Error::NonFinite("image passed to feature extraction".into()));
    }
    let (w, h) = (img.width, img.height);
    if w < 8 || h < 8 {
        return invalid(format!("feature extraction needs at least 8x8 pixels, got {w}x{h}"));
    }
    let n = (w * h) as f64;
    let mut f = vec![0.0; RAW_DIM];
    let px = |c: usize| img.data.iter().skip(c).step_by(3).copied();
    let lum = img.luminance();
    // shape blocks see values relative to mean luminance, so a brighter
    // light does not read as a different surface
    let lum_mean = (lum.iter().sum::<f64>() / n).max(1e-6);
    let rel: Vec<f64> = lum.iter().map(|v| v / lum_mean).collect();
    for c in 0..3 {
        histogram(px(c), |v| (v.max(0.0) / lum_mean * 4.0) as usize, &mut f[c * 8..c * 8 + 8]);
        let mean = px(c).sum::<f64>() / n;
        let var = px(c).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        f[24 + c * 2] = mean;
        f[24 + c * 2 + 1] = var.sqrt();
    }
    let at_rel = |x: usize, y: usize| rel[y * w + x];
    let grads = (0..h).flat_map(|y| {
        (0..w).map(move |x| {
            let gx = (at_rel((x + 1).min(w - 1), y) - at_rel(x.saturating_sub(1), y)) / 2.0;
            let gy = (at_rel(x, (y + 1).min(h - 1)) - at_rel(x, y.saturating_sub(1))) / 2.0;
            (gx * gx + gy * gy).sqrt()
        })
    });
    histogram(grads, |m| (m / GRAD_BIN_BASE).log2().max(0.0) as usize, &mut f[30..38]);
    let mut counts = [0usize; 64];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * 8 / h) * 8 + x * 8 / w;
            f[38 + cell] += at_rel(x, y);
            counts[cell] += 1;
        }
    }
    for (v, c) in f[38..102].iter_mut().zip(counts) {
        *v /= c as f64;
    }
    spectrum_bins(&rel, w, h, &mut f[102..166]);
    f[166] = px(0).zip(px(1)).map(|(r, g)| r - g).sum::<f64>() / n;
    f[167] = img.data.chunks_exact(3).map(|p| (p[0] + p[1]) / 2.0 - p[2]).sum::<f64>() / n;
    Ok(f)
}

/// Unit-norm embedding of an image with values in `[0, 1]`.
pub fn extract_features(img: &RgbImage) -> Result<Embedding> {
    let raw = raw_features(img)?;
    let p = projection();
    let mut out: Vec<f64> = (0..EMBED_DIM)
        .map(|i| p[i * RAW_DIM..(i + 1) * RAW_DIM].iter().zip(&raw).map(|(a, b)| a * b).sum())
        .collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::NonFinite("zero feature vector".into()));
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(side: usize, v: f64) -> RgbImage {
        RgbImage::from_data(side, side, vec![v; side * side * 3]).unwrap()
    }

    fn checker(side: usize) -> RgbImage {
        let mut img = RgbImage::new(side, side);
        for y in 0..side {
            for x in 0..side {
                let v = ((x + y) % 2) as f64;
                img.set_pixel(x, y, [v; 3]);
            }
        }
        img
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn projection_asset_matches_generator() {
        assert_eq!(projection(), generate_projection(PROJECTION_SEED).as_slice());
    }

    #[test]
    #[ignore = "rewrites the shipped asset"]
    fn regenerate_projection_asset() {
        let bytes: Vec<u8> = generate_projection(PROJECTION_SEED).iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/projection.bin"), bytes).unwrap();
    }

    #[test]
    fn projection_columns_are_orthonormal() {
        let p = generate_projection(PROJECTION_SEED);
        for (a, b) in [(0, 0), (0, 1), (5, 167), (100, 100)] {
            let d: f64 = (0..EMBED_DIM).map(|i| p[i * RAW_DIM + a] * p[i * RAW_DIM + b]).sum();
            assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_unit_norm() {
        let img = checker(16);
        let a = extract_features(&img).unwrap();
        assert_eq!(a, extract_features(&img).unwrap());
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-9);
        assert_eq!(a.len(), EMBED_DIM);
    }

    #[test]
    fn gray_and_checker_differ() {
        let a = extract_features(&gray(16, 0.5)).unwrap();
        let b = extract_features(&checker(16)).unwrap();
        assert!(cosine(&a, &b) < 0.99);
    }

    #[test]
    fn raw_blocks_have_expected_values() {
        let f = raw_features(&gray(16, 0.3)).unwrap();
        // channels at the mean luminance land in bin 4 of the relative histogram
        assert_eq!(&f[0..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!((f[24] - 0.3).abs() < 1e-12 && f[25] < 1e-12);
        assert_eq!(f[30], 1.0);
        assert!(f[38..102].iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(f[102..166].iter().all(|&v| v == 0.0));
        assert!(f[166].abs() < 1e-15);
        // checkerboard energy sits at the Nyquist corner, the last radial bin
        let c = raw_features(&checker(16)).unwrap();
        let spectrum = &c[102..166];
        let peak = spectrum.iter().cloned().fold(0.0, f64::max);
        assert!(spectrum[(RADIAL_BINS - 1) * ANGULAR_BINS..].iter().any(|&v| v == peak));
    }

    #[test]
    fn rejects_non_finite() {
        let mut img = gray(8, 0.1);
        img.data[4] = f64::NAN;
        assert!(extract_features(&img).is_err());
    }
}
