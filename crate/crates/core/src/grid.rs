//! SVBRDF maps and their 2x2 grid packing.
//!
//! Quadrants follow the clockwise order starting at the top left:
//!
//! ```text
//! +-------------+-------------+
//! | albedo      | height      |
//! +-------------+-------------+
//! | roughness   | metallicity |
//! +-------------+-------------+
//! ```
//!
//! Scalar maps are replicated over RGB when packing and recovered as the
//! channel mean when unpacking, which tolerates generated pixels that are
//! only approximately gray.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::raster::RgbImage;
use crate::tensor::Tensor;

/// Layout string recorded in grid sidecar files.
pub const GRID_LAYOUT: &str = "top-left=albedo top-right=height bottom-right=metallicity bottom-left=roughness";

/// Default height amplitude, in plane units.
pub const DEFAULT_HEIGHT_AMPLITUDE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Quadrant {
    Albedo,
    Height,
    Metallicity,
    Roughness,
}

impl Quadrant {
    /// (row, col) of the quadrant in the 2x2 grid.
    fn cell(self) -> (usize, usize) {
        match self {
            Quadrant::Albedo => (0, 0),
            Quadrant::Height => (0, 1),
            Quadrant::Metallicity => (1, 1),
            Quadrant::Roughness => (1, 0),
        }
    }
}

/// Albedo (RGB), height, roughness and metallicity maps, all `res x res`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps {
    res: usize,
    /// Interleaved RGB, `res * res * 3`.
    pub albedo: Vec<f64>,
    pub height: Vec<f64>,
    pub roughness: Vec<f64>,
    pub metallicity: Vec<f64>,
}

impl MaterialMaps {
    /// Validates shapes and clamps every value into `[0, 1]`.
    pub fn new(res: usize, albedo: Vec<f64>, height: Vec<f64>, roughness: Vec<f64>, metallicity: Vec<f64>) -> Result<Self> {
        check_resolution(res)?;
        let n = res * res;
        if albedo.len() != 3 * n || height.len() != n || roughness.len() != n || metallicity.len() != n {
            return invalid(format!(
                "maps must share resolution {res}: albedo {}, height {}, roughness {}, metallicity {}",
                albedo.len(),
                height.len(),
                roughness.len(),
                metallicity.len()
            ));
        }
        let mut maps = Self {
            res,
            albedo,
            height,
            roughness,
            metallicity,
        };
        maps.clamp()?;
        Ok(maps)
    }

    pub fn constant(res: usize, albedo: [f64; 3], height: f64, roughness: f64, metallicity: f64) -> Result<Self> {
        let n = res * res;
        let alb = (0..n).flat_map(|_| albedo).collect();
        Self::new(res, alb, vec![height; n], vec![roughness; n], vec![metallicity; n])
    }

    fn clamp(&mut self) -> Result<()> {
        for v in self
            .albedo
            .iter_mut()
            .chain(&mut self.height)
            .chain(&mut self.roughness)
            .chain(&mut self.metallicity)
        {
            if !v.is_finite() {
                return invalid("material maps contain non-finite values");
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn albedo_at(&self, i: usize) -> [f64; 3] {
        [self.albedo[3 * i], self.albedo[3 * i + 1], self.albedo[3 * i + 2]]
    }

    fn scalar(&self, q: Quadrant) -> &[f64] {
        match q {
            Quadrant::Height => &self.height,
            Quadrant::Roughness => &self.roughness,
            Quadrant::Metallicity => &self.metallicity,
            Quadrant::Albedo => unreachable!("albedo is not a scalar map"),
        }
    }

    pub fn mean_metallicity(&self) -> f64 {
        self.metallicity.iter().sum::<f64>() / self.metallicity.len() as f64
    }

    pub fn mean_albedo(&self) -> f64 {
        self.albedo.iter().sum::<f64>() / self.albedo.len() as f64
    }

    /// Rotates all maps by `quarter_turns` x 90 degrees counter-clockwise.
    pub fn rotate90(&self, quarter_turns: usize) -> Self {
        let r = self.res;
        let src = |x: usize, y: usize| -> usize {
            match quarter_turns % 4 {
                0 => y * r + x,
                1 => x * r + (r - 1 - y),
                2 => (r - 1 - y) * r + (r - 1 - x),
                _ => (r - 1 - x) * r + y,
            }
        };
        let mut out = self.clone();
        for y in 0..r {
            for x in 0..r {
                let (d, s) = (y * r + x, src(x, y));
                out.height[d] = self.height[s];
                out.roughness[d] = self.roughness[s];
                out.metallicity[d] = self.metallicity[s];
                out.albedo[3 * d..3 * d + 3].copy_from_slice(&self.albedo[3 * s..3 * s + 3]);
            }
        }
        out
    }

    /// `size x size` window starting at (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<Self> {
        if x0 + size > self.res || y0 + size > self.res {
            return invalid(format!("crop {size} at ({x0}, {y0}) exceeds resolution {}", self.res));
        }
        let n = size * size;
        let (mut alb, mut h, mut r, mut m) = (Vec::with_capacity(3 * n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let s = y * self.res + x;
                alb.extend_from_slice(&self.albedo[3 * s..3 * s + 3]);
                h.push(self.height[s]);
                r.push(self.roughness[s]);
                m.push(self.metallicity[s]);
            }
        }
        Self::new(size, alb, h, r, m)
    }
}

fn check_resolution(res: usize) -> Result<()> {
    if res < 8 || !res.is_power_of_two() {
        return invalid(format!("map resolution must be a power of two >= 8, got {res}"));
    }
    Ok(())
}

/// A packed 2x2 grid, `2 * res` pixels on a side.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage(pub RgbImage);

impl GridImage {
    pub fn image(&self) -> &RgbImage {
        &self.0
    }

    pub fn side(&self) -> usize {
        self.0.width
    }

    /// Channel-major `[3, side, side]` tensor with values mapped to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let img = &self.0;
        let hw = img.width * img.height;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = 2.0 * px[c] - 1.0;
            }
        }
        Tensor::new(&[3, img.height, img.width], data).expect("grid tensor shape")
    }

    /// Inverse of [`GridImage::to_tensor`]; values are not clamped here.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return invalid(format!("grid tensor must be [3, h, w], got {s:?}"));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[3 * i + c] = 0.5 * (t.data()[c * hw + i] + 1.0);
            }
        }
        Ok(Self(RgbImage::from_data(w, h, data)?))
    }

    pub fn save(&self, png: impl AsRef<Path>, meta: &GridMetadata) -> Result<()> {
        let png = png.as_ref();
        self.0.save_png(png)?;
        std::fs::write(png.with_extension("meta.txt"), meta.render(self.side() / 2))?;
        Ok(())
    }
}

/// Sidecar metadata written next to each grid PNG.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridMetadata {
    pub category: String,
    pub prompt: String,
}

impl GridMetadata {
    pub fn render(&self, res: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layout = {GRID_LAYOUT}");
        let _ = writeln!(s, "resolution = {res}");
        let _ = writeln!(s, "category = {}", self.category);
        let _ = writeln!(s, "prompt = {}", self.prompt);
        s
    }
}

pub fn pack(maps: &MaterialMaps) -> GridImage {
    let r = maps.res;
    let side = 2 * r;
    let mut img = RgbImage::new(side, side);
    for q in [Quadrant::Albedo, Quadrant::Height, Quadrant::Metallicity, Quadrant::Roughness] {
        let (row, col) = q.cell();
        for y in 0..r {
            for x in 0..r {
                let i = y * r + x;
                let px = match q {
                    Quadrant::Albedo => maps.albedo_at(i),
                    _ => [maps.scalar(q)[i]; 3],
                };
                img.set_pixel(col * r + x, row * r + y, px);
            }
        }
    }
    GridImage(img)
}

pub fn unpack(grid: &GridImage) -> Result<MaterialMaps> {
    let img = &grid.0;
    if img.width != img.height || img.width % 2 != 0 {
        return invalid(format!("grid must be square with even side, got {}x{}", img.width, img.height));
    }
    let r = img.width / 2;
    check_resolution(r)?;
    let n = r * r;
    let mut albedo = Vec::with_capacity(3 * n);
    let (mut height, mut roughness, mut metallicity) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..r {
        for x in 0..r {
            let at = |q: Quadrant| {
                let (row, col) = q.cell();
                img.pixel(col * r + x, row * r + y)
            };
            let i = y * r + x;
            albedo.extend(at(Quadrant::Albedo).iter().map(|v| clamp01(*v)));
            let mean = |p: [f64; 3]| {
                if p[0] == p[1] && p[1] == p[2] {
                    clamp01(p[0])
                } else {
                    clamp01((p[0] + p[1] + p[2]) / 3.0)
                }
            };
            height[i] = mean(at(Quadrant::Height));
            roughness[i] = mean(at(Quadrant::Roughness));
            metallicity[i] = mean(at(Quadrant::Metallicity));
        }
    }
    MaterialMaps::new(r, albedo, height, roughness, metallicity)
}

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Shading normals from a height map via central differences with
/// replicated borders; the plane is the unit square so one pixel spans
/// `1 / res` plane units.
pub fn height_to_normals(height: &[f64], res: usize, amplitude: f64) -> Result<Vec<[f64; 3]>> {
    if amplitude <= 0.0 || !amplitude.is_finite() {
        return invalid(format!("height amplitude must be positive, got {amplitude}"));
    }
    if height.len() != res * res {
        return invalid(format!("height map of {} values is not {res}x{res}", height.len()));
    }
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, res as isize - 1) as usize;
        let cy = y.clamp(0, res as isize - 1) as usize;
        height[cy * res + cx]
    };
    let inv_2dx = res as f64 / 2.0;
    let mut out = Vec::with_capacity(res * res);
    for y in 0..res as isize {
        for x in 0..res as isize {
            let dhdx = (at(x + 1, y) - at(x - 1, y)) * inv_2dx;
            let dhdy = (at(x, y + 1) - at(x, y - 1)) * inv_2dx;
            let n = [-amplitude * dhdx, -amplitude * dhdy, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            out.push([n[0] / len, n[1] / len, n[2] / len]);
        }
    }
    Ok(out)
}
