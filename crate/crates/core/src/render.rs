//! Top-down orthographic shading of material maps on a flat plane.
//!
//! Microfacet specular (GGX distribution, separable Smith masking, Schlick
//! Fresnel) plus a Lambertian lobe. Height only perturbs shading normals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::grid::{height_to_normals, MaterialMaps, DEFAULT_HEIGHT_AMPLITUDE};
use crate::raster::RgbImage;
use crate::rng::stream;

pub const DEFAULT_IRRADIANCE: [f64; 3] = [0.8, 0.8, 0.8];
/// Lower bound on the GGX width so mirror-smooth pixels stay finite.
const MIN_ALPHA: f64 = 1e-3;
const VIEW: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Unit vector pointing from the surface towards the light.
    pub direction: [f64; 3],
    pub intensity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentLight {
    pub id: usize,
    pub lights: Vec<DirectionalLight>,
}

/// A point light above the plane, which spans `[0,1]^2` at `z = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    pub intensity: [f64; 3],
}

#[derive(Clone, Debug)]
pub enum Lighting<'a> {
    Environment(&'a EnvironmentLight),
    Point(&'a PointLight),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub exposure: f64,
    pub gamma: f64,
    pub height_amplitude: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            exposure: 1.0,
            gamma: 2.2,
            height_amplitude: DEFAULT_HEIGHT_AMPLITUDE,
        }
    }
}

/// Collection of normalized environments with the irradiance they share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSet {
    pub target_irradiance: [f64; 3],
    pub environments: Vec<EnvironmentLight>,
}

impl EnvironmentSet {
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// GGX / Trowbridge-Reitz normal distribution.
pub fn ggx_ndf(n_dot_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

/// Smith masking term for GGX along one direction.
pub fn smith_g1(n_dot_x: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * n_dot_x / (n_dot_x + (a2 + (1.0 - a2) * n_dot_x * n_dot_x).sqrt())
}

pub fn fresnel_schlick(cos_theta: f64, f0: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - cos_theta).clamp(0.0, 1.0).powi(5)
}

/// Diffuse and specular radiance towards the camera for one light direction.
fn brdf_terms(n: [f64; 3], l: [f64; 3], albedo: [f64; 3], roughness: f64, metal: f64) -> ([f64; 3], [f64; 3]) {
    let n_l = dot(n, l);
    if n_l <= 0.0 {
        return ([0.0; 3], [0.0; 3]);
    }
    let n_v = dot(n, VIEW).max(1e-6);
    let h = normalize([l[0] + VIEW[0], l[1] + VIEW[1], l[2] + VIEW[2]]);
    let n_h = dot(n, h).max(0.0);
    let v_h = dot(VIEW, h).max(0.0);
    let alpha = (roughness * roughness).max(MIN_ALPHA);
    let dg = ggx_ndf(n_h, alpha) * smith_g1(n_l, alpha) * smith_g1(n_v, alpha) / (4.0 * n_l * n_v);
    let mut diffuse = [0.0; 3];
    let mut specular = [0.0; 3];
    for c in 0..3 {
        let f0 = 0.04 * (1.0 - metal) + albedo[c] * metal;
        diffuse[c] = albedo[c] * (1.0 - metal) / PI * n_l;
        specular[c] = dg * fresnel_schlick(v_h, f0) * n_l;
    }
    (diffuse, specular)
}

/// Linear (pre-tone-map) diffuse and specular images.
pub fn shade_components(maps: &MaterialMaps, light: Lighting<'_>, cfg: &RenderConfig) -> Result<(RgbImage, RgbImage)> {
    let res = maps.resolution();
    let normals = height_to_normals(&maps.height, res, cfg.height_amplitude)?;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..res)
        .into_par_iter()
        .map(|y| {
            let mut drow = vec![0.0; res * 3];
            let mut srow = vec![0.0; res * 3];
            for x in 0..res {
                let i = y * res + x;
                let albedo = maps.albedo_at(i);
                let (r, m) = (maps.roughness[i], maps.metallicity[i]);
                let mut add = |l: [f64; 3], intensity: [f64; 3]| {
                    let (d, s) = brdf_terms(normals[i], l, albedo, r, m);
                    for c in 0..3 {
                        drow[x * 3 + c] += d[c] * intensity[c];
                        srow[x * 3 + c] += s[c] * intensity[c];
                    }
                };
                match light {
                    Lighting::Environment(env) => {
                        for dl in &env.lights {
                            add(dl.direction, dl.intensity);
                        }
                    }
                    Lighting::Point(p) => {
                        let pos = [(x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64, 0.0];
                        let d = [p.position[0] - pos[0], p.position[1] - pos[1], p.position[2] - pos[2]];
                        let dist2 = dot(d, d);
                        let falloff = 1.0 / dist2;
                        add(normalize(d), [p.intensity[0] * falloff, p.intensity[1] * falloff, p.intensity[2] * falloff]);
                    }
                }
            }
            (drow, srow)
        })
        .collect();
    let mut diffuse = Vec::with_capacity(res * res * 3);
    let mut specular = Vec::with_capacity(res * res * 3);
    for (d, s) in rows {
        diffuse.extend(d);
        specular.extend(s);
    }
    Ok((RgbImage::from_data(res, res, diffuse)?, RgbImage::from_data(res, res, specular)?))
}

/// Pre-tone-map radiance.
pub fn shade_linear(maps: &MaterialMaps, light: Lighting<'_>, cfg: &RenderConfig) -> Result<RgbImage> {
    let (mut d, s) = shade_components(maps, light, cfg)?;
    for (a, b) in d.data.iter_mut().zip(&s.data) {
        *a = (*a + b) * cfg.exposure;
    }
    Ok(d)
}

/// `x / (1 + x)` followed by display gamma; output lies in `[0, 1)`.
pub fn tone_map(linear: &RgbImage, gamma: f64) -> RgbImage {
    let data = linear.data.iter().map(|&x| (x.max(0.0) / (1.0 + x.max(0.0))).powf(1.0 / gamma)).collect();
    RgbImage::from_data(linear.width, linear.height, data).expect("same dimensions")
}

pub fn shade(maps: &MaterialMaps, light: Lighting<'_>, cfg: &RenderConfig) -> Result<RgbImage> {
    Ok(tone_map(&shade_linear(maps, light, cfg)?, cfg.gamma))
}

/// Per-channel irradiance on an upward-facing plane.
pub fn plane_irradiance(env: &EnvironmentLight) -> [f64; 3] {
    let mut e = [0.0; 3];
    for l in &env.lights {
        let cos = l.direction[2].max(0.0);
        for c in 0..3 {
            e[c] += l.intensity[c] * cos;
        }
    }
    e
}

pub fn normalize_environment(env: &EnvironmentLight, target: [f64; 3]) -> Result<EnvironmentLight> {
    let e = plane_irradiance(env);
    if e.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return invalid(format!("environment {} has zero plane irradiance in some channel: {e:?}", env.id));
    }
    let scale = [target[0] / e[0], target[1] / e[1], target[2] / e[2]];
    let lights = env
        .lights
        .iter()
        .map(|l| DirectionalLight {
            direction: l.direction,
            intensity: [l.intensity[0] * scale[0], l.intensity[1] * scale[1], l.intensity[2] * scale[2]],
        })
        .collect();
    Ok(EnvironmentLight { id: env.id, lights })
}

const WARM: [f64; 3] = [1.0, 0.85, 0.7];
const COOL: [f64; 3] = [0.75, 0.85, 1.0];

/// `n` random environments of `k` lights each, normalized to `target`.
pub fn make_environment_set(n: usize, k: usize, seed: u64, target: [f64; 3]) -> Result<EnvironmentSet> {
    if n == 0 || k == 0 {
        return invalid("environment set needs n >= 1 and K >= 1");
    }
    let environments = (0..n)
        .map(|id| {
            let mut rng = stream(seed, &[0xe7, id as u64]);
            let lights = (0..k)
                .map(|_| {
                    let z: f64 = rng.random_range(0.05..=1.0);
                    let phi: f64 = rng.random_range(0.0..2.0 * PI);
                    let r = (1.0 - z * z).sqrt();
                    let power: f64 = rng.random_range(0.2..1.0);
                    let tint: f64 = rng.random();
                    let intensity = std::array::from_fn(|c| power * (WARM[c] * (1.0 - tint) + COOL[c] * tint));
                    DirectionalLight {
                        direction: [r * phi.cos(), r * phi.sin(), z],
                        intensity,
                    }
                })
                .collect();
            normalize_environment(&EnvironmentLight { id, lights }, target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnvironmentSet {
        target_irradiance: target,
        environments,
    })
}
