//! Procedural material corpus, degradations, conditioning prompts and the
//! lowest-realism prompt selection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::diffusion::{sample_trajectory_from, standard_normal_like, Denoiser, Example, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::grid::{pack, unpack, GridImage, MaterialMaps};
use crate::raster::RgbImage;
use crate::render::{shade, EnvironmentSet, Lighting, RenderConfig};
use crate::rl::Reward;
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;

pub const CATEGORIES: [&str; 8] = ["brick", "wood", "stone", "metal", "fabric", "tile", "grass", "marble"];

pub fn category_id(name: &str) -> Result<usize> {
    CATEGORIES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| Error::Invalid(format!("unknown category {name:?}")))
}

pub fn category_name(id: usize) -> Result<&'static str> {
    CATEGORIES
        .get(id)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("category id {id} out of range")))
}

// ---- noise ----------------------------------------------------------------

fn hash2(seed: u64, x: i64, y: i64) -> f64 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise in `[0, 1)`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash2(seed, ix, iy);
    let b = hash2(seed, ix + 1, iy);
    let c = hash2(seed, ix, iy + 1);
    let d = hash2(seed, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Fractal sum of octaves, normalized to `[0, 1)`.
fn fbm(seed: u64, x: f64, y: f64, octaves: u32) -> f64 {
    let (mut sum, mut amp, mut freq, mut norm) = (0.0, 1.0, 1.0, 0.0);
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64 * 7919), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    std::array::from_fn(|c| (base[c] + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

struct Texel {
    albedo: [f64; 3],
    height: f64,
    roughness: f64,
    metallicity: f64,
}

/// Category generators; `u, v` in `[0, 1)`.
fn generator(category: usize, rng: &mut StreamRng) -> Box<dyn Fn(f64, f64) -> Texel + Send + Sync> {
    let s: u64 = rng.random();
    match category {
        // brick: staggered courses with mortar joints
        0 => {
            let rows = rng.random_range(4..=6) as f64;
            let cols = rng.random_range(2..=3) as f64;
            let mortar = rng.random_range(0.06..0.12);
            let brick = jitter(rng, [0.55, 0.22, 0.15], 0.08);
            let joint = jitter(rng, [0.7, 0.68, 0.62], 0.05);
            Box::new(move |u, v| {
                let row = (v * rows).floor();
                let x = u * cols + if row as i64 % 2 == 1 { 0.5 } else { 0.0 };
                let (fx, fy) = (x.fract(), (v * rows).fract());
                let in_mortar = fx.min(1.0 - fx) < mortar / 2.0 || fy.min(1.0 - fy) < mortar;
                let n = fbm(s, u * 16.0, v * 16.0, 3);
                if in_mortar {
                    Texel {
                        albedo: lerp3(joint, [0.5; 3], n * 0.3),
                        height: 0.15 + 0.1 * n,
                        roughness: 0.9,
                        metallicity: 0.0,
                    }
                } else {
                    let tone = hash2(s, x.floor() as i64, row as i64);
                    Texel {
                        albedo: lerp3(brick, [0.3, 0.12, 0.08], 0.5 * tone + 0.3 * n),
                        height: 0.7 + 0.2 * n,
                        roughness: 0.75 + 0.15 * n,
                        metallicity: 0.0,
                    }
                }
            })
        }
        // wood: distorted growth rings
        1 => {
            let (cx, cy) = (rng.random_range(-1.5..-0.5), rng.random_range(0.0..1.0));
            let freq = rng.random_range(8.0..14.0);
            let light = jitter(rng, [0.72, 0.52, 0.32], 0.06);
            let dark = jitter(rng, [0.42, 0.26, 0.14], 0.05);
            Box::new(move |u, v| {
                let warp = fbm(s, u * 4.0, v * 4.0, 4);
                let r = (((u - cx) * 0.3).powi(2) + (v - cy).powi(2)).sqrt() + 0.15 * warp;
                let ring = (r * freq).fract();
                let t = smooth((ring * 2.0 - 1.0).abs());
                Texel {
                    albedo: lerp3(light, dark, t),
                    height: 0.5 + 0.25 * (1.0 - t) + 0.1 * warp,
                    roughness: 0.55 + 0.15 * t,
                    metallicity: 0.0,
                }
            })
        }
        // stone: multi-octave value noise
        2 => {
            let base = jitter(rng, [0.5, 0.47, 0.43], 0.08);
            let scale = rng.random_range(3.0..6.0);
            Box::new(move |u, v| {
                let n = fbm(s, u * scale, v * scale, 5);
                let grain = value_noise(s ^ 0xabc, u * 48.0, v * 48.0);
                Texel {
                    albedo: lerp3(base, [0.25, 0.24, 0.22], (1.0 - n) * 0.7 + 0.2 * grain),
                    height: n,
                    roughness: 0.7 + 0.25 * grain,
                    metallicity: 0.0,
                }
            })
        }
        // metal: brushed metal with rust speckles
        3 => {
            let tint = [[0.75, 0.75, 0.77], [0.85, 0.55, 0.4], [0.9, 0.75, 0.4]][rng.random_range(0..3)];
            let tint = jitter(rng, tint, 0.04);
            let rust_level = rng.random_range(0.62..0.72);
            let gloss = rng.random_range(0.15..0.35);
            Box::new(move |u, v| {
                let n = fbm(s, u * 6.0, v * 6.0, 4);
                let brush = value_noise(s ^ 0x55, u * 64.0, v * 4.0);
                if n > rust_level {
                    Texel {
                        albedo: [0.45, 0.22, 0.1],
                        height: 0.55 + 0.3 * (n - rust_level),
                        roughness: 0.85,
                        metallicity: 0.0,
                    }
                } else {
                    Texel {
                        albedo: lerp3(tint, [0.6; 3], 0.2 * brush),
                        height: 0.5 + 0.05 * brush,
                        roughness: gloss + 0.1 * brush,
                        metallicity: 1.0,
                    }
                }
            })
        }
        // fabric: over-under weave of two thread colours
        4 => {
            let threads = rng.random_range(8..=12) as f64;
            let warp_col = [rng.random_range(0.2..0.8), rng.random_range(0.1..0.6), rng.random_range(0.2..0.8)];
            let weft_col = lerp3(warp_col, [0.9, 0.88, 0.85], 0.4);
            Box::new(move |u, v| {
                let (tu, tv) = (u * threads, v * threads);
                let over = (tu.floor() as i64 + tv.floor() as i64) % 2 == 0;
                let along = if over { tu.fract() } else { tv.fract() };
                let bulge = (std::f64::consts::PI * along).sin();
                let fuzz = value_noise(s, u * 64.0, v * 64.0);
                Texel {
                    albedo: lerp3(if over { warp_col } else { weft_col }, [0.1; 3], 0.25 * (1.0 - bulge)),
                    height: 0.3 + 0.5 * bulge + 0.05 * fuzz,
                    roughness: 0.85 + 0.1 * fuzz,
                    metallicity: 0.0,
                }
            })
        }
        // tile: glossy squares with grout
        5 => {
            let n_tiles = rng.random_range(2..=4) as f64;
            let grout = rng.random_range(0.04..0.08);
            let glaze: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.9));
            Box::new(move |u, v| {
                let (fx, fy) = ((u * n_tiles).fract(), (v * n_tiles).fract());
                let d = fx.min(1.0 - fx).min(fy.min(1.0 - fy));
                let n = value_noise(s, u * 24.0, v * 24.0);
                if d < grout {
                    Texel {
                        albedo: [0.6, 0.58, 0.55],
                        height: 0.1,
                        roughness: 0.9,
                        metallicity: 0.0,
                    }
                } else {
                    let tone = hash2(s, (u * n_tiles) as i64, (v * n_tiles) as i64);
                    Texel {
                        albedo: lerp3(glaze, [0.95; 3], 0.15 * tone + 0.05 * n),
                        height: 0.75 + 0.03 * n,
                        roughness: 0.12 + 0.1 * n,
                        metallicity: 0.0,
                    }
                }
            })
        }
        // grass: stretched high-frequency blade noise
        6 => {
            let green = jitter(rng, [0.22, 0.45, 0.12], 0.06);
            let dry = jitter(rng, [0.55, 0.55, 0.25], 0.05);
            let angle: f64 = rng.random_range(-0.4..0.4);
            Box::new(move |u, v| {
                let (ru, rv) = (u * angle.cos() - v * angle.sin(), u * angle.sin() + v * angle.cos());
                let blade = value_noise(s, ru * 40.0, rv * 6.0);
                let patch = fbm(s ^ 0x77, u * 3.0, v * 3.0, 3);
                Texel {
                    albedo: lerp3(lerp3([0.05, 0.12, 0.03], green, blade), dry, 0.5 * patch * patch),
                    height: blade,
                    roughness: 0.8 + 0.15 * (1.0 - blade),
                    metallicity: 0.0,
                }
            })
        }
        // marble: turbulent sine veins
        7 => {
            let base = jitter(rng, [0.9, 0.89, 0.86], 0.04);
            let vein = jitter(rng, [0.35, 0.35, 0.38], 0.08);
            let freq = rng.random_range(3.0..6.0);
            let dir: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Box::new(move |u, v| {
                let turb = fbm(s, u * 4.0, v * 4.0, 5);
                let phase = (u * dir.cos() + v * dir.sin()) * freq + 4.0 * turb;
                let t = (1.0 - (phase * std::f64::consts::PI).sin().abs()).powi(6);
                Texel {
                    albedo: lerp3(base, vein, t),
                    height: 0.5 + 0.05 * turb - 0.1 * t,
                    roughness: 0.15 + 0.1 * turb,
                    metallicity: 0.0,
                }
            })
        }
        _ => unreachable!("category checked by caller"),
    }
}

/// Deterministic material for `(category, seed)` at map resolution `res`.
pub fn generate_material(category: usize, seed: u64, res: usize) -> Result<MaterialMaps> {
    if category >= CATEGORIES.len() {
        return invalid(format!("unknown category id {category}"));
    }
    let mut rng = stream(seed, &[0x6a7e, category as u64]);
    let f = generator(category, &mut rng);
    let n = res * res;
    let (mut albedo, mut height, mut rough, mut metal) = (Vec::with_capacity(3 * n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..res {
        for x in 0..res {
            let t = f((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
            albedo.extend(t.albedo.map(|c| c.clamp(0.0, 1.0)));
            height.push(t.height.clamp(0.0, 1.0));
            rough.push(t.roughness.clamp(0.0, 1.0));
            metal.push(t.metallicity.clamp(0.0, 1.0));
        }
    }
    MaterialMaps::new(res, albedo, height, rough, metal)
}

/// Albedo contrast kept by full-strength degradation.
const DEGRADE_CONTRAST: f64 = 0.3;

/// 3x3 wrap-around box filter over an interleaved `channels`-plane image.
fn box_blur(data: &[f64], res: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..res {
        for x in 0..res {
            for c in 0..channels {
                let mut acc = 0.0;
                for (dx, dy) in (0..9).map(|k| (k % 3 + res - 1, k / 3 + res - 1)) {
                    acc += data[(((y + dy) % res) * res + (x + dx) % res) * channels + c];
                }
                out[(y * res + x) * channels + c] = acc / 9.0;
            }
        }
    }
    out
}

/// Pushes a material towards a less plausible look: blurred, posterized,
/// low-contrast albedo, flattened height and spatially constant roughness. `strength = 0`
/// is the identity, `1` the full effect.
pub fn degrade(maps: &MaterialMaps, strength: f64) -> Result<MaterialMaps> {
    if !(0.0..=1.0).contains(&strength) {
        return invalid(format!("degradation strength {strength} outside [0, 1]"));
    }
    let s = strength;
    let levels = 3.0;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let channel_mean: Vec<f64> = (0..3)
        .map(|c| mean(&maps.albedo.iter().skip(c).step_by(3).copied().collect::<Vec<_>>()))
        .collect();
    let res = maps.resolution();
    let smooth = box_blur(&maps.albedo, res, 3);
    let albedo = maps
        .albedo
        .iter()
        .zip(&smooth)
        .enumerate()
        .map(|(i, (&a, &b))| {
            let m = channel_mean[i % 3];
            let flat = m + DEGRADE_CONTRAST * (((b * levels).round() / levels) - m);
            (1.0 - s) * a + s * flat.clamp(0.0, 1.0)
        })
        .collect();
    let (mh, mr) = (mean(&maps.height), mean(&maps.roughness));
    let height = maps.height.iter().map(|&h| (1.0 - s) * h + s * mh).collect();
    let roughness = maps.roughness.iter().map(|&r| (1.0 - s) * r + s * mr).collect();
    MaterialMaps::new(maps.resolution(), albedo, height, roughness, maps.metallicity.clone())
}

/// Independent Gaussian noise of std `sigma` on albedo and height, clamped
/// to `[0, 1]`.
pub fn jitter_maps<R: Rng + ?Sized>(maps: &MaterialMaps, sigma: f64, rng: &mut R) -> Result<MaterialMaps> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return invalid(format!("jitter std {sigma} must be finite and non-negative"));
    }
    if sigma == 0.0 {
        return Ok(maps.clone());
    }
    let noise = Normal::new(0.0, sigma).expect("valid std");
    let mut out = maps.clone();
    for v in out.albedo.iter_mut().chain(out.height.iter_mut()) {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Random crop to `out_res` followed by a random quarter-turn rotation.
pub fn augment<R: Rng + ?Sized>(maps: &MaterialMaps, out_res: usize, rng: &mut R) -> Result<MaterialMaps> {
    let res = maps.resolution();
    if out_res > res {
        return invalid(format!("crop size {out_res} exceeds resolution {res}"));
    }
    let x0 = rng.random_range(0..=res - out_res);
    let y0 = rng.random_range(0..=res - out_res);
    Ok(maps.crop(x0, y0, out_res)?.rotate90(rng.random_range(0..4)))
}

/// Augmented material `index` of the stage-1 dataset: category
/// `index % C`, generated at twice the map resolution and cropped.
pub fn dataset_material(index: usize, map_res: usize, seed: u64) -> Result<MaterialMaps> {
    let category = index % CATEGORIES.len();
    let maps = generate_material(category, seed.wrapping_add(index as u64), map_res * 2)?;
    augment(&maps, map_res, &mut stream(seed, &[0xa06, index as u64]))
}

/// Stage-1 training examples as packed grids in `[-1, 1]`.
pub fn training_examples(range: std::ops::Range<usize>, map_res: usize, seed: u64) -> Result<Vec<Example>> {
    range
        .into_par_iter()
        .map(|i| {
            let maps = dataset_material(i, map_res, seed)?;
            Ok(Example {
                x0: pack(&maps).to_tensor(),
                cond: i % CATEGORIES.len(),
            })
        })
        .collect()
}

// ---- corpora ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    RealisticAnalog,
    SyntheticAnalog,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::RealisticAnalog => "realistic-analog",
            Source::SyntheticAnalog => "synthetic-analog",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Render {
    pub material: usize,
    pub category: usize,
    pub env_id: usize,
    pub source: Source,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub materials: usize,
    pub lightings: usize,
    pub degradation: f64,
    pub map_res: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            materials: 2000,
            lightings: 10,
            degradation: 1.0,
            map_res: 16,
            seed: 0,
        }
    }
}

/// Renders of one corpus. Material `i` has category `i % C`; every material
/// is shown under `lightings` environments drawn from `envs`.
pub fn build_corpus(cfg: &CorpusConfig, source: Source, envs: &EnvironmentSet, render: &RenderConfig) -> Result<Vec<Render>> {
    if envs.environments.is_empty() {
        return invalid("environment set is empty");
    }
    let tag = match source {
        Source::RealisticAnalog => 1u64,
        Source::SyntheticAnalog => 2,
    };
    let per_material: Vec<Vec<Render>> = (0..cfg.materials)
        .into_par_iter()
        .map(|i| {
            let category = i % CATEGORIES.len();
            let mut rng = stream(cfg.seed, &[0xc0, tag, i as u64]);
            let seed: u64 = rng.random();
            let clean = augment(&generate_material(category, seed, cfg.map_res * 2)?, cfg.map_res, &mut rng)?;
            let maps = match source {
                Source::RealisticAnalog => clean,
                Source::SyntheticAnalog => degrade(&clean, cfg.degradation)?,
            };
            (0..cfg.lightings)
                .map(|_| {
                    let env = &envs.environments[rng.random_range(0..envs.environments.len())];
                    Ok(Render {
                        material: i,
                        category,
                        env_id: env.id,
                        source,
                        image: shade(&maps, Lighting::Environment(env), render)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_material.into_iter().flatten().collect())
}

pub struct Corpora {
    pub realistic: Vec<Render>,
    pub synthetic: Vec<Render>,
}

pub fn build_corpora(cfg: &CorpusConfig, envs: &EnvironmentSet, render: &RenderConfig) -> Result<Corpora> {
    Ok(Corpora {
        realistic: build_corpus(cfg, Source::RealisticAnalog, envs, render)?,
        synthetic: build_corpus(cfg, Source::SyntheticAnalog, envs, render)?,
    })
}

/// One row of the labeled-corpus manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub category: usize,
    pub source: Source,
    pub raw_score: Option<f64>,
    pub label: Option<bool>,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("path,category,source,raw_score,label\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.path,
            CATEGORIES[e.category],
            e.source.name(),
            e.raw_score.map(|s| format!("{s:.9}")).unwrap_or_default(),
            e.label.map(|l| (l as u8).to_string()).unwrap_or_default()
        ));
    }
    Ok(std::fs::write(path, out)?)
}

// ---- prompts ------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prompt {
    pub category: usize,
    pub variation: u64,
}

/// Fraction of the initial noise variance that is fixed per prompt.
const PROMPT_NOISE_SHARE: f64 = 0.5;
const PROMPT_NOISE_SEED: u64 = 0x7072_6f6d_7074;

impl Prompt {
    pub fn label(&self) -> String {
        format!("{}-{}", CATEGORIES.get(self.category).unwrap_or(&"unknown"), self.variation)
    }

    /// `x_T` for this prompt: a blend of prompt-specific and per-sample
    /// standard normals, itself standard normal.
    pub fn initial_noise(&self, shape: &[usize], rng: &mut StreamRng) -> Tensor {
        let anchor = standard_normal_like(shape, &mut stream(PROMPT_NOISE_SEED, &[self.category as u64, self.variation]));
        let fresh = standard_normal_like(shape, rng);
        let (a, b) = ((1.0 - PROMPT_NOISE_SHARE).sqrt(), PROMPT_NOISE_SHARE.sqrt());
        let data = anchor.data().iter().zip(fresh.data()).map(|(p, q)| a * p + b * q).collect();
        Tensor::new(shape, data).expect("shape from caller")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub role: Role,
    pub prompts: Vec<Prompt>,
}

/// Offset separating held-out variation ids from training candidates.
pub const HELDOUT_VARIATION_BASE: u64 = 1 << 32;

impl PromptSet {
    /// `per_category` prompts for every category, variations numbered from
    /// the role's base.
    pub fn candidates(role: Role, categories: usize, per_category: usize) -> Self {
        let base = match role {
            Role::Train => 0,
            Role::Heldout => HELDOUT_VARIATION_BASE,
        };
        let prompts = (0..categories)
            .flat_map(|c| {
                (0..per_category as u64).map(move |v| Prompt {
                    category: c,
                    variation: base + v,
                })
            })
            .collect();
        Self { role, prompts }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn is_disjoint(&self, other: &PromptSet) -> bool {
        let a: HashSet<&Prompt> = self.prompts.iter().collect();
        other.prompts.iter().all(|p| !a.contains(p))
    }

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

/// How many prompts each category keeps so the total is `total`: an even
/// split with the remainder going to the lowest category ids.
pub fn keep_counts(total: usize, categories: usize) -> Vec<usize> {
    (0..categories).map(|c| total / categories + usize::from(c < total % categories)).collect()
}

/// Indices of the `keep[c]` lowest-scoring entries of each category, ties
/// broken by index. Output is grouped by category, each group ascending.
pub fn select_lowest(categories: &[usize], scores: &[f64], keep: &[usize]) -> Result<Vec<usize>> {
    if categories.len() != scores.len() {
        return invalid("one score per candidate required");
    }
    let mut out = Vec::new();
    for (c, &k) in keep.iter().enumerate() {
        let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| categories[i] == c).collect();
        if idx.len() < k {
            return invalid(format!("category {c} has {} candidates, {k} requested", idx.len()));
        }
        idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        out.extend_from_slice(&idx[..k]);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PromptSelection {
    pub selected: PromptSet,
    /// Mean reward per candidate, in candidate order.
    pub mean_scores: Vec<f64>,
}

/// Scores `samples_per_prompt` samples per candidate and keeps the
/// lowest-mean prompts per category.
pub fn select_training_prompts<D: Denoiser + ?Sized, R: Reward + ?Sized>(
    policy: &D,
    reward: &R,
    candidates: &PromptSet,
    samples_per_prompt: usize,
    keep: &[usize],
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<PromptSelection> {
    if samples_per_prompt == 0 {
        return invalid("samples_per_prompt must be at least 1");
    }
    let jobs: Vec<(usize, usize)> = (0..candidates.len()).flat_map(|p| (0..samples_per_prompt).map(move |s| (p, s))).collect();
    let rewards: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let prompt = candidates.prompts[p];
            let mut rng = stream(seed, &[0x5e1, p as u64, s as u64]);
            let x_t = prompt.initial_noise(shape, &mut rng);
            let traj = sample_trajectory_from(policy, prompt.category, x_t, schedule, &mut rng)?;
            reward.reward(traj.final_sample(), &mut rng)
        })
        .collect::<Result<_>>()?;
    let mean_scores: Vec<f64> = rewards.chunks(samples_per_prompt).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let cats: Vec<usize> = candidates.prompts.iter().map(|p| p.category).collect();
    let idx = select_lowest(&cats, &mean_scores, keep)?;
    Ok(PromptSelection {
        selected: PromptSet {
            role: Role::Train,
            prompts: idx.iter().map(|&i| candidates.prompts[i]).collect(),
        },
        mean_scores,
    })
}

/// Grid tensor in `[-1, 1]` to material maps: clamp, rescale, unpack.
pub fn decode(x0: &Tensor) -> Result<MaterialMaps> {
    let clamped = x0.map(|v| v.clamp(-1.0, 1.0));
    unpack(&GridImage::from_tensor(&clamped)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{make_environment_set, DEFAULT_IRRADIANCE};

    #[test]
    fn generators_are_deterministic_and_bounded() {
        for c in 0..CATEGORIES.len() {
            let a = generate_material(c, 42, 16).unwrap();
            assert_eq!(a, generate_material(c, 42, 16).unwrap());
            assert_ne!(a, generate_material(c, 43, 16).unwrap());
            for v in a.albedo.iter().chain(&a.height).chain(&a.roughness).chain(&a.metallicity) {
                assert!((0.0..=1.0).contains(v));
            }
        }
        assert!(generate_material(8, 0, 16).is_err());
    }

    #[test]
    fn metal_and_grass_statistics() {
        let mean = |c: usize| (0..100).map(|s| generate_material(c, s, 16).unwrap().mean_metallicity()).sum::<f64>() / 100.0;
        assert!(mean(category_id("metal").unwrap()) > 0.5);
        assert!(mean(category_id("grass").unwrap()) < 0.05);
    }

    #[test]
    fn degrade_zero_is_identity() {
        let m = generate_material(2, 5, 16).unwrap();
        assert_eq!(degrade(&m, 0.0).unwrap(), m);
        let d = degrade(&m, 1.0).unwrap();
        assert!(d.roughness.iter().all(|&r| (r - d.roughness[0]).abs() < 1e-12));
        assert!(degrade(&m, 1.5).is_err());
    }

    #[test]
    fn corpus_counts() {
        let envs = make_environment_set(4, 2, 0, DEFAULT_IRRADIANCE).unwrap();
        let cfg = CorpusConfig {
            materials: 6,
            lightings: 10,
            map_res: 8,
            ..Default::default()
        };
        let c = build_corpora(&cfg, &envs, &RenderConfig::default()).unwrap();
        assert_eq!(c.realistic.len(), 60);
        assert_eq!(c.synthetic.len(), 60);
        assert!(c.synthetic.iter().all(|r| r.source == Source::SyntheticAnalog));
    }

    #[test]
    fn prompt_sets_are_disjoint_and_roundtrip() {
        let train = PromptSet::candidates(Role::Train, 8, 5);
        let held = PromptSet::candidates(Role::Heldout, 8, 5);
        assert!(train.is_disjoint(&held));
        assert!(!train.is_disjoint(&train));
        assert_eq!(PromptSet::from_text(&held.to_text().unwrap()).unwrap(), held);
    }

    #[test]
    fn keep_counts_total() {
        let k = keep_counts(100, 8);
        assert_eq!(k.iter().sum::<usize>(), 100);
        assert_eq!(k, vec![13, 13, 13, 13, 12, 12, 12, 12]);
    }

    #[test]
    fn select_lowest_with_ties() {
        let cats = [0, 1, 0, 0, 1, 1];
        let scores = [0.5, 0.2, 0.1, 0.5, 0.2, 0.9];
        assert_eq!(select_lowest(&cats, &scores, &[2, 2]).unwrap(), vec![2, 0, 1, 4]);
        assert_eq!(select_lowest(&cats, &scores, &[3, 3]).unwrap().len(), 6);
        assert!(select_lowest(&cats, &scores, &[4, 0]).is_err());
    }

    #[test]
    fn prompt_noise_is_anchored() {
        let p = Prompt { category: 1, variation: 3 };
        let a = p.initial_noise(&[3, 16, 16], &mut stream(0, &[]));
        let b = p.initial_noise(&[3, 16, 16], &mut stream(1, &[]));
        let q = Prompt { category: 1, variation: 4 }.initial_noise(&[3, 16, 16], &mut stream(2, &[]));
        let corr = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>();
        assert_ne!(a, b);
        assert!(corr(&a, &b) > corr(&a, &q));
    }
}
