//! Synthetic ground-terrain generator with controllable spatial-vs-angular
//! class signal.
//!
//! Per sample and view the image is
//!
//! ```text
//! I(x; theta) = clamp01( alpha * [ T(x) * (rho0 + rho1*cos(theta - theta0))
//!                                  + relief_amp * dh/dx(x) * tan(theta) ]
//!                        + noise )
//! ```
//!
//! where T is the class's procedural texture field (unit mean, exactly),
//! h a per-sample height field, alpha a per-(sample, illumination) gain
//! drawn from `gain_range` (it masks absolute brightness so angular classes
//! cannot be read off a single view's intensity), and noise is i.i.d.
//! Gaussian per image. The differential partner uses theta + delta with the
//! same alpha and texture but fresh noise. Everything is deterministic given
//! the seed.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::rng::{derive_seed, hash_str, rng_for};
use crate::tensor::Tensor;

use super::image_io::write_raw;
use super::manifest::{Manifest, ManifestRecord, Split};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    BandNoise,
    Stripes,
    Blobs,
}

impl fmt::Display for TextureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextureFamily::BandNoise => write!(f, "band-noise"),
            TextureFamily::Stripes => write!(f, "stripes"),
            TextureFamily::Blobs => write!(f, "blobs"),
        }
    }
}

impl FromStr for TextureFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "band-noise" => Ok(TextureFamily::BandNoise),
            "stripes" => Ok(TextureFamily::Stripes),
            "blobs" => Ok(TextureFamily::Blobs),
            other => Err(format!("unknown texture family '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialSpec {
    pub family: TextureFamily,
    /// Rough cycles per image (band center / stripe frequency / blob density).
    pub frequency: f64,
    pub orientation_deg: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngularSpec {
    /// Base albedo.
    pub rho0: f64,
    /// Angular response amplitude.
    pub rho1: f64,
    /// Response phase in degrees.
    pub theta0_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClassSpec {
    pub class_id: usize,
    pub name: String,
    pub spatial: SpatialSpec,
    pub angular: AngularSpec,
    pub relief_amp: f64,
}

impl SynthClassSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.angular.rho0 <= 0.0 {
            return Err(DataError::Generator(format!(
                "class '{}': rho0 must be > 0",
                self.name
            )));
        }
        if self.angular.rho0 + self.angular.rho1.abs() > 1.0 {
            return Err(DataError::Generator(format!(
                "class '{}': rho0 + |rho1| = {} exceeds 1 (pre-gain intensity bound)",
                self.name,
                self.angular.rho0 + self.angular.rho1.abs()
            )));
        }
        if self.spatial.contrast < 0.0 || self.spatial.frequency <= 0.0 {
            return Err(DataError::Generator(format!(
                "class '{}': bad spatial spec",
                self.name
            )));
        }
        Ok(())
    }
}

/// The nine standard base angles, -40 to +40 degrees in 10-degree steps.
pub fn standard_views() -> Vec<f64> {
    (-4..=4).map(|k| k as f64 * 10.0).collect()
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub specs: Vec<SynthClassSpec>,
    pub n_samples_per_class: usize,
    pub views_deg: Vec<f64>,
    pub delta_deg: f64,
    pub image_size: usize,
    pub gain_range: (f64, f64),
    pub noise_sigma: f64,
    pub n_illum: usize,
    pub seed: u64,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.specs.is_empty() {
            return Err(DataError::Generator("no class specs".into()));
        }
        for s in &self.specs {
            s.validate()?;
        }
        if self.n_samples_per_class == 0 || self.n_illum == 0 || self.views_deg.is_empty() {
            return Err(DataError::Generator("empty sample/view/illumination plan".into()));
        }
        for &v in &self.views_deg {
            if !(-90.0..90.0).contains(&v) || !(-90.0..90.0).contains(&(v + self.delta_deg)) {
                return Err(DataError::Generator(format!(
                    "view angle {v} (+delta {}) outside (-90, 90)",
                    self.delta_deg
                )));
            }
        }
        if self.delta_deg <= 0.0 {
            return Err(DataError::Generator("delta_deg must be > 0".into()));
        }
        if self.gain_range.0 <= 0.0 || self.gain_range.0 > self.gain_range.1 {
            return Err(DataError::Generator(format!("bad gain range {:?}", self.gain_range)));
        }
        if self.image_size < 8 {
            return Err(DataError::Generator("image_size must be >= 8".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::Generator("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-(sample, illumination) generation facts, returned for verification.
#[derive(Clone, Debug)]
pub struct SampleStats {
    pub class_id: usize,
    pub sample_id: String,
    pub illumination: String,
    pub alpha: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug)]
pub struct Generated {
    pub manifest: Manifest,
    pub stats: Vec<SampleStats>,
}

// ── Procedural fields ───────────────────────────────────────────────────

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with clamp-to-edge boundaries.
fn blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x + i).saturating_sub(radius).min(size - 1);
                acc += kv * field[y * size + sx];
            }
            tmp[y * size + x] = acc;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y + i).saturating_sub(radius).min(size - 1);
                acc += kv * tmp[sy * size + x];
            }
            out[y * size + x] = acc;
        }
    }
    out
}

fn zero_mean_unit_std(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean: f64 = field.iter().sum::<f64>() / n;
    let var: f64 = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-9);
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

/// Floors at 0.05 and rescales so the mean is exactly 1.
fn to_unit_mean_texture(mut field: Vec<f64>, contrast: f64) -> Vec<f64> {
    for v in field.iter_mut() {
        *v = (1.0 + contrast * *v).max(0.05);
    }
    let mean: f64 = field.iter().sum::<f64>() / field.len() as f64;
    field.iter_mut().for_each(|v| *v /= mean);
    field
}

fn texture_field(spec: &SpatialSpec, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size * size;
    match spec.family {
        TextureFamily::BandNoise => {
            let white: Vec<f64> = (0..n).map(|_| box_muller(rng)).collect();
            let sigma_small = (size as f64 / (8.0 * spec.frequency)).max(0.5);
            let lo = blur(&white, size, sigma_small);
            let hi = blur(&white, size, 2.0 * sigma_small);
            let mut band: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a - b).collect();
            zero_mean_unit_std(&mut band);
            to_unit_mean_texture(band, spec.contrast)
        }
        TextureFamily::Stripes => {
            let phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            let phi = spec.orientation_deg.to_radians();
            let (c, s) = (phi.cos(), phi.sin());
            let f = spec.frequency * std::f64::consts::TAU / size as f64;
            let mut field = vec![0.0; n];
            for y in 0..size {
                for x in 0..size {
                    field[y * size + x] = (f * (x as f64 * c + y as f64 * s) + phase).sin();
                }
            }
            to_unit_mean_texture(field, spec.contrast)
        }
        TextureFamily::Blobs => {
            let count = (spec.frequency * spec.frequency).round().max(1.0) as usize;
            let sigma = size as f64 / (4.0 * spec.frequency);
            let mut field = vec![0.0; n];
            for _ in 0..count {
                let cx = rng.random::<f64>() * size as f64;
                let cy = rng.random::<f64>() * size as f64;
                for y in 0..size {
                    for x in 0..size {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        field[y * size + x] += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            zero_mean_unit_std(&mut field);
            to_unit_mean_texture(field, spec.contrast)
        }
    }
}

/// Horizontal gradient of a smooth per-sample height field (central
/// differences, one-sided at the borders), unit std.
fn relief_gradient(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| box_muller(rng)).collect();
    let mut h = blur(&white, size, size as f64 / 8.0);
    zero_mean_unit_std(&mut h);
    let mut grad = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let left = h[y * size + x.saturating_sub(1)];
            let right = h[y * size + (x + 1).min(size - 1)];
            let denom = if x == 0 || x == size - 1 { 1.0 } else { 2.0 };
            grad[y * size + x] = (right - left) / denom;
        }
    }
    zero_mean_unit_std(&mut grad);
    grad
}

// ── Generation ──────────────────────────────────────────────────────────

fn format_theta(theta: f64) -> String {
    format!("{:+03}", theta.round() as i64)
}

fn render_image(
    texture: &[f64],
    relief_grad: &[f64],
    spec: &SynthClassSpec,
    alpha: f64,
    theta_deg: f64,
    noise_sigma: f64,
    noise_rng: &mut ChaCha8Rng,
) -> (Vec<f32>, usize) {
    let reflect = spec.angular.rho0
        + spec.angular.rho1 * (theta_deg - spec.angular.theta0_deg).to_radians().cos();
    let shade = theta_deg.to_radians().tan();
    let mut clipped = 0usize;
    let data: Vec<f32> = texture
        .iter()
        .zip(relief_grad)
        .map(|(&t, &g)| {
            let noise = if noise_sigma > 0.0 {
                noise_sigma * box_muller(noise_rng)
            } else {
                0.0
            };
            let v = alpha * (t * reflect + spec.relief_amp * g * shade) + noise;
            if !(0.0..=1.0).contains(&v) {
                clipped += 1;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    (data, clipped)
}

/// Generates the dataset under `out_dir`: raw float images in the
/// `class/sample/theta_{±DD}_{base|delta}_{illum}.raw` layout plus
/// `manifest.tsv`. Returns the manifest and per-sample generation stats.
pub fn generate_synthetic(cfg: &GenerateConfig, out_dir: &Path) -> Result<Generated, DataError> {
    cfg.validate()?;
    let size = cfg.image_size;

    struct Job {
        class_idx: usize,
        sample_idx: usize,
    }
    let jobs: Vec<Job> = (0..cfg.specs.len())
        .flat_map(|class_idx| {
            (0..cfg.n_samples_per_class).map(move |sample_idx| Job { class_idx, sample_idx })
        })
        .collect();

    struct SampleOut {
        records: Vec<ManifestRecord>,
        stats: Vec<SampleStats>,
        files: Vec<(String, Tensor<f32>)>,
        pixels: usize,
        clipped: Vec<usize>, // per illumination
    }

    let results: Vec<Result<SampleOut, DataError>> = jobs
        .par_iter()
        .map(|job| {
            let spec = &cfg.specs[job.class_idx];
            let sample_id = format!("{}_s{:03}", spec.name, job.sample_idx);
            let sample_tag = &[hash_str(&sample_id)];

            let mut tex_rng = rng_for(derive_seed(cfg.seed, sample_tag), &[hash_str("texture")]);
            let texture = texture_field(&spec.spatial, size, &mut tex_rng);
            let mut relief_rng = rng_for(derive_seed(cfg.seed, sample_tag), &[hash_str("relief")]);
            let relief = relief_gradient(size, &mut relief_rng);

            let mut records = Vec::new();
            let mut stats = Vec::new();
            let mut files = Vec::new();
            let mut clipped = vec![0usize; cfg.n_illum];

            for illum_idx in 0..cfg.n_illum {
                let illum = format!("illum{illum_idx}");
                let mut gain_rng = rng_for(
                    derive_seed(cfg.seed, sample_tag),
                    &[hash_str("gain"), illum_idx as u64],
                );
                let (lo, hi) = cfg.gain_range;
                let alpha = lo + (hi - lo) * gain_rng.random::<f64>();

                for (view_idx, &theta) in cfg.views_deg.iter().enumerate() {
                    for (is_delta, angle) in [(false, theta), (true, theta + cfg.delta_deg)] {
                        let mut noise_rng = rng_for(
                            derive_seed(cfg.seed, sample_tag),
                            &[
                                hash_str("noise"),
                                illum_idx as u64,
                                view_idx as u64,
                                is_delta as u64,
                            ],
                        );
                        let (data, clip) = render_image(
                            &texture,
                            &relief,
                            spec,
                            alpha,
                            angle,
                            cfg.noise_sigma,
                            &mut noise_rng,
                        );
                        clipped[illum_idx] += clip;
                        let kind = if is_delta { "delta" } else { "base" };
                        let rel_path = format!(
                            "{}/sample_{:03}/theta_{}_{}_{}.raw",
                            spec.name,
                            job.sample_idx,
                            format_theta(theta),
                            kind,
                            illum
                        );
                        let tensor = Tensor::from_vec(vec![1, size, size], data)?;
                        files.push((rel_path.clone(), tensor));
                        if !is_delta {
                            records.push(ManifestRecord {
                                path: rel_path,
                                class_id: spec.class_id,
                                sample_id: sample_id.clone(),
                                view_index: view_idx,
                                theta_deg: theta,
                                delta_deg: cfg.delta_deg,
                                illumination: illum.clone(),
                                split: Split::Unassigned,
                            });
                        }
                    }
                }
                stats.push(SampleStats {
                    class_id: spec.class_id,
                    sample_id: sample_id.clone(),
                    illumination: illum,
                    alpha,
                    clipped_fraction: 0.0, // filled below
                });
            }
            Ok(SampleOut {
                records,
                stats,
                files,
                pixels: size * size * cfg.views_deg.len() * 2,
                clipped,
            })
        })
        .collect();

    let mut manifest_records = Vec::new();
    let mut all_stats = Vec::new();
    for result in results {
        let mut s = result?;
        for (illum_idx, st) in s.stats.iter_mut().enumerate() {
            st.clipped_fraction = s.clipped[illum_idx] as f64 / s.pixels as f64;
            if st.clipped_fraction > 0.01 {
                return Err(DataError::Generator(format!(
                    "sample '{}' ({}): {:.2}% of pixels clipped; spec or gain range pushes \
                     intensities out of [0, 1]",
                    st.sample_id,
                    st.illumination,
                    100.0 * st.clipped_fraction
                )));
            }
        }
        for (rel_path, tensor) in &s.files {
            let path = out_dir.join(rel_path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_raw(&path, tensor)?;
        }
        manifest_records.append(&mut s.records);
        all_stats.append(&mut s.stats);
    }

    let manifest = Manifest::new(manifest_records);
    manifest.validate()?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(Generated {
        manifest,
        stats: all_stats,
    })
}

// ── Presets ─────────────────────────────────────────────────────────────

fn mean_cos_over_views(views: &[f64], theta0: f64) -> f64 {
    views
        .iter()
        .map(|&v| (v - theta0).to_radians().cos())
        .sum::<f64>()
        / views.len() as f64
}

/// Four classes with identical spatial statistics that differ only in their
/// angular response (amplitude and phase of rho1). Base albedos are adjusted
/// so the view-averaged brightness matches across classes; together with the
/// per-sample gain this removes single-view intensity as a class cue.
pub fn angular_preset() -> Vec<SynthClassSpec> {
    let spatial = SpatialSpec {
        family: TextureFamily::BandNoise,
        frequency: 6.0,
        orientation_deg: 0.0,
        contrast: 0.15,
    };
    let views = standard_views();
    let rho_base = 0.45;
    let make = |class_id: usize, name: &str, rho1: f64, theta0_deg: f64| {
        let rho0 = rho_base - rho1 * mean_cos_over_views(&views, theta0_deg);
        SynthClassSpec {
            class_id,
            name: name.into(),
            spatial: spatial.clone(),
            angular: AngularSpec { rho0, rho1, theta0_deg },
            relief_amp: 0.05,
        }
    };
    vec![
        make(0, "flat", 0.0, 0.0),
        make(1, "gloss_pos", 0.12, 90.0),
        make(2, "gloss_neg", 0.12, -90.0),
        make(3, "specular", 0.27, 0.0),
    ]
}

/// Eight classes that differ only spatially (texture family, frequency,
/// orientation); the angular response is identical and flat.
pub fn spatial_preset() -> Vec<SynthClassSpec> {
    let angular = AngularSpec {
        rho0: 0.45,
        rho1: 0.0,
        theta0_deg: 0.0,
    };
    let spec = |class_id: usize, name: &str, family, frequency: f64, orientation_deg: f64| SynthClassSpec {
        class_id,
        name: name.into(),
        spatial: SpatialSpec {
            family,
            frequency,
            orientation_deg,
            contrast: 0.25,
        },
        angular: angular.clone(),
        relief_amp: 0.05,
    };
    vec![
        spec(0, "stripes_h", TextureFamily::Stripes, 5.0, 0.0),
        spec(1, "stripes_d", TextureFamily::Stripes, 5.0, 45.0),
        spec(2, "stripes_v", TextureFamily::Stripes, 5.0, 90.0),
        spec(3, "stripes_fine", TextureFamily::Stripes, 10.0, 0.0),
        spec(4, "band_coarse", TextureFamily::BandNoise, 3.0, 0.0),
        spec(5, "band_fine", TextureFamily::BandNoise, 10.0, 0.0),
        spec(6, "blobs_large", TextureFamily::Blobs, 3.0, 0.0),
        spec(7, "blobs_small", TextureFamily::Blobs, 6.0, 0.0),
    ]
}

impl GenerateConfig {
    /// The angular-signal benchmark dataset configuration.
    pub fn angular_default(seed: u64) -> Self {
        GenerateConfig {
            specs: angular_preset(),
            n_samples_per_class: 20,
            views_deg: standard_views(),
            delta_deg: 5.0,
            image_size: 36,
            gain_range: (0.65, 1.35),
            noise_sigma: 0.01,
            n_illum: 1,
            seed,
        }
    }

    /// The spatial benchmark dataset configuration.
    pub fn spatial_default(seed: u64) -> Self {
        GenerateConfig {
            specs: spatial_preset(),
            n_samples_per_class: 15,
            views_deg: standard_views(),
            delta_deg: 5.0,
            image_size: 36,
            gain_range: (0.8, 1.2),
            noise_sigma: 0.01,
            n_illum: 1,
            seed,
        }
    }
}
