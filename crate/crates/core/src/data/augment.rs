//! Training augmentation: independent horizontal/vertical stretch, optional
//! mirror flips, random crop, and per-channel normalization.
//!
//! One `AugmentDraw` describes the whole geometric transform; applying the
//! same draw to an (I_v, I_delta) pair keeps the two streams aligned.
//! Normalization subtracts the per-channel mean from I_v but only rescales
//! I_delta (a difference has no mean to remove).

use rand::Rng;

use crate::tensor::{Element, Tensor};

use super::DataError;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Stretch range in percent: each axis scales by U(1 - p, 1 + p).
    pub stretch_pct: f64,
    pub flip_prob: f64,
    /// Square crop size after stretching.
    pub crop: usize,
}

impl AugmentConfig {
    pub fn training_default(crop: usize) -> Self {
        AugmentConfig {
            stretch_pct: 10.0,
            flip_prob: 0.5,
            crop,
        }
    }

    /// No stretch, no flips, center crop only.
    pub fn identity(crop: usize) -> Self {
        AugmentConfig {
            stretch_pct: 0.0,
            flip_prob: 0.0,
            crop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub sx: f64,
    pub sy: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop: usize,
}

impl AugmentDraw {
    pub fn identity(crop: usize, h: usize, w: usize) -> Self {
        AugmentDraw {
            sx: 1.0,
            sy: 1.0,
            flip_h: false,
            flip_v: false,
            crop_x: (w - crop) / 2,
            crop_y: (h - crop) / 2,
            crop,
        }
    }
}

/// Draws one transform for an `[C, h, w]` image. Errors if the crop cannot
/// fit after the worst-case shrink.
pub fn draw_augment<R: Rng>(
    cfg: &AugmentConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<AugmentDraw, DataError> {
    let p = cfg.stretch_pct / 100.0;
    let worst_h = ((h as f64) * (1.0 - p)).floor() as usize;
    let worst_w = ((w as f64) * (1.0 - p)).floor() as usize;
    if cfg.crop == 0 || cfg.crop > worst_h || cfg.crop > worst_w {
        return Err(DataError::Generator(format!(
            "crop {} cannot fit a {h}x{w} image stretched by -{}%",
            cfg.crop, cfg.stretch_pct
        )));
    }
    let sy = 1.0 - p + 2.0 * p * rng.random::<f64>();
    let sx = 1.0 - p + 2.0 * p * rng.random::<f64>();
    let new_h = ((h as f64) * sy).round().max(cfg.crop as f64) as usize;
    let new_w = ((w as f64) * sx).round().max(cfg.crop as f64) as usize;
    let flip_h = rng.random::<f64>() < cfg.flip_prob;
    let flip_v = rng.random::<f64>() < cfg.flip_prob;
    let crop_y = rng.random_range(0..=new_h - cfg.crop);
    let crop_x = rng.random_range(0..=new_w - cfg.crop);
    Ok(AugmentDraw {
        sx,
        sy,
        flip_h,
        flip_v,
        crop_x,
        crop_y,
        crop: cfg.crop,
    })
}

fn bilinear_resize<T: Element>(img: &Tensor<T>, new_h: usize, new_w: usize) -> Tensor<T> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if new_h == h && new_w == w {
        return img.clone();
    }
    let mut out = vec![T::zero(); c * new_h * new_w];
    let scale_y = if new_h > 1 { (h - 1) as f64 / (new_h - 1) as f64 } else { 0.0 };
    let scale_x = if new_w > 1 { (w - 1) as f64 / (new_w - 1) as f64 } else { 0.0 };
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..][..h * w];
        for y in 0..new_h {
            let fy = y as f64 * scale_y;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..new_w {
                let fx = x as f64 * scale_x;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v00 = plane[y0 * w + x0].as_f64();
                let v01 = plane[y0 * w + x1].as_f64();
                let v10 = plane[y1 * w + x0].as_f64();
                let v11 = plane[y1 * w + x1].as_f64();
                let v = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
                out[(ch * new_h + y) * new_w + x] = T::from_f64(v);
            }
        }
    }
    Tensor::from_vec(vec![c, new_h, new_w], out).unwrap()
}

/// Stretch, flip, crop — in that order.
pub fn apply_geometry<T: Element>(img: &Tensor<T>, draw: &AugmentDraw) -> Tensor<T> {
    let shape = img.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let new_h = ((h as f64) * draw.sy).round().max(draw.crop as f64) as usize;
    let new_w = ((w as f64) * draw.sx).round().max(draw.crop as f64) as usize;
    let resized = bilinear_resize(img, new_h, new_w);

    let k = draw.crop;
    let mut out = vec![T::zero(); c * k * k];
    for ch in 0..c {
        let plane = &resized.data()[ch * new_h * new_w..][..new_h * new_w];
        for y in 0..k {
            for x in 0..k {
                let sy = if draw.flip_v { new_h - 1 - (draw.crop_y + y) } else { draw.crop_y + y };
                let sx = if draw.flip_h { new_w - 1 - (draw.crop_x + x) } else { draw.crop_x + x };
                out[(ch * k + y) * k + x] = plane[sy * new_w + sx];
            }
        }
    }
    Tensor::from_vec(vec![c, k, k], out).unwrap()
}

/// The same geometric transform applied to both halves of a view pair.
pub fn augment_pair<T: Element>(
    rgb: &Tensor<T>,
    diff: &Tensor<T>,
    draw: &AugmentDraw,
) -> (Tensor<T>, Tensor<T>) {
    (apply_geometry(rgb, draw), apply_geometry(diff, draw))
}

/// Evaluation-time geometry: center crop, nothing else.
pub fn center_crop<T: Element>(img: &Tensor<T>, crop: usize) -> Tensor<T> {
    let shape = img.shape();
    apply_geometry(img, &AugmentDraw::identity(crop, shape[1], shape[2]))
}

/// Per-channel statistics of a set of images, for input normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Pooled per-channel mean/std over images (population std, floored to
    /// avoid dividing by ~0 on constant channels).
    pub fn compute<'a, T: Element + 'a>(images: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let mut count = 0usize;
        let mut sums: Vec<f64> = Vec::new();
        let mut sq_sums: Vec<f64> = Vec::new();
        let mut per_channel = 0usize;
        for img in images {
            let c = img.shape()[0];
            if sums.is_empty() {
                sums = vec![0.0; c];
                sq_sums = vec![0.0; c];
            }
            per_channel = img.numel() / c;
            for ch in 0..c {
                for &v in &img.data()[ch * per_channel..][..per_channel] {
                    let v = v.as_f64();
                    sums[ch] += v;
                    sq_sums[ch] += v * v;
                }
            }
            count += 1;
        }
        if count == 0 {
            return ChannelStats::identity(1);
        }
        let n = (count * per_channel) as f64;
        let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq_sums
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        ChannelStats { mean, std }
    }
}

/// (x - mean) / std per channel, for base images.
pub fn normalize_image<T: Element>(img: &Tensor<T>, stats: &ChannelStats) -> Tensor<T> {
    scale_channels(img, stats, true)
}

/// x / std per channel, for differential images (same scale, no mean shift).
pub fn normalize_diff<T: Element>(img: &Tensor<T>, stats: &ChannelStats) -> Tensor<T> {
    scale_channels(img, stats, false)
}

fn scale_channels<T: Element>(img: &Tensor<T>, stats: &ChannelStats, shift: bool) -> Tensor<T> {
    let shape = img.shape().to_vec();
    let c = shape[0];
    assert_eq!(c, stats.mean.len(), "channel stats mismatch");
    let per_channel = img.numel() / c;
    let mut out = Vec::with_capacity(img.numel());
    for ch in 0..c {
        let m = if shift { stats.mean[ch] } else { 0.0 };
        let s = stats.std[ch];
        for &v in &img.data()[ch * per_channel..][..per_channel] {
            out.push(T::from_f64((v.as_f64() - m) / s));
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(
            vec![c, h, w],
            (0..c * h * w).map(|v| v as f32 / (c * h * w) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flip_twice_restores_the_crop() {
        let img = ramp(1, 8, 8);
        let mut draw = AugmentDraw::identity(8, 8, 8);
        draw.flip_h = true;
        let once = apply_geometry(&img, &draw);
        let twice = apply_geometry(&once, &draw);
        assert_eq!(twice.data(), img.data());
    }

    #[test]
    fn identity_draw_is_identity_up_to_cropping() {
        let img = ramp(2, 10, 10);
        let out = apply_geometry(&img, &AugmentDraw::identity(10, 10, 10));
        assert_eq!(out.data(), img.data());

        let cropped = center_crop(&img, 8);
        assert_eq!(cropped.shape(), &[2, 8, 8]);
        assert_eq!(cropped.at(&[0, 0, 0]), img.at(&[0, 1, 1]));
    }

    #[test]
    fn identical_pair_stays_identical_under_one_draw() {
        let img = ramp(1, 12, 12);
        let cfg = AugmentConfig::training_default(8);
        let mut rng = rng_for(3, &[1]);
        let draw = draw_augment(&cfg, 12, 12, &mut rng).unwrap();
        let (a, b) = augment_pair(&img, &img, &draw);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let cfg = AugmentConfig::training_default(12);
        let mut rng = rng_for(3, &[2]);
        assert!(draw_augment(&cfg, 12, 12, &mut rng).is_err());
    }

    #[test]
    fn normalization_shifts_base_but_only_scales_diff() {
        let img = Tensor::<f32>::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let stats = ChannelStats {
            mean: vec![2.5],
            std: vec![2.0],
        };
        let base = normalize_image(&img, &stats);
        assert_eq!(base.data(), &[-0.75, -0.25, 0.25, 0.75]);
        let diff = normalize_diff(&img, &stats);
        assert_eq!(diff.data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn stats_of_constant_images_floor_the_std() {
        let img = Tensor::<f32>::full(vec![1, 3, 3], 0.5);
        let stats = ChannelStats::compute([&img].into_iter());
        assert!((stats.mean[0] - 0.5).abs() < 1e-6);
        assert!(stats.std[0] >= 1e-6);
    }
}
