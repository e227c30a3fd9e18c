//! Seeded training-time augmentation and the deterministic eval-time crop.
//!
//! Stages run in a fixed order: transverse random-resized crop, depth crop,
//! in-plane rotation, brightness/contrast jitter. All random draws come from
//! one ChaCha8 stream seeded per call, so a given (volume, config, seed)
//! triple always produces bit-identical output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::volume::{resize_trilinear, IntensityDomain, Volume};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augment config: {0}")]
    InvalidConfig(String),
    #[error("depth crop to {crop} needs {crop} slices, volume {scan_id} has {depth}")]
    DepthTooSmall {
        crop: usize,
        depth: usize,
        scan_id: String,
    },
    #[error("{op}: volume {scan_id} intensities must be unit-domain")]
    NotUnitDomain { op: &'static str, scan_id: String },
}

/// Transverse crop window ranges: `scale` bounds the crop area as a fraction
/// of the slice area, `aspect` multiplies the slice's own width/height ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizedCropRange {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JitterRange {
    /// Brightness shift is drawn from `[-brightness_delta, brightness_delta]`.
    pub brightness_delta: f64,
    pub contrast_factor: (f64, f64),
}

/// Stages set to `None` are skipped entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub resized_crop: Option<ResizedCropRange>,
    pub depth_crop_to: Option<usize>,
    /// Maximum absolute rotation angle in degrees.
    pub rotation_deg: Option<f64>,
    pub jitter: Option<JitterRange>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resized_crop: Some(ResizedCropRange {
                scale: (0.7, 1.0),
                aspect: (0.75, 4.0 / 3.0),
            }),
            depth_crop_to: Some(64),
            rotation_deg: Some(10.0),
            jitter: Some(JitterRange {
                brightness_delta: 0.1,
                contrast_factor: (0.8, 1.2),
            }),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            resized_crop: None,
            depth_crop_to: None,
            rotation_deg: None,
            jitter: None,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |detail: String| Err(AugmentError::InvalidConfig(detail));
        if let Some(rc) = &self.resized_crop {
            let (s0, s1) = rc.scale;
            if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
                return bad(format!("crop scale range ({s0}, {s1}) must satisfy 0 < lo <= hi <= 1"));
            }
            let (a0, a1) = rc.aspect;
            if !(a0 > 0.0 && a0 <= a1) {
                return bad(format!("crop aspect range ({a0}, {a1}) must satisfy 0 < lo <= hi"));
            }
        }
        if let Some(d) = self.depth_crop_to {
            if d == 0 {
                return bad("depth crop target must be at least 1".to_string());
            }
        }
        if let Some(r) = self.rotation_deg {
            if !(r >= 0.0) {
                return bad(format!("rotation bound {r} must be nonnegative"));
            }
        }
        if let Some(j) = &self.jitter {
            if !(j.brightness_delta >= 0.0) {
                return bad(format!("brightness delta {} must be nonnegative", j.brightness_delta));
            }
            let (c0, c1) = j.contrast_factor;
            if !(c0 > 0.0 && c0 <= c1) {
                return bad(format!("contrast range ({c0}, {c1}) must satisfy 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Uniform draw that degenerates to `lo` without consuming randomness when
/// the range is empty, keeping degenerate configs exactly reproducible.
fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn transverse_crop_resize(v: Volume, y0: usize, x0: usize, ch: usize, cw: usize) -> Volume {
    let (depth, full_h, full_w) = (v.depth, v.height, v.width);
    let mut cropped = Vec::with_capacity(depth * ch * cw);
    for z in 0..depth {
        for y in y0..y0 + ch {
            let row = (z * full_h + y) * full_w;
            cropped.extend_from_slice(&v.voxels[row + x0..row + x0 + cw]);
        }
    }
    let sub = Volume::new(depth, ch, cw, cropped, v.intensity_domain, v.scan_id);
    resize_trilinear(sub, (depth, full_h, full_w)).expect("positive resize target")
}

fn depth_crop(v: Volume, start: usize, len: usize) -> Volume {
    let plane = v.height * v.width;
    let kept = v.voxels[start * plane..(start + len) * plane].to_vec();
    Volume::new(len, v.height, v.width, kept, v.intensity_domain, v.scan_id)
}

/// Rotates every slice by the same angle about the slice center, sampling the
/// source bilinearly and filling out-of-bounds reads with zero. Output pixel
/// (y, x) reads source (cy - sin*(x-cx) + cos*(y-cy), cx + cos*(x-cx) + sin*(y-cy)).
fn rotate_inplane(v: Volume, angle_rad: f64) -> Volume {
    if angle_rad == 0.0 {
        return v;
    }
    let (h, w) = (v.height, v.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_rad.sin_cos();
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| {
            let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            (cy - sin * dx + cos * dy, cx + cos * dx + sin * dy)
        })
        .collect();
    let plane = h * w;
    let src = &v.voxels;
    let mut out = vec![0.0f32; src.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, dst)| {
        let slice = &src[z * plane..(z + 1) * plane];
        for (o, &(sy, sx)) in dst.iter_mut().zip(&coords) {
            let (fy, fx) = (sy.floor(), sx.floor());
            let (wy, wx) = (sy - fy, sx - fx);
            let (iy, ix) = (fy as isize, fx as isize);
            let mut acc = 0.0f64;
            for (oy, rowweight) in [(0isize, 1.0 - wy), (1, wy)] {
                let yy = iy + oy;
                if yy < 0 || yy >= h as isize || rowweight == 0.0 {
                    continue;
                }
                for (ox, colweight) in [(0isize, 1.0 - wx), (1, wx)] {
                    let xx = ix + ox;
                    if xx < 0 || xx >= w as isize || colweight == 0.0 {
                        continue;
                    }
                    acc += rowweight * colweight * slice[yy as usize * w + xx as usize] as f64;
                }
            }
            *o = acc as f32;
        }
    });
    Volume::new(v.depth, h, w, out, v.intensity_domain, v.scan_id)
}

fn jitter(mut v: Volume, contrast: f32, brightness: f32) -> Volume {
    for x in &mut v.voxels {
        *x = (contrast * (*x - 0.5) + 0.5 + brightness).clamp(0.0, 1.0);
    }
    v
}

/// Applies the enabled stages in order with parameters drawn from `seed`.
pub fn apply_augmentations(
    v: Volume,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Volume, AugmentError> {
    cfg.validate()?;
    if v.intensity_domain != IntensityDomain::Unit {
        return Err(AugmentError::NotUnitDomain {
            op: "apply_augmentations",
            scan_id: v.scan_id.clone(),
        });
    }
    if let Some(crop) = cfg.depth_crop_to {
        if v.depth < crop {
            return Err(AugmentError::DepthTooSmall {
                crop,
                depth: v.depth,
                scan_id: v.scan_id.clone(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = v;

    if let Some(rc) = &cfg.resized_crop {
        let (full_h, full_w) = (v.height, v.width);
        let scale = sample(&mut rng, rc.scale.0, rc.scale.1);
        let aspect = sample(&mut rng, rc.aspect.0, rc.aspect.1);
        let area = scale * full_h as f64 * full_w as f64;
        let ratio = aspect * full_w as f64 / full_h as f64;
        let cw = ((area * ratio).sqrt().round() as usize).clamp(1, full_w);
        let ch = ((area / ratio).sqrt().round() as usize).clamp(1, full_h);
        let y0 = rng.gen_range(0..=(full_h - ch)) as usize;
        let x0 = rng.gen_range(0..=(full_w - cw)) as usize;
        v = transverse_crop_resize(v, y0, x0, ch, cw);
    }
    if let Some(crop) = cfg.depth_crop_to {
        let start = rng.gen_range(0..=(v.depth - crop)) as usize;
        v = depth_crop(v, start, crop);
    }
    if let Some(max_deg) = cfg.rotation_deg {
        let angle = sample(&mut rng, -max_deg, max_deg).to_radians();
        v = rotate_inplane(v, angle);
    }
    if let Some(j) = &cfg.jitter {
        let contrast = sample(&mut rng, j.contrast_factor.0, j.contrast_factor.1) as f32;
        let brightness = sample(&mut rng, -j.brightness_delta, j.brightness_delta) as f32;
        v = jitter(v, contrast, brightness);
    }
    Ok(v)
}

/// Central contiguous depth window for evaluation, start `floor((D - depth_to)/2)`.
pub fn center_eval_crop(v: Volume, depth_to: usize) -> Result<Volume, AugmentError> {
    if depth_to == 0 || v.depth < depth_to {
        return Err(AugmentError::DepthTooSmall {
            crop: depth_to,
            depth: v.depth,
            scan_id: v.scan_id.clone(),
        });
    }
    let start = (v.depth - depth_to) / 2;
    Ok(depth_crop(v, start, depth_to))
}

/// Per-sample augmentation seed: disperses (global seed, epoch, sample index)
/// so every sample sees fresh draws each epoch while runs stay reproducible.
pub fn sample_seed(global_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(global_seed ^ mix(epoch ^ mix(sample_index)))
}
