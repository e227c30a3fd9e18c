//! Synthetic CT-like scan generator.
//!
//! Each scan is a bright background holding a tissue cylinder with two dark
//! lung ellipsoids, padded with bright cap slices at both ends so pruning has
//! something to remove. Class-1 scans add bright blobs strictly inside the
//! lungs. Structure and noise draw from one random stream and blobs from
//! another, so toggling blobs on a fixed seed yields a paired twin that
//! differs only inside lung voxels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::{write_manifest, DatasetError, ManifestRecord};
use crate::volume::{write_pgm_8, IntensityDomain, Volume, VolumeError};

const BACKGROUND: f32 = 0.80;
const TISSUE: f32 = 0.55;
const LUNG: f32 = 0.10;
const CAP: f32 = 0.85;
const NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth options: {0}")]
    InvalidOptions(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Manifest(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { depth: 48, height: 64, width: 64 }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<(), SynthError> {
        // Caps take up to 6 slices per end; require room for a real torso.
        if self.depth < 20 {
            return Err(SynthError::InvalidOptions(format!(
                "depth must be at least 20, got {}",
                self.depth
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(SynthError::InvalidOptions(format!(
                "height and width must be at least 16, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in (z, y, x) voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }
}

/// Geometry of one generated scan, exposed for structural assertions.
#[derive(Debug, Clone)]
pub struct ScanLayout {
    pub neck_slices: usize,
    pub abdomen_slices: usize,
    pub lungs: [Ellipsoid; 2],
    pub blobs: Vec<Ellipsoid>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one scan in raw intensity units with voxel values in [0, 1].
///
/// Anatomy and noise consume only the anatomy stream; blob placement consumes
/// only the blob stream. The `with_blobs = false` twin of a seed therefore
/// shares every non-blob voxel bit for bit.
pub fn generate_scan(
    opts: &SynthOptions,
    with_blobs: bool,
    scan_seed: u64,
    scan_id: &str,
) -> Result<(Volume, ScanLayout), SynthError> {
    opts.validate()?;
    let mut anatomy = ChaCha8Rng::seed_from_u64(mix64(scan_seed ^ 0xA11A_70DE));
    let mut blob_rng = ChaCha8Rng::seed_from_u64(mix64(scan_seed ^ 0xB10B_5EED));
    let (d, h, w) = (opts.depth, opts.height, opts.width);
    let (df, hf, wf) = (d as f64, h as f64, w as f64);

    let neck = anatomy.gen_range(3..=6usize);
    let abdomen = anatomy.gen_range(3..=6usize);
    let torso = df - (neck + abdomen) as f64;

    let body_cy = hf * (0.5 + anatomy.gen_range(-0.02..0.02));
    let body_cx = wf * (0.5 + anatomy.gen_range(-0.02..0.02));
    let body_ry = hf * 0.46 * (1.0 + anatomy.gen_range(-0.05..0.05));
    let body_rx = wf * 0.46 * (1.0 + anatomy.gen_range(-0.05..0.05));

    let mut lungs = Vec::with_capacity(2);
    for side in [-1.0, 1.0] {
        lungs.push(Ellipsoid {
            center: [
                neck as f64 + torso * (0.5 + anatomy.gen_range(-0.03..0.03)),
                hf * (0.5 + anatomy.gen_range(-0.03..0.03)),
                wf * (0.5 + side * 0.16 * (1.0 + anatomy.gen_range(-0.1..0.1))),
            ],
            radii: [
                torso * 0.48 * (1.0 + anatomy.gen_range(-0.05..0.05)),
                hf * 0.22 * (1.0 + anatomy.gen_range(-0.1..0.1)),
                wf * 0.13 * (1.0 + anatomy.gen_range(-0.1..0.1)),
            ],
        });
    }
    let lungs = [lungs[0], lungs[1]];

    let mut blobs = Vec::new();
    let mut blob_values = Vec::new();
    if with_blobs {
        let count = blob_rng.gen_range(1..=3usize);
        for _ in 0..count {
            let lung = lungs[blob_rng.gen_range(0..2usize)];
            let blob = Ellipsoid {
                center: [
                    lung.center[0] + lung.radii[0] * blob_rng.gen_range(-0.15..0.15),
                    lung.center[1] + lung.radii[1] * blob_rng.gen_range(-0.35..0.35),
                    lung.center[2] + lung.radii[2] * blob_rng.gen_range(-0.35..0.35),
                ],
                radii: [
                    lung.radii[0] * blob_rng.gen_range(0.35..0.55),
                    lung.radii[1] * blob_rng.gen_range(0.35..0.60),
                    lung.radii[2] * blob_rng.gen_range(0.35..0.60),
                ],
            };
            blobs.push(blob);
            blob_values.push(blob_rng.gen_range(0.65..0.75f32));
        }
    }

    let mut voxels = vec![0.0f32; d * h * w];
    for z in 0..d {
        let cap = z < neck || z >= d - abdomen;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - body_cy) / body_ry;
                let dx = (x as f64 - body_cx) / body_rx;
                let in_body = dy * dy + dx * dx <= 1.0;
                let mut value = match (in_body, cap) {
                    (false, _) => BACKGROUND,
                    (true, true) => CAP,
                    (true, false) => TISSUE,
                };
                if !cap && in_body {
                    let in_lung = lungs.iter().any(|l| l.contains(z, y, x));
                    if in_lung {
                        value = LUNG;
                        for (blob, &bv) in blobs.iter().zip(&blob_values) {
                            if blob.contains(z, y, x) {
                                value = bv;
                            }
                        }
                    }
                }
                voxels[(z * h + y) * w + x] = value;
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in &mut voxels {
        *v = (*v + noise.sample(&mut anatomy) as f32).clamp(0.0, 1.0);
    }

    let volume = Volume::new(d, h, w, voxels, IntensityDomain::Raw, scan_id);
    let layout = ScanLayout { neck_slices: neck, abdomen_slices: abdomen, lungs, blobs };
    Ok((volume, layout))
}

/// Writes a volume as an 8-bit PGM slice stack (`slice_000.pgm`, ...).
pub fn write_scan_dir(dir: &Path, v: &Volume) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|source| SynthError::Io { path: dir.to_path_buf(), source })?;
    let plane = v.height * v.width;
    for z in 0..v.depth {
        let samples: Vec<u8> = v.voxels[z * plane..(z + 1) * plane]
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let path = dir.join(format!("slice_{z:03}.pgm"));
        write_pgm_8(&path, v.height, v.width, &samples)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub scan_dirs: usize,
}

/// Generates a balanced labeled corpus: `n_train` scans in `train.jsonl` and
/// `n_val` in `val.jsonl`, alternating labels within each split.
pub fn generate_corpus(
    out_dir: &Path,
    n_train: usize,
    n_val: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<CorpusSummary, SynthError> {
    opts.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|source| SynthError::Io { path: out_dir.to_path_buf(), source })?;
    let mut train_records = Vec::with_capacity(n_train);
    let mut val_records = Vec::with_capacity(n_val);
    for i in 0..n_train + n_val {
        let in_split = if i < n_train { i } else { i - n_train };
        let label = in_split % 2;
        let id = format!("scan_{i:04}");
        let scan_seed = mix64(seed ^ mix64(i as u64));
        let (volume, _) = generate_scan(opts, label == 1, scan_seed, &id)?;
        write_scan_dir(&out_dir.join(&id), &volume)?;
        let record = ManifestRecord { id: id.clone(), path: id, label };
        if i < n_train {
            train_records.push(record);
        } else {
            val_records.push(record);
        }
    }
    let train_manifest = out_dir.join("train.jsonl");
    let val_manifest = out_dir.join("val.jsonl");
    write_manifest(&train_manifest, &train_records)?;
    write_manifest(&val_manifest, &val_records)?;
    Ok(CorpusSummary { train_manifest, val_manifest, scan_dirs: n_train + n_val })
}
