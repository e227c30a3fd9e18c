//! CT volume assembly and preprocessing.
//!
//! A scan arrives either as a directory of PGM (P5) slice files, stacked in
//! lexicographic filename order, or as a raw cache (`meta.json` plus
//! `volume.raw`). The preprocessing chain is: min-max normalization to [0,1],
//! optional removal of lung-free slices from both ends, and trilinear resize
//! to a fixed target shape.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no slice files found")]
    EmptyScan { path: PathBuf },
    #[error(
        "{path}: slice is {found_h}x{found_w}, but earlier slices are {expect_h}x{expect_w}"
    )]
    MixedSliceDims {
        path: PathBuf,
        expect_h: usize,
        expect_w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("{path}: byte {offset}: {detail}")]
    PgmFormat {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("{path}: {detail}")]
    RawFormat { path: PathBuf, detail: String },
    #[error("{op}: volume {scan_id} has {found} intensities, expected {expected}")]
    WrongDomain {
        op: &'static str,
        scan_id: String,
        expected: IntensityDomain,
        found: IntensityDomain,
    },
    #[error("{op}: {detail}")]
    Argument { op: &'static str, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io { path: path.to_path_buf(), source }
}

/// Whether voxel values are raw sample intensities or normalized to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityDomain {
    Raw,
    Unit,
}

impl std::fmt::Display for IntensityDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntensityDomain::Raw => "raw",
            IntensityDomain::Unit => "unit",
        })
    }
}

/// A dense 3D scan with row-major (depth, height, width) voxel layout.
#[derive(Debug, Clone)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub voxels: Vec<f32>,
    pub intensity_domain: IntensityDomain,
    pub scan_id: String,
}

impl Volume {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        voxels: Vec<f32>,
        intensity_domain: IntensityDomain,
        scan_id: impl Into<String>,
    ) -> Self {
        assert_eq!(
            voxels.len(),
            depth * height * width,
            "voxel count must equal depth*height*width"
        );
        Volume { depth, height, width, voxels, intensity_domain, scan_id: scan_id.into() }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[(d * self.height + h) * self.width + w]
    }

    fn slice(&self, d: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.voxels[d * plane..(d + 1) * plane]
    }
}

// ---------------------------------------------------------------------------
// PGM (P5) slice files
// ---------------------------------------------------------------------------

struct PgmSlice {
    height: usize,
    width: usize,
    samples: Vec<f32>,
}

fn skip_pgm_space(bytes: &[u8], pos: &mut usize) {
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() {
            *pos += 1;
        } else if b == b'#' {
            while let Some(&c) = bytes.get(*pos) {
                *pos += 1;
                if c == b'\n' {
                    break;
                }
            }
        } else {
            break;
        }
    }
}

fn read_header_int(
    bytes: &[u8],
    pos: &mut usize,
    path: &Path,
    what: &str,
) -> Result<usize, VolumeError> {
    skip_pgm_space(bytes, pos);
    let start = *pos;
    let header_err = |offset: usize, detail: String| VolumeError::PgmFormat {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    match bytes.get(start) {
        None => {
            return Err(header_err(start, format!("unexpected end of header while reading {what}")))
        }
        Some(b) if !b.is_ascii_digit() => {
            return Err(header_err(start, format!("expected {what}, found byte 0x{b:02x}")))
        }
        _ => {}
    }
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .ok_or_else(|| header_err(start, format!("{what} overflows")))?;
        *pos += 1;
    }
    Ok(value)
}

fn read_pgm(path: &Path) -> Result<PgmSlice, VolumeError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let header_err = |offset: usize, detail: String| VolumeError::PgmFormat {
        path: path.to_path_buf(),
        offset,
        detail,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(header_err(0, "expected magic \"P5\"".to_string()));
    }
    let mut pos = 2;
    let width = read_header_int(&bytes, &mut pos, path, "width")?;
    let height = read_header_int(&bytes, &mut pos, path, "height")?;
    if width == 0 || height == 0 {
        return Err(header_err(pos, format!("degenerate slice dimensions {height}x{width}")));
    }
    let maxval_at = pos;
    let maxval = read_header_int(&bytes, &mut pos, path, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(header_err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(header_err(pos, "expected single whitespace after maxval".to_string()))
        }
    }
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(header_err(
            pos,
            format!("pixel data truncated: need {need} bytes, found {}", data.len()),
        ));
    }
    let samples = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]) as f32)
            .collect()
    } else {
        data[..need].iter().map(|&b| b as f32).collect()
    };
    Ok(PgmSlice { height, width, samples })
}

/// Writes one 8-bit binary PGM slice.
pub fn write_pgm_8(
    path: &Path,
    height: usize,
    width: usize,
    samples: &[u8],
) -> Result<(), VolumeError> {
    assert_eq!(samples.len(), height * width, "sample count must equal height*width");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Raw cache (meta.json + volume.raw)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawMeta {
    depth: usize,
    height: usize,
    width: usize,
    dtype: String,
    /// Absent in caches written before normalization ran; those hold raw
    /// intensities.
    #[serde(default)]
    domain: Option<IntensityDomain>,
}

fn read_raw_volume(dir: &Path, scan_id: String) -> Result<Volume, VolumeError> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: RawMeta = serde_json::from_slice(&meta_bytes).map_err(|e| VolumeError::RawFormat {
        path: meta_path.clone(),
        detail: e.to_string(),
    })?;
    if meta.depth == 0 || meta.height == 0 || meta.width == 0 {
        return Err(VolumeError::RawFormat {
            path: meta_path,
            detail: format!(
                "extents must be positive, got {}x{}x{}",
                meta.depth, meta.height, meta.width
            ),
        });
    }
    let bytes_per = match meta.dtype.as_str() {
        "f32" => 4,
        "u16" => 2,
        other => {
            return Err(VolumeError::RawFormat {
                path: meta_path,
                detail: format!("dtype must be \"f32\" or \"u16\", got {other:?}"),
            })
        }
    };
    let n = meta.depth * meta.height * meta.width;
    let raw_path = dir.join("volume.raw");
    let raw = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    if raw.len() != n * bytes_per {
        return Err(VolumeError::RawFormat {
            path: raw_path,
            detail: format!(
                "expected {} bytes ({n} {} samples), found {}",
                n * bytes_per,
                meta.dtype,
                raw.len()
            ),
        });
    }
    let voxels: Vec<f32> = match meta.dtype.as_str() {
        "f32" => raw
            .chunks_exact(4)
            .map(|p| f32::from_le_bytes([p[0], p[1], p[2], p[3]]))
            .collect(),
        _ => raw
            .chunks_exact(2)
            .map(|p| u16::from_le_bytes([p[0], p[1]]) as f32)
            .collect(),
    };
    let domain = meta.domain.unwrap_or(IntensityDomain::Raw);
    Ok(Volume::new(meta.depth, meta.height, meta.width, voxels, domain, scan_id))
}

/// Writes a volume as an f32 raw cache. `volume.raw` lands before `meta.json`
/// so an interrupted write never leaves a directory that parses as a cache.
pub fn write_raw_cache(dir: &Path, v: &Volume) -> Result<(), VolumeError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut raw = Vec::with_capacity(v.voxels.len() * 4);
    for &x in &v.voxels {
        raw.extend_from_slice(&x.to_le_bytes());
    }
    let raw_path = dir.join("volume.raw");
    fs::write(&raw_path, raw).map_err(|e| io_err(&raw_path, e))?;
    let meta = RawMeta {
        depth: v.depth,
        height: v.height,
        width: v.width,
        dtype: "f32".to_string(),
        domain: Some(v.intensity_domain),
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_vec_pretty(&meta).expect("raw meta serializes");
    fs::write(&meta_path, body).map_err(|e| io_err(&meta_path, e))
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Loads a scan directory: a raw cache when `meta.json` is present, otherwise
/// a stack of PGM slices in ascending lexicographic filename order.
pub fn assemble_volume(scan_path: &Path) -> Result<Volume, VolumeError> {
    let scan_id = scan_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| scan_path.display().to_string());
    if scan_path.join("meta.json").is_file() {
        return read_raw_volume(scan_path, scan_id);
    }
    let mut files: Vec<PathBuf> = Vec::new();
    let entries = fs::read_dir(scan_path).map_err(|e| io_err(scan_path, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(scan_path, e))?;
        let path = entry.path();
        let hidden = path
            .file_name()
            .is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(VolumeError::EmptyScan { path: scan_path.to_path_buf() });
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let first = read_pgm(&files[0])?;
    let (height, width) = (first.height, first.width);
    let mut voxels = Vec::with_capacity(files.len() * height * width);
    voxels.extend_from_slice(&first.samples);
    for path in &files[1..] {
        let slice = read_pgm(path)?;
        if slice.height != height || slice.width != width {
            return Err(VolumeError::MixedSliceDims {
                path: path.clone(),
                expect_h: height,
                expect_w: width,
                found_h: slice.height,
                found_w: slice.width,
            });
        }
        voxels.extend_from_slice(&slice.samples);
    }
    Ok(Volume::new(files.len(), height, width, voxels, IntensityDomain::Raw, scan_id))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-volume min-max rescale to [0,1]. A constant volume maps to all zeros.
pub fn normalize_intensity(mut v: Volume) -> Result<Volume, VolumeError> {
    if v.intensity_domain != IntensityDomain::Raw {
        return Err(VolumeError::WrongDomain {
            op: "normalize_intensity",
            scan_id: v.scan_id.clone(),
            expected: IntensityDomain::Raw,
            found: v.intensity_domain,
        });
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in &v.voxels {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi > lo {
        let range = hi - lo;
        for x in &mut v.voxels {
            *x = (*x - lo) / range;
        }
    } else {
        v.voxels.fill(0.0);
    }
    v.intensity_domain = IntensityDomain::Unit;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Lung-free slice pruning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneParams {
    /// Voxels at or below this intensity count as air.
    pub tau_air: f32,
    /// Slices whose central air fraction is below this are lung-free.
    pub theta: f32,
    /// Fraction of height and width covered by the centered scoring window.
    pub center_frac: f64,
    /// Per-end trim cap as a fraction of the original depth.
    pub max_trim_frac: f64,
    /// Depth floor enforced when a trim run overruns its cap.
    pub min_keep: usize,
}

impl Default for PruneParams {
    fn default() -> Self {
        PruneParams {
            tau_air: 0.3,
            theta: 0.05,
            center_frac: 0.6,
            max_trim_frac: 0.4,
            min_keep: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub head_removed: usize,
    pub tail_removed: usize,
    pub per_slice_lung_score: Vec<f32>,
}

fn central_window(extent: usize, frac: f64) -> (usize, usize) {
    let size = ((extent as f64 * frac).floor() as usize).clamp(1, extent);
    let start = (extent - size) / 2;
    (start, start + size)
}

/// Drops the maximal lung-free slice runs from both ends of the volume.
///
/// The lung score of a slice is the fraction of voxels in the centered
/// `center_frac` window that are at or below `tau_air`; a slice is lung-free
/// when its score falls below `theta`. Each end's trim is capped at
/// `floor(max_trim_frac * depth)`. When a run overruns its cap (the volume is
/// lung-free nearly throughout), the `min_keep` floor engages and the trims
/// shrink proportionally so at least `min(min_keep, depth)` central slices
/// survive. Scored trims inside the caps apply verbatim.
pub fn prune_non_lung(
    v: Volume,
    params: &PruneParams,
) -> Result<(Volume, PruneReport), VolumeError> {
    if v.intensity_domain != IntensityDomain::Unit {
        return Err(VolumeError::WrongDomain {
            op: "prune_non_lung",
            scan_id: v.scan_id.clone(),
            expected: IntensityDomain::Unit,
            found: v.intensity_domain,
        });
    }
    let d = v.depth;
    let (h0, h1) = central_window(v.height, params.center_frac);
    let (w0, w1) = central_window(v.width, params.center_frac);
    let window_area = ((h1 - h0) * (w1 - w0)) as f64;

    let scores: Vec<f32> = (0..d)
        .map(|z| {
            let slice = v.slice(z);
            let mut dark = 0usize;
            for h in h0..h1 {
                let row = &slice[h * v.width..(h + 1) * v.width];
                for &x in &row[w0..w1] {
                    if x <= params.tau_air {
                        dark += 1;
                    }
                }
            }
            (dark as f64 / window_area) as f32
        })
        .collect();

    let lung_free = |z: usize| scores[z] < params.theta;
    let head_run = (0..d).take_while(|&z| lung_free(z)).count();
    let tail_run = (0..d).rev().take_while(|&z| lung_free(z)).count();

    let cap = (params.max_trim_frac * d as f64).floor() as usize;
    let head_capped = head_run.min(cap);
    let tail_capped = tail_run.min(cap);
    let overran = head_run > cap || tail_run > cap;
    let floor = params.min_keep.min(d);
    let (head, tail) = if overran && d - head_capped - tail_capped < floor {
        let removable = d - floor;
        let head = head_capped * removable / (head_capped + tail_capped);
        (head, removable - head)
    } else {
        (head_capped, tail_capped)
    };

    let plane = v.height * v.width;
    let kept = v.voxels[head * plane..(d - tail) * plane].to_vec();
    let out = Volume::new(
        d - head - tail,
        v.height,
        v.width,
        kept,
        IntensityDomain::Unit,
        v.scan_id,
    );
    let report = PruneReport {
        head_removed: head,
        tail_removed: tail,
        per_slice_lung_score: scores,
    };
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Trilinear resize
// ---------------------------------------------------------------------------

struct AxisMap {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_map(src: usize, dst: usize) -> AxisMap {
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for t in 0..dst {
        let coord = if dst == 1 {
            0.0
        } else {
            t as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let base = (coord.floor() as usize).min(src - 1);
        lo.push(base);
        hi.push((base + 1).min(src - 1));
        frac.push(coord - base as f64);
    }
    AxisMap { lo, hi, frac }
}

/// Align-corners trilinear interpolation to the target shape: output position
/// `t` samples source coordinate `t*(S-1)/(T-1)`, so corner voxels map
/// exactly onto corner voxels.
pub fn resize_trilinear(
    v: Volume,
    target: (usize, usize, usize),
) -> Result<Volume, VolumeError> {
    let (td, th, tw) = target;
    if td == 0 || th == 0 || tw == 0 {
        return Err(VolumeError::Argument {
            op: "resize_trilinear",
            detail: format!("target extents must be positive, got {td}x{th}x{tw}"),
        });
    }
    let dmap = axis_map(v.depth, td);
    let hmap = axis_map(v.height, th);
    let wmap = axis_map(v.width, tw);
    let (src_h, src_w) = (v.height, v.width);
    let src_plane = src_h * src_w;
    let mut out = vec![0.0f32; td * th * tw];
    out.par_chunks_mut(th * tw).enumerate().for_each(|(z, plane)| {
        let (z0, z1, fz) = (dmap.lo[z], dmap.hi[z], dmap.frac[z]);
        let s0 = &v.voxels[z0 * src_plane..(z0 + 1) * src_plane];
        let s1 = &v.voxels[z1 * src_plane..(z1 + 1) * src_plane];
        for y in 0..th {
            let (y0, y1, fy) = (hmap.lo[y], hmap.hi[y], hmap.frac[y]);
            let row = &mut plane[y * tw..(y + 1) * tw];
            for (x, o) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = (wmap.lo[x], wmap.hi[x], wmap.frac[x]);
                let fetch = |s: &[f32], yy: usize, xx: usize| s[yy * src_w + xx] as f64;
                let c00 = fetch(s0, y0, x0) * (1.0 - fx) + fetch(s0, y0, x1) * fx;
                let c01 = fetch(s0, y1, x0) * (1.0 - fx) + fetch(s0, y1, x1) * fx;
                let c10 = fetch(s1, y0, x0) * (1.0 - fx) + fetch(s1, y0, x1) * fx;
                let c11 = fetch(s1, y1, x0) * (1.0 - fx) + fetch(s1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                *o = (c0 * (1.0 - fz) + c1 * fz) as f32;
            }
        }
    });
    Ok(Volume::new(td, th, tw, out, v.intensity_domain, v.scan_id))
}

// ---------------------------------------------------------------------------
// Full preprocessing chain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub prune: bool,
    pub prune_params: PruneParams,
    pub target: (usize, usize, usize),
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            prune: true,
            prune_params: PruneParams::default(),
            target: (128, 256, 256),
        }
    }
}

/// Assemble, normalize, optionally prune, and resize a scan directory.
pub fn preprocess_scan(
    scan_path: &Path,
    opts: &PreprocessOptions,
) -> Result<(Volume, Option<PruneReport>), VolumeError> {
    let v = normalize_intensity(assemble_volume(scan_path)?)?;
    let (v, report) = if opts.prune {
        let (v, r) = prune_non_lung(v, &opts.prune_params)?;
        (v, Some(r))
    } else {
        (v, None)
    };
    Ok((resize_trilinear(v, opts.target)?, report))
}
