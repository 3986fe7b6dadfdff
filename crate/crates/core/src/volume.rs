//! 2-channel voxel volumes on a regular grid, plus the preprocessing
//! operations that bring every scan onto the canonical grid.
//!
//! Memory and file layout are channel-major with x varying fastest:
//! element index = x + X*(y + Y*(z + Z*c)).

use std::fs;
use std::path::Path;

use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The paper-scale target grid: 96 x 112 x 48 voxels at (2, 2, 4) mm.
pub const CANONICAL_DIMS: [usize; 3] = [96, 112, 48];
pub const CANONICAL_SPACING: [f64; 3] = [2.0, 2.0, 4.0];

/// A finite-valued multi-channel 3D image. Channel 0 carries DWI intensity,
/// channel 1 ADC. Immutable after construction; cheap to clone only via
/// explicit `clone()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Shape `[channels, z, y, x]` so the natural slice order matches the
    /// file layout.
    data: Array4<f32>,
    /// Voxel spacing in mm along (x, y, z).
    spacing: [f64; 3],
}

impl Volume {
    /// Builds a volume, rejecting NaN/Inf voxels with a location diagnostic.
    pub fn new(data: Array4<f32>, spacing: [f64; 3]) -> Result<Volume> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::VolumeShape {
                context: format!("spacing must be positive, got {spacing:?}"),
            });
        }
        check_finite(data.view())?;
        Ok(Volume { data, spacing })
    }

    /// All-zero volume of the given (x, y, z) dims with `channels` channels.
    pub fn zeros(channels: usize, dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        Volume {
            data: Array4::zeros((channels, dims[2], dims[1], dims[0])),
            spacing,
        }
    }

    pub fn data(&self) -> ArrayView4<'_, f32> {
        self.data.view()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Grid extents as (x, y, z).
    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[3], s[2], s[1]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[[c, z, y, x]]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        self.data[[c, z, y, x]] = v;
    }

    /// Contiguous channel-major, x-fastest view of all voxels.
    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("volume storage is contiguous")
    }

    pub fn voxels_per_channel(&self) -> usize {
        let d = self.dims();
        d[0] * d[1] * d[2]
    }
}

fn check_finite(data: ArrayView4<'_, f32>) -> Result<()> {
    let (channels, nz, ny, nx) = data.dim();
    for c in 0..channels {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !data[[c, z, y, x]].is_finite() {
                        return Err(Error::NonFiniteVoxel { channel: c, x, y, z });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Resamples a volume to `target_spacing` by trilinear interpolation over
/// voxel centers, then symmetrically zero-pads or crops to `target_dims`.
///
/// When the input already sits on the target grid the volume is returned
/// unchanged, which makes the operation idempotent.
pub fn resample_pad(v: &Volume, target_dims: [usize; 3], target_spacing: [f64; 3]) -> Result<Volume> {
    if target_dims.iter().any(|d| *d == 0) || target_spacing.iter().any(|s| *s <= 0.0) {
        return Err(Error::VolumeShape {
            context: format!("target dims {target_dims:?} / spacing {target_spacing:?} must be positive"),
        });
    }
    check_finite(v.data())?;

    if v.dims() == target_dims && v.spacing() == target_spacing {
        return Ok(v.clone());
    }

    let src_dims = v.dims();
    let src_sp = v.spacing();
    let channels = v.channels();

    // Resampled extent preserves the physical field-of-view.
    let mut rs = [0usize; 3];
    for a in 0..3 {
        rs[a] = ((src_dims[a] as f64 * src_sp[a] / target_spacing[a]).round() as usize).max(1);
    }

    let mut resampled = Array4::<f32>::zeros((channels, rs[2], rs[1], rs[0]));
    let src = v.data();
    let ratio = [
        target_spacing[0] / src_sp[0],
        target_spacing[1] / src_sp[1],
        target_spacing[2] / src_sp[2],
    ];
    for c in 0..channels {
        for z in 0..rs[2] {
            let sz = sample_coord(z, ratio[2], src_dims[2]);
            let (z0, z1, wz) = bracket(sz, src_dims[2]);
            for y in 0..rs[1] {
                let sy = sample_coord(y, ratio[1], src_dims[1]);
                let (y0, y1, wy) = bracket(sy, src_dims[1]);
                for x in 0..rs[0] {
                    let sx = sample_coord(x, ratio[0], src_dims[0]);
                    let (x0, x1, wx) = bracket(sx, src_dims[0]);
                    let c000 = src[[c, z0, y0, x0]] as f64;
                    let c100 = src[[c, z0, y0, x1]] as f64;
                    let c010 = src[[c, z0, y1, x0]] as f64;
                    let c110 = src[[c, z0, y1, x1]] as f64;
                    let c001 = src[[c, z1, y0, x0]] as f64;
                    let c101 = src[[c, z1, y0, x1]] as f64;
                    let c011 = src[[c, z1, y1, x0]] as f64;
                    let c111 = src[[c, z1, y1, x1]] as f64;
                    let v00 = c000 * (1.0 - wx) + c100 * wx;
                    let v10 = c010 * (1.0 - wx) + c110 * wx;
                    let v01 = c001 * (1.0 - wx) + c101 * wx;
                    let v11 = c011 * (1.0 - wx) + c111 * wx;
                    let v0 = v00 * (1.0 - wy) + v10 * wy;
                    let v1 = v01 * (1.0 - wy) + v11 * wy;
                    resampled[[c, z, y, x]] = (v0 * (1.0 - wz) + v1 * wz) as f32;
                }
            }
        }
    }

    // Symmetric zero-pad / center-crop to the target extents. When the
    // difference is odd the extra voxel goes to the high side.
    let mut out = Array4::<f32>::zeros((channels, target_dims[2], target_dims[1], target_dims[0]));
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut copy = [0usize; 3];
    for a in 0..3 {
        if rs[a] >= target_dims[a] {
            src_lo[a] = (rs[a] - target_dims[a]) / 2;
            dst_lo[a] = 0;
            copy[a] = target_dims[a];
        } else {
            src_lo[a] = 0;
            dst_lo[a] = (target_dims[a] - rs[a]) / 2;
            copy[a] = rs[a];
        }
    }
    for c in 0..channels {
        for z in 0..copy[2] {
            for y in 0..copy[1] {
                for x in 0..copy[0] {
                    out[[c, dst_lo[2] + z, dst_lo[1] + y, dst_lo[0] + x]] =
                        resampled[[c, src_lo[2] + z, src_lo[1] + y, src_lo[0] + x]];
                }
            }
        }
    }

    Volume::new(out, target_spacing)
}

/// Source-space coordinate of target voxel center `j`, with clamping to the
/// valid sample range (edge replication at the boundary).
fn sample_coord(j: usize, ratio: f64, src_dim: usize) -> f64 {
    let s = (j as f64 + 0.5) * ratio - 0.5;
    s.clamp(0.0, (src_dim - 1) as f64)
}

fn bracket(s: f64, dim: usize) -> (usize, usize, f64) {
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(dim - 1);
    (i0, i1, s - i0 as f64)
}

/// Rescales each channel to zero mean / unit variance over its nonzero
/// voxels, leaving zero voxels untouched. An all-zero channel passes through;
/// a constant nonzero channel degenerates to all-zero.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let mut data = v.data().to_owned();
    let channels = v.channels();
    let (_, nz, ny, nx) = data.dim();
    for c in 0..channels {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let val = data[[c, z, y, x]] as f64;
                    if val != 0.0 {
                        sum += val;
                        sum_sq += val * val;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let val = data[[c, z, y, x]] as f64;
                    if val != 0.0 {
                        let out = if std < 1e-12 { 0.0 } else { (val - mean) / std };
                        data[[c, z, y, x]] = out as f32;
                    }
                }
            }
        }
    }
    Volume {
        data,
        spacing: v.spacing(),
    }
}

/// JSON sidecar describing a raw volume file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub channels: usize,
    pub dtype: String,
}

/// Writes `<path>` as raw little-endian f32 plus a `.json` sidecar next to it.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(v.as_slice().len() * 4);
    for &val in v.as_slice() {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = VolumeSidecar {
        dims: v.dims(),
        spacing: v.spacing(),
        channels: v.channels(),
        dtype: "f32le".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let sidecar_file = sidecar_path(path);
    let sidecar: VolumeSidecar = serde_json::from_slice(&fs::read(&sidecar_file).map_err(|_| {
        Error::MissingArtifact {
            path: sidecar_file.clone(),
            producer: "gen-data".into(),
        }
    })?)?;
    if sidecar.dtype != "f32le" {
        return Err(Error::VolumeShape {
            context: format!("unsupported dtype `{}` in {}", sidecar.dtype, sidecar_file.display()),
        });
    }
    let bytes = fs::read(path).map_err(|_| Error::MissingArtifact {
        path: path.to_path_buf(),
        producer: "gen-data".into(),
    })?;
    let expected = sidecar.channels * sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
    if bytes.len() != expected * 4 {
        return Err(Error::VolumeShape {
            context: format!(
                "{}: got {} bytes, sidecar implies {}",
                path.display(),
                bytes.len(),
                expected * 4
            ),
        });
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let data = Array4::from_shape_vec(
        (sidecar.channels, sidecar.dims[2], sidecar.dims[1], sidecar.dims[0]),
        values,
    )
    .map_err(|e| Error::VolumeShape {
        context: e.to_string(),
    })?;
    Volume::new(data, sidecar.spacing)
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.to_path_buf();
    let ext = match path.extension() {
        Some(e) => format!("{}.json", e.to_string_lossy()),
        None => "json".into(),
    };
    p.set_extension(ext);
    p
}
