//! Patch extraction at marker voxels with marker-based centralization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markers::{MarkerSet, Voxel};
use crate::volume::{write_atomic, Volume};

/// Lower clamp for per-channel standard deviations.
pub const STD_EPS: f32 = 1e-6;

/// Per-channel mean and population standard deviation measured at marker
/// voxels only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalized copy of `v`: `(x - mean[c]) / std[c]`.
    pub fn apply(&self, v: &Volume) -> Result<Vec<f32>> {
        if v.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "stats for {} channels applied to {}-channel volume",
                self.channels(),
                v.channels()
            )));
        }
        let n = v.voxels();
        let mut out = Vec::with_capacity(v.data().len());
        for c in 0..v.channels() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.extend(v.data()[c * n..(c + 1) * n].iter().map(|&x| (x - m) / s));
        }
        Ok(out)
    }
}

/// Statistics over all marker voxels of all `(volume, markers)` pairs.
pub fn marker_stats_multi(pairs: &[(&Volume, &MarkerSet)]) -> Result<NormStats> {
    let channels = pairs
        .first()
        .map(|(v, _)| v.channels())
        .ok_or_else(|| Error::Markers("no marker sets given".into()))?;
    let mut sum = vec![0f64; channels];
    let mut sq = vec![0f64; channels];
    let mut count = 0usize;
    for (v, ms) in pairs {
        if v.channels() != channels {
            return Err(Error::Shape("images disagree on channel count".into()));
        }
        ms.check_bounds(v.spatial())?;
        for &[z, y, x] in ms.iter_voxels() {
            for c in 0..channels {
                let val = v.get(c, z, y, x) as f64;
                sum[c] += val;
                sq[c] += val * val;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Markers("marker set is empty".into()));
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / n;
            let var = (q / n - m * m).max(0.0);
            (var.sqrt() as f32).max(STD_EPS)
        })
        .collect();
    Ok(NormStats { mean, std })
}

pub fn marker_stats(v: &Volume, ms: &MarkerSet) -> Result<NormStats> {
    marker_stats_multi(&[(v, ms)])
}

/// Where a patch came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub image_id: String,
    pub marker_id: u32,
    pub voxel: Voxel,
}

/// Vectorized `k³·C` patches, one per marker voxel, in `(c, z, y, x)` order,
/// together with the statistics used to centralize them.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub kernel: usize,
    pub channels: usize,
    patches: Vec<f32>,
    pub origins: Vec<PatchOrigin>,
    pub norm: NormStats,
}

impl PatchDataset {
    pub fn empty(kernel: usize, norm: NormStats) -> Self {
        Self {
            kernel,
            channels: norm.channels(),
            patches: Vec::new(),
            origins: Vec::new(),
            norm,
        }
    }

    pub fn from_parts(kernel: usize, norm: NormStats, patches: Vec<f32>, origins: Vec<PatchOrigin>) -> Result<Self> {
        check_kernel(kernel)?;
        let dim = kernel.pow(3) * norm.channels();
        if patches.len() != dim * origins.len() {
            return Err(Error::Shape(format!(
                "{} values for {} patches of length {dim}",
                patches.len(),
                origins.len()
            )));
        }
        Ok(Self {
            kernel,
            channels: norm.channels(),
            patches,
            origins,
            norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.kernel.pow(3) * self.channels
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.patches[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.patches.chunks_exact(self.dim().max(1))
    }

    pub fn append(&mut self, other: PatchDataset) -> Result<()> {
        if other.kernel != self.kernel || other.channels != self.channels {
            return Err(Error::Shape("cannot merge patch datasets of different shapes".into()));
        }
        if other.norm != self.norm {
            return Err(Error::Shape("cannot merge patches centralized with different statistics".into()));
        }
        self.patches.extend(other.patches);
        self.origins.extend(other.origins);
        Ok(())
    }

    /// Consecutive index ranges sharing `(image_id, marker_id)`, in order.
    pub fn marker_groups(&self) -> Vec<(String, u32, std::ops::Range<usize>)> {
        let mut groups: Vec<(String, u32, std::ops::Range<usize>)> = Vec::new();
        for (i, o) in self.origins.iter().enumerate() {
            match groups.last_mut() {
                Some((img, id, r)) if *img == o.image_id && *id == o.marker_id => r.end = i + 1,
                _ => groups.push((o.image_id.clone(), o.marker_id, i..i + 1)),
            }
        }
        groups
    }

    /// Debug dump: one JSON header line then `len × dim` little-endian f32.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = serde_json::json!({
            "magic": "MVOL1-PATCHES",
            "rows": self.len(),
            "cols": self.dim(),
            "kernel": self.kernel,
            "channels": self.channels,
            "dtype": "f32le",
        });
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        for v in &self.patches {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path.as_ref(), &bytes)
    }
}

/// Writes the centralized `k³·C` patch centered at `center` into `out`.
/// Positions outside the volume are zero.
pub fn centralized_patch_into(
    v: &Volume,
    stats: &NormStats,
    center: Voxel,
    k: usize,
    out: &mut [f32],
) {
    let [c_n, zn, yn, xn] = v.shape();
    let r = (k / 2) as isize;
    let mut i = 0;
    for c in 0..c_n {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for dz in -r..=r {
            let z = center[0] as isize + dz;
            for dy in -r..=r {
                let y = center[1] as isize + dy;
                for dx in -r..=r {
                    let x = center[2] as isize + dx;
                    out[i] = if z < 0
                        || y < 0
                        || x < 0
                        || z >= zn as isize
                        || y >= yn as isize
                        || x >= xn as isize
                    {
                        0.0
                    } else {
                        (v.get(c, z as usize, y as usize, x as usize) - m) / s
                    };
                    i += 1;
                }
            }
        }
    }
}

pub(crate) fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// One patch per marker voxel, ordered by marker then voxel order.
pub fn extract_patches(v: &Volume, ms: &MarkerSet, k: usize, stats: &NormStats) -> Result<PatchDataset> {
    check_kernel(k)?;
    if stats.channels() != v.channels() {
        return Err(Error::Shape(format!(
            "stats have {} channels, volume has {}",
            stats.channels(),
            v.channels()
        )));
    }
    ms.check_bounds(v.spatial())?;
    let dim = k.pow(3) * v.channels();
    let total = ms.total_voxels();
    let mut patches = vec![0f32; total * dim];
    let mut origins = Vec::with_capacity(total);
    let mut i = 0;
    for m in &ms.markers {
        for &vox in &m.voxels {
            centralized_patch_into(v, stats, vox, k, &mut patches[i * dim..(i + 1) * dim]);
            origins.push(PatchOrigin {
                image_id: ms.image_id.clone(),
                marker_id: m.id,
                voxel: vox,
            });
            i += 1;
        }
    }
    Ok(PatchDataset {
        kernel: k,
        channels: v.channels(),
        patches,
        origins,
        norm: stats.clone(),
    })
}
