//! User-drawn scribbles and their projection through pooling strides.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::write_atomic;

/// Marker sizes whose max/min ratio exceeds this trigger a balance warning.
pub const BALANCE_WARN_RATIO: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "FLAIR")]
    Flair,
    #[serde(rename = "T1Gd")]
    T1Gd,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Flair, Modality::T1Gd];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1Gd => "T1Gd",
        }
    }

    /// Lower-case file stem used in dataset layouts.
    pub fn stem(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1Gd => "t1gd",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flair" => Ok(Modality::Flair),
            "t1gd" => Ok(Modality::T1Gd),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerLabel {
    ED,
    ET,
    NC,
    #[serde(rename = "OTHER")]
    Other,
}

pub type Voxel = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Marker {
    pub id: u32,
    pub label: MarkerLabel,
    pub voxels: Vec<Voxel>,
}

impl Marker {
    pub fn new(id: u32, label: MarkerLabel, voxels: Vec<Voxel>) -> Result<Self> {
        if id == 0 {
            return Err(Error::Markers("marker ids must be positive".into()));
        }
        if voxels.is_empty() {
            return Err(Error::Markers(format!("marker {id} has no voxels")));
        }
        let mut seen = HashSet::with_capacity(voxels.len());
        for v in &voxels {
            if !seen.insert(*v) {
                return Err(Error::Markers(format!("marker {id} repeats voxel {v:?}")));
            }
        }
        Ok(Self { id, label, voxels })
    }
}

#[derive(Deserialize)]
struct RawMarker {
    id: i64,
    label: MarkerLabel,
    voxels: Vec<[i64; 3]>,
}

impl<'de> Deserialize<'de> for Marker {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = RawMarker::deserialize(d)?;
        if raw.id <= 0 {
            return Err(D::Error::custom(format!("marker id {} is not positive", raw.id)));
        }
        let voxels = raw
            .voxels
            .iter()
            .map(|v| {
                if v.iter().any(|&c| c < 0) {
                    Err(D::Error::custom(format!("negative coordinate {v:?}")))
                } else {
                    Ok([v[0] as usize, v[1] as usize, v[2] as usize])
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Marker::new(raw.id as u32, raw.label, voxels).map_err(D::Error::custom)
    }
}

/// All markers drawn on one image of one modality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub image_id: String,
    pub modality: Modality,
    pub markers: Vec<Marker>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub ratio: f64,
    pub warning: bool,
    pub min_size: usize,
    pub max_size: usize,
}

impl MarkerSet {
    pub fn new(image_id: impl Into<String>, modality: Modality, markers: Vec<Marker>) -> Result<Self> {
        let ms = Self {
            image_id: image_id.into(),
            modality,
            markers,
        };
        ms.validate()?;
        Ok(ms)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for m in &self.markers {
            if !ids.insert(m.id) {
                return Err(Error::Markers(format!("duplicate marker id {}", m.id)));
            }
        }
        Ok(())
    }

    /// Checks that every voxel lies inside a `(Z, Y, X)` extent.
    pub fn check_bounds(&self, extent: [usize; 3]) -> Result<()> {
        for m in &self.markers {
            for v in &m.voxels {
                if v.iter().zip(extent).any(|(&c, e)| c >= e) {
                    return Err(Error::Markers(format!(
                        "marker {} voxel {v:?} outside extent {extent:?}",
                        m.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_voxels(&self) -> usize {
        self.markers.iter().map(|m| m.voxels.len()).sum()
    }

    pub fn iter_voxels(&self) -> impl Iterator<Item = &Voxel> {
        self.markers.iter().flat_map(|m| m.voxels.iter())
    }

    /// Maps every voxel through floor division by `stride`, collapsing
    /// duplicates while keeping first-occurrence order.
    pub fn project(&self, stride: usize) -> MarkerSet {
        assert!(stride >= 1, "stride must be positive");
        let markers = self
            .markers
            .iter()
            .map(|m| {
                let mut seen = HashSet::new();
                let voxels = m
                    .voxels
                    .iter()
                    .map(|v| [v[0] / stride, v[1] / stride, v[2] / stride])
                    .filter(|v| seen.insert(*v))
                    .collect();
                Marker {
                    id: m.id,
                    label: m.label,
                    voxels,
                }
            })
            .collect();
        MarkerSet {
            image_id: self.image_id.clone(),
            modality: self.modality,
            markers,
        }
    }

    pub fn balance(&self) -> BalanceReport {
        let sizes = self.markers.iter().map(|m| m.voxels.len());
        let min_size = sizes.clone().min().unwrap_or(0);
        let max_size = sizes.max().unwrap_or(0);
        let ratio = if min_size == 0 {
            1.0
        } else {
            max_size as f64 / min_size as f64
        };
        BalanceReport {
            ratio,
            warning: ratio > BALANCE_WARN_RATIO,
            min_size,
            max_size,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ms: MarkerSet =
            serde_json::from_str(text).map_err(|e| Error::Markers(e.to_string()))?;
        ms.validate()?;
        Ok(ms)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("marker set serializes")
    }
}

pub fn load_markers(path: impl AsRef<Path>) -> Result<MarkerSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MarkerSet::from_json(&text)
}

pub fn save_markers(ms: &MarkerSet, path: impl AsRef<Path>) -> Result<()> {
    let mut text = ms.to_json();
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn project_markers(ms: &MarkerSet, stride: usize) -> MarkerSet {
    ms.project(stride)
}

pub fn check_marker_balance(ms: &MarkerSet) -> BalanceReport {
    ms.balance()
}
