//! Multi-channel 3D volumes and the MVOL1 file format.
//!
//! An MVOL1 file is one JSON header line followed by raw little-endian `f32`
//! values in `(c, z, y, x)` order:
//!
//! ```text
//! {"magic":"MVOL1","shape":[C,Z,Y,X],"dtype":"f32le","spacing_mm":[a,b,c]}\n
//! <C*Z*Y*X little-endian f32>
//! ```
//!
//! Label maps use the same format with a single channel holding integral
//! values in `0..=3`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "MVOL1";
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    magic: String,
    shape: [usize; 4],
    dtype: String,
    spacing_mm: [f64; 3],
}

/// Spatial axis used for slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" | "Z" => Ok(Axis::Z),
            "y" | "Y" => Ok(Axis::Y),
            "x" | "X" => Ok(Axis::X),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

/// A dense 2D grid of values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Grid2 {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Multi-channel 3D grid with voxel spacing. Values are finite `f32`s stored
/// in `(c, z, y, x)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    data: Vec<f32>,
    spacing_mm: [f64; 3],
}

impl Volume {
    pub fn new(shape: [usize; 4], data: Vec<f32>, spacing_mm: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("all extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?} ({n})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Header(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        Ok(Self {
            shape,
            data,
            spacing_mm,
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            spacing_mm: [1.0; 3],
        }
    }

    /// Builds a volume by evaluating `f(c, z, y, x)` at every voxel.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [c, z, y, x] = shape;
        let mut data = Vec::with_capacity(c * z * y * x);
        for ci in 0..c {
            for zi in 0..z {
                for yi in 0..y {
                    for xi in 0..x {
                        data.push(f(ci, zi, yi, xi));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            spacing_mm: [1.0; 3],
        }
    }

    pub fn with_spacing(mut self, spacing_mm: [f64; 3]) -> Self {
        self.spacing_mm = spacing_mm;
        self
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// `(Z, Y, X)`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.shape[1] + z) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Single-channel copy of channel `c`.
    pub fn extract_channel(&self, c: usize) -> Result<Volume> {
        if c >= self.channels() {
            return Err(Error::OutOfRange(format!(
                "channel {c} of {}",
                self.channels()
            )));
        }
        let [_, z, y, x] = self.shape;
        Ok(Volume {
            shape: [1, z, y, x],
            data: self.channel(c).to_vec(),
            spacing_mm: self.spacing_mm,
        })
    }

    /// Copies one 2D plane of one channel. Grid rows/cols are the two
    /// remaining axes in `(z, y, x)` order.
    pub fn slice2d(&self, axis: Axis, index: usize, channel: usize) -> Result<Grid2> {
        let [c, z, y, x] = self.shape;
        if channel >= c {
            return Err(Error::OutOfRange(format!("channel {channel} of {c}")));
        }
        let extent = match axis {
            Axis::Z => z,
            Axis::Y => y,
            Axis::X => x,
        };
        if index >= extent {
            return Err(Error::OutOfRange(format!(
                "index {index} on {axis:?} axis of extent {extent}"
            )));
        }
        let (rows, cols) = match axis {
            Axis::Z => (y, x),
            Axis::Y => (z, x),
            Axis::X => (z, y),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for q in 0..cols {
                let v = match axis {
                    Axis::Z => self.get(channel, index, r, q),
                    Axis::Y => self.get(channel, r, index, q),
                    Axis::X => self.get(channel, r, q, index),
                };
                data.push(v);
            }
        }
        Ok(Grid2 { rows, cols, data })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            magic: MAGIC.to_string(),
            shape: self.shape,
            dtype: DTYPE.to_string(),
            spacing_mm: self.spacing_mm,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        extend_le(&mut out, &self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (line, payload) = split_header(bytes)?;
        let header: Header = serde_json::from_str(line).map_err(|e| Error::Header(e.to_string()))?;
        if header.magic != MAGIC {
            return Err(Error::Header(format!("bad magic {:?}", header.magic)));
        }
        if header.dtype != DTYPE {
            return Err(Error::Header(format!("unsupported dtype {:?}", header.dtype)));
        }
        let n: usize = header.shape.iter().product();
        if payload.len() != n * 4 {
            return Err(Error::Truncated {
                expected: n * 4,
                found: payload.len(),
            });
        }
        Volume::new(header.shape, f32s_from_le(payload), header.spacing_mm)
    }
}

/// Splits a `header\npayload` buffer.
pub(crate) fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("missing header terminator".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Header(format!("header is not UTF-8: {e}")))?;
    Ok((line, &bytes[nl + 1..]))
}

pub(crate) fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub(crate) fn extend_le(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &v.to_bytes())
}

/// Ground-truth classes.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const ED: u8 = 1;
    pub const ET: u8 = 2;
    pub const NC: u8 = 3;
    pub const COUNT: usize = 4;
}

/// Integer label map over `(Z, Y, X)` with values in `0..=3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::Shape(format!(
                "label data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v as usize >= label::COUNT) {
            return Err(Error::InvalidLabel {
                index: i,
                value: data[i] as f32,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn to_volume(&self) -> Volume {
        let [z, y, x] = self.shape;
        Volume {
            shape: [1, z, y, x],
            data: self.data.iter().map(|&v| v as f32).collect(),
            spacing_mm: [1.0; 3],
        }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        if v.channels() != 1 {
            return Err(Error::Shape(format!(
                "label volume must have 1 channel, got {}",
                v.channels()
            )));
        }
        let mut data = Vec::with_capacity(v.voxels());
        for (i, &f) in v.data().iter().enumerate() {
            if f.fract() != 0.0 || !(0.0..label::COUNT as f32).contains(&f) {
                return Err(Error::InvalidLabel { index: i, value: f });
            }
            data.push(f as u8);
        }
        LabelVolume::new(v.spatial(), data)
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    LabelVolume::from_volume(&read_volume(path)?)
}

pub fn write_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&l.to_volume(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: [usize; 4]) -> Volume {
        let mut i = 0.0;
        Volume::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            i
        })
    }

    #[test]
    fn header_forces_shape() {
        let v = ramp([2, 4, 4, 4]);
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back.shape(), [2, 4, 4, 4]);
        assert_eq!(back.data().len(), 128);
    }

    #[test]
    fn header_text_is_exact() {
        let v = Volume::zeros([1, 1, 1, 2]);
        let bytes = v.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..nl]).unwrap(),
            r#"{"magic":"MVOL1","shape":[1,1,1,2],"dtype":"f32le","spacing_mm":[1.0,1.0,1.0]}"#
        );
        assert_eq!(bytes.len(), nl + 1 + 8);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mvol");
        let v = ramp([2, 4, 4, 4]).with_spacing([1.0, 0.5, 2.0]);
        write_volume(&v, &p).unwrap();
        let bytes1 = fs::read(&p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let p2 = dir.path().join("b.mvol");
        write_volume(&back, &p2).unwrap();
        assert_eq!(bytes1, fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_payload_rejected() {
        let v = ramp([2, 4, 4, 4]);
        let mut bytes = v.to_bytes();
        bytes.truncate(bytes.len() - 4);
        match Volume::from_bytes(&bytes) {
            Err(Error::Truncated { expected, found }) => {
                assert_eq!(expected, 512);
                assert_eq!(found, 508);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_nan_rejected() {
        assert!(matches!(Volume::from_bytes(b"garbage\n"), Err(Error::Header(_))));
        assert!(matches!(Volume::from_bytes(b"no newline"), Err(Error::Header(_))));
        let mut bytes = Volume::zeros([1, 1, 1, 1]).to_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Volume::from_bytes(&bytes), Err(Error::NonFinite(0))));
        let bad = br#"{"magic":"MVOL2","shape":[1,1,1,1],"dtype":"f32le","spacing_mm":[1,1,1]}"#;
        let mut b = bad.to_vec();
        b.push(b'\n');
        b.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(Volume::from_bytes(&b), Err(Error::Header(_))));
    }

    #[test]
    fn slices_follow_definition() {
        let v = ramp([1, 4, 4, 4]);
        let s = v.slice2d(Axis::Z, 0, 0).unwrap();
        assert_eq!((s.rows, s.cols), (4, 4));
        assert_eq!(s.data, v.data()[..16].to_vec());
        let s = v.slice2d(Axis::X, 2, 0).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                assert_eq!(s.at(z, y), v.get(0, z, y, 2));
            }
        }
        assert!(v.slice2d(Axis::Y, 4, 0).is_err());
        assert!(v.slice2d(Axis::Z, 0, 1).is_err());
    }

    #[test]
    fn labels_validated_on_load() {
        let mut v = Volume::zeros([1, 2, 2, 2]);
        v.data[3] = 2.0;
        assert_eq!(LabelVolume::from_volume(&v).unwrap().data()[3], 2);
        v.data[3] = 4.0;
        assert!(LabelVolume::from_volume(&v).is_err());
        v.data[3] = 1.5;
        assert!(LabelVolume::from_volume(&v).is_err());
    }

    proptest! {
        #[test]
        fn restacked_slices_reproduce_channel(
            z in 1usize..5, y in 1usize..5, x in 1usize..5, seed in 0u32..1000
        ) {
            let v = Volume::from_fn([2, z, y, x], |c, a, b, d| {
                ((c * 131 + a * 31 + b * 7 + d) as u32 ^ seed) as f32 * 0.25
            });
            for (axis, extent) in [(Axis::Z, z), (Axis::Y, y), (Axis::X, x)] {
                let mut rebuilt = vec![0.0f32; z * y * x];
                for i in 0..extent {
                    let g = v.slice2d(axis, i, 1).unwrap();
                    for r in 0..g.rows {
                        for q in 0..g.cols {
                            let (a, b, d) = match axis {
                                Axis::Z => (i, r, q),
                                Axis::Y => (r, i, q),
                                Axis::X => (r, q, i),
                            };
                            rebuilt[(a * y + b) * x + d] = g.at(r, q);
                        }
                    }
                }
                prop_assert_eq!(&rebuilt[..], v.channel(1));
            }
        }

        #[test]
        fn byte_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 8)) {
            let v = Volume::new([1, 2, 2, 2], vals, [1.0, 1.0, 1.0]).unwrap();
            let bytes = v.to_bytes();
            let back = Volume::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
