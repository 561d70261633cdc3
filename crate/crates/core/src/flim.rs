//! Filter estimation from marker patches and layer-wise encoder building.
//!
//! A layer's filters are cluster centers of centralized marker patches,
//! scaled to unit norm. Applying a filter at a voxel is the dot product of
//! its weights with the centralized patch there; ReLU keeps the voxels on the
//! positive side of the filter's hyperplane. Deeper layers repeat the
//! procedure on the previous layer's output, with markers projected through
//! the pooling strides and statistics recomputed on the feature maps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{minibatch_kmeans, pca_components};
use crate::conv::{conv3d_forward, maxpool2_forward};
use crate::error::{Error, Result};
use crate::markers::{MarkerSet, Modality};
use crate::patch::{check_kernel, extract_patches, marker_stats_multi, NormStats, PatchDataset};
use crate::seed;
use crate::volume::{extend_le, f32s_from_le, split_header, write_atomic, Volume};

/// Unit-norm tolerance for emitted filters.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSource {
    /// `"flim"`, `"flim-pca"`, or an MS-FLIM run id.
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker_id: Option<u32>,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub weights: Vec<f32>,
    pub source: FilterSource,
}

impl Filter {
    /// Scales `weights` to unit L2 norm.
    pub fn unit(weights: &[f32], source: FilterSource) -> Result<Self> {
        let norm = weights.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::Degenerate(format!(
                "candidate filter {source:?} has zero norm"
            )));
        }
        Ok(Self {
            weights: weights.iter().map(|&v| (v as f64 / norm) as f32).collect(),
            source,
        })
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// One convolutional layer's filters plus the centralization statistics of
/// its input.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub layer_index: usize,
    pub kernel: usize,
    pub in_channels: usize,
    /// Max-pool (2³, stride 2) after activation.
    pub pool: bool,
    pub filters: Vec<Filter>,
    pub norm: NormStats,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    magic: String,
    layer_index: usize,
    kernel: usize,
    in_channels: usize,
    pool: bool,
    n_filters: usize,
    norm: NormStats,
    provenance: Vec<FilterSource>,
    dtype: String,
}

const BANK_MAGIC: &str = "FBANK1";

impl FilterBank {
    pub fn new(
        layer_index: usize,
        kernel: usize,
        in_channels: usize,
        pool: bool,
        filters: Vec<Filter>,
        norm: NormStats,
    ) -> Result<Self> {
        check_kernel(kernel)?;
        if filters.is_empty() {
            return Err(Error::InvalidArgument("a filter bank needs at least one filter".into()));
        }
        let dim = kernel.pow(3) * in_channels;
        if let Some(f) = filters.iter().find(|f| f.weights.len() != dim) {
            return Err(Error::Shape(format!(
                "filter of length {} in a bank expecting {dim}",
                f.weights.len()
            )));
        }
        if norm.channels() != in_channels {
            return Err(Error::Shape(format!(
                "bank stats cover {} channels, bank input has {in_channels}",
                norm.channels()
            )));
        }
        Ok(Self {
            layer_index,
            kernel,
            in_channels,
            pool,
            filters,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kernel.pow(3) * self.in_channels
    }

    /// `n_filters × dim` row-major weight matrix.
    pub fn weight_matrix(&self) -> Vec<f32> {
        self.filters.iter().flat_map(|f| f.weights.iter().copied()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = BankHeader {
            magic: BANK_MAGIC.into(),
            layer_index: self.layer_index,
            kernel: self.kernel,
            in_channels: self.in_channels,
            pool: self.pool,
            n_filters: self.len(),
            norm: self.norm.clone(),
            provenance: self.filters.iter().map(|f| f.source.clone()).collect(),
            dtype: "f32le".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("bank header serializes");
        out.push(b'\n');
        extend_le(&mut out, &self.weight_matrix());
        out
    }

    /// Parses one bank from the front of `bytes`, returning the rest.
    pub fn parse(bytes: &[u8]) -> Result<(Self, &[u8])> {
        let (line, rest) = split_header(bytes)?;
        let h: BankHeader = serde_json::from_str(line).map_err(|e| Error::Header(e.to_string()))?;
        if h.magic != BANK_MAGIC {
            return Err(Error::Header(format!("bad bank magic {:?}", h.magic)));
        }
        if h.provenance.len() != h.n_filters {
            return Err(Error::Header("provenance count differs from filter count".into()));
        }
        let dim = h.kernel.pow(3) * h.in_channels;
        let need = h.n_filters * dim * 4;
        if rest.len() < need {
            return Err(Error::Truncated {
                expected: need,
                found: rest.len(),
            });
        }
        let weights = f32s_from_le(&rest[..need]);
        if let Some(i) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let filters = weights
            .chunks_exact(dim)
            .zip(h.provenance)
            .map(|(w, source)| Filter {
                weights: w.to_vec(),
                source,
            })
            .collect();
        let bank = FilterBank::new(h.layer_index, h.kernel, h.in_channels, h.pool, filters, h.norm)?;
        Ok((bank, &rest[need..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (bank, rest) = Self::parse(bytes)?;
        if !rest.is_empty() {
            return Err(Error::Header(format!("{} trailing bytes after bank", rest.len())));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Clusters each marker's patches into `n_per_marker` groups, pools the
/// centers, optionally replaces them by the top `pca_out` principal
/// components, and scales every filter to unit norm.
pub fn estimate_layer_filters(
    pd: &PatchDataset,
    n_per_marker: usize,
    pca_out: Option<usize>,
    seed: u64,
) -> Result<FilterBank> {
    if pd.is_empty() {
        return Err(Error::InvalidArgument("empty patch dataset".into()));
    }
    if n_per_marker == 0 {
        return Err(Error::InvalidArgument("clusters per marker must be positive".into()));
    }
    let dim = pd.dim();
    let mut centers: Vec<f32> = Vec::new();
    let mut sources = Vec::new();
    for (g, (image_id, marker_id, range)) in pd.marker_groups().into_iter().enumerate() {
        let rows: Vec<f32> = range.clone().flat_map(|i| pd.patch(i).iter().copied()).collect();
        let km = minibatch_kmeans(&rows, dim, n_per_marker, seed::derive(seed, g as u64))?;
        for j in 0..km.k() {
            centers.extend_from_slice(km.center(j));
            sources.push(FilterSource {
                run_id: "flim".into(),
                image_id: Some(image_id.clone()),
                marker_id: Some(marker_id),
                cluster: j,
            });
        }
    }
    let filters = match pca_out {
        None => centers
            .chunks_exact(dim)
            .zip(sources)
            .map(|(c, s)| Filter::unit(c, s))
            .collect::<Result<Vec<_>>>()?,
        Some(m) => {
            let n = sources.len();
            if m > n {
                return Err(Error::InvalidArgument(format!(
                    "requested {m} principal components from {n} candidate filters"
                )));
            }
            let pca = pca_components(&centers, dim, m)?;
            (0..m)
                .map(|i| {
                    Filter::unit(
                        pca.component(i),
                        FilterSource {
                            run_id: "flim-pca".into(),
                            image_id: None,
                            marker_id: None,
                            cluster: i,
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    FilterBank::new(1, pd.kernel, pd.channels, true, filters, pd.norm.clone())
}

/// Post-ReLU responses of every filter, before pooling.
pub fn layer_response(v: &Volume, bank: &FilterBank) -> Result<Volume> {
    if v.channels() != bank.in_channels {
        return Err(Error::Shape(format!(
            "layer {} expects {} channels, got {}",
            bank.layer_index,
            bank.in_channels,
            v.channels()
        )));
    }
    let normalized = bank.norm.apply(v)?;
    let mut out = conv3d_forward(&normalized, v.shape(), &bank.weight_matrix(), bank.len(), bank.kernel, None);
    out.iter_mut().for_each(|x| *x = x.max(0.0));
    let [_, z, y, x] = v.shape();
    Volume::new([bank.len(), z, y, x], out, v.spacing_mm())
}

/// ReLU(dot(filter, centralized patch)) at every voxel, then max-pooling when
/// the bank pools.
pub fn conv_layer_forward(v: &Volume, bank: &FilterBank) -> Result<Volume> {
    let act = layer_response(v, bank)?;
    if !bank.pool {
        return Ok(act);
    }
    pool_volume(&act)
}

pub(crate) fn pool_volume(v: &Volume) -> Result<Volume> {
    let (data, _, shape) = maxpool2_forward(v.data(), v.shape());
    let s = v.spacing_mm();
    Volume::new(shape, data, [s[0] * 2.0, s[1] * 2.0, s[2] * 2.0])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub clusters_per_marker: usize,
    #[serde(default)]
    pub pca_out: Option<usize>,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub layers: Vec<LayerSpec>,
}

impl Default for EncoderSpec {
    /// Three pooled 3³ layers with five clusters per marker and no PCA.
    fn default() -> Self {
        Self::uniform(3, 5, [None, None, None])
    }
}

impl EncoderSpec {
    pub fn uniform(kernel: usize, clusters_per_marker: usize, pca_out: [Option<usize>; 3]) -> Self {
        Self {
            layers: pca_out
                .iter()
                .map(|&pca_out| LayerSpec {
                    kernel,
                    clusters_per_marker,
                    pca_out,
                    pool: true,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        for l in &self.layers {
            check_kernel(l.kernel)?;
            if l.clusters_per_marker == 0 {
                return Err(Error::InvalidArgument("clusters per marker must be positive".into()));
            }
            if l.pca_out == Some(0) {
                return Err(Error::InvalidArgument("PCA width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A FLIM encoder for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub modality: Modality,
    pub banks: Vec<FilterBank>,
    pub spec: EncoderSpec,
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    magic: String,
    modality: Modality,
    spec: EncoderSpec,
    n_banks: usize,
}

const ENCODER_MAGIC: &str = "FENC1";

impl EncoderModel {
    /// Output channel count of each layer.
    pub fn widths(&self) -> Vec<usize> {
        self.banks.iter().map(|b| b.len()).collect()
    }

    /// Pre-pool activation of every layer.
    pub fn features(&self, v: &Volume) -> Result<Vec<Volume>> {
        let mut out = Vec::with_capacity(self.banks.len());
        let mut cur = v.clone();
        for bank in &self.banks {
            let act = layer_response(&cur, bank)?;
            cur = if bank.pool { pool_volume(&act)? } else { act.clone() };
            out.push(act);
        }
        Ok(out)
    }

    pub fn forward(&self, v: &Volume) -> Result<Volume> {
        let mut cur = v.clone();
        for bank in &self.banks {
            cur = conv_layer_forward(&cur, bank)?;
        }
        Ok(cur)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = EncoderHeader {
            magic: ENCODER_MAGIC.into(),
            modality: self.modality,
            spec: self.spec.clone(),
            n_banks: self.banks.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("encoder header serializes");
        out.push(b'\n');
        for b in &self.banks {
            out.extend(b.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (line, mut rest) = split_header(bytes)?;
        let h: EncoderHeader = serde_json::from_str(line).map_err(|e| Error::Header(e.to_string()))?;
        if h.magic != ENCODER_MAGIC {
            return Err(Error::Header(format!("bad encoder magic {:?}", h.magic)));
        }
        let mut banks = Vec::with_capacity(h.n_banks);
        for _ in 0..h.n_banks {
            let (b, r) = FilterBank::parse(rest)?;
            banks.push(b);
            rest = r;
        }
        if !rest.is_empty() {
            return Err(Error::Header("trailing bytes after encoder banks".into()));
        }
        Ok(Self {
            modality: h.modality,
            banks,
            spec: h.spec,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_bound(images: &[Volume], markers: &[MarkerSet]) -> Result<Modality> {
    if images.is_empty() || images.len() != markers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images paired with {} marker sets",
            images.len(),
            markers.len()
        )));
    }
    let modality = markers[0].modality;
    for (v, ms) in images.iter().zip(markers) {
        if ms.modality != modality {
            return Err(Error::Markers("marker sets mix modalities".into()));
        }
        if v.channels() != images[0].channels() {
            return Err(Error::Shape("images disagree on channel count".into()));
        }
        ms.check_bounds(v.spatial())?;
    }
    Ok(modality)
}

fn layer_patches(feats: &[Volume], markers: &[MarkerSet], kernel: usize) -> Result<PatchDataset> {
    let pairs: Vec<(&Volume, &MarkerSet)> = feats.iter().zip(markers).collect();
    let stats = marker_stats_multi(&pairs)?;
    let mut pd = PatchDataset::empty(kernel, stats.clone());
    for (v, ms) in &pairs {
        pd.append(extract_patches(v, ms, kernel, &stats)?)?;
    }
    if pd.is_empty() {
        return Err(Error::Markers("no marker voxels to extract patches from".into()));
    }
    Ok(pd)
}

/// Builds an encoder layer by layer. Layer 1 is `layer1` when given (the
/// multi-step path), otherwise estimated from the markers.
pub fn build_encoder(
    images: &[Volume],
    markers: &[MarkerSet],
    spec: &EncoderSpec,
    layer1: Option<FilterBank>,
    seed: u64,
) -> Result<EncoderModel> {
    spec.validate()?;
    let modality = check_bound(images, markers)?;
    let mut banks: Vec<FilterBank> = Vec::with_capacity(spec.layers.len());
    let mut feats: Vec<Volume> = images.to_vec();
    let mut stride = 1usize;
    for (l, ls) in spec.layers.iter().enumerate() {
        let bank = match (l, &layer1) {
            (0, Some(given)) => {
                if given.in_channels != images[0].channels() {
                    return Err(Error::Shape(format!(
                        "first-layer bank expects {} channels, images have {}",
                        given.in_channels,
                        images[0].channels()
                    )));
                }
                let mut b = given.clone();
                b.layer_index = 1;
                b.pool = ls.pool;
                b
            }
            _ => {
                let projected: Vec<MarkerSet> = markers.iter().map(|m| m.project(stride)).collect();
                for (f, ms) in feats.iter().zip(&projected) {
                    // floor projection keeps every voxel inside the pooled extent
                    debug_assert!(ms.check_bounds(f.spatial()).is_ok());
                    ms.check_bounds(f.spatial())?;
                }
                let pd = layer_patches(&feats, &projected, ls.kernel)?;
                let mut b = estimate_layer_filters(&pd, ls.clusters_per_marker, ls.pca_out, seed::derive(seed, l as u64 + 1))?;
                b.layer_index = l + 1;
                b.pool = ls.pool;
                b
            }
        };
        if l + 1 < spec.layers.len() {
            feats = feats
                .iter()
                .map(|f| conv_layer_forward(f, &bank))
                .collect::<Result<Vec<_>>>()?;
            if bank.pool {
                stride *= 2;
            }
        }
        banks.push(bank);
    }
    Ok(EncoderModel {
        modality,
        banks,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markers::{Marker, MarkerLabel};
    use crate::patch::{centralized_patch_into, PatchOrigin};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64, shape: [usize; 4]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, z, _, _| z as f32 * 0.1 + rng.gen_range(0.0f32..1.0))
    }

    fn markers(image: &str, count: usize, size: usize, extent: usize, seed: u64) -> MarkerSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms = (0..count)
            .map(|i| {
                let mut vox: Vec<[usize; 3]> = Vec::new();
                while vox.len() < size {
                    let v = [rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent)];
                    if !vox.contains(&v) {
                        vox.push(v);
                    }
                }
                Marker::new(i as u32 + 1, MarkerLabel::Other, vox).unwrap()
            })
            .collect();
        MarkerSet::new(image, Modality::Flair, ms).unwrap()
    }

    fn dataset(v: &Volume, ms: &MarkerSet) -> PatchDataset {
        layer_patches(std::slice::from_ref(v), std::slice::from_ref(ms), 3).unwrap()
    }

    #[test]
    fn three_markers_five_clusters() {
        let v = noisy(1, [1, 8, 8, 8]);
        let ms = markers("a", 3, 12, 8, 2);
        let bank = estimate_layer_filters(&dataset(&v, &ms), 5, None, 0).unwrap();
        assert_eq!(bank.len(), 15);
        for f in &bank.filters {
            assert!((f.norm() - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn identical_patches_give_one_normalized_filter() {
        let p: Vec<f32> = (0..27).map(|i| i as f32 - 10.0).collect();
        let rows: Vec<f32> = (0..4).flat_map(|_| p.iter().copied()).collect();
        let origins = (0..4)
            .map(|i| PatchOrigin {
                image_id: "x".into(),
                marker_id: 1,
                voxel: [i, 0, 0],
            })
            .collect();
        let pd = PatchDataset::from_parts(3, NormStats::identity(1), rows, origins).unwrap();
        let bank = estimate_layer_filters(&pd, 1, None, 0).unwrap();
        assert_eq!(bank.len(), 1);
        let norm = p.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, b) in bank.filters[0].weights.iter().zip(&p) {
            assert!((a - b / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn pca_reduces_to_orthonormal_bank() {
        let v = noisy(3, [1, 10, 10, 10]);
        let ms = markers("a", 2, 15, 10, 4);
        let bank = estimate_layer_filters(&dataset(&v, &ms), 10, Some(4), 0).unwrap();
        assert_eq!(bank.len(), 4);
        for (i, a) in bank.filters.iter().enumerate() {
            for (j, b) in bank.filters.iter().enumerate() {
                let d: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| (x * y) as f64).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
        assert!(estimate_layer_filters(&dataset(&v, &ms), 10, Some(21), 0).is_err());
    }

    #[test]
    fn zero_candidates_are_rejected() {
        let v = Volume::from_fn([1, 6, 6, 6], |_, _, _, _| 2.0);
        let ms = markers("a", 1, 5, 6, 1);
        assert!(matches!(
            estimate_layer_filters(&dataset(&v, &ms), 2, None, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn self_matched_filter_responds_with_patch_norm() {
        let v = noisy(5, [1, 8, 8, 8]);
        let ms = markers("a", 1, 6, 8, 6);
        let stats = marker_stats_multi(&[(&v, &ms)]).unwrap();
        let q = [3, 4, 5];
        let mut p = vec![0f32; 27];
        centralized_patch_into(&v, &stats, q, 3, &mut p);
        let f = Filter::unit(&p, FilterSource { run_id: "t".into(), image_id: None, marker_id: None, cluster: 0 }).unwrap();
        let bank = FilterBank::new(1, 3, 1, false, vec![f], stats).unwrap();
        let out = conv_layer_forward(&v, &bank).unwrap();
        let norm = p.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((out.get(0, q[0], q[1], q[2]) - norm).abs() < 1e-4);
    }

    #[test]
    fn zero_input_and_shapes() {
        let ms = markers("a", 2, 6, 8, 7);
        let v = noisy(8, [1, 8, 8, 8]);
        let mut bank = estimate_layer_filters(&dataset(&v, &ms), 2, None, 0).unwrap();
        bank.norm = NormStats::identity(1);
        let zero = conv_layer_forward(&Volume::zeros([1, 8, 8, 8]), &bank).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        assert_eq!(zero.shape(), [4, 4, 4, 4]);
        assert!(conv_layer_forward(&Volume::zeros([2, 8, 8, 8]), &bank).is_err());
    }

    #[test]
    fn encoder_chains_widths() {
        let imgs = vec![noisy(9, [1, 16, 16, 16])];
        let ms = vec![markers("a", 2, 40, 16, 10)];
        let spec = EncoderSpec::default();
        let enc = build_encoder(&imgs, &ms, &spec, None, 3).unwrap();
        assert_eq!(enc.widths(), vec![10, 10, 10]);
        assert_eq!(enc.banks[1].in_channels, 10);
        assert_eq!(enc.banks[2].in_channels, 10);
        assert_eq!(enc.forward(&imgs[0]).unwrap().shape(), [10, 2, 2, 2]);
        let again = build_encoder(&imgs, &ms, &spec, None, 3).unwrap();
        assert_eq!(enc.to_bytes(), again.to_bytes());
        assert_eq!(EncoderModel::from_bytes(&enc.to_bytes()).unwrap(), enc);

        let layer1 = FilterBank::new(1, 3, 1, true, enc.banks[1].filters[..8].iter().map(|f| Filter::unit(&f.weights[..27], f.source.clone()).unwrap()).collect(), enc.banks[0].norm.clone()).unwrap();
        let enc2 = build_encoder(&imgs, &ms, &spec, Some(layer1), 3).unwrap();
        assert_eq!(enc2.banks[1].in_channels, 8);
    }

    #[test]
    fn bank_file_round_trip() {
        let v = noisy(11, [1, 8, 8, 8]);
        let ms = markers("a", 2, 8, 8, 12);
        let bank = estimate_layer_filters(&dataset(&v, &ms), 3, None, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.fb");
        bank.save(&p).unwrap();
        assert_eq!(FilterBank::load(&p).unwrap(), bank);
        let bytes = bank.to_bytes();
        assert!(FilterBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
