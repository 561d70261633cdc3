//! Multi-step first-layer filter candidates and their selection.
//!
//! A run clusters each marker's patches into `n1` first candidates, pools
//! the first candidates of one image and clusters them again into `n2`
//! per-image filters. Several runs over a grid of `(n1, n2)` are inspected
//! through their activation maps, and the chosen candidates are recorded in a
//! [`SelectionLedger`] that [`finalize_bank`] turns into a layer-1 bank.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::minibatch_kmeans;
use crate::conv::conv3d_forward;
use crate::error::{Error, Result};
use crate::flim::{Filter, FilterBank, FilterSource};
use crate::markers::{MarkerSet, Modality};
use crate::patch::{check_kernel, extract_patches, marker_stats_multi, NormStats};
use crate::seed;
use crate::volume::{write_atomic, Volume};

pub const DEFAULT_TARGET_BANK: usize = 16;
pub const DEFAULT_TAU: f64 = 0.3;

/// `{5, 10} × {5, 20, 50}`.
pub fn default_grid() -> Vec<(usize, usize)> {
    [5, 10]
        .iter()
        .flat_map(|&n1| [5, 20, 50].iter().map(move |&n2| (n1, n2)))
        .collect()
}

fn default_kernel() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunParams {
    /// Clusters per marker.
    pub n1: usize,
    /// Clusters per image.
    pub n2: usize,
    pub seed: u64,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

impl RunParams {
    pub fn new(n1: usize, n2: usize, seed: u64) -> Self {
        Self { n1, n2, seed, kernel: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "cluster counts must be positive, got N1={} N2={}",
                self.n1, self.n2
            )));
        }
        check_kernel(self.kernel)
    }

    pub fn run_id(&self) -> String {
        format!("n1-{}_n2-{}_s{}", self.n1, self.n2, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCandidates {
    pub image_id: String,
    /// Number of first-stage cluster centers pooled for this image.
    pub first_candidates: usize,
    pub filters: Vec<Filter>,
}

/// Output of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub run_id: String,
    pub params: RunParams,
    pub modality: Modality,
    pub channels: usize,
    /// Statistics shared by every image of the run.
    pub norm: NormStats,
    pub images: Vec<ImageCandidates>,
}

#[derive(Serialize, Deserialize)]
struct RunManifestFile {
    run_id: String,
    params: RunParams,
    modality: Modality,
    channels: usize,
    images: Vec<RunImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct RunImageEntry {
    image_id: String,
    first_candidates: usize,
    n_filters: usize,
}

impl CandidateSet {
    pub fn image(&self, image_id: &str) -> Option<&ImageCandidates> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn candidate(&self, image_id: &str, index: usize) -> Option<&Filter> {
        self.image(image_id).and_then(|i| i.filters.get(index))
    }

    pub fn total(&self) -> usize {
        self.images.iter().map(|i| i.filters.len()).sum()
    }

    /// File name of a cached activation map.
    pub fn activation_key(&self, image_id: &str, index: usize) -> String {
        activation_key(&self.run_id, image_id, index)
    }

    /// Writes `run.json` and `candidates.fb` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = RunManifestFile {
            run_id: self.run_id.clone(),
            params: self.params,
            modality: self.modality,
            channels: self.channels,
            images: self
                .images
                .iter()
                .map(|i| RunImageEntry {
                    image_id: i.image_id.clone(),
                    first_candidates: i.first_candidates,
                    n_filters: i.filters.len(),
                })
                .collect(),
        };
        let filters = self.images.iter().flat_map(|i| i.filters.iter().cloned()).collect();
        let bank = FilterBank::new(1, self.params.kernel, self.channels, true, filters, self.norm.clone())?;
        bank.save(dir.join("candidates.fb"))?;
        let text = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&dir.join("run.json"), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifestFile = serde_json::from_str(&text)?;
        let bank = FilterBank::load(dir.join("candidates.fb"))?;
        let total: usize = m.images.iter().map(|i| i.n_filters).sum();
        if total != bank.len() {
            return Err(Error::Header(format!(
                "run manifest lists {total} candidates, bank holds {}",
                bank.len()
            )));
        }
        let mut filters = bank.filters.into_iter();
        let images = m
            .images
            .into_iter()
            .map(|e| ImageCandidates {
                filters: filters.by_ref().take(e.n_filters).collect(),
                image_id: e.image_id,
                first_candidates: e.first_candidates,
            })
            .collect();
        Ok(Self {
            run_id: m.run_id,
            params: m.params,
            modality: m.modality,
            channels: m.channels,
            norm: bank.norm,
            images,
        })
    }
}

pub fn activation_key(run_id: &str, image_id: &str, index: usize) -> String {
    format!("{run_id}__{image_id}__{index}.mvol")
}

/// Runs the two-stage clustering on every image. Statistics are computed
/// over the markers of all images together.
pub fn run_msflim_step(images: &[Volume], markers: &[MarkerSet], params: RunParams) -> Result<CandidateSet> {
    params.validate()?;
    if images.is_empty() || images.len() != markers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images paired with {} marker sets",
            images.len(),
            markers.len()
        )));
    }
    let modality = markers[0].modality;
    for ms in markers {
        if ms.modality != modality {
            return Err(Error::Markers("marker sets mix modalities".into()));
        }
        if ms.markers.is_empty() {
            return Err(Error::Markers(format!("image {} has no markers", ms.image_id)));
        }
    }
    let pairs: Vec<(&Volume, &MarkerSet)> = images.iter().zip(markers).collect();
    let norm = marker_stats_multi(&pairs)?;
    let k = params.kernel;
    let mut out = Vec::with_capacity(images.len());
    for (v, ms) in &pairs {
        let pd = extract_patches(v, ms, k, &norm)?;
        let dim = pd.dim();
        let image_seed = seed::derive(params.seed, seed::hash_str(&ms.image_id));
        let mut first: Vec<f32> = Vec::new();
        for (_, marker_id, range) in pd.marker_groups() {
            let rows: Vec<f32> = range.flat_map(|i| pd.patch(i).iter().copied()).collect();
            let km = minibatch_kmeans(&rows, dim, params.n1, seed::derive(image_seed, marker_id as u64))?;
            first.extend_from_slice(&km.centers);
        }
        let first_candidates = first.len() / dim;
        let km = minibatch_kmeans(&first, dim, params.n2, seed::derive(image_seed, u64::MAX))?;
        let filters = (0..km.k())
            .map(|j| {
                Filter::unit(
                    km.center(j),
                    FilterSource {
                        run_id: params.run_id(),
                        image_id: Some(ms.image_id.clone()),
                        marker_id: None,
                        cluster: j,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ImageCandidates {
            image_id: ms.image_id.clone(),
            first_candidates,
            filters,
        });
    }
    Ok(CandidateSet {
        run_id: params.run_id(),
        params,
        modality,
        channels: images[0].channels(),
        norm,
        images: out,
    })
}

fn kernel_of(len: usize, channels: usize) -> Result<usize> {
    let mismatch = || Error::Shape(format!("filter of length {len} does not fit a {channels}-channel image"));
    if channels == 0 || len % channels != 0 {
        return Err(mismatch());
    }
    let cube = len / channels;
    let k = (cube as f64).cbrt().round() as usize;
    if k.pow(3) != cube || k % 2 == 0 {
        return Err(mismatch());
    }
    Ok(k)
}

/// ReLU responses of several same-sized filters, one output channel each.
pub fn activation_maps(image: &Volume, filters: &[&Filter], norm: &NormStats) -> Result<Volume> {
    let first = filters
        .first()
        .ok_or_else(|| Error::InvalidArgument("no filters given".into()))?;
    let len = first.weights.len();
    if filters.iter().any(|f| f.weights.len() != len) {
        return Err(Error::Shape("filters differ in length".into()));
    }
    let k = kernel_of(len, image.channels())?;
    let normalized = norm.apply(image)?;
    let w: Vec<f32> = filters.iter().flat_map(|f| f.weights.iter().copied()).collect();
    let mut out = conv3d_forward(&normalized, image.shape(), &w, filters.len(), k, None);
    out.iter_mut().for_each(|x| *x = x.max(0.0));
    let [_, z, y, x] = image.shape();
    Volume::new([filters.len(), z, y, x], out, image.spacing_mm())
}

/// Single-channel ReLU response map of one candidate, without pooling.
pub fn activation_map(image: &Volume, candidate: &Filter, norm: &NormStats) -> Result<Volume> {
    activation_maps(image, &[candidate], norm)
}

/// Binary voxel mask over a `(Z, Y, X)` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub shape: [usize; 3],
    pub data: Vec<bool>,
}

impl RegionMask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask of {} voxels for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Voxels of channel 0 of `v` whose value satisfies `pred`.
    pub fn from_volume(v: &Volume, pred: impl Fn(f32) -> bool) -> Self {
        Self {
            shape: v.spatial(),
            data: v.channel(0).iter().map(|&x| pred(x)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Axis-aligned bounding box of the mask grown by `margin` voxels.
    pub fn bounding_box(&self, margin: usize) -> Option<RegionMask> {
        let [zn, yn, xn] = self.shape;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for z in 0..zn {
            for y in 0..yn {
                for x in 0..xn {
                    if self.data[(z * yn + y) * xn + x] {
                        for (a, c) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(c);
                            hi[a] = hi[a].max(c);
                        }
                    }
                }
            }
        }
        if lo[0] == usize::MAX {
            return None;
        }
        let lo: Vec<usize> = lo.iter().map(|&l| l.saturating_sub(margin)).collect();
        let hi: Vec<usize> = hi.iter().zip(self.shape).map(|(&h, n)| (h + margin).min(n - 1)).collect();
        let mut data = vec![false; self.data.len()];
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    data[(z * yn + y) * xn + x] = true;
                }
            }
        }
        Some(RegionMask { shape: self.shape, data })
    }

    /// The mask grown by `margin` voxels along every axis (box dilation).
    pub fn dilate(&self, margin: usize) -> RegionMask {
        let [_, yn, xn] = self.shape;
        let mut data = self.data.clone();
        let strides = [yn * xn, xn, 1];
        for (axis, &n) in self.shape.iter().enumerate() {
            let src = data.clone();
            let st = strides[axis];
            for i in 0..src.len() {
                if data[i] {
                    continue;
                }
                let c = (i / st) % n;
                let lo = c.saturating_sub(margin);
                let hi = (c + margin).min(n - 1);
                data[i] = (lo..=hi).any(|j| src[i - c * st + j * st]);
            }
        }
        RegionMask { shape: self.shape, data }
    }
}

/// Soft IoU `Σ min(a, m) / Σ max(a, m)` between the min-max normalized
/// activation `a` and the mask `m`. A constant activation normalizes to 0.
pub fn score_candidate_against_region(act: &Volume, mask: &RegionMask) -> Result<f64> {
    score_slice(act.channel(0), act.spatial(), mask)
}

fn score_slice(act: &[f32], spatial: [usize; 3], mask: &RegionMask) -> Result<f64> {
    if spatial != mask.shape {
        return Err(Error::Shape(format!(
            "activation shape {spatial:?} differs from mask shape {:?}",
            mask.shape
        )));
    }
    if mask.count() == 0 {
        return Err(Error::InvalidArgument("empty region mask".into()));
    }
    let (lo, hi) = act
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = (hi - lo) as f64;
    let (mut inter, mut union) = (0f64, 0f64);
    for (&a, &m) in act.iter().zip(&mask.data) {
        let a = if range > 0.0 { (a - lo) as f64 / range } else { 0.0 };
        let m = if m { 1.0 } else { 0.0 };
        inter += a.min(m);
        union += a.max(m);
    }
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pick {
    pub run_id: String,
    pub image_id: String,
    pub candidate: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionLedger {
    pub target_bank_size: usize,
    pub chosen: Vec<Pick>,
}

impl Default for SelectionLedger {
    fn default() -> Self {
        Self::new(DEFAULT_TARGET_BANK)
    }
}

impl SelectionLedger {
    pub fn new(target_bank_size: usize) -> Self {
        Self {
            target_bank_size,
            chosen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.chosen.len() >= self.target_bank_size
    }

    pub fn contains(&self, pick: &Pick) -> bool {
        self.chosen.contains(pick)
    }

    pub fn select(&mut self, pick: Pick) -> Result<()> {
        if self.contains(&pick) {
            return Err(Error::InvalidArgument(format!("{pick:?} is already selected")));
        }
        if self.is_full() {
            return Err(Error::InvalidArgument(format!(
                "bank already holds the target of {} filters",
                self.target_bank_size
            )));
        }
        self.chosen.push(pick);
        Ok(())
    }

    /// Removes a pick; returns whether it was present.
    pub fn deselect(&mut self, pick: &Pick) -> bool {
        let before = self.chosen.len();
        self.chosen.retain(|p| p != pick);
        before != self.chosen.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.chosen {
            if !seen.insert(p) {
                return Err(Error::InvalidArgument(format!("duplicate pick {p:?}")));
            }
        }
        if self.chosen.len() > self.target_bank_size {
            return Err(Error::InvalidArgument("ledger exceeds its target size".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let l: Self = serde_json::from_str(&text)?;
        l.validate()?;
        Ok(l)
    }
}

/// Layer-1 bank holding exactly the ledger's picks, in ledger order.
pub fn finalize_bank(runs: &[CandidateSet], ledger: &SelectionLedger, norm: &NormStats) -> Result<FilterBank> {
    ledger.validate()?;
    if ledger.is_empty() {
        return Err(Error::InvalidArgument("no filters selected".into()));
    }
    let mut filters = Vec::with_capacity(ledger.len());
    let mut kernel = None;
    let mut channels = None;
    for p in &ledger.chosen {
        let run = runs
            .iter()
            .find(|r| r.run_id == p.run_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown run {}", p.run_id)))?;
        let f = run.candidate(&p.image_id, p.candidate).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "run {} has no candidate {} for image {}",
                p.run_id, p.candidate, p.image_id
            ))
        })?;
        if *kernel.get_or_insert(run.params.kernel) != run.params.kernel
            || *channels.get_or_insert(run.channels) != run.channels
        {
            return Err(Error::Shape("selected candidates differ in shape".into()));
        }
        filters.push(Filter {
            weights: f.weights.clone(),
            source: FilterSource {
                run_id: p.run_id.clone(),
                image_id: Some(p.image_id.clone()),
                marker_id: None,
                cluster: p.candidate,
            },
        });
    }
    FilterBank::new(1, kernel.unwrap_or(3), channels.unwrap_or(1), true, filters, norm.clone())
}

/// One image presented to the scripted oracle, with its named target regions.
#[derive(Debug, Clone)]
pub struct OracleImage<'a> {
    pub image_id: String,
    pub image: &'a Volume,
    /// Activations are zeroed outside this mask before scoring.
    pub roi: Option<RegionMask>,
    pub regions: Vec<(String, RegionMask)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPick {
    pub pick: Pick,
    pub region: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Best candidate of every region, whether or not it cleared the threshold.
    pub best_per_region: Vec<ScoredPick>,
    /// Regions whose best score stayed below the threshold.
    pub uncovered: Vec<String>,
    pub ledger: SelectionLedger,
}

/// Stand-in for the human: scores every candidate on its own source image
/// against each region of that image, takes the best candidate of each
/// region when it reaches `tau`, then fills the bank by global rank.
pub fn scripted_selection(
    runs: &[CandidateSet],
    images: &[OracleImage],
    tau: f64,
    target: usize,
) -> Result<OracleReport> {
    let mut scored: Vec<ScoredPick> = Vec::new();
    let mut region_names: Vec<String> = Vec::new();
    for img in images {
        for (name, _) in &img.regions {
            if !region_names.contains(name) {
                region_names.push(name.clone());
            }
        }
    }
    for run in runs {
        for cands in &run.images {
            let Some(img) = images.iter().find(|i| i.image_id == cands.image_id) else {
                continue;
            };
            if cands.filters.is_empty() || img.regions.is_empty() {
                continue;
            }
            let refs: Vec<&Filter> = cands.filters.iter().collect();
            let mut acts = activation_maps(img.image, &refs, &run.norm)?;
            let spatial = acts.spatial();
            let n = spatial.iter().product::<usize>();
            let data = acts.data_mut();
            for (j, act) in data.chunks_exact_mut(n).enumerate() {
                if let Some(roi) = &img.roi {
                    act.iter_mut().zip(&roi.data).for_each(|(a, &inside)| {
                        if !inside {
                            *a = 0.0
                        }
                    });
                }
                for (name, mask) in &img.regions {
                    scored.push(ScoredPick {
                        pick: Pick {
                            run_id: run.run_id.clone(),
                            image_id: cands.image_id.clone(),
                            candidate: j,
                        },
                        region: name.clone(),
                        score: score_slice(act, spatial, mask)?,
                    });
                }
            }
        }
    }
    // stable order: score descending, then enumeration order
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score).then(a.cmp(&b)));

    let mut ledger = SelectionLedger::new(target);
    let mut best_per_region = Vec::new();
    let mut uncovered = Vec::new();
    for name in &region_names {
        let Some(&best) = order.iter().find(|&&i| scored[i].region == *name) else {
            uncovered.push(name.clone());
            continue;
        };
        let s = &scored[best];
        best_per_region.push(s.clone());
        if s.score < tau {
            uncovered.push(name.clone());
        } else if !ledger.contains(&s.pick) && !ledger.is_full() {
            ledger.select(s.pick.clone())?;
        }
    }
    for &i in &order {
        if ledger.is_full() {
            break;
        }
        if !ledger.contains(&scored[i].pick) {
            ledger.select(scored[i].pick.clone())?;
        }
    }
    Ok(OracleReport {
        best_per_region,
        uncovered,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markers::{Marker, MarkerLabel};
    use crate::patch::centralized_patch_into;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn([1, 12, 12, 12], |_, _, _, _| rng.gen_range(0.0f32..1.0))
    }

    fn markers(image: &str, count: usize, size: usize, seed: u64) -> MarkerSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms = (0..count)
            .map(|i| {
                let mut vox: Vec<[usize; 3]> = Vec::new();
                while vox.len() < size {
                    let v = [rng.gen_range(0..12), rng.gen_range(0..12), rng.gen_range(0..12)];
                    if !vox.contains(&v) {
                        vox.push(v);
                    }
                }
                Marker::new(i as u32 + 1, MarkerLabel::Other, vox).unwrap()
            })
            .collect();
        MarkerSet::new(image, Modality::Flair, ms).unwrap()
    }

    #[test]
    fn grid_covers_six_settings() {
        let g = default_grid();
        assert_eq!(g.len(), 6);
        assert!(g.contains(&(10, 5)) && g.contains(&(10, 50)));
    }

    #[test]
    fn counting_law() {
        let imgs = [noisy(1), noisy(2)];
        let ms = [markers("a", 4, 20, 3), markers("b", 2, 20, 4)];
        let run = run_msflim_step(&imgs, &ms, RunParams::new(10, 5, 0)).unwrap();
        assert_eq!(run.images[0].first_candidates, 40);
        assert_eq!(run.images[0].filters.len(), 5);
        let run = run_msflim_step(&imgs, &ms, RunParams::new(10, 50, 0)).unwrap();
        assert_eq!(run.images[1].first_candidates, 20);
        assert_eq!(run.images[1].filters.len(), 20);
        for f in run.images.iter().flat_map(|i| &i.filters) {
            assert!((f.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_cluster_is_normalized_mean_patch() {
        let img = noisy(5);
        let ms = markers("a", 1, 7, 6);
        let run = run_msflim_step(std::slice::from_ref(&img), std::slice::from_ref(&ms), RunParams::new(1, 1, 9)).unwrap();
        let mut mean = vec![0f64; 27];
        let mut p = vec![0f32; 27];
        for &v in ms.iter_voxels() {
            centralized_patch_into(&img, &run.norm, v, 3, &mut p);
            mean.iter_mut().zip(&p).for_each(|(m, &x)| *m += x as f64 / 7.0);
        }
        let n = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        for (a, b) in run.images[0].filters[0].weights.iter().zip(&mean) {
            assert!((*a as f64 - b / n).abs() < 1e-5);
        }
    }

    #[test]
    fn runs_are_deterministic_and_reject_empty_markers() {
        let imgs = [noisy(7)];
        let ms = [markers("a", 3, 15, 8)];
        let p = RunParams::new(5, 5, 42);
        assert_eq!(run_msflim_step(&imgs, &ms, p).unwrap(), run_msflim_step(&imgs, &ms, p).unwrap());
        let empty = [MarkerSet::new("a", Modality::Flair, vec![]).unwrap()];
        assert!(run_msflim_step(&imgs, &empty, p).is_err());
        assert!(run_msflim_step(&imgs, &ms, RunParams::new(0, 5, 1)).is_err());
    }

    #[test]
    fn activation_map_properties() {
        let img = noisy(11);
        let ms = markers("a", 1, 5, 12);
        let norm = marker_stats_multi(&[(&img, &ms)]).unwrap();
        let q = [4, 5, 6];
        let mut p = vec![0f32; 27];
        centralized_patch_into(&img, &norm, q, 3, &mut p);
        let src = FilterSource { run_id: "r".into(), image_id: None, marker_id: None, cluster: 0 };
        let f = Filter::unit(&p, src.clone()).unwrap();
        let act = activation_map(&img, &f, &norm).unwrap();
        assert_eq!(act.shape(), [1, 12, 12, 12]);
        let n = p.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((act.get(0, 4, 5, 6) - n).abs() < 1e-4);

        let flat = Volume::from_fn([1, 12, 12, 12], |_, _, _, _| 0.5);
        let stats = NormStats { mean: vec![0.0], std: vec![1.0] };
        let neg = Filter::unit(&[-1.0; 27], src.clone()).unwrap();
        assert!(activation_map(&flat, &neg, &stats).unwrap().data().iter().all(|&x| x == 0.0));
        let short = Filter::unit(&[1.0; 8], src).unwrap();
        assert!(activation_map(&img, &short, &norm).is_err());
    }

    #[test]
    fn soft_iou_examples() {
        let mut mask = vec![false; 64];
        for i in 0..8 {
            mask[i] = true;
        }
        let mask = RegionMask::new([4, 4, 4], mask).unwrap();
        let exact = Volume::from_fn([1, 4, 4, 4], |_, z, y, x| if z * 16 + y * 4 + x < 8 { 1.0 } else { 0.0 });
        assert_eq!(score_candidate_against_region(&exact, &mask).unwrap(), 1.0);
        let zero = Volume::zeros([1, 4, 4, 4]);
        assert_eq!(score_candidate_against_region(&zero, &mask).unwrap(), 0.0);
        let half = Volume::from_fn([1, 4, 4, 4], |_, z, y, x| if z * 16 + y * 4 + x < 4 { 1.0 } else { 0.0 });
        assert_eq!(score_candidate_against_region(&half, &mask).unwrap(), 0.5);
        let empty = RegionMask::new([4, 4, 4], vec![false; 64]).unwrap();
        assert!(score_candidate_against_region(&exact, &empty).is_err());
    }

    fn run_with(image_id: &str, n: usize, run_id: &str) -> CandidateSet {
        let filters = (0..n)
            .map(|j| {
                let mut w = vec![0f32; 27];
                w[j % 27] = 1.0;
                Filter::unit(&w, FilterSource { run_id: run_id.into(), image_id: Some(image_id.into()), marker_id: None, cluster: j }).unwrap()
            })
            .collect();
        CandidateSet {
            run_id: run_id.into(),
            params: RunParams::new(1, n, 0),
            modality: Modality::Flair,
            channels: 1,
            norm: NormStats::identity(1),
            images: vec![ImageCandidates { image_id: image_id.into(), first_candidates: n, filters }],
        }
    }

    #[test]
    fn ledger_and_finalize() {
        let runs = [run_with("x", 4, "A"), run_with("x", 5, "B")];
        let mut ledger = SelectionLedger::new(16);
        for (r, c) in [("A", 0), ("A", 3), ("B", 1), ("B", 2), ("B", 4)] {
            ledger.select(Pick { run_id: r.into(), image_id: "x".into(), candidate: c }).unwrap();
        }
        assert!(ledger.select(Pick { run_id: "A".into(), image_id: "x".into(), candidate: 0 }).is_err());
        let bank = finalize_bank(&runs, &ledger, &NormStats::identity(1)).unwrap();
        assert_eq!(bank.len(), 5);
        assert_eq!(bank.filters[2].source.run_id, "B");
        assert_eq!(bank.filters[2].weights, runs[1].images[0].filters[1].weights);

        let mut dangling = SelectionLedger::new(4);
        dangling.select(Pick { run_id: "A".into(), image_id: "x".into(), candidate: 9 }).unwrap();
        assert!(finalize_bank(&runs, &dangling, &NormStats::identity(1)).is_err());
        assert!(finalize_bank(&runs, &SelectionLedger::new(4), &NormStats::identity(1)).is_err());

        let mut small = SelectionLedger::new(1);
        small.select(Pick { run_id: "A".into(), image_id: "x".into(), candidate: 1 }).unwrap();
        assert!(small.select(Pick { run_id: "A".into(), image_id: "x".into(), candidate: 2 }).is_err());
    }

    #[test]
    fn candidate_set_and_ledger_persist() {
        let imgs = [noisy(13), noisy(14)];
        let ms = [markers("a", 2, 10, 15), markers("b", 3, 10, 16)];
        let run = run_msflim_step(&imgs, &ms, RunParams::new(5, 20, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path().join("r")).unwrap();
        assert_eq!(CandidateSet::load(dir.path().join("r")).unwrap(), run);
        let mut l = SelectionLedger::default();
        l.select(Pick { run_id: run.run_id.clone(), image_id: "b".into(), candidate: 2 }).unwrap();
        l.save(dir.path().join("ledger.json")).unwrap();
        assert_eq!(SelectionLedger::load(dir.path().join("ledger.json")).unwrap(), l);
    }

    #[test]
    fn oracle_picks_best_per_region_then_fills() {
        // bright cube in one corner, candidates that fire on it or not
        let img = Volume::from_fn([1, 8, 8, 8], |_, z, y, x| if z < 4 && y < 4 && x < 4 { 1.0 } else { 0.0 });
        let cube = RegionMask::from_volume(&img, |v| v > 0.5);
        let rest = RegionMask::from_volume(&img, |v| v < 0.5);
        let src = |j| FilterSource { run_id: "A".into(), image_id: Some("x".into()), marker_id: None, cluster: j };
        let mut center = vec![0f32; 27];
        center[13] = 1.0;
        let mut neg = vec![0f32; 27];
        neg[13] = -1.0;
        let mut run = run_with("x", 3, "A");
        run.images[0].filters = vec![
            Filter::unit(&[1.0; 27], src(0)).unwrap(),
            Filter::unit(&center, src(1)).unwrap(),
            Filter::unit(&neg, src(2)).unwrap(),
        ];
        run.norm = NormStats { mean: vec![0.5], std: vec![1.0] };
        let images = [OracleImage {
            image_id: "x".into(),
            image: &img,
            roi: None,
            regions: vec![("cube".into(), cube), ("rest".into(), rest)],
        }];
        let rep = scripted_selection(&[run], &images, 0.3, 2).unwrap();
        assert!(rep.uncovered.is_empty());
        assert_eq!(rep.best_per_region[0].pick.candidate, 1);
        assert_eq!(rep.best_per_region[1].pick.candidate, 2);
        assert_eq!(rep.ledger.len(), 2);
    }
}
