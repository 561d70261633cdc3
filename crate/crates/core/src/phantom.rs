//! Synthetic glioblastoma-like phantoms with known ground truth.
//!
//! Each case is a brain ellipsoid holding deformed-ellipsoid lesions: an
//! edema shell split by a plane into saturated and intermediate FLAIR
//! intensity, and a tumor core with an enhancing rim around a necrotic
//! center on T1Gd. A smooth multiplicative bias field and Gaussian noise are
//! applied last.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markers::{load_markers, save_markers, Marker, MarkerLabel, MarkerSet, Modality, Voxel};
use crate::seed;
use crate::volume::{label, read_labels, read_volume, write_atomic, write_labels, write_volume, LabelVolume, Volume};

/// Codes of the sub-region map written next to each case.
pub mod region {
    pub const OUTSIDE: u8 = 0;
    pub const BRAIN: u8 = 1;
    pub const ED_SATURATED: u8 = 2;
    pub const ED_INTERMEDIATE: u8 = 3;
    pub const ET: u8 = 4;
    pub const NC: u8 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlairLevels {
    pub brain: f32,
    pub ed_saturated: f32,
    pub ed_intermediate: f32,
    pub et: f32,
    pub nc: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1GdLevels {
    pub brain: f32,
    pub ed: f32,
    pub et: f32,
    pub nc: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Brain semi-axes as a fraction of the half extent.
    pub brain_fraction: [f64; 2],
    pub lesion_count: [usize; 2],
    /// Edema radius in voxels.
    pub ed_radius: [f64; 2],
    /// Tumor radius relative to the edema radius.
    pub tumor_ratio: [f64; 2],
    /// Necrotic core radius relative to the tumor radius.
    pub nc_ratio: [f64; 2],
    /// Maximum relative radial deformation of every surface.
    pub deformation: f64,
    /// Share of the edema shell that appears saturated on FLAIR.
    pub saturated_fraction: [f64; 2],
    pub flair: FlairLevels,
    pub t1gd: T1GdLevels,
    /// Relative per-case jitter of every intensity level.
    pub contrast_jitter: f32,
    pub noise_sigma: f32,
    pub bias_amplitude: f32,
    /// Every sub-region must reach this many voxels.
    pub min_region_voxels: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [48, 48, 48],
            spacing_mm: [1.0, 1.0, 1.0],
            brain_fraction: [0.8, 0.9],
            lesion_count: [1, 1],
            ed_radius: [10.0, 13.0],
            tumor_ratio: [0.55, 0.7],
            nc_ratio: [0.55, 0.7],
            deformation: 0.12,
            saturated_fraction: [0.25, 0.4],
            flair: FlairLevels {
                brain: 0.25,
                ed_saturated: 1.0,
                ed_intermediate: 0.85,
                et: 0.45,
                nc: 0.35,
            },
            t1gd: T1GdLevels {
                brain: 0.4,
                ed: 0.38,
                et: 1.0,
                nc: 0.1,
            },
            contrast_jitter: 0.05,
            noise_sigma: 0.03,
            bias_amplitude: 0.05,
            min_region_voxels: 60,
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: &[T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::InvalidArgument(format!("{name} range {r:?} is reversed")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 8) {
            return Err(Error::InvalidArgument(format!("phantom size {:?} is too small", self.size)));
        }
        check_range("brain fraction", &self.brain_fraction)?;
        check_range("lesion count", &self.lesion_count)?;
        check_range("edema radius", &self.ed_radius)?;
        check_range("tumor ratio", &self.tumor_ratio)?;
        check_range("necrosis ratio", &self.nc_ratio)?;
        check_range("saturated fraction", &self.saturated_fraction)?;
        if self.lesion_count[0] == 0 {
            return Err(Error::InvalidArgument("at least one lesion is required".into()));
        }
        if !(0.0..0.5).contains(&self.deformation) {
            return Err(Error::InvalidArgument("deformation must lie in [0, 0.5)".into()));
        }
        if self.brain_fraction[0] <= 0.0 || self.brain_fraction[1] > 1.0 {
            return Err(Error::InvalidArgument("brain fraction must lie in (0, 1]".into()));
        }
        if self.tumor_ratio[1] * (1.0 + self.deformation) >= 1.0 || self.nc_ratio[1] >= 1.0 {
            return Err(Error::InvalidArgument("tumor and necrosis must be smaller than their hosts".into()));
        }
        Ok(())
    }
}

/// One generated case.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub flair: Volume,
    pub t1gd: Volume,
    pub labels: LabelVolume,
    /// Single-channel map of [`region`] codes.
    pub regions: Volume,
}

impl PhantomCase {
    pub fn region_count(&self, code: u8) -> usize {
        self.regions.data().iter().filter(|&&v| v == code as f32).count()
    }
}

/// Smooth radial perturbation bounded by `amp` in absolute value.
struct Bumps {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl Bumps {
    fn new(rng: &mut ChaCha8Rng, amp: f64) -> Self {
        let n = 3;
        let terms = (0..n)
            .map(|_| {
                let w = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                (w, rng.gen_range(0.0..std::f64::consts::TAU), amp / n as f64 * rng.gen_range(0.3..1.0))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, u: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|(w, phase, a)| a * (w[0] * u[0] + w[1] * u[1] + w[2] * u[2] + phase).sin())
            .sum()
    }
}

/// Deformed ellipsoid: inside when the normalized radius is below `1 + bumps`.
struct Blob {
    center: [f64; 3],
    axes: [f64; 3],
    bumps: Bumps,
}

impl Blob {
    /// Normalized radius divided by the local surface radius.
    fn level(&self, p: [f64; 3]) -> f64 {
        let d: Vec<f64> = (0..3).map(|a| (p[a] - self.center[a]) / self.axes[a]).collect();
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        r / (1.0 + self.bumps.at([d[0] / r, d[1] / r, d[2] / r]))
    }

    fn max_extent(&self, amp: f64) -> f64 {
        self.axes.iter().cloned().fold(0.0, f64::max) * (1.0 + amp)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0f64, 1.0).expect("unit normal");
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-6 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Region code map; `None` when a sampled lesion leaves the brain.
fn sample_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Option<Vec<u8>> {
    let [zn, yn, xn] = spec.size;
    let dims = [zn as f64, yn as f64, xn as f64];
    let brain = Blob {
        center: [
            dims[0] / 2.0 - 0.5 + rng.gen_range(-1.0..1.0),
            dims[1] / 2.0 - 0.5 + rng.gen_range(-1.0..1.0),
            dims[2] / 2.0 - 0.5 + rng.gen_range(-1.0..1.0),
        ],
        axes: [
            uniform(rng, spec.brain_fraction) * (dims[0] / 2.0 - 1.5),
            uniform(rng, spec.brain_fraction) * (dims[1] / 2.0 - 1.5),
            uniform(rng, spec.brain_fraction) * (dims[2] / 2.0 - 1.5),
        ],
        bumps: Bumps::new(rng, 0.03),
    };
    let pos = |i: usize| {
        let z = i / (yn * xn);
        let y = (i / xn) % yn;
        let x = i % xn;
        [z as f64, y as f64, x as f64]
    };
    let n = zn * yn * xn;
    let mut map: Vec<u8> = (0..n)
        .map(|i| if brain.level(pos(i)) < 1.0 { region::BRAIN } else { region::OUTSIDE })
        .collect();
    let rank = |c: u8| match c {
        region::NC => 5,
        region::ET => 4,
        region::ED_SATURATED => 3,
        region::ED_INTERMEDIATE => 2,
        _ => c,
    };
    let lesions = rng.gen_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    for _ in 0..lesions {
        let r_ed = uniform(rng, spec.ed_radius);
        let ed = Blob {
            center: [
                brain.center[0] + rng.gen_range(-0.4..0.4) * brain.axes[0],
                brain.center[1] + rng.gen_range(-0.4..0.4) * brain.axes[1],
                brain.center[2] + rng.gen_range(-0.4..0.4) * brain.axes[2],
            ],
            axes: [
                r_ed * rng.gen_range(0.85..1.15),
                r_ed * rng.gen_range(0.85..1.15),
                r_ed * rng.gen_range(0.85..1.15),
            ],
            bumps: Bumps::new(rng, spec.deformation),
        };
        let r_t = r_ed * uniform(rng, spec.tumor_ratio);
        let shift = unit_vector(rng);
        let off = rng.gen_range(0.0..0.1) * r_ed;
        let tumor = Blob {
            center: [
                ed.center[0] + shift[0] * off,
                ed.center[1] + shift[1] * off,
                ed.center[2] + shift[2] * off,
            ],
            axes: [
                r_t * rng.gen_range(0.9..1.1),
                r_t * rng.gen_range(0.9..1.1),
                r_t * rng.gen_range(0.9..1.1),
            ],
            bumps: Bumps::new(rng, spec.deformation),
        };
        let nc_ratio = uniform(rng, spec.nc_ratio);
        let normal = unit_vector(rng);
        let sat_fraction = uniform(rng, spec.saturated_fraction);

        let reach = ed.max_extent(spec.deformation).ceil() as isize + 1;
        let lo: Vec<usize> = (0..3).map(|a| (ed.center[a].floor() as isize - reach).max(0) as usize).collect();
        let hi: Vec<usize> = (0..3)
            .map(|a| ((ed.center[a].ceil() as isize + reach).max(0) as usize).min(spec.size[a] - 1))
            .collect();
        let mut shell: Vec<(usize, f64)> = Vec::new();
        let mut core: Vec<(usize, u8)> = Vec::new();
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let i = (z * yn + y) * xn + x;
                    let p = [z as f64, y as f64, x as f64];
                    let t = tumor.level(p);
                    if t < nc_ratio {
                        core.push((i, region::NC));
                    } else if t < 1.0 {
                        core.push((i, region::ET));
                    } else if ed.level(p) < 1.0 {
                        let s = (0..3).map(|a| (p[a] - ed.center[a]) * normal[a]).sum::<f64>();
                        shell.push((i, s));
                    } else {
                        continue;
                    }
                    if map[i] == region::OUTSIDE {
                        return None;
                    }
                }
            }
        }
        let mut proj: Vec<f64> = shell.iter().map(|&(_, s)| s).collect();
        proj.sort_by(f64::total_cmp);
        let cut = ((1.0 - sat_fraction) * proj.len() as f64).floor() as usize;
        let threshold = proj.get(cut.min(proj.len().saturating_sub(1))).copied().unwrap_or(0.0);
        let paint = |map: &mut Vec<u8>, i: usize, code: u8| {
            if rank(code) > rank(map[i]) {
                map[i] = code;
            }
        };
        for (i, s) in shell {
            let code = if s >= threshold { region::ED_SATURATED } else { region::ED_INTERMEDIATE };
            paint(&mut map, i, code);
        }
        for (i, code) in core {
            paint(&mut map, i, code);
        }
    }
    Some(map)
}

struct Smooth {
    terms: Vec<([f64; 3], f64)>,
}

impl Smooth {
    /// Sum of two low-frequency cosines, in `[-1, 1]`.
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let terms = (0..2)
            .map(|_| {
                let u = unit_vector(rng);
                let extent = dims.iter().copied().max().unwrap_or(1) as f64;
                let freq = rng.gen_range(0.5..1.2) * std::f64::consts::TAU / extent;
                ([u[0] * freq, u[1] * freq, u[2] * freq], rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { terms }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|(w, ph)| (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + ph).cos())
            .sum::<f64>()
            / self.terms.len() as f64
    }
}

/// Generates one case; deterministic in `(spec.seed, case_seed)`.
pub fn generate_case(spec: &PhantomSpec, case_seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, case_seed));
    let mut map = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        if let Some(m) = sample_geometry(spec, &mut rng) {
            let ok = [region::ED_SATURATED, region::ED_INTERMEDIATE, region::ET, region::NC]
                .iter()
                .all(|&c| m.iter().filter(|&&v| v == c).count() >= spec.min_region_voxels);
            if ok {
                map = Some(m);
                break;
            }
        }
    }
    let map = map.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "no lesion layout fits a {:?} volume with these ranges",
            spec.size
        ))
    })?;

    let mut jitter = |v: f32| v * (1.0 + rng.gen_range(-1.0..=1.0f32) * spec.contrast_jitter);
    let f = &spec.flair;
    let flair_levels = [0.0, jitter(f.brain), jitter(f.ed_saturated), jitter(f.ed_intermediate), jitter(f.et), jitter(f.nc)];
    let t = &spec.t1gd;
    let ed = jitter(t.ed);
    let t1_levels = [0.0, jitter(t.brain), ed, ed, jitter(t.et), jitter(t.nc)];

    let [zn, yn, xn] = spec.size;
    let bias = [Smooth::new(&mut rng, spec.size), Smooth::new(&mut rng, spec.size)];
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut flair = vec![0f32; map.len()];
    let mut t1gd = vec![0f32; map.len()];
    for (i, &code) in map.iter().enumerate() {
        let p = [(i / (yn * xn)) as f64, ((i / xn) % yn) as f64, (i % xn) as f64];
        let b0 = 1.0 + spec.bias_amplitude * bias[0].at(p) as f32;
        let b1 = 1.0 + spec.bias_amplitude * bias[1].at(p) as f32;
        flair[i] = flair_levels[code as usize] * b0 + noise.sample(&mut rng);
        t1gd[i] = t1_levels[code as usize] * b1 + noise.sample(&mut rng);
    }
    let labels = map
        .iter()
        .map(|&c| match c {
            region::ED_SATURATED | region::ED_INTERMEDIATE => label::ED,
            region::ET => label::ET,
            region::NC => label::NC,
            _ => label::BACKGROUND,
        })
        .collect();
    let shape = [1, zn, yn, xn];
    Ok(PhantomCase {
        flair: Volume::new(shape, flair, spec.spacing_mm)?,
        t1gd: Volume::new(shape, t1gd, spec.spacing_mm)?,
        labels: LabelVolume::new(spec.size, labels)?,
        regions: Volume::new(shape, map.iter().map(|&c| c as f32).collect(), spec.spacing_mm)?,
    })
}

fn in_region(regions: &Volume, code: u8) -> Vec<bool> {
    regions.channel(0).iter().map(|&v| v == code as f32).collect()
}

/// Voxels of `mask` whose 6-neighbours are all inside it.
fn erode(mask: &[bool], [zn, yn, xn]: [usize; 3]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for z in 1..zn.saturating_sub(1) {
        for y in 1..yn.saturating_sub(1) {
            for x in 1..xn.saturating_sub(1) {
                let i = (z * yn + y) * xn + x;
                out[i] = mask[i]
                    && mask[i - 1]
                    && mask[i + 1]
                    && mask[i - xn]
                    && mask[i + xn]
                    && mask[i - xn * yn]
                    && mask[i + xn * yn];
            }
        }
    }
    out
}

/// Scribble of exactly `n` distinct voxels inside `mask`: mostly straight
/// random-walk strokes, restarting elsewhere when a stroke gets stuck.
fn stroke(mask: &[bool], dims: [usize; 3], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Voxel>> {
    let total = mask.iter().filter(|&&b| b).count();
    if total < n {
        return Err(Error::InvalidArgument(format!("region of {total} voxels cannot hold a {n}-voxel marker")));
    }
    let eroded = erode(mask, dims);
    let pool = if eroded.iter().filter(|&&b| b).count() >= 3 * n { &eroded } else { mask };
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pool[i]).collect();
    let [_, yn, xn] = dims;
    let to_vox = |i: usize| [i / (yn * xn), (i / xn) % yn, i % xn];
    let step = |v: Voxel, d: [isize; 3]| -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let s = v[a] as isize + d[a];
            if s < 0 || s >= dims[a] as isize {
                return None;
            }
            c[a] = s as usize;
        }
        Some((c[0] * yn + c[1]) * xn + c[2])
    };
    let dirs: Vec<[isize; 3]> = (-1..=1)
        .flat_map(|z| (-1..=1).flat_map(move |y| (-1..=1).map(move |x| [z, y, x])))
        .filter(|d| *d != [0, 0, 0])
        .collect();
    let mut taken = vec![false; mask.len()];
    let mut out: Vec<Voxel> = Vec::with_capacity(n);
    let mut cur: Option<(usize, [isize; 3])> = None;
    while out.len() < n {
        let (i, dir) = match cur {
            Some(c) => c,
            None => {
                let free: Vec<usize> = candidates.iter().copied().filter(|&i| !taken[i]).collect();
                let i = free[rng.gen_range(0..free.len())];
                taken[i] = true;
                out.push(to_vox(i));
                (i, dirs[rng.gen_range(0..dirs.len())])
            }
        };
        if out.len() >= n {
            break;
        }
        let v = to_vox(i);
        let ok = |j: usize| pool[j] && !taken[j];
        let next = if rng.gen_bool(0.75) { step(v, dir).filter(|&j| ok(j)).map(|j| (j, dir)) } else { None };
        let next = next.or_else(|| {
            let open: Vec<([isize; 3], usize)> = dirs.iter().filter_map(|&d| step(v, d).filter(|&j| ok(j)).map(|j| (d, j))).collect();
            (!open.is_empty()).then(|| {
                let (d, j) = open[rng.gen_range(0..open.len())];
                (j, d)
            })
        });
        match next {
            Some((j, d)) => {
                taken[j] = true;
                out.push(to_vox(j));
                cur = Some((j, d));
            }
            None => cur = None,
        }
    }
    Ok(out)
}

/// Equal-size scribbles for one case: saturated edema, intermediate edema
/// and background on FLAIR; enhancing tumor, necrosis and background on
/// T1Gd. Background markers lie outside the brain.
pub fn synth_markers(case: &PhantomCase, image_id: &str, per_region_voxels: usize, marker_seed: u64) -> Result<(MarkerSet, MarkerSet)> {
    if per_region_voxels == 0 {
        return Err(Error::InvalidArgument("markers need at least one voxel".into()));
    }
    let dims = case.regions.spatial();
    let mut rng = ChaCha8Rng::seed_from_u64(marker_seed);
    let mut make = |plan: &[(u8, MarkerLabel)], modality| -> Result<MarkerSet> {
        let markers = plan
            .iter()
            .enumerate()
            .map(|(i, &(code, lbl))| {
                let mask = in_region(&case.regions, code);
                Marker::new(i as u32 + 1, lbl, stroke(&mask, dims, per_region_voxels, &mut rng)?)
            })
            .collect::<Result<Vec<_>>>()?;
        MarkerSet::new(image_id, modality, markers)
    };
    let flair = make(
        &[
            (region::ED_SATURATED, MarkerLabel::ED),
            (region::ED_INTERMEDIATE, MarkerLabel::ED),
            (region::OUTSIDE, MarkerLabel::Other),
        ],
        Modality::Flair,
    )?;
    let t1gd = make(
        &[
            (region::ET, MarkerLabel::ET),
            (region::NC, MarkerLabel::NC),
            (region::OUTSIDE, MarkerLabel::Other),
        ],
        Modality::T1Gd,
    )?;
    Ok((flair, t1gd))
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub n: usize,
    pub split: [f64; 3],
    pub marker_voxels: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.as_ref().join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Split sizes; the test split takes the remainder.
pub fn split_counts(n: usize, split: [f64; 3]) -> Result<[usize; 3]> {
    if split.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {split:?} must be in [0,1] and sum to 1")));
    }
    let train = (n as f64 * split[0]).round() as usize;
    let val = (n as f64 * split[1]).round() as usize;
    let counts = [train, val, n.saturating_sub(train + val)];
    if train + val > n || counts.iter().zip(&split).any(|(&c, &f)| f > 0.0 && c == 0) {
        return Err(Error::InvalidArgument(format!("{n} cases are too few for split {split:?}")));
    }
    Ok(counts)
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

pub fn marker_path(dir: &Path, case_id: &str, modality: Modality) -> PathBuf {
    dir.join(case_id).join(format!("markers_{}.mk", modality.stem()))
}

/// Writes `n` cases plus the manifest under `dir`.
pub fn generate_dataset(dir: impl AsRef<Path>, spec: &PhantomSpec, n: usize, split: [f64; 3], marker_voxels: usize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let counts = split_counts(n, split)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<String> = (0..n).map(case_id).collect();
    for (i, id) in ids.iter().enumerate() {
        let case = generate_case(spec, i as u64)?;
        let cdir = dir.join(id);
        fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        write_volume(&case.flair, cdir.join("flair.mvol"))?;
        write_volume(&case.t1gd, cdir.join("t1gd.mvol"))?;
        write_labels(&case.labels, cdir.join("labels.mvol"))?;
        write_volume(&case.regions, cdir.join("regions.mvol"))?;
        let (mf, mt) = synth_markers(&case, id, marker_voxels, seed::derive(spec.seed ^ 0x6d61_726b, i as u64))?;
        save_markers(&mf, marker_path(dir, id, Modality::Flair))?;
        save_markers(&mt, marker_path(dir, id, Modality::T1Gd))?;
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        n,
        split,
        marker_voxels,
        train: ids[..counts[0]].to_vec(),
        val: ids[counts[0]..counts[0] + counts[1]].to_vec(),
        test: ids[counts[0] + counts[1]..].to_vec(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// A case read back from disk.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub case_id: String,
    pub flair: Volume,
    pub t1gd: Volume,
    pub labels: LabelVolume,
    pub regions: Option<Volume>,
}

impl CaseData {
    pub fn image(&self, modality: Modality) -> &Volume {
        match modality {
            Modality::Flair => &self.flair,
            Modality::T1Gd => &self.t1gd,
        }
    }
}

pub fn load_case(dir: impl AsRef<Path>, case_id: &str) -> Result<CaseData> {
    let cdir = dir.as_ref().join(case_id);
    let regions_path = cdir.join("regions.mvol");
    Ok(CaseData {
        case_id: case_id.to_string(),
        flair: read_volume(cdir.join("flair.mvol"))?,
        t1gd: read_volume(cdir.join("t1gd.mvol"))?,
        labels: read_labels(cdir.join("labels.mvol"))?,
        regions: if regions_path.exists() { Some(read_volume(regions_path)?) } else { None },
    })
}

pub fn load_case_markers(dir: impl AsRef<Path>, case_id: &str, modality: Modality) -> Result<MarkerSet> {
    load_markers(marker_path(dir.as_ref(), case_id, modality))
}
