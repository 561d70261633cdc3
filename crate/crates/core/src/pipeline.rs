//! Phantom experiment stages: marker-based encoders, training and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flim::{build_encoder, EncoderModel, EncoderSpec, FilterBank, LayerSpec};
use crate::markers::{MarkerSet, Modality};
use crate::metrics::{evaluate_labels, DiceReport};
use crate::msflim::{
    default_grid, finalize_bank, run_msflim_step, scripted_selection, CandidateSet, OracleImage, OracleReport, RegionMask,
    RunParams, DEFAULT_TARGET_BANK, DEFAULT_TAU,
};
use crate::phantom::{load_case, load_case_markers, region, CaseData, DatasetManifest};
use crate::seed;
use crate::sunet::{train, LossCurve, Regime, SunetConfig, SunetModel, TrainCase, TrainConfig};

/// How the first encoder layer is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer1 {
    /// Estimated from the markers and reduced by PCA.
    Flim,
    /// Picked from multi-step candidates by the scripted oracle.
    Msflim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Training cases that carry markers, taken from the front of the split.
    pub marked_cases: usize,
    pub grid: Vec<(usize, usize)>,
    pub target_bank: usize,
    pub tau: f64,
    /// Dilation of the whole tumor that bounds oracle scoring.
    pub roi_margin: usize,
    pub kernel: usize,
    pub clusters_per_marker: usize,
    /// PCA widths of encoder layers 2 and 3.
    pub deep_widths: [usize; 2],
    pub sunet: SunetConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            marked_cases: 8,
            grid: default_grid(),
            target_bank: DEFAULT_TARGET_BANK,
            tau: DEFAULT_TAU,
            roi_margin: 2,
            kernel: 3,
            clusters_per_marker: 5,
            deep_widths: [32, 32],
            sunet: SunetConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Encoder layout; the first layer is reduced to the bank size so both
    /// initializations give encoders of equal width.
    pub fn encoder_spec(&self) -> EncoderSpec {
        let widths = [self.target_bank, self.deep_widths[0], self.deep_widths[1]];
        EncoderSpec {
            layers: widths
                .iter()
                .map(|&m| LayerSpec {
                    kernel: self.kernel,
                    clusters_per_marker: self.clusters_per_marker,
                    pca_out: Some(m),
                    pool: true,
                })
                .collect(),
        }
    }

    /// Network config for random encoders, as wide as the marker-based ones.
    pub fn random_sunet(&self) -> SunetConfig {
        SunetConfig {
            encoder_widths: vec![self.target_bank, self.deep_widths[0], self.deep_widths[1]],
            ..self.sunet.clone()
        }
    }

    pub fn msflim_seed(&self) -> u64 {
        seed::derive(self.seed, 1)
    }

    pub fn encoder_seed(&self) -> u64 {
        seed::derive(self.seed, 2)
    }

    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, 3)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, 4),
            ..self.train.clone()
        }
    }
}

/// A dataset directory and its cases.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<CaseData>,
    pub val: Vec<CaseData>,
    pub test: Vec<CaseData>,
    /// Marker sets `(FLAIR, T1Gd)` of the marked training cases.
    pub markers: Vec<(MarkerSet, MarkerSet)>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<std::path::Path>, marked_cases: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir)?;
        let read = |ids: &[String]| ids.iter().map(|id| load_case(dir, id)).collect::<Result<Vec<_>>>();
        if marked_cases == 0 || marked_cases > manifest.train.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot mark {marked_cases} of {} training cases",
                manifest.train.len()
            )));
        }
        let markers = manifest.train[..marked_cases]
            .iter()
            .map(|id| Ok((load_case_markers(dir, id, Modality::Flair)?, load_case_markers(dir, id, Modality::T1Gd)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train: read(&manifest.train)?,
            val: read(&manifest.val)?,
            test: read(&manifest.test)?,
            markers,
            manifest,
        })
    }

    pub fn marked(&self) -> &[CaseData] {
        &self.train[..self.markers.len()]
    }

    pub fn marked_images(&self, modality: Modality) -> Vec<crate::volume::Volume> {
        self.marked().iter().map(|c| c.image(modality).clone()).collect()
    }

    pub fn marker_sets(&self, modality: Modality) -> Vec<MarkerSet> {
        self.markers
            .iter()
            .map(|(f, t)| if modality == Modality::Flair { f.clone() } else { t.clone() })
            .collect()
    }
}

/// Sub-regions the oracle looks for on each modality.
pub fn oracle_regions(modality: Modality) -> &'static [(&'static str, u8)] {
    match modality {
        Modality::Flair => &[("ed_saturated", region::ED_SATURATED), ("ed_intermediate", region::ED_INTERMEDIATE)],
        Modality::T1Gd => &[("et", region::ET), ("nc", region::NC)],
    }
}

/// Oracle view of one case: its region masks and the dilated whole tumor.
pub fn oracle_image<'a>(case: &'a CaseData, modality: Modality, margin: usize) -> Result<OracleImage<'a>> {
    let regions = case
        .regions
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("case {} has no sub-region map", case.case_id)))?;
    let wt = RegionMask::from_volume(regions, |v| v >= region::ED_SATURATED as f32);
    Ok(OracleImage {
        image_id: case.case_id.clone(),
        image: case.image(modality),
        roi: Some(wt.dilate(margin)),
        regions: oracle_regions(modality)
            .iter()
            .map(|&(name, code)| (name.to_string(), RegionMask::from_volume(regions, |v| v == code as f32)))
            .filter(|(_, m)| m.count() > 0)
            .collect(),
    })
}

/// Runs of the grid, the oracle's choices and the resulting first-layer bank.
#[derive(Debug, Clone)]
pub struct Selection {
    pub modality: Modality,
    pub runs: Vec<CandidateSet>,
    pub report: OracleReport,
    pub bank: FilterBank,
}

pub fn msflim_grid(
    cases: &[CaseData],
    markers: &[MarkerSet],
    modality: Modality,
    cfg: &ExperimentConfig,
) -> Result<Selection> {
    let images: Vec<_> = cases.iter().map(|c| c.image(modality).clone()).collect();
    let runs = cfg
        .grid
        .iter()
        .map(|&(n1, n2)| {
            let params = RunParams {
                kernel: cfg.kernel,
                ..RunParams::new(n1, n2, cfg.msflim_seed())
            };
            run_msflim_step(&images, markers, params)
        })
        .collect::<Result<Vec<_>>>()?;
    let views = cases
        .iter()
        .map(|c| oracle_image(c, modality, cfg.roi_margin))
        .collect::<Result<Vec<_>>>()?;
    let report = scripted_selection(&runs, &views, cfg.tau, cfg.target_bank)?;
    let bank = finalize_bank(&runs, &report.ledger, &runs[0].norm)?;
    Ok(Selection {
        modality,
        runs,
        report,
        bank,
    })
}

/// Builds the encoder of one modality from the marked cases.
pub fn encoder_for(ds: &Dataset, modality: Modality, layer1: Layer1, cfg: &ExperimentConfig) -> Result<(EncoderModel, Option<Selection>)> {
    let markers = ds.marker_sets(modality);
    let selection = match layer1 {
        Layer1::Flim => None,
        Layer1::Msflim => Some(msflim_grid(ds.marked(), &markers, modality, cfg)?),
    };
    let enc = build_encoder(
        &ds.marked_images(modality),
        &markers,
        &cfg.encoder_spec(),
        selection.as_ref().map(|s| s.bank.clone()),
        cfg.encoder_seed(),
    )?;
    Ok((enc, selection))
}

pub fn train_cases(cases: &[CaseData]) -> Vec<TrainCase<'_>> {
    cases
        .iter()
        .map(|c| TrainCase {
            flair: &c.flair,
            t1gd: &c.t1gd,
            labels: &c.labels,
        })
        .collect()
}

/// Initializes and trains a network. Random encoders go with `Fbp`.
pub fn train_model(
    ds: &Dataset,
    encoders: Option<(&EncoderModel, &EncoderModel)>,
    regime: Regime,
    cfg: &ExperimentConfig,
    progress: impl FnMut(&crate::sunet::EpochRecord),
) -> Result<(SunetModel, LossCurve)> {
    let mut model = match encoders {
        Some((f, t)) => SunetModel::from_encoders(cfg.sunet.clone(), f, t, cfg.init_seed())?,
        None => SunetModel::random(cfg.random_sunet(), cfg.init_seed())?,
    };
    let curve = train(&mut model, &train_cases(&ds.train), &cfg.train_config(), regime, progress)?;
    Ok((model, curve))
}

pub fn evaluate_model(model: &SunetModel, cases: &[CaseData]) -> Result<DiceReport> {
    let preds = cases
        .iter()
        .map(|c| model.predict_labels(&c.flair, &c.t1gd))
        .collect::<Result<Vec<_>>>()?;
    evaluate_labels(cases.iter().zip(&preds).map(|(c, p)| (c.case_id.clone(), p, &c.labels)))
}
