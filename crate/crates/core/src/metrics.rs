//! Dice scores on composed tumor regions and dataset-level reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{label, write_atomic, LabelVolume};

/// Binary masks of the evaluated regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub et: Vec<bool>,
    pub nc: Vec<bool>,
    pub wt: Vec<bool>,
}

/// ET = label 2, NC = label 3, WT = any tumor label.
pub fn compose_regions(labels: &LabelVolume) -> RegionMasks {
    let d = labels.data();
    RegionMasks {
        et: d.iter().map(|&l| l == label::ET).collect(),
        nc: d.iter().map(|&l| l == label::NC).collect(),
        wt: d.iter().map(|&l| l != label::BACKGROUND).collect(),
    }
}

/// `2|a∩b| / (|a|+|b|)`, with two empty masks scoring 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", a.len(), b.len())));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        sa += x as usize;
        sb += y as usize;
        inter += (x && y) as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionDice {
    pub et: f64,
    pub nc: f64,
    pub wt: f64,
}

impl RegionDice {
    fn get(&self, i: usize) -> f64 {
        [self.et, self.nc, self.wt][i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub dice: RegionDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub cases: Vec<CaseDice>,
    pub mean: RegionDice,
    /// Population standard deviation.
    pub std: RegionDice,
}

pub fn case_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<RegionDice> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let p = compose_regions(pred);
    let t = compose_regions(truth);
    Ok(RegionDice {
        et: dice(&p.et, &t.et)?,
        nc: dice(&p.nc, &t.nc)?,
        wt: dice(&p.wt, &t.wt)?,
    })
}

impl DiceReport {
    pub fn from_cases(cases: Vec<CaseDice>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("cannot report on an empty dataset".into()));
        }
        let n = cases.len() as f64;
        let stat = |i: usize| {
            let mean = cases.iter().map(|c| c.dice.get(i)).sum::<f64>() / n;
            let var = cases.iter().map(|c| (c.dice.get(i) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let [et, nc, wt] = [stat(0), stat(1), stat(2)];
        Ok(Self {
            mean: RegionDice { et: et.0, nc: nc.0, wt: wt.0 },
            std: RegionDice { et: et.1, nc: nc.1, wt: wt.1 },
            cases,
        })
    }

    /// `case_id,dsc_et,dsc_nc,dsc_wt` rows followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,dsc_et,dsc_nc,dsc_wt\n");
        let mut row = |id: &str, d: &RegionDice| {
            let _ = writeln!(s, "{id},{:.6},{:.6},{:.6}", d.et, d.nc, d.wt);
        };
        for c in &self.cases {
            row(&c.case_id, &c.dice);
        }
        row("mean", &self.mean);
        row("std", &self.std);
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    /// `mean(std)` per region, three decimals.
    pub fn summary(&self) -> String {
        format!(
            "ET {:.3}({:.3}) NC {:.3}({:.3}) WT {:.3}({:.3})",
            self.mean.et, self.std.et, self.mean.nc, self.std.nc, self.mean.wt, self.std.wt
        )
    }
}

/// Scores `(case_id, prediction, ground truth)` triples.
pub fn evaluate_labels<'a>(
    cases: impl IntoIterator<Item = (String, &'a LabelVolume, &'a LabelVolume)>,
) -> Result<DiceReport> {
    let cases = cases
        .into_iter()
        .map(|(case_id, p, t)| Ok(CaseDice { case_id, dice: case_dice(p, t)? }))
        .collect::<Result<Vec<_>>>()?;
    DiceReport::from_cases(cases)
}

/// One row per model with `mean(std)` cells for ET, NC and WT.
pub fn comparison_table(reports: &[(String, DiceReport)]) -> String {
    let mut s = String::from("model,ET,NC,WT\n");
    for (name, r) in reports {
        let _ = writeln!(
            s,
            "{name},{:.3}({:.3}),{:.3}({:.3}),{:.3}({:.3})",
            r.mean.et, r.std.et, r.mean.nc, r.std.nc, r.mean.wt, r.std.wt
        );
    }
    s
}
