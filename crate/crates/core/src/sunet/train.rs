//! ADAM with linear learning-rate decay and the training regimes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, LossParts};
use super::model::{decode, graph, EncodedCase, Encoded, EncoderKind, SunetConfig, SunetModel};
use super::tape::{ParamSet, Tape};
use crate::conv::Real;
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{write_atomic, LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2.5e-3,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.epochs == 0 {
            return Err(Error::InvalidArgument("learning rate and epoch count must be positive".into()));
        }
        Ok(())
    }

    /// `lr0 · (1 − e / epochs)` for the 0-based epoch `e`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * (1.0 - epoch as f64 / self.epochs as f64)
    }
}

/// Which tensors backpropagation updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Everything, from random initialization.
    Fbp,
    /// Decoder only; marker-estimated encoders stay fixed.
    Pbp,
    /// Everything, starting from marker-estimated encoders.
    Ft,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Fbp => "fbp",
            Regime::Pbp => "pbp",
            Regime::Ft => "ft",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fbp" => Ok(Regime::Fbp),
            "pbp" => Ok(Regime::Pbp),
            "ft" => Ok(Regime::Ft),
            _ => Err(Error::InvalidArgument(format!("unknown regime {s:?}"))),
        }
    }
}

/// ADAM state for the trainable tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, tc: &TrainConfig) -> Self {
        Self {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            t: 0,
            m: params.values.iter().map(|v| vec![0.0; v.len()]).collect(),
            v: params.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    /// One update; frozen tensors (no gradient) are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Vec<f32>>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (p, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if params.frozen[p] {
                continue;
            }
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for (i, w) in params.values[p].iter_mut().enumerate() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// One training example.
#[derive(Debug, Clone, Copy)]
pub struct TrainCase<'a> {
    pub flair: &'a Volume,
    pub t1gd: &'a Volume,
    pub labels: &'a LabelVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub epochs: Vec<EpochRecord>,
}

impl LossCurve {
    /// `epoch,mean_loss,lr` rows, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:.9},{:.9e}", r.epoch, r.mean_loss, r.lr);
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// Loss and parameter gradients for one case, through the whole network.
pub fn loss_and_gradients<T: Real>(
    params: &ParamSet<T>,
    cfg: &SunetConfig,
    kind: EncoderKind,
    flair: &Volume,
    t1gd: &Volume,
    labels: &LabelVolume,
) -> Result<(LossParts, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new(params);
    let out = graph(&mut tape, params, cfg, kind, flair, t1gd)?;
    let (loss, g) = loss_and_grad(tape.value(out), labels.data())?;
    Ok((loss, tape.backward(out, g)))
}

/// Loss only, at the precision of `params`.
pub fn loss_value<T: Real>(
    params: &ParamSet<T>,
    cfg: &SunetConfig,
    kind: EncoderKind,
    flair: &Volume,
    t1gd: &Volume,
    labels: &LabelVolume,
) -> Result<f64> {
    let mut tape = Tape::new(params);
    let out = graph(&mut tape, params, cfg, kind, flair, t1gd)?;
    Ok(loss_and_grad(tape.value(out), labels.data())?.0.total)
}

fn cached_step(model: &SunetModel, enc: &EncodedCase, labels: &LabelVolume) -> Result<(f64, Vec<Option<Vec<f32>>>)> {
    let mut tape = Tape::new(&model.params);
    let skips = enc.skips.iter().map(|(v, s)| tape.input(v.clone(), *s)).collect();
    let bottom = tape.input(enc.bottom.0.clone(), enc.bottom.1);
    let out = decode(&mut tape, &model.params, &model.config, &Encoded { skips, bottom })?;
    let (loss, g) = loss_and_grad(tape.value(out), labels.data())?;
    Ok((loss.total, tape.backward(out, g)))
}

/// Trains in place. Data order is shuffled per epoch from the seed.
/// `progress` sees every finished epoch.
pub fn train(
    model: &mut SunetModel,
    cases: &[TrainCase],
    tc: &TrainConfig,
    regime: Regime,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<LossCurve> {
    tc.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    match (regime, model.encoder) {
        (Regime::Fbp, EncoderKind::Random) | (Regime::Pbp | Regime::Ft, EncoderKind::Flim) => {}
        (Regime::Fbp, _) => return Err(Error::InvalidArgument("full backpropagation starts from random encoders".into())),
        _ => return Err(Error::InvalidArgument("this regime needs marker-estimated encoders".into())),
    }
    for c in cases {
        model.check_inputs(c.flair, c.t1gd)?;
        if c.labels.shape() != c.flair.spatial() {
            return Err(Error::Shape("labels and images differ in extent".into()));
        }
    }
    model.set_encoder_frozen(regime == Regime::Pbp);
    let cache = if regime == Regime::Pbp {
        Some(cases.iter().map(|c| model.encode_case(c.flair, c.t1gd)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let mut adam = Adam::new(&model.params, tc);
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(tc.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = match &cache {
                Some(enc) => cached_step(model, &enc[i], cases[i].labels)?,
                None => {
                    let c = cases[i];
                    let (l, g) = loss_and_gradients(&model.params, &model.config, model.encoder, c.flair, c.t1gd, c.labels)?;
                    (l.total, g)
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(i));
            }
            total += loss;
            adam.step(&mut model.params, &grads, lr);
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            mean_loss: total / cases.len() as f64,
            lr,
        };
        progress(&rec);
        curve.epochs.push(rec);
    }
    Ok(curve)
}
