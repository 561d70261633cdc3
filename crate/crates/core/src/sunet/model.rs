//! Network definition, initialization, forward pass and checkpoints.
//!
//! Each modality has its own three-layer encoder (convolution, ReLU, max
//! pooling). The decoder upsamples with 2³ transposed convolutions,
//! concatenates the pre-pool blocks of both encoders at the matching scale,
//! and applies a 3³ convolution with ReLU; a final 1³ convolution produces
//! the class logits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::argmax_labels;
use super::tape::{NodeId, ParamSet, Tape};
use crate::conv::{Real, Shape4};
use crate::error::{Error, Result};
use crate::flim::EncoderModel;
use crate::markers::Modality;
use crate::seed;
use crate::volume::{extend_le, f32s_from_le, label, split_header, write_atomic, LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SunetConfig {
    /// Output channels of the three encoder layers (shared by both modalities).
    pub encoder_widths: Vec<usize>,
    /// Output channels of the decoder stages, coarsest first.
    pub decoder_widths: Vec<usize>,
    pub classes: usize,
    pub kernel: usize,
}

impl Default for SunetConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![16, 32, 64],
            decoder_widths: vec![32, 16, 8],
            classes: label::COUNT,
            kernel: 3,
        }
    }
}

impl SunetConfig {
    pub fn layers(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.decoder_widths.len() != self.encoder_widths.len() {
            return Err(Error::InvalidArgument("decoder stages must match encoder layers".into()));
        }
        if self.classes != label::COUNT {
            return Err(Error::InvalidArgument(format!("the network predicts {} classes", label::COUNT)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument("kernel size must be odd".into()));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// How the encoders were initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Random weights with biases, no input normalization.
    Random,
    /// Marker-estimated filters preceded by fixed marker statistics.
    Flim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SunetModel {
    pub config: SunetConfig,
    pub encoder: EncoderKind,
    pub params: ParamSet<f32>,
}

pub(crate) fn enc_prefix(m: Modality, l: usize) -> String {
    format!("enc.{}.{l}", m.stem())
}

/// Scaled uniform fan-in initialization (bound `sqrt(6 / fan_in)`).
fn kaiming(name: &str, fan_in: usize, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, seed::hash_str(name)));
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn push_decoder(params: &mut ParamSet<f32>, cfg: &SunetConfig, seed: u64) {
    let l = cfg.layers();
    let k = cfg.kernel;
    let mut c_prev = 2 * cfg.encoder_widths[l - 1];
    for (s, &d) in cfg.decoder_widths.iter().enumerate() {
        let name = format!("dec.{s}.up.w");
        params.push(&name, vec![d, c_prev, 2, 2, 2], kaiming(&name, c_prev * 8, d * c_prev * 8, seed), false);
        params.push(format!("dec.{s}.up.b"), vec![d], vec![0.0; d], false);
        let c_in = d + 2 * cfg.encoder_widths[l - 1 - s];
        let name = format!("dec.{s}.conv.w");
        params.push(&name, vec![d, c_in, k, k, k], kaiming(&name, c_in * k.pow(3), d * c_in * k.pow(3), seed), false);
        params.push(format!("dec.{s}.conv.b"), vec![d], vec![0.0; d], false);
        c_prev = d;
    }
    let classes = cfg.classes;
    params.push("head.w", vec![classes, c_prev, 1, 1, 1], kaiming("head.w", c_prev, classes * c_prev, seed), false);
    params.push("head.b", vec![classes], vec![0.0; classes], false);
}

impl SunetModel {
    /// Random encoders and decoder.
    pub fn random(config: SunetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let k = config.kernel;
        for m in Modality::ALL {
            let mut c_in = 1;
            for (l, &w) in config.encoder_widths.iter().enumerate() {
                let p = enc_prefix(m, l);
                let name = format!("{p}.w");
                params.push(&name, vec![w, c_in, k, k, k], kaiming(&name, c_in * k.pow(3), w * c_in * k.pow(3), seed), false);
                params.push(format!("{p}.b"), vec![w], vec![0.0; w], false);
                c_in = w;
            }
        }
        push_decoder(&mut params, &config, seed);
        Ok(Self {
            config,
            encoder: EncoderKind::Random,
            params,
        })
    }

    /// Encoders copied from marker-estimated banks, random decoder. The
    /// encoder widths of `config` are replaced by the banks' widths.
    pub fn from_encoders(mut config: SunetConfig, flair: &EncoderModel, t1gd: &EncoderModel, seed: u64) -> Result<Self> {
        if flair.modality != Modality::Flair || t1gd.modality != Modality::T1Gd {
            return Err(Error::InvalidArgument("encoders must be FLAIR then T1Gd".into()));
        }
        if flair.widths() != t1gd.widths() {
            return Err(Error::Shape(format!(
                "encoder widths differ: {:?} vs {:?}",
                flair.widths(),
                t1gd.widths()
            )));
        }
        config.encoder_widths = flair.widths();
        config.validate()?;
        let mut params = ParamSet::default();
        for enc in [flair, t1gd] {
            if enc.banks.iter().any(|b| b.kernel != config.kernel || !b.pool) {
                return Err(Error::InvalidArgument(format!(
                    "encoder banks must use {}³ kernels and pooling",
                    config.kernel
                )));
            }
            if enc.banks[0].in_channels != 1 {
                return Err(Error::Shape("first encoder layer must take one channel".into()));
            }
            for (l, b) in enc.banks.iter().enumerate() {
                let p = enc_prefix(enc.modality, l);
                let k = b.kernel;
                params.push(format!("{p}.w"), vec![b.len(), b.in_channels, k, k, k], b.weight_matrix(), false);
                params.push(format!("{p}.mean"), vec![b.in_channels], b.norm.mean.clone(), true);
                params.push(format!("{p}.std"), vec![b.in_channels], b.norm.std.clone(), true);
            }
        }
        push_decoder(&mut params, &config, seed);
        Ok(Self {
            config,
            encoder: EncoderKind::Flim,
            params,
        })
    }

    pub fn is_encoder(name: &str) -> bool {
        name.starts_with("enc.")
    }

    /// Freezes or unfreezes every encoder weight; statistics stay frozen.
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        for (i, name) in self.params.names.iter().enumerate() {
            if Self::is_encoder(name) && !is_stat(name) {
                self.params.frozen[i] = frozen;
            }
        }
    }

    pub fn encoder_tensors(&self) -> Vec<(&str, &[f32])> {
        self.params
            .names
            .iter()
            .zip(&self.params.values)
            .filter(|(n, _)| Self::is_encoder(n))
            .map(|(n, v)| (n.as_str(), v.as_slice()))
            .collect()
    }

    pub fn check_inputs(&self, flair: &Volume, t1gd: &Volume) -> Result<()> {
        if flair.channels() != 1 || t1gd.channels() != 1 {
            return Err(Error::Shape("inputs must be single-channel".into()));
        }
        if flair.spatial() != t1gd.spatial() {
            return Err(Error::Shape(format!(
                "FLAIR {:?} and T1Gd {:?} differ in extent",
                flair.spatial(),
                t1gd.spatial()
            )));
        }
        let div = 1usize << self.config.layers();
        if flair.spatial().iter().any(|&s| s % div != 0 || s == 0) {
            return Err(Error::Shape(format!(
                "extent {:?} is not divisible by {div}",
                flair.spatial()
            )));
        }
        Ok(())
    }

    /// Logits, `4 × Z × Y × X`.
    pub fn forward(&self, flair: &Volume, t1gd: &Volume) -> Result<Volume> {
        self.check_inputs(flair, t1gd)?;
        let mut tape = Tape::new(&self.params);
        let out = graph(&mut tape, &self.params, &self.config, self.encoder, flair, t1gd)?;
        let shape = tape.shape(out);
        Volume::new(shape, tape.take_value(out), flair.spacing_mm())
    }

    pub fn predict_labels(&self, flair: &Volume, t1gd: &Volume) -> Result<LabelVolume> {
        let logits = self.forward(flair, t1gd)?;
        LabelVolume::new(flair.spatial(), argmax_labels(logits.data(), self.config.classes))
    }
}

fn is_stat(name: &str) -> bool {
    name.ends_with(".mean") || name.ends_with(".std")
}

fn pid<T: Real>(params: &ParamSet<T>, name: &str) -> Result<usize> {
    params.id(name).ok_or_else(|| Error::InvalidArgument(format!("missing tensor {name}")))
}

/// Encoder outputs of both modalities, concatenated per scale.
pub(crate) struct Encoded {
    /// Pre-pool blocks, finest first.
    pub skips: Vec<NodeId>,
    pub bottom: NodeId,
}

pub(crate) fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    params: &ParamSet<T>,
    cfg: &SunetConfig,
    kind: EncoderKind,
    inputs: [NodeId; 2],
) -> Result<Encoded> {
    let l_n = cfg.layers();
    let mut blocks = vec![Vec::with_capacity(2); l_n];
    let mut bottoms = Vec::with_capacity(2);
    for (m, input) in Modality::ALL.into_iter().zip(inputs) {
        let mut cur = input;
        for (l, block) in blocks.iter_mut().enumerate() {
            let p = enc_prefix(m, l);
            let w = pid(params, &format!("{p}.w"))?;
            let z = match kind {
                EncoderKind::Random => tape.conv(cur, w, Some(pid(params, &format!("{p}.b"))?)),
                EncoderKind::Flim => {
                    let mean = &params.values[pid(params, &format!("{p}.mean"))?];
                    let std = &params.values[pid(params, &format!("{p}.std"))?];
                    let scale: Vec<T> = std.iter().map(|&s| T::one() / s).collect();
                    let shift: Vec<T> = mean.iter().zip(std).map(|(&m, &s)| -m / s).collect();
                    let a = tape.affine(cur, &scale, &shift);
                    tape.conv(a, w, None)
                }
            };
            let act = tape.relu(z);
            block.push(act);
            cur = tape.maxpool(act);
        }
        bottoms.push(cur);
    }
    let skips = blocks.iter().map(|b| tape.concat(b)).collect();
    let bottom = tape.concat(&bottoms);
    Ok(Encoded { skips, bottom })
}

pub(crate) fn decode<T: Real>(tape: &mut Tape<'_, T>, params: &ParamSet<T>, cfg: &SunetConfig, enc: &Encoded) -> Result<NodeId> {
    let l_n = cfg.layers();
    let mut cur = enc.bottom;
    for s in 0..l_n {
        let up = tape.upconv(cur, pid(params, &format!("dec.{s}.up.w"))?, pid(params, &format!("dec.{s}.up.b"))?);
        let cat = tape.concat(&[up, enc.skips[l_n - 1 - s]]);
        let z = tape.conv(cat, pid(params, &format!("dec.{s}.conv.w"))?, Some(pid(params, &format!("dec.{s}.conv.b"))?));
        cur = tape.relu(z);
    }
    Ok(tape.conv(cur, pid(params, "head.w")?, Some(pid(params, "head.b")?)))
}

pub(crate) fn volume_input<T: Real>(tape: &mut Tape<'_, T>, v: &Volume) -> NodeId {
    tape.input(v.data().iter().map(|&x| T::of(x as f64)).collect(), v.shape())
}

/// Full network on the tape; returns the logits node.
pub(crate) fn graph<T: Real>(
    tape: &mut Tape<'_, T>,
    params: &ParamSet<T>,
    cfg: &SunetConfig,
    kind: EncoderKind,
    flair: &Volume,
    t1gd: &Volume,
) -> Result<NodeId> {
    let inputs = [volume_input(tape, flair), volume_input(tape, t1gd)];
    let enc = encode(tape, params, cfg, kind, inputs)?;
    decode(tape, params, cfg, &enc)
}

/// Cached encoder outputs of one case, for training with frozen encoders.
#[derive(Debug, Clone)]
pub struct EncodedCase {
    pub skips: Vec<(Vec<f32>, Shape4)>,
    pub bottom: (Vec<f32>, Shape4),
}

impl SunetModel {
    pub fn encode_case(&self, flair: &Volume, t1gd: &Volume) -> Result<EncodedCase> {
        self.check_inputs(flair, t1gd)?;
        let mut tape = Tape::new(&self.params);
        let inputs = [volume_input(&mut tape, flair), volume_input(&mut tape, t1gd)];
        let enc = encode(&mut tape, &self.params, &self.config, self.encoder, inputs)?;
        let grab = |n: NodeId| (tape.shape(n), n);
        let skips: Vec<(Shape4, NodeId)> = enc.skips.iter().map(|&n| grab(n)).collect();
        let bottom = grab(enc.bottom);
        Ok(EncodedCase {
            skips: skips.into_iter().map(|(s, n)| (tape.take_value(n), s)).collect(),
            bottom: (tape.take_value(bottom.1), bottom.0),
        })
    }
}

/// Names and shapes of every tensor of a network.
pub fn expected_layout(cfg: &SunetConfig, kind: EncoderKind) -> Vec<(String, Vec<usize>)> {
    let k = cfg.kernel;
    let mut out = Vec::new();
    for m in Modality::ALL {
        let mut c_in = 1;
        for (l, &w) in cfg.encoder_widths.iter().enumerate() {
            let p = enc_prefix(m, l);
            out.push((format!("{p}.w"), vec![w, c_in, k, k, k]));
            match kind {
                EncoderKind::Random => out.push((format!("{p}.b"), vec![w])),
                EncoderKind::Flim => {
                    out.push((format!("{p}.mean"), vec![c_in]));
                    out.push((format!("{p}.std"), vec![c_in]));
                }
            }
            c_in = w;
        }
    }
    let l = cfg.layers();
    let mut c_prev = 2 * cfg.encoder_widths[l - 1];
    for (s, &d) in cfg.decoder_widths.iter().enumerate() {
        out.push((format!("dec.{s}.up.w"), vec![d, c_prev, 2, 2, 2]));
        out.push((format!("dec.{s}.up.b"), vec![d]));
        out.push((format!("dec.{s}.conv.w"), vec![d, d + 2 * cfg.encoder_widths[l - 1 - s], k, k, k]));
        out.push((format!("dec.{s}.conv.b"), vec![d]));
        c_prev = d;
    }
    out.push(("head.w".into(), vec![cfg.classes, c_prev, 1, 1, 1]));
    out.push(("head.b".into(), vec![cfg.classes]));
    out
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 elements into the blob.
    offset: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    config: SunetConfig,
    encoder: EncoderKind,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_MAGIC: &str = "SUNET1";

impl SunetModel {
    /// JSON manifest line (tensor name, shape, offset) followed by the raw
    /// little-endian f32 blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let tensors = (0..self.params.len())
            .map(|i| {
                let e = TensorEntry {
                    name: self.params.names[i].clone(),
                    shape: self.params.shapes[i].clone(),
                    offset,
                    frozen: self.params.frozen[i],
                };
                offset += self.params.values[i].len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            magic: CHECKPOINT_MAGIC.into(),
            config: self.config.clone(),
            encoder: self.encoder,
            dtype: "f32le".into(),
            tensors,
        };
        let mut out = serde_json::to_vec(&header).expect("checkpoint header serializes");
        out.push(b'\n');
        for v in &self.params.values {
            extend_le(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (line, blob) = split_header(bytes)?;
        let h: CheckpointHeader = serde_json::from_str(line).map_err(|e| Error::Header(e.to_string()))?;
        if h.magic != CHECKPOINT_MAGIC {
            return Err(Error::Header(format!("bad checkpoint magic {:?}", h.magic)));
        }
        h.config.validate()?;
        let total: usize = h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 4 {
            return Err(Error::Truncated {
                expected: total * 4,
                found: blob.len(),
            });
        }
        let all = f32s_from_le(blob);
        if let Some(i) = all.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut params = ParamSet::default();
        for t in h.tensors {
            let n: usize = t.shape.iter().product();
            let values = all
                .get(t.offset..t.offset + n)
                .ok_or_else(|| Error::Header(format!("tensor {} exceeds the blob", t.name)))?
                .to_vec();
            params.push(t.name, t.shape, values, t.frozen);
        }
        let model = Self {
            config: h.config,
            encoder: h.encoder,
            params,
        };
        model.check_layout()?;
        Ok(model)
    }

    /// Every tensor the forward pass needs exists with the expected shape.
    fn check_layout(&self) -> Result<()> {
        for (name, shape) in expected_layout(&self.config, self.encoder) {
            let i = self
                .params
                .id(&name)
                .ok_or_else(|| Error::Header(format!("checkpoint lacks tensor {name}")))?;
            if self.params.shapes[i] != shape {
                return Err(Error::Header(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    self.params.shapes[i]
                )));
            }
        }
        Ok(())
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
