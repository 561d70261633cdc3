//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use flim_core::conv::Real;
use flim_core::flim::{build_encoder, EncoderModel, EncoderSpec, LayerSpec};
use flim_core::phantom::{generate_case, synth_markers, PhantomSpec};
use flim_core::markers::{Marker, MarkerLabel, MarkerSet, Modality};
use flim_core::sunet::*;
use flim_core::volume::{LabelVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> SunetConfig {
    SunetConfig {
        encoder_widths: vec![2, 4, 8],
        decoder_widths: vec![4, 4, 2],
        ..SunetConfig::default()
    }
}

pub fn blob_case(seed: u64, n: usize) -> (Volume, Volume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [rng.gen_range(n as f64 * 0.3..n as f64 * 0.7), rng.gen_range(n as f64 * 0.3..n as f64 * 0.7), rng.gen_range(n as f64 * 0.3..n as f64 * 0.7)];
    let r = n as f64 * 0.3;
    let mut labels = vec![0u8; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d = ((z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2)).sqrt() / r;
                labels[(z * n + y) * n + x] = if d < 0.35 { 3 } else if d < 0.65 { 2 } else if d < 1.0 { 1 } else { 0 };
            }
        }
    }
    let flair_lv = [0.2f32, 1.0, 0.5, 0.4];
    let t1_lv = [0.4f32, 0.35, 1.0, 0.1];
    let mut noise = |l: &[f32; 4]| -> Vec<f32> { labels.iter().map(|&k| l[k as usize] + rng.gen_range(-0.05..0.05)).collect() };
    let f = noise(&flair_lv);
    let t = noise(&t1_lv);
    let shape = [1, n, n, n];
    (
        Volume::new(shape, f, [1.0; 3]).unwrap(),
        Volume::new(shape, t, [1.0; 3]).unwrap(),
        LabelVolume::new([n, n, n], labels).unwrap(),
    )
}

/// Elementwise relative error of f32 analytic gradients against f64
/// central differences, ignoring entries below 1e-6 in magnitude.
pub fn gradient_errors(model: &SunetModel, f: &Volume, t: &Volume, l: &LabelVolume) -> Vec<(String, f64, usize)> {
    let (_, grads) = loss_and_gradients(&model.params, &model.config, model.encoder, f, t, l).unwrap();
    let p64: ParamSet<f64> = model.params.cast();
    let h = 1e-6;
    let mut out = Vec::new();
    for (pi, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let mut worst = 0f64;
        let mut checked = 0;
        for j in 0..g.len() {
            let mut plus = p64.clone();
            plus.values[pi][j] += h;
            let mut minus = p64.clone();
            minus.values[pi][j] -= h;
            let fd = (loss_value(&plus, &model.config, model.encoder, f, t, l).unwrap()
                - loss_value(&minus, &model.config, model.encoder, f, t, l).unwrap())
                / (2.0 * h);
            let a = g[j].f64();
            if fd.abs().max(a.abs()) < 1e-6 {
                continue;
            }
            checked += 1;
            worst = worst.max((a - fd).abs() / fd.abs().max(a.abs()));
        }
        out.push((model.params.names[pi].clone(), worst, checked));
    }
    out
}

pub fn blob_markers(labels: &LabelVolume, id: &str, modality: Modality, wanted: [u8; 3], per: usize, seed: u64) -> MarkerSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [zn, yn, xn] = labels.shape();
    let markers = wanted
        .iter()
        .enumerate()
        .map(|(i, &lbl)| {
            let mut pool: Vec<[usize; 3]> = Vec::new();
            for z in 0..zn {
                for y in 0..yn {
                    for x in 0..xn {
                        if labels.get(z, y, x) == lbl {
                            pool.push([z, y, x]);
                        }
                    }
                }
            }
            let mut vox = Vec::new();
            while vox.len() < per.min(pool.len()) {
                let v = pool[rng.gen_range(0..pool.len())];
                if !vox.contains(&v) {
                    vox.push(v);
                }
            }
            let label = [MarkerLabel::Other, MarkerLabel::ED, MarkerLabel::ET, MarkerLabel::NC][lbl as usize];
            Marker::new(i as u32 + 1, label, vox).unwrap()
        })
        .collect();
    MarkerSet::new(id, modality, markers).unwrap()
}

pub fn tiny_encoders(cases: &[(Volume, Volume, LabelVolume)]) -> (EncoderModel, EncoderModel) {
    let spec = EncoderSpec {
        layers: [2, 4, 8]
            .iter()
            .map(|&m| LayerSpec { kernel: 3, clusters_per_marker: 3, pca_out: Some(m), pool: true })
            .collect(),
    };
    let mut out = Vec::new();
    for (modality, wanted) in [(Modality::Flair, [1u8, 2, 0]), (Modality::T1Gd, [2u8, 3, 0])] {
        let imgs: Vec<Volume> = cases.iter().map(|c| if modality == Modality::Flair { c.0.clone() } else { c.1.clone() }).collect();
        let ms: Vec<MarkerSet> = cases
            .iter()
            .enumerate()
            .map(|(i, c)| blob_markers(&c.2, &format!("c{i}"), modality, wanted, 6, i as u64))
            .collect();
        out.push(build_encoder(&imgs, &ms, &spec, None, 5).unwrap());
    }
    let t = out.pop().unwrap();
    (out.pop().unwrap(), t)
}

pub fn phantom_cases(n: usize, size: usize) -> Vec<(Volume, Volume, LabelVolume, MarkerSet, MarkerSet)> {
    let spec = PhantomSpec {
        size: [size; 3],
        ed_radius: [size as f64 * 0.2, size as f64 * 0.26],
        min_region_voxels: 20,
        ..PhantomSpec::default()
    };
    (0..n)
        .map(|i| {
            let c = generate_case(&spec, i as u64).unwrap();
            let (mf, mt) = synth_markers(&c, &format!("c{i}"), 12, i as u64).unwrap();
            (c.flair, c.t1gd, c.labels, mf, mt)
        })
        .collect()
}

pub fn phantom_encoders(cases: &[(Volume, Volume, LabelVolume, MarkerSet, MarkerSet)], widths: [usize; 3]) -> (EncoderModel, EncoderModel) {
    let spec = EncoderSpec {
        layers: widths.iter().map(|&m| LayerSpec { kernel: 3, clusters_per_marker: 4, pca_out: Some(m), pool: true }).collect(),
    };
    let flair: Vec<Volume> = cases.iter().map(|c| c.0.clone()).collect();
    let t1: Vec<Volume> = cases.iter().map(|c| c.1.clone()).collect();
    let mf: Vec<MarkerSet> = cases.iter().map(|c| c.3.clone()).collect();
    let mt: Vec<MarkerSet> = cases.iter().map(|c| c.4.clone()).collect();
    (build_encoder(&flair, &mf, &spec, None, 1).unwrap(), build_encoder(&t1, &mt, &spec, None, 1).unwrap())
}
