//! Helpers shared by the training and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use nfvs::config::Config;
use nfvs::control::DepthVector;
use nfvs::datagen::*;
use nfvs::nn::{Arch, ModelWeights};
use nfvs::rng;
use nfvs::sim::Rig;
use nfvs::training::*;

pub fn context(weights: LossWeights) -> LossContext {
    let cfg = Config::default();
    let tc = TrainConfig::from_config(&cfg).unwrap();
    LossContext {
        weights,
        gain: tc.gain,
        damping: tc.damping,
        period: cfg.f64("control.period"),
        velocity_transform: tc.velocity_transform,
        visibility_bound: tc.visibility_bound,
        detach_interaction: false,
    }
}

/// Ground-truth features of one oracle segment pushed through the
/// feature-level losses.
#[derive(Debug, Clone, Copy)]
pub struct Floor {
    /// Imitation mean over samples.
    pub ci: f64,
    /// Consistency mean over pairs, target depths in the interaction matrix.
    pub sc: f64,
    /// Consistency mean over pairs with the true current depths.
    pub sc_true: f64,
    pub samples: usize,
    pub pairs: usize,
}

/// Pair-weighted pooling of per-segment floors: (max imitation, consistency,
/// consistency with true depths).
pub fn pooled(floors: &[Floor]) -> (f64, f64, f64) {
    let pairs: usize = floors.iter().map(|f| f.pairs).sum();
    let ci = floors.iter().map(|f| f.ci).fold(0.0, f64::max);
    let sc = floors.iter().map(|f| f.sc * f.pairs as f64).sum::<f64>() / pairs as f64;
    let sc_true = floors.iter().map(|f| f.sc_true * f.pairs as f64).sum::<f64>() / pairs as f64;
    (ci, sc, sc_true)
}

/// Floors of every segment of the first `tasks` oracle tasks.
pub fn oracle_floors(tasks: u32) -> Vec<Floor> {
    let cfg = Config::default();
    let rig = Rig::from_config(&cfg).unwrap();
    let dc = DatagenConfig::from_config(&cfg).unwrap();
    let ctx = context(LossWeights::ONES);
    let mut out = Vec::new();
    for task in 0..tasks {
        let run = oracle_demo(&rig, task, Split::Train, &dc).unwrap();
        for seg in &run.segments {
            let m: Vec<Vec<f64>> = seg.features.iter().map(|s| s.as_slice().to_vec()).collect();
            let m_ref = vec![seg.target_features.as_slice().to_vec()];
            let samples: Vec<SampleData> = seg
                .demo
                .records
                .iter()
                .map(|r| SampleData {
                    qdot: r.qdot.clone(),
                    jr: r.jr.clone(),
                    reference: 0,
                    depths: seg.demo.meta.target_depths.clone(),
                })
                .collect();
            let pairs: Vec<(usize, usize)> = (1..m.len()).map(|k| (k - 1, k)).collect();
            let fl = feature_losses(&m, &m_ref, &samples, &pairs, &ctx).unwrap();
            let true_depth: f64 = pairs
                .iter()
                .map(|&(a, b)| {
                    let (_, z) = rig.features(&run.scene, &seg.demo.records[a].q).unwrap();
                    let s = SampleData { depths: z, ..samples[a].clone() };
                    consistency_pair(&m[a], &m[b], &s, &ctx).unwrap().0
                })
                .sum::<f64>()
                / pairs.len() as f64;
            out.push(Floor {
                ci: fl.ci,
                sc: fl.sc,
                sc_true: true_depth,
                samples: samples.len(),
                pairs: pairs.len(),
            });
        }
    }
    out
}

pub fn random_sample<R: Rng>(r: &mut R, reference: usize, points: usize) -> SampleData {
    SampleData {
        qdot: DVector::from_fn(7, |_, _| r.random_range(-0.3..0.3)),
        jr: DMatrix::from_fn(6, 7, |_, _| r.random_range(-0.6..0.6)),
        reference,
        depths: DepthVector::from_slice(&(0..points).map(|_| r.random_range(0.25..0.35)).collect::<Vec<_>>()).unwrap(),
    }
}

pub fn tiny_batch(arch: &Arch, seed: u64) -> LossBatch<f64> {
    let mut r = rng::stream(seed, 77, 0);
    let image = |r: &mut rand_chacha::ChaCha8Rng| (0..arch.image_len()).map(|_| r.random_range(0.0..1.0)).collect::<Vec<f64>>();
    let inputs: Vec<Vec<f64>> = (0..4).map(|_| image(&mut r)).collect();
    let targets: Vec<Vec<f64>> = (0..4).map(|_| image(&mut r)).collect();
    let references: Vec<Vec<f64>> = (0..2).map(|_| image(&mut r)).collect();
    let points = arch.outputs() / 2;
    let samples = vec![
        random_sample(&mut r, 0, points),
        random_sample(&mut r, 0, points),
        random_sample(&mut r, 1, points),
        random_sample(&mut r, 1, points),
    ];
    LossBatch {
        inputs,
        targets,
        samples,
        references,
        pairs: vec![(0, 1), (2, 3)],
    }
}

/// Weights whose ReLU units sit clearly on or off, and a head scaled so that
/// predictions spread over the frame.
pub fn gradcheck_weights(arch: &Arch) -> ModelWeights<f64> {
    let mut w = ModelWeights::<f64>::init(arch, 5);
    let mut r = rng::stream(6, 77, 1);
    for t in &mut w.tensors {
        if t.name.ends_with(".bias") {
            for v in &mut t.data {
                let m: f64 = r.random_range(0.2..0.5);
                *v = if r.random_bool(0.5) { m } else { -m };
            }
        }
    }
    w
}

pub fn signature(w: &ModelWeights<f64>, batch: &LossBatch<f64>) -> Vec<u64> {
    batch
        .inputs
        .iter()
        .chain(&batch.references)
        .map(|x| w.forward(x, None, true, true).unwrap().activation_signature())
        .collect()
}

/// Central differences of the full composite loss against backprop on
/// sampled weights of every tensor; returns (checked, worst relative error).
pub fn gradient_check(ctx: &LossContext, per_tensor: usize) -> (usize, f64, Vec<(f64, f64)>) {
    let arch = Arch::perception(8, 8, 3, 8, 1.5);
    let w = gradcheck_weights(&arch);
    let batch = tiny_batch(&arch, 3);
    let (_, grads) = batch_loss(&w, &batch, ctx, true).unwrap();
    let grads = grads.unwrap();
    let base = signature(&w, &batch);
    let loss = |w: &ModelWeights<f64>| batch_loss(w, &batch, ctx, false).unwrap().0.total;
    let eps = 1e-6;
    let mut r = rng::stream(9, rng::domain::GRADCHECK, 0);
    let (mut checked, mut worst) = (0, 0.0f64);
    let mut pairs = Vec::new();
    for ti in 0..w.tensors.len() {
        let n = w.tensors[ti].data.len();
        let mut done = 0;
        for _ in 0..(per_tensor * 10) {
            if done == per_tensor {
                break;
            }
            let i = r.random_range(0..n);
            let mut wp = w.clone();
            wp.tensors[ti].data[i] += eps;
            let mut wm = w.clone();
            wm.tensors[ti].data[i] -= eps;
            if signature(&wp, &batch) != base || signature(&wm, &batch) != base {
                continue;
            }
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * eps);
            let an = grads.tensors[ti].data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            pairs.push((fd, an));
            done += 1;
            checked += 1;
        }
        assert!(done > 0, "no kink-free sample for {}", w.tensors[ti].name);
    }
    (checked, worst, pairs)
}

