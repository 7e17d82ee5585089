//! Composite-loss training of the perception model and behaviour cloning of
//! the end-to-end baseline.

mod loss;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix6;
use rayon::prelude::*;

pub use loss::{
    batch_loss, cloning_loss, consistency_pair, feature_losses, hinge, imitation_sample, CloningBatch, FeatureLosses, LossBatch, LossBreakdown,
    LossContext, LossWeights, SampleData,
};

use crate::config::Config;
use crate::datagen::{pair_batches, Dataset, DatasetHeader, PairRef, Split};
use crate::error::{Error, Result};
use crate::geometry::twist_transform;
use crate::nn::{augment, save_weights, Adam, AdamConfig, Arch, AugmentConfig, ModelWeights, ENCODER_LAYERS};
use crate::rng;
use crate::sim::ImageTensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub gain: f64,
    pub damping: f64,
    /// Output clamp of the end-to-end head, the controller's command clamp.
    pub clamp: f64,
    pub alpha: f64,
    pub visibility_bound: f64,
    pub detach_interaction: bool,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Epochs between numbered checkpoints; 0 keeps only the best weights.
    pub checkpoint_every: usize,
    pub e2e_ae_weight: f64,
    pub enc_channels: [usize; ENCODER_LAYERS],
    pub head_width: usize,
    /// Camera-to-end-effector twist transform.
    pub velocity_transform: Matrix6<f64>,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let control = cfg.control()?;
        let ch = cfg.floats("train.channels");
        let bd = cfg.f64("train.brightness_delta");
        let c = cfg.floats("train.contrast_delta");
        let tc = Self {
            epochs: cfg.usize("train.epochs"),
            lr: cfg.f64("train.lr"),
            batch_size: cfg.usize("train.batch_size"),
            gain: control.gain,
            damping: control.damping,
            clamp: control.clamp,
            alpha: cfg.f64("train.alpha"),
            visibility_bound: cfg.f64("train.visibility_bound"),
            detach_interaction: cfg.bool("train.detach_interaction"),
            augment: AugmentConfig {
                noise_std: cfg.f64("train.noise_std"),
                brightness: [-bd, bd],
                contrast_delta: [c[0], c[1]],
            },
            seed: cfg.u64("train.seed"),
            checkpoint_every: cfg.usize("train.checkpoint_every"),
            e2e_ae_weight: cfg.f64("train.e2e_ae_weight"),
            enc_channels: [ch[0] as usize, ch[1] as usize, ch[2] as usize, ch[3] as usize],
            head_width: cfg.usize("train.head_width"),
            velocity_transform: twist_transform(&cfg.mount()),
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size must be even and >= 2, got {}", self.batch_size)));
        }
        if !(self.damping > 0.0) {
            return Err(Error::Config("training needs a positive damping".into()));
        }
        Ok(())
    }

    pub fn perception_arch(&self, h: &DatasetHeader) -> Arch {
        Arch {
            enc_channels: self.enc_channels,
            head_width: self.head_width,
            ..Arch::perception(h.height, h.width, h.channels, h.f, self.alpha)
        }
    }

    pub fn e2e_arch(&self, h: &DatasetHeader) -> Arch {
        Arch {
            enc_channels: self.enc_channels,
            head_width: self.head_width,
            ..Arch::end_to_end(h.height, h.width, h.channels, h.n, self.clamp)
        }
    }

    fn context(&self, weights: LossWeights, period: f64) -> LossContext {
        LossContext {
            weights,
            gain: self.gain,
            damping: self.damping,
            period,
            velocity_transform: self.velocity_transform,
            visibility_bound: self.visibility_bound,
            detach_interaction: self.detach_interaction,
        }
    }
}

/// Loss values after one epoch; epoch 0 is the untrained model. For the
/// end-to-end baseline `ci` holds the behaviour-cloning term and `sc`/`r`
/// are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelWeights<f32>,
    pub last: ModelWeights<f32>,
    pub best_epoch: usize,
    pub curve: Vec<EpochLosses>,
}

impl TrainOutcome {
    pub fn best_losses(&self) -> &EpochLosses {
        &self.curve[self.best_epoch]
    }
}

/// Loss log as comma-separated text.
pub fn curve_csv(curve: &[EpochLosses], end_to_end: bool) -> String {
    let mut out = String::new();
    if end_to_end {
        out.push_str("epoch,train_total,train_bc,train_ae,val_total,val_bc,val_ae\n");
        for e in curve {
            let _ = writeln!(
                out,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                e.epoch, e.train.total, e.train.ci, e.train.ae, e.val.total, e.val.ci, e.val.ae
            );
        }
    } else {
        out.push_str("epoch,train_total,train_ci,train_ae,train_sc,train_r,val_total,val_ci,val_ae,val_sc,val_r\n");
        for e in curve {
            let (t, v) = (&e.train, &e.val);
            let _ = writeln!(
                out,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                e.epoch, t.total, t.ci, t.ae, t.sc, t.r, v.total, v.ci, v.ae, v.sc, v.r
            );
        }
    }
    out
}

fn sample_data(ds: &Dataset, demo: usize, k: usize, reference: usize) -> SampleData {
    let r = &ds.demos[demo].records[k];
    SampleData {
        qdot: r.qdot.clone(),
        jr: r.jr.clone(),
        reference,
        depths: ds.demos[demo].meta.target_depths.clone(),
    }
}

/// Seed of the augmentation draw for one image of one batch.
fn augment_seed(seed: u64, epoch: usize, batch: usize, image: usize) -> u64 {
    rng::derive(rng::derive(seed, rng::domain::AUGMENT, epoch as u64), batch as u64, image as u64)
}

fn network_input(image: &ImageTensor, cfg: &AugmentConfig, seed: Option<u64>) -> Vec<f32> {
    match seed {
        Some(s) => augment(image, cfg, s).data,
        None => image.data.clone(),
    }
}

/// Assembles the training batch of a set of pairs. `aug` is `(epoch, batch)`
/// when the encoder inputs should be augmented.
pub fn assemble_batch(ds: &Dataset, pairs: &[PairRef], tc: &TrainConfig, aug: Option<(usize, usize)>) -> LossBatch<f32> {
    let mut refs: BTreeMap<usize, usize> = BTreeMap::new();
    let mut order = Vec::new();
    for p in pairs {
        refs.entry(p.demo).or_insert_with(|| {
            order.push(p.demo);
            order.len() - 1
        });
    }
    let frames: Vec<(usize, usize)> = pairs.iter().flat_map(|p| [(p.demo, p.k), (p.demo, p.k + 1)]).collect();
    let seed_of = |i: usize| aug.map(|(e, b)| augment_seed(tc.seed, e, b, i));
    let clean: Vec<ImageTensor> = frames.iter().map(|&(d, k)| ds.demos[d].records[k].image.to_tensor()).collect();
    let inputs = clean.par_iter().enumerate().map(|(i, t)| network_input(t, &tc.augment, seed_of(i))).collect();
    let references = order
        .par_iter()
        .enumerate()
        .map(|(j, &d)| network_input(&ds.demos[d].meta.reference.to_tensor(), &tc.augment, seed_of(frames.len() + j)))
        .collect();
    LossBatch {
        inputs,
        targets: clean.into_iter().map(|t| t.data).collect(),
        samples: frames.iter().map(|&(d, k)| sample_data(ds, d, k, refs[&d])).collect(),
        references,
        pairs: (0..pairs.len()).map(|p| (2 * p, 2 * p + 1)).collect(),
    }
}

/// Composite loss over whole demos on clean images: every record is one
/// sample, every consecutive pair one consistency term.
pub fn evaluate_demos(w: &ModelWeights<f32>, ds: &Dataset, demos: &[usize], ctx: &LossContext) -> Result<LossBreakdown> {
    let (mut ci, mut sc, mut r, mut ae) = (0.0, 0.0, 0.0, 0.0);
    let (mut samples, mut pairs) = (0usize, 0usize);
    let f = ds.header.f as f64;
    for &d in demos {
        let demo = &ds.demos[d];
        if demo.records.is_empty() {
            continue;
        }
        let reference = w.forward(&demo.meta.reference.to_tensor().data, None, true, false)?;
        let m_ref = reference.head.expect("head recorded").output.iter().map(|v| *v as f64).collect::<Vec<_>>();
        let per_record = demo
            .records
            .par_iter()
            .map(|rec| {
                let x = rec.image.to_tensor().data;
                let g = w.forward(&x, None, true, true)?;
                let m: Vec<f64> = g.head.as_ref().expect("head recorded").output.iter().map(|v| *v as f64).collect();
                let out = g.decoder.as_ref().expect("decoder recorded").raw_output();
                let err: f64 = out.iter().zip(&x).map(|(o, t)| (*o as f64 - *t as f64).abs()).sum::<f64>() / x.len() as f64;
                Ok((m, err))
            })
            .collect::<Result<Vec<_>>>()?;
        let data: Vec<SampleData> = (0..demo.records.len()).map(|k| sample_data(ds, d, k, 0)).collect();
        let m: Vec<Vec<f64>> = per_record.iter().map(|(m, _)| m.clone()).collect();
        let demo_pairs: Vec<(usize, usize)> = (1..m.len()).map(|k| (k - 1, k)).collect();
        let fl = feature_losses(&m, std::slice::from_ref(&m_ref), &data, &demo_pairs, ctx)?;
        let n = m.len();
        ci += fl.ci * n as f64;
        r += fl.r * n as f64 * f;
        sc += fl.sc * demo_pairs.len() as f64;
        ae += per_record.iter().map(|(_, e)| e).sum::<f64>();
        samples += n;
        pairs += demo_pairs.len();
    }
    let ns = samples.max(1) as f64;
    Ok(LossBreakdown::weighted(
        ci / ns,
        ae / ns,
        sc / pairs.max(1) as f64,
        r / (ns * f),
        &ctx.weights,
    ))
}

fn partitions(ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = ds.partition(Split::Train);
    let val = ds.partition(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "dataset needs train and validation demos, has {} and {}",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

fn write_checkpoint(dir: Option<&Path>, name: &str, w: &ModelWeights<f32>) -> Result<()> {
    match dir {
        Some(d) => save_weights(w, &d.join(name)),
        None => Ok(()),
    }
}

fn write_curve(dir: Option<&Path>, curve: &[EpochLosses], end_to_end: bool) -> Result<()> {
    if let Some(d) = dir {
        let path = d.join("losses.csv");
        std::fs::write(&path, curve_csv(curve, end_to_end)).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Shared epoch loop. `step` runs one batch (updating the weights) and
/// returns its loss; `eval` scores a partition with the current weights.
fn run_epochs(
    ds: &Dataset,
    tc: &TrainConfig,
    mut w: ModelWeights<f32>,
    out: Option<&Path>,
    end_to_end: bool,
    progress: &mut dyn FnMut(&EpochLosses),
    eval: &dyn Fn(&ModelWeights<f32>, &[usize]) -> Result<LossBreakdown>,
    step: &dyn Fn(&ModelWeights<f32>, &[PairRef], usize, usize) -> Result<(LossBreakdown, ModelWeights<f32>)>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let (train_demos, val_demos) = partitions(ds)?;
    if let Some(d) = out {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut opt = Adam::new(&w, AdamConfig::with_lr(tc.lr));
    let first = EpochLosses {
        epoch: 0,
        train: eval(&w, &train_demos)?,
        val: eval(&w, &val_demos)?,
    };
    progress(&first);
    let mut curve = vec![first];
    let mut best = w.clone();
    let mut best_epoch = 0;
    write_checkpoint(out, "best.nfvw", &best)?;
    write_curve(out, &curve, end_to_end)?;
    for epoch in 1..=tc.epochs {
        let batches = pair_batches(ds, &train_demos, tc.batch_size, tc.seed, epoch as u64)?;
        let mut sum = LossBreakdown::default();
        let mut count = 0.0;
        for (b, pairs) in batches.iter().enumerate() {
            let (loss, grads) = step(&w, pairs, epoch, b)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            opt.step(&mut w, &grads);
            let n = 2.0 * pairs.len() as f64;
            sum.ci += n * loss.ci;
            sum.ae += n * loss.ae;
            sum.sc += n * loss.sc;
            sum.r += n * loss.r;
            sum.total += n * loss.total;
            count += n;
        }
        let c = count.max(1.0);
        let train = LossBreakdown {
            ci: sum.ci / c,
            ae: sum.ae / c,
            sc: sum.sc / c,
            r: sum.r / c,
            total: sum.total / c,
        };
        let entry = EpochLosses {
            epoch,
            train,
            val: eval(&w, &val_demos)?,
        };
        progress(&entry);
        if entry.val.total < curve[best_epoch].val.total {
            best = w.clone();
            best_epoch = epoch;
            write_checkpoint(out, "best.nfvw", &best)?;
        }
        curve.push(entry);
        if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 {
            write_checkpoint(out, &format!("epoch_{epoch:04}.nfvw"), &w)?;
        }
        write_curve(out, &curve, end_to_end)?;
    }
    Ok(TrainOutcome {
        best,
        last: w,
        best_epoch,
        curve,
    })
}

/// Trains the perception model on the composite loss. With `out` set, the
/// best weights, periodic checkpoints and `losses.csv` are written there.
pub fn train(ds: &Dataset, tc: &TrainConfig, weights: &LossWeights, out: Option<&Path>, progress: &mut dyn FnMut(&EpochLosses)) -> Result<TrainOutcome> {
    let arch = tc.perception_arch(&ds.header);
    let w = ModelWeights::<f32>::init(&arch, rng::derive(tc.seed, rng::domain::INIT, 0));
    let ctx = tc.context(*weights, ds.header.period);
    let eval = |w: &ModelWeights<f32>, demos: &[usize]| evaluate_demos(w, ds, demos, &ctx);
    let step = |w: &ModelWeights<f32>, pairs: &[PairRef], epoch: usize, b: usize| {
        let batch = assemble_batch(ds, pairs, tc, Some((epoch, b)));
        let (loss, grads) = batch_loss(w, &batch, &ctx, true)?;
        Ok((loss, grads.expect("gradient requested")))
    };
    run_epochs(ds, tc, w, out, false, progress, &eval, &step)
}

fn cloning_batch(ds: &Dataset, frames: &[(usize, usize)], tc: &TrainConfig, aug: Option<(usize, usize)>) -> CloningBatch<f32> {
    let clean: Vec<ImageTensor> = frames.iter().map(|&(d, k)| ds.demos[d].records[k].image.to_tensor()).collect();
    let inputs = clean
        .par_iter()
        .enumerate()
        .map(|(i, t)| network_input(t, &tc.augment, aug.map(|(e, b)| augment_seed(tc.seed, e, b, i))))
        .collect();
    CloningBatch {
        inputs,
        targets: clean.into_iter().map(|t| t.data).collect(),
        q: frames.iter().map(|&(d, k)| ds.demos[d].records[k].q.iter().map(|v| *v as f32).collect()).collect(),
        qdot: frames.iter().map(|&(d, k)| ds.demos[d].records[k].qdot.clone()).collect(),
    }
}

fn cloning_breakdown((total, bc, ae): (f64, f64, f64)) -> LossBreakdown {
    LossBreakdown { ci: bc, ae, sc: 0.0, r: 0.0, total }
}

/// Behaviour cloning of the recorded commands from image and joint
/// positions, with the same optimizer, batching and augmentation.
pub fn train_e2e(ds: &Dataset, tc: &TrainConfig, out: Option<&Path>, progress: &mut dyn FnMut(&EpochLosses)) -> Result<TrainOutcome> {
    let arch = tc.e2e_arch(&ds.header);
    let w = ModelWeights::<f32>::init(&arch, rng::derive(tc.seed, rng::domain::INIT, 1));
    let ae_weight = tc.e2e_ae_weight;
    let eval = |w: &ModelWeights<f32>, demos: &[usize]| -> Result<LossBreakdown> {
        let frames: Vec<(usize, usize)> = demos.iter().flat_map(|&d| (0..ds.demos[d].records.len()).map(move |k| (d, k))).collect();
        let (mut bc, mut ae) = (0.0, 0.0);
        for chunk in frames.chunks(256) {
            let (l, _) = cloning_loss(w, &cloning_batch(ds, chunk, tc, None), ae_weight, false)?;
            bc += l.1 * chunk.len() as f64;
            ae += l.2 * chunk.len() as f64;
        }
        let n = frames.len().max(1) as f64;
        Ok(cloning_breakdown((bc / n + ae_weight * ae / n, bc / n, ae / n)))
    };
    let step = |w: &ModelWeights<f32>, pairs: &[PairRef], epoch: usize, b: usize| {
        let frames: Vec<(usize, usize)> = pairs.iter().flat_map(|p| [(p.demo, p.k), (p.demo, p.k + 1)]).collect();
        let (l, grads) = cloning_loss(w, &cloning_batch(ds, &frames, tc, Some((epoch, b))), ae_weight, true)?;
        Ok((cloning_breakdown(l), grads.expect("gradient requested")))
    };
    run_epochs(ds, tc, w, out, true, progress, &eval, &step)
}
