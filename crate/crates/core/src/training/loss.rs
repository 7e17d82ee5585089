//! The four loss components and their gradients.
//!
//! Feature-level terms (imitation, state consistency, regularizer) are
//! evaluated in `f64` on the network's predictions and return gradients with
//! respect to those predictions; image-level terms run through the network's
//! own backward pass.

use nalgebra::{DMatrix, DVector, Matrix6};
use rayon::prelude::*;

use crate::control::{interaction_matrix, point_rows, DepthVector, FeatureVector};
use crate::error::{Error, Result};
use crate::nn::{ModelWeights, Real};

/// Weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ci: f64,
    pub ae: f64,
    pub sc: f64,
    pub r: f64,
}

impl LossWeights {
    pub const ONES: LossWeights = LossWeights {
        ci: 1.0,
        ae: 1.0,
        sc: 1.0,
        r: 1.0,
    };

    pub fn new(ci: f64, ae: f64, sc: f64, r: f64) -> Result<Self> {
        let w = Self { ci, ae, sc, r };
        if [ci, ae, sc, r].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ci},{ae},{sc},{r}")));
        }
        Ok(w)
    }

    /// Parses `a,b,c,d` (imitation, auto-encoding, state consistency, regularizer).
    pub fn parse(text: &str) -> Result<Self> {
        let v: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad loss weights '{text}'")))?;
        match v.as_slice() {
            [a, b, c, d] => Self::new(*a, *b, *c, *d),
            _ => Err(Error::Config(format!("expected 4 loss weights, got '{text}'"))),
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::ONES
    }
}

/// Unweighted components; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ci: f64,
    pub ae: f64,
    pub sc: f64,
    pub r: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(ci: f64, ae: f64, sc: f64, r: f64, w: &LossWeights) -> Self {
        Self {
            ci,
            ae,
            sc,
            r,
            total: w.ci * ci + w.ae * ae + w.sc * sc + w.r * r,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ci, self.ae, self.sc, self.r, self.total].iter().all(|v| v.is_finite())
    }
}

/// Constants shared by every sample of a loss evaluation.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub weights: LossWeights,
    pub gain: f64,
    pub damping: f64,
    pub period: f64,
    pub velocity_transform: Matrix6<f64>,
    pub visibility_bound: f64,
    /// Treat the interaction matrix as constant in the imitation gradient.
    pub detach_interaction: bool,
}

/// Supervision attached to one frame.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub qdot: DVector<f64>,
    pub jr: DMatrix<f64>,
    /// Index into the reference list of the batch.
    pub reference: usize,
    pub depths: DepthVector,
}

/// L1 subgradient with 0 at 0.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn twist_jacobian(v: &Matrix6<f64>, jr: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(6, 6, v.iter().copied()) * jr
}

/// Adds `∂⟨G, L(m)⟩/∂m` to `grad_m`, `G` being the `f×6` upstream gradient.
fn chain_interaction(m: &[f64], depths: &DepthVector, g: &DMatrix<f64>, grad_m: &mut [f64]) {
    for p in 0..m.len() / 2 {
        let (x, y, z) = (m[2 * p], m[2 * p + 1], depths.as_slice()[p]);
        // ∂row_x/∂x, ∂row_x/∂y, ∂row_y/∂x, ∂row_y/∂y
        let dxx = [0.0, 0.0, 1.0 / z, y, -2.0 * x, 0.0];
        let dxy = [0.0, 0.0, 0.0, x, 0.0, 1.0];
        let dyx = [0.0, 0.0, 0.0, 0.0, -y, -1.0];
        let dyy = [0.0, 0.0, 1.0 / z, 2.0 * y, -x, 0.0];
        let dot = |row: usize, d: &[f64; 6]| -> f64 { (0..6).map(|c| g[(row, c)] * d[c]).sum() };
        grad_m[2 * p] += dot(2 * p, &dxx) + dot(2 * p + 1, &dyx);
        grad_m[2 * p + 1] += dot(2 * p, &dxy) + dot(2 * p + 1, &dyy);
    }
}

fn check_features(m: &[f64], depths: &DepthVector) -> Result<()> {
    if m.len() != 2 * depths.len() {
        return Err(Error::dims(format!("{} feature values for {} depths", m.len(), depths.len())));
    }
    Ok(())
}

/// `‖q̇ + λ·Ĵ⁺(m − m*)‖₁` for one sample, with gradients with respect to
/// `m` and `m*`.
pub fn imitation_sample(m: &[f64], m_star: &[f64], s: &SampleData, ctx: &LossContext) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_features(m, &s.depths)?;
    let e = DVector::from_iterator(m.len(), m.iter().zip(m_star).map(|(a, b)| a - b));
    let vj = twist_jacobian(&ctx.velocity_transform, &s.jr);
    let l = interaction_matrix(&FeatureVector::from_slice(m)?, &s.depths)?;
    let j = &l * &vj;
    let n = j.ncols();
    let mut mm = j.transpose() * &j;
    for i in 0..n {
        mm[(i, i)] += ctx.damping * ctx.damping;
    }
    let chol = mm
        .clone()
        .cholesky()
        .ok_or(Error::SingularMatrix { rcond: 0.0 })?;
    let u = chol.solve(&(j.transpose() * &e));
    let r = &s.qdot + ctx.gain * &u;
    let value: f64 = r.iter().map(|v| v.abs()).sum();
    let v = r.map(sign) * ctx.gain;
    let w = chol.solve(&v);
    let jw = &j * &w;
    let mut grad_m: Vec<f64> = jw.iter().copied().collect();
    let grad_star: Vec<f64> = jw.iter().map(|g| -g).collect();
    if !ctx.detach_interaction {
        let ju = &j * &u;
        let grad_j = (&e - &ju) * w.transpose() - &jw * u.transpose();
        let grad_l = grad_j * vj.transpose();
        chain_interaction(m, &s.depths, &grad_l, &mut grad_m);
    }
    Ok((value, grad_m, grad_star))
}

/// `‖m_{k+1} − m_k − T·Ĵ_k·q̇_k‖₁` for one pair, with gradients with respect
/// to `m_k` and `m_{k+1}`.
pub fn consistency_pair(m_k: &[f64], m_k1: &[f64], s: &SampleData, ctx: &LossContext) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_features(m_k, &s.depths)?;
    let twist = twist_jacobian(&ctx.velocity_transform, &s.jr) * &s.qdot;
    let mut grad_k = vec![0.0; m_k.len()];
    let mut grad_k1 = vec![0.0; m_k.len()];
    let mut value = 0.0;
    let mut g_l = DMatrix::zeros(m_k.len(), 6);
    for p in 0..m_k.len() / 2 {
        let rows = point_rows(m_k[2 * p], m_k[2 * p + 1], s.depths.as_slice()[p]);
        for a in 0..2 {
            let i = 2 * p + a;
            let pred: f64 = (0..6).map(|c| rows[a][c] * twist[c]).sum();
            let r = m_k1[i] - m_k[i] - ctx.period * pred;
            value += r.abs();
            let g = sign(r);
            grad_k1[i] += g;
            grad_k[i] -= g;
            for c in 0..6 {
                g_l[(i, c)] = -ctx.period * g * twist[c];
            }
        }
    }
    chain_interaction(m_k, &s.depths, &g_l, &mut grad_k);
    Ok((value, grad_k, grad_k1))
}

/// Summed hinge `Σ max(0, |m| − b)` and its gradient.
pub fn hinge(m: &[f64], bound: f64) -> (f64, Vec<f64>) {
    let value = m.iter().map(|v| (v.abs() - bound).max(0.0)).sum();
    let grad = m.iter().map(|v| if v.abs() > bound { sign(*v) } else { 0.0 }).collect();
    (value, grad)
}

/// Feature-level loss values and gradients for a batch.
#[derive(Debug, Clone)]
pub struct FeatureLosses {
    pub ci: f64,
    pub sc: f64,
    pub r: f64,
    /// Gradient of `w_ci·ci + w_sc·sc + w_r·r` per sample prediction.
    pub grad_samples: Vec<Vec<f64>>,
    pub grad_references: Vec<Vec<f64>>,
}

/// Imitation (mean over samples), state consistency (mean over pairs) and
/// regularizer (mean over samples × features, on each sample's reference).
pub fn feature_losses(
    m: &[Vec<f64>],
    m_ref: &[Vec<f64>],
    samples: &[SampleData],
    pairs: &[(usize, usize)],
    ctx: &LossContext,
) -> Result<FeatureLosses> {
    let f = m.first().map_or(0, |v| v.len());
    let n = samples.len() as f64;
    let mut grad_samples = vec![vec![0.0; f]; m.len()];
    let mut grad_references = vec![vec![0.0; f]; m_ref.len()];
    let (mut ci, mut sc, mut r) = (0.0, 0.0, 0.0);
    let w = ctx.weights;
    for (i, s) in samples.iter().enumerate() {
        let (v, gm, gs) = imitation_sample(&m[i], &m_ref[s.reference], s, ctx)?;
        ci += v / n;
        for c in 0..f {
            grad_samples[i][c] += w.ci * gm[c] / n;
            grad_references[s.reference][c] += w.ci * gs[c] / n;
        }
        let (h, gh) = hinge(&m_ref[s.reference], ctx.visibility_bound);
        let denom = n * f as f64;
        r += h / denom;
        for c in 0..f {
            grad_references[s.reference][c] += w.r * gh[c] / denom;
        }
    }
    if !pairs.is_empty() {
        let np = pairs.len() as f64;
        for &(a, b) in pairs {
            let (v, ga, gb) = consistency_pair(&m[a], &m[b], &samples[a], ctx)?;
            sc += v / np;
            for c in 0..f {
                grad_samples[a][c] += w.sc * ga[c] / np;
                grad_samples[b][c] += w.sc * gb[c] / np;
            }
        }
    }
    Ok(FeatureLosses {
        ci,
        sc,
        r,
        grad_samples,
        grad_references,
    })
}

/// One batch of network inputs and supervision.
#[derive(Debug, Clone)]
pub struct LossBatch<T> {
    /// Encoder inputs of the frames (augmented during training).
    pub inputs: Vec<Vec<T>>,
    /// Clean frames, the reconstruction targets.
    pub targets: Vec<Vec<T>>,
    pub samples: Vec<SampleData>,
    /// Encoder inputs of the reference images.
    pub references: Vec<Vec<T>>,
    /// Consecutive-frame pairs as indices into `samples`.
    pub pairs: Vec<(usize, usize)>,
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.f64()).collect()
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|x| T::of(*x)).collect()
}

/// Composite loss of a batch and, if asked, its gradient. Per-image
/// gradients are computed in parallel and summed in index order.
pub fn batch_loss<T: Real>(w: &ModelWeights<T>, batch: &LossBatch<T>, ctx: &LossContext, want_grad: bool) -> Result<(LossBreakdown, Option<ModelWeights<T>>)> {
    let with_ae = ctx.weights.ae > 0.0 || !want_grad;
    let frame_graphs = batch
        .inputs
        .par_iter()
        .map(|x| w.forward(x, None, true, with_ae))
        .collect::<Result<Vec<_>>>()?;
    let ref_graphs = batch
        .references
        .par_iter()
        .map(|x| w.forward(x, None, true, false))
        .collect::<Result<Vec<_>>>()?;
    let head = |g: &crate::nn::Graph<T>| to_f64(&g.head.as_ref().expect("head recorded").output);
    let m: Vec<Vec<f64>> = frame_graphs.iter().map(head).collect();
    let m_ref: Vec<Vec<f64>> = ref_graphs.iter().map(head).collect();
    let fl = feature_losses(&m, &m_ref, &batch.samples, &batch.pairs, ctx)?;

    let pixels = batch.targets.first().map_or(1, |t| t.len()) as f64;
    let denom = batch.inputs.len() as f64 * pixels;
    let mut ae = 0.0;
    let mut d_recon: Vec<Option<Vec<T>>> = vec![None; batch.inputs.len()];
    if with_ae {
        for (i, g) in frame_graphs.iter().enumerate() {
            let out = g.decoder.as_ref().expect("decoder recorded").raw_output();
            let mut grad = Vec::with_capacity(out.len());
            for (o, t) in out.iter().zip(&batch.targets[i]) {
                let r = o.f64() - t.f64();
                ae += r.abs() / denom;
                grad.push(T::of(ctx.weights.ae * sign(r) / denom));
            }
            if ctx.weights.ae > 0.0 {
                d_recon[i] = Some(grad);
            }
        }
    }
    let loss = LossBreakdown::weighted(fl.ci, ae, fl.sc, fl.r, &ctx.weights);
    if !want_grad {
        return Ok((loss, None));
    }
    let jobs: Vec<(&crate::nn::Graph<T>, Vec<T>, Option<&Vec<T>>)> = frame_graphs
        .iter()
        .zip(&fl.grad_samples)
        .zip(&d_recon)
        .map(|((g, gm), dr)| (g, to_t(gm), dr.as_ref()))
        .chain(ref_graphs.iter().zip(&fl.grad_references).map(|(g, gm)| (g, to_t(gm), None)))
        .collect();
    let parts = jobs
        .par_iter()
        .map(|(g, d_out, d_rec)| {
            let mut grads = w.zeros_like();
            w.backward(g, Some(d_out), d_rec.map(|v| v.as_slice()), &mut grads)?;
            Ok(grads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = w.zeros_like();
    for p in &parts {
        total.add_assign(p);
    }
    Ok((loss, Some(total)))
}

/// Behaviour-cloning batch for the end-to-end baseline: mean over samples
/// of `‖q̇ − net(i, q)‖₁` plus `ae_weight` times the auto-encoding term.
#[derive(Debug, Clone)]
pub struct CloningBatch<T> {
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<Vec<T>>,
    pub q: Vec<Vec<T>>,
    pub qdot: Vec<DVector<f64>>,
}

/// Returns `(total, cloning, auto-encoding)` and the gradient if asked.
pub fn cloning_loss<T: Real>(w: &ModelWeights<T>, batch: &CloningBatch<T>, ae_weight: f64, want_grad: bool) -> Result<((f64, f64, f64), Option<ModelWeights<T>>)> {
    let with_ae = ae_weight > 0.0 || !want_grad;
    let n = batch.inputs.len() as f64;
    let results = batch
        .inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let g = w.forward(x, Some(&batch.q[i]), true, with_ae)?;
            let out = &g.head.as_ref().expect("head recorded").output;
            let mut bc = 0.0;
            let d_out: Vec<T> = out
                .iter()
                .zip(batch.qdot[i].iter())
                .map(|(o, t)| {
                    let r = o.f64() - t;
                    bc += r.abs() / n;
                    T::of(sign(r) / n)
                })
                .collect();
            let mut ae = 0.0;
            let mut d_rec = None;
            if with_ae {
                let raw = g.decoder.as_ref().expect("decoder recorded").raw_output();
                let denom = n * raw.len() as f64;
                let grad: Vec<T> = raw
                    .iter()
                    .zip(&batch.targets[i])
                    .map(|(o, t)| {
                        let r = o.f64() - t.f64();
                        ae += r.abs() / denom;
                        T::of(ae_weight * sign(r) / denom)
                    })
                    .collect();
                if ae_weight > 0.0 {
                    d_rec = Some(grad);
                }
            }
            let grads = if want_grad {
                let mut grads = w.zeros_like();
                w.backward(&g, Some(&d_out), d_rec.as_deref(), &mut grads)?;
                Some(grads)
            } else {
                None
            };
            Ok((bc, ae, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut bc, mut ae) = (0.0, 0.0);
    let mut total = want_grad.then(|| w.zeros_like());
    for (b, a, g) in &results {
        bc += b;
        ae += a;
        if let (Some(t), Some(g)) = (total.as_mut(), g) {
            t.add_assign(g);
        }
    }
    Ok(((bc + ae_weight * ae, bc, ae), total))
}
