//! The training step and the fit loop.
//!
//! One step evaluates both encoders on both perturbed profiles of a batch of
//! pairs, reuses those embeddings across all five loss terms (six decoder
//! passes), assembles exact reverse-mode gradients for the weighted total,
//! and applies one Adam update per network. Everything is deterministic
//! given (params, batch, step seed).

use std::time::Instant;

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, Model, ModelConfig};
use crate::nn::{
    adam_step, apply_running_stats, backward, forward, Gradients, Mode, OptimizerState, Trace,
};
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

/// A batch of paired samples as three matrices: the shared control profile,
/// and the two perturbed profiles.
#[derive(Debug, Clone)]
pub struct TrainBatch<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub xa: Tensor<T>,
    pub xb: Tensor<T>,
}

impl<T: Scalar> TrainBatch<T> {
    /// Gathers `indices` out of `pairs` into matrices, casting to T.
    pub fn gather(pairs: &[PairedSample], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Usage("cannot build an empty training batch".into()));
        }
        let first = pairs.get(indices[0]).ok_or_else(|| {
            Error::Usage(format!(
                "batch index {} is out of range ({} pairs)",
                indices[0],
                pairs.len()
            ))
        })?;
        let g = first.x_control.len();
        let n = indices.len();
        let mut x = Vec::with_capacity(n * g);
        let mut xa = Vec::with_capacity(n * g);
        let mut xb = Vec::with_capacity(n * g);
        for &i in indices {
            let p = pairs.get(i).ok_or_else(|| {
                Error::Usage(format!("batch index {i} is out of range ({} pairs)", pairs.len()))
            })?;
            if p.x_control.len() != g || p.x_a.len() != g || p.x_b.len() != g {
                return Err(Error::Shape(format!(
                    "pair {i} has a different gene dimension than the rest of the batch"
                )));
            }
            x.extend(p.x_control.iter().map(|&v| T::from_f64(f64::from(v))));
            xa.extend(p.x_a.iter().map(|&v| T::from_f64(f64::from(v))));
            xb.extend(p.x_b.iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Ok(Self {
            x: Tensor::new(vec![n, g], x)?,
            xa: Tensor::new(vec![n, g], xa)?,
            xb: Tensor::new(vec![n, g], xb)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dropout seeds for the ten train-mode forward passes of one step, derived
/// from the step seed.
#[derive(Debug, Clone, Copy)]
pub struct StepSeeds {
    pub sa: u64,
    pub sb: u64,
    pub pa: u64,
    pub pb: u64,
    pub ra: u64,
    pub rb: u64,
    pub raa: u64,
    pub rbb: u64,
    pub rab: u64,
    pub rba: u64,
}

impl StepSeeds {
    pub fn derive(step_seed: u64) -> Self {
        let s = |k: u64| derive_seed(step_seed, "fwd", &[k]);
        StepSeeds {
            sa: s(0),
            sb: s(1),
            pa: s(2),
            pb: s(3),
            ra: s(4),
            rb: s(5),
            raa: s(6),
            rbb: s(7),
            rab: s(8),
            rba: s(9),
        }
    }
}

/// Gradients for the three networks.
#[derive(Debug, Clone)]
pub struct ModelGradients<T: Scalar> {
    pub es: Gradients<T>,
    pub ep: Gradients<T>,
    pub dec: Gradients<T>,
}

/// Everything one train-mode evaluation produces: embeddings, decoder
/// outputs, and the traces needed to run backward and to fold batchnorm
/// statistics afterwards.
struct StepForward<T: Scalar> {
    sa: Tensor<T>,
    sb: Tensor<T>,
    pa: Tensor<T>,
    pb: Tensor<T>,
    ra: Tensor<T>,
    rb: Tensor<T>,
    raa: Tensor<T>,
    rbb: Tensor<T>,
    rab: Tensor<T>,
    rba: Tensor<T>,
    traces: StepTraces<T>,
}

/// Train-mode traces of the ten forward passes, in forward order.
pub struct StepTraces<T: Scalar> {
    pub sa: Trace<T>,
    pub sb: Trace<T>,
    pub pa: Trace<T>,
    pub pb: Trace<T>,
    pub ra: Trace<T>,
    pub rb: Trace<T>,
    pub raa: Trace<T>,
    pub rbb: Trace<T>,
    pub rab: Trace<T>,
    pub rba: Trace<T>,
}

fn run_forwards<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch<T>,
    seeds: StepSeeds,
) -> Result<StepForward<T>> {
    let m = Mode::Train;
    let (sa, tr_sa) = forward(&model.es_spec, &model.params.es, &batch.xa, m, seeds.sa)?;
    let (sb, tr_sb) = forward(&model.es_spec, &model.params.es, &batch.xb, m, seeds.sb)?;
    let (pa, tr_pa) = forward(&model.ep_spec, &model.params.ep, &batch.xa, m, seeds.pa)?;
    let (pb, tr_pb) = forward(&model.ep_spec, &model.params.ep, &batch.xb, m, seeds.pb)?;
    let dec = |z: &Tensor<T>, seed: u64| forward(&model.dec_spec, &model.params.dec, z, m, seed);
    let (ra, tr_ra) = dec(&sa, seeds.ra)?;
    let (rb, tr_rb) = dec(&sb, seeds.rb)?;
    let (raa, tr_raa) = dec(&sa.add(&pa)?, seeds.raa)?;
    let (rbb, tr_rbb) = dec(&sb.add(&pb)?, seeds.rbb)?;
    let (rab, tr_rab) = dec(&sb.add(&pa)?, seeds.rab)?;
    let (rba, tr_rba) = dec(&sa.add(&pb)?, seeds.rba)?;
    Ok(StepForward {
        sa,
        sb,
        pa,
        pb,
        ra,
        rb,
        raa,
        rbb,
        rab,
        rba,
        traces: StepTraces {
            sa: tr_sa,
            sb: tr_sb,
            pa: tr_pa,
            pb: tr_pb,
            ra: tr_ra,
            rb: tr_rb,
            raa: tr_raa,
            rbb: tr_rbb,
            rab: tr_rab,
            rba: tr_rba,
        },
    })
}

/// Row-wise softmax data needed by the similarity term and its gradient.
struct SoftmaxRows {
    /// Probabilities, row-major.
    p: Vec<f64>,
    /// Log-probabilities, row-major.
    lp: Vec<f64>,
}

fn softmax_rows<T: Scalar>(s: &Tensor<T>) -> SoftmaxRows {
    let (n, d) = s.dims2().expect("latent matrix");
    let mut p = vec![0.0f64; n * d];
    let mut lp = vec![0.0f64; n * d];
    for i in 0..n {
        let row = s.row(i);
        let m = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0f64;
        for v in row {
            z += (v.as_f64() - m).exp();
        }
        let log_z = z.ln();
        for (k, v) in row.iter().enumerate() {
            let l = v.as_f64() - m - log_z;
            lp[i * d + k] = l;
            p[i * d + k] = l.exp();
        }
    }
    SoftmaxRows { p, lp }
}

/// Losses and latent-space gradients of the non-decoder terms.
struct LatentTerms<T: Scalar> {
    sim: f64,
    orth: f64,
    /// d(w_sim·sim + w_orth·orth)/d{sa, sb, pa, pb}.
    d_sa: Tensor<T>,
    d_sb: Tensor<T>,
    d_pa: Tensor<T>,
    d_pb: Tensor<T>,
}

fn latent_terms<T: Scalar>(
    sa: &Tensor<T>,
    sb: &Tensor<T>,
    pa: &Tensor<T>,
    pb: &Tensor<T>,
    w_sim: f64,
    w_orth: f64,
) -> LatentTerms<T> {
    let (n, d) = sa.dims2().expect("latent matrix");
    let nf = n as f64;
    let mut d_sa = vec![0.0f64; n * d];
    let mut d_sb = vec![0.0f64; n * d];
    let mut d_pa = vec![0.0f64; n * d];
    let mut d_pb = vec![0.0f64; n * d];

    // Similarity: mean over rows of KL(softmax(sa) ‖ softmax(sb)).
    let a = softmax_rows(sa);
    let b = softmax_rows(sb);
    let mut sim = 0.0f64;
    for i in 0..n {
        let mut kl = 0.0f64;
        for k in 0..d {
            let idx = i * d + k;
            kl += a.p[idx] * (a.lp[idx] - b.lp[idx]);
        }
        sim += kl;
        let gs = w_sim / nf;
        for k in 0..d {
            let idx = i * d + k;
            d_sa[idx] += gs * a.p[idx] * ((a.lp[idx] - b.lp[idx]) - kl);
            d_sb[idx] += gs * (b.p[idx] - a.p[idx]);
        }
    }
    sim /= nf;

    // Orthogonality: (1/N) Σᵢ (paᵢ·saᵢ)² + (pbᵢ·sbᵢ)².
    let mut orth = 0.0f64;
    for i in 0..n {
        for (p, s, dp, ds) in [
            (pa, sa, &mut d_pa, &mut d_sa),
            (pb, sb, &mut d_pb, &mut d_sb),
        ] {
            let dot: f64 = p
                .row(i)
                .iter()
                .zip(s.row(i))
                .map(|(&x, &y)| x.as_f64() * y.as_f64())
                .sum();
            orth += dot * dot;
            let go = 2.0 * w_orth / nf * dot;
            for k in 0..d {
                let idx = i * d + k;
                dp[idx] += go * s.row(i)[k].as_f64();
                ds[idx] += go * p.row(i)[k].as_f64();
            }
        }
    }
    orth /= nf;

    let as_tensor = |v: Vec<f64>| {
        Tensor::new(vec![n, d], v.into_iter().map(T::from_f64).collect()).expect("latent shape")
    };
    LatentTerms {
        sim,
        orth,
        d_sa: as_tensor(d_sa),
        d_sb: as_tensor(d_sb),
        d_pa: as_tensor(d_pa),
        d_pb: as_tensor(d_pb),
    }
}

/// Squared-error value of one reconstruction half: Σ over all entries of
/// (r−t)², accumulated in f64 (the caller divides by N).
fn sq_err<T: Scalar>(r: &Tensor<T>, t: &Tensor<T>) -> f64 {
    r.data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum()
}

/// d/dr of (w/N)·Σ(r−t)²: elementwise (2w/N)(r−t).
fn sq_err_grad<T: Scalar>(r: &Tensor<T>, t: &Tensor<T>, w: f64, n: usize) -> Tensor<T> {
    let c = 2.0 * w / n as f64;
    let data = r
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| T::from_f64(c * (a.as_f64() - b.as_f64())))
        .collect();
    Tensor::new(r.shape().to_vec(), data).expect("same shape")
}

/// Train-mode loss values only, sharing the forward plan (and seeds) of
/// [`objective_gradients`]; the finite-difference oracle for the gradients
/// differentiates exactly this function.
pub fn train_mode_losses<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch<T>,
    seeds: StepSeeds,
) -> Result<LossBreakdown> {
    let f = run_forwards(model, batch, seeds)?;
    let w = &model.config.loss_weights;
    let lt = latent_terms(&f.sa, &f.sb, &f.pa, &f.pb, w.w_sim, w.w_orth);
    let n = batch.len() as f64;
    let reco1 = (sq_err(&f.ra, &batch.x) + sq_err(&f.rb, &batch.x)) / n;
    let reco2 = (sq_err(&f.raa, &batch.xa) + sq_err(&f.rbb, &batch.xb)) / n;
    let cross = (sq_err(&f.rab, &batch.xa) + sq_err(&f.rba, &batch.xb)) / n;
    Ok(LossBreakdown::from_terms(w, lt.sim, lt.orth, reco1, reco2, cross))
}

/// One train-mode evaluation of the full objective with exact reverse-mode
/// gradients for all three networks. Returns the loss breakdown, the
/// gradients, and the forward traces (for folding batchnorm statistics).
pub fn objective_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch<T>,
    seeds: StepSeeds,
) -> Result<(LossBreakdown, ModelGradients<T>, StepTraces<T>)> {
    let f = run_forwards(model, batch, seeds)?;
    let w = &model.config.loss_weights;
    let n = batch.len();

    let lt = latent_terms(&f.sa, &f.sb, &f.pa, &f.pb, w.w_sim, w.w_orth);
    let reco1 = (sq_err(&f.ra, &batch.x) + sq_err(&f.rb, &batch.x)) / n as f64;
    let reco2 = (sq_err(&f.raa, &batch.xa) + sq_err(&f.rbb, &batch.xb)) / n as f64;
    let cross = (sq_err(&f.rab, &batch.xa) + sq_err(&f.rba, &batch.xb)) / n as f64;
    let breakdown = LossBreakdown::from_terms(w, lt.sim, lt.orth, reco1, reco2, cross);
    breakdown.check_finite()?;

    // Upstream gradients at the six decoder outputs.
    let g_ra = sq_err_grad(&f.ra, &batch.x, w.w_reco1, n);
    let g_rb = sq_err_grad(&f.rb, &batch.x, w.w_reco1, n);
    let g_raa = sq_err_grad(&f.raa, &batch.xa, w.w_reco2, n);
    let g_rbb = sq_err_grad(&f.rbb, &batch.xb, w.w_reco2, n);
    let g_rab = sq_err_grad(&f.rab, &batch.xa, w.w_cross, n);
    let g_rba = sq_err_grad(&f.rba, &batch.xb, w.w_cross, n);

    // Decoder backward for each pass; parameter gradients accumulate, input
    // gradients flow to the latents that fed the pass.
    let dec_b = |trace: &Trace<T>, up: &Tensor<T>| {
        backward(&model.dec_spec, &model.params.dec, trace, up)
    };
    let (mut dec_g, dz_ra) = dec_b(&f.traces.ra, &g_ra)?;
    let (g2, dz_rb) = dec_b(&f.traces.rb, &g_rb)?;
    let (g3, dz_raa) = dec_b(&f.traces.raa, &g_raa)?;
    let (g4, dz_rbb) = dec_b(&f.traces.rbb, &g_rbb)?;
    let (g5, dz_rab) = dec_b(&f.traces.rab, &g_rab)?;
    let (g6, dz_rba) = dec_b(&f.traces.rba, &g_rba)?;
    for g in [g2, g3, g4, g5, g6] {
        dec_g.add_assign(&g);
    }

    // Latent gradients: decoder paths plus the similarity/orthogonality
    // contributions. sa feeds ra, raa, rba; sb feeds rb, rbb, rab;
    // pa feeds raa, rab; pb feeds rbb, rba.
    let d_sa = lt.d_sa.add(&dz_ra)?.add(&dz_raa)?.add(&dz_rba)?;
    let d_sb = lt.d_sb.add(&dz_rb)?.add(&dz_rbb)?.add(&dz_rab)?;
    let d_pa = lt.d_pa.add(&dz_raa)?.add(&dz_rab)?;
    let d_pb = lt.d_pb.add(&dz_rbb)?.add(&dz_rba)?;

    let (mut es_g, _) = backward(&model.es_spec, &model.params.es, &f.traces.sa, &d_sa)?;
    let (es_g2, _) = backward(&model.es_spec, &model.params.es, &f.traces.sb, &d_sb)?;
    es_g.add_assign(&es_g2);
    let (mut ep_g, _) = backward(&model.ep_spec, &model.params.ep, &f.traces.pa, &d_pa)?;
    let (ep_g2, _) = backward(&model.ep_spec, &model.params.ep, &f.traces.pb, &d_pb)?;
    ep_g.add_assign(&ep_g2);

    Ok((
        breakdown,
        ModelGradients {
            es: es_g,
            ep: ep_g,
            dec: dec_g,
        },
        f.traces,
    ))
}

/// Optimizer state for the three networks.
#[derive(Debug, Clone)]
pub struct ModelOptimizer<T: Scalar> {
    pub es: OptimizerState<T>,
    pub ep: OptimizerState<T>,
    pub dec: OptimizerState<T>,
}

impl<T: Scalar> ModelOptimizer<T> {
    pub fn new(model: &Model<T>, lr: f64) -> Self {
        ModelOptimizer {
            es: OptimizerState::new(&model.params.es, lr),
            ep: OptimizerState::new(&model.params.ep, lr),
            dec: OptimizerState::new(&model.params.dec, lr),
        }
    }
}

/// One full training step: objective, gradients, one Adam update per
/// network, then batchnorm statistics folded in forward order.
pub fn training_step<T: Scalar>(
    mut model: Model<T>,
    opt: ModelOptimizer<T>,
    batch: &TrainBatch<T>,
    step_seed: u64,
) -> Result<(Model<T>, ModelOptimizer<T>, LossBreakdown)> {
    if batch.len() < 2 {
        return Err(Error::Shape(format!(
            "training batches need at least 2 pairs (batch normalization), got {}",
            batch.len()
        )));
    }
    let seeds = StepSeeds::derive(step_seed);
    let (breakdown, grads, traces) = objective_gradients(&model, batch, seeds)?;
    let (es, opt_es) = adam_step(&model.params.es, &grads.es, &opt.es)?;
    let (ep, opt_ep) = adam_step(&model.params.ep, &grads.ep, &opt.ep)?;
    let (dec, opt_dec) = adam_step(&model.params.dec, &grads.dec, &opt.dec)?;
    model.params.es = es;
    model.params.ep = ep;
    model.params.dec = dec;
    // Fold running statistics in the order the forwards ran.
    apply_running_stats(&mut model.params.es, &traces.sa);
    apply_running_stats(&mut model.params.es, &traces.sb);
    apply_running_stats(&mut model.params.ep, &traces.pa);
    apply_running_stats(&mut model.params.ep, &traces.pb);
    for tr in [
        &traces.ra,
        &traces.rb,
        &traces.raa,
        &traces.rbb,
        &traces.rab,
        &traces.rba,
    ] {
        apply_running_stats(&mut model.params.dec, tr);
    }
    Ok((
        model,
        ModelOptimizer {
            es: opt_es,
            ep: opt_ep,
            dec: opt_dec,
        },
        breakdown,
    ))
}

/// Loss values in eval mode (running statistics, no dropout), used for
/// validation. Deterministic given (params, batch).
pub fn eval_losses<T: Scalar>(model: &Model<T>, batch: &TrainBatch<T>) -> Result<LossBreakdown> {
    let e = Mode::Eval;
    let (sa, _) = forward(&model.es_spec, &model.params.es, &batch.xa, e, 0)?;
    let (sb, _) = forward(&model.es_spec, &model.params.es, &batch.xb, e, 0)?;
    let (pa, _) = forward(&model.ep_spec, &model.params.ep, &batch.xa, e, 0)?;
    let (pb, _) = forward(&model.ep_spec, &model.params.ep, &batch.xb, e, 0)?;
    let dec = |z: &Tensor<T>| -> Result<Tensor<T>> {
        Ok(forward(&model.dec_spec, &model.params.dec, z, e, 0)?.0)
    };
    let ra = dec(&sa)?;
    let rb = dec(&sb)?;
    let raa = dec(&sa.add(&pa)?)?;
    let rbb = dec(&sb.add(&pb)?)?;
    let rab = dec(&sb.add(&pa)?)?;
    let rba = dec(&sa.add(&pb)?)?;
    let w = &model.config.loss_weights;
    let lt = latent_terms(&sa, &sb, &pa, &pb, w.w_sim, w.w_orth);
    let n = batch.len() as f64;
    let reco1 = (sq_err(&ra, &batch.x) + sq_err(&rb, &batch.x)) / n;
    let reco2 = (sq_err(&raa, &batch.xa) + sq_err(&rbb, &batch.xb)) / n;
    let cross = (sq_err(&rab, &batch.xa) + sq_err(&rba, &batch.xb)) / n;
    Ok(LossBreakdown::from_terms(w, lt.sim, lt.orth, reco1, reco2, cross))
}

/// Per-epoch record of a fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub seconds: f64,
}

/// Outcome of a fit: the best model by validation total (the last-epoch
/// model when there is no validation set), the final model, and the history.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped early because a step produced a non-finite
    /// loss; holds the offending term's message. `best`/`last` then carry
    /// the state from just before the failing step.
    pub diverged: Option<String>,
}

fn mean_breakdown(parts: &[(usize, LossBreakdown)]) -> LossBreakdown {
    let total_n: usize = parts.iter().map(|(n, _)| n).sum();
    let nf = total_n.max(1) as f64;
    let mut acc = LossBreakdown {
        sim: 0.0,
        orth: 0.0,
        reco1: 0.0,
        reco2: 0.0,
        cross: 0.0,
        total: 0.0,
    };
    for (n, b) in parts {
        let w = *n as f64;
        acc.sim += w * b.sim;
        acc.orth += w * b.orth;
        acc.reco1 += w * b.reco1;
        acc.reco2 += w * b.reco2;
        acc.cross += w * b.cross;
        acc.total += w * b.total;
    }
    acc.sim /= nf;
    acc.orth /= nf;
    acc.reco1 /= nf;
    acc.reco2 /= nf;
    acc.cross /= nf;
    acc.total /= nf;
    acc
}

/// Trains a fresh model on `train_pairs` for `config.epochs` epochs,
/// tracking the validation total per epoch when `val_pairs` is nonempty.
/// `on_epoch` runs after every epoch (e.g. to persist progress).
pub fn fit(
    config: &ModelConfig,
    train_pairs: &[PairedSample],
    val_pairs: &[PairedSample],
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitResult> {
    config.validate()?;
    if train_pairs.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 pairs, got {}",
            train_pairs.len()
        )));
    }
    let mut model: Model<f32> = Model::new(config.clone())?;
    let mut opt = ModelOptimizer::new(&model, config.lr);
    let batch_seed = derive_seed(config.seed, "batching", &[]);

    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut diverged = None;

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let batches = crate::data::batch_pairs(train_pairs.len(), config.batch_size, batch_seed, epoch)?;
        let mut step_losses: Vec<(usize, LossBreakdown)> = Vec::new();
        for (bi, indices) in batches.iter().enumerate() {
            let batch = TrainBatch::<f32>::gather(train_pairs, indices)?;
            let step_seed = derive_seed(config.seed, "step", &[epoch as u64, bi as u64]);
            match training_step(model.clone(), opt.clone(), &batch, step_seed) {
                Ok((m, o, losses)) => {
                    model = m;
                    opt = o;
                    step_losses.push((indices.len(), losses));
                }
                Err(Error::Numeric(msg)) => {
                    diverged = Some(msg);
                    // Keep the pre-step state; report the truncated epoch.
                    let record = EpochRecord {
                        epoch,
                        train: mean_breakdown(&step_losses),
                        val: None,
                        seconds: started.elapsed().as_secs_f64(),
                    };
                    history.push(record);
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
        }

        let val = if val_pairs.is_empty() {
            None
        } else {
            let mut parts = Vec::new();
            for chunk in (0..val_pairs.len()).collect::<Vec<_>>().chunks(config.batch_size) {
                let batch = TrainBatch::<f32>::gather(val_pairs, chunk)?;
                parts.push((chunk.len(), eval_losses(&model, &batch)?));
            }
            Some(mean_breakdown(&parts))
        };

        let record = EpochRecord {
            epoch,
            train: mean_breakdown(&step_losses),
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(v) = &record.val {
            let better = match &best {
                None => true,
                Some((best_total, _, _)) => v.total < *best_total,
            };
            if better {
                best = Some((v.total, epoch, model.clone()));
            }
        }
        on_epoch(&record)?;
        history.push(record);
    }

    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (history.len().saturating_sub(1), model.clone()),
    };
    Ok(FitResult {
        best: best_model,
        last: model,
        best_epoch,
        history,
        diverged,
    })
}
