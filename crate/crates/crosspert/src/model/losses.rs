//! The five terms of the training objective, computed standalone.
//!
//! Each decoder-dependent term runs the decoder in eval mode, so these
//! functions are deterministic given fixed parameters. The training step has
//! its own train-mode evaluation that shares forward passes across terms.
//! All reductions accumulate in f64.

use crate::error::{Error, Result};
use crate::nn::{forward, Mode, NetworkSpec, ParamSet};
use crate::tensor::{Scalar, Tensor};

fn check_same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} must match",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Penalizes alignment between each sample's perturbation and basal
/// embeddings: (1/N) Σᵢ (Paᵢ·Saᵢ)² + (Pbᵢ·Sbᵢ)².
pub fn loss_orth<T: Scalar>(
    pa: &Tensor<T>,
    sa: &Tensor<T>,
    pb: &Tensor<T>,
    sb: &Tensor<T>,
) -> Result<f64> {
    check_same_shape("loss_orth", pa, sa)?;
    check_same_shape("loss_orth", pb, sb)?;
    check_same_shape("loss_orth", pa, pb)?;
    let (n, _) = pa.dims2()?;
    let mut acc = 0.0f64;
    for i in 0..n {
        let da: f64 = pa
            .row(i)
            .iter()
            .zip(sa.row(i))
            .map(|(&p, &s)| p.as_f64() * s.as_f64())
            .sum();
        let db: f64 = pb
            .row(i)
            .iter()
            .zip(sb.row(i))
            .map(|(&p, &s)| p.as_f64() * s.as_f64())
            .sum();
        acc += da * da + db * db;
    }
    Ok(acc / n as f64)
}

/// Row-wise log-softmax in f64, numerically stabilized by the row max.
fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let m = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - m - log_z).collect()
}

/// Pulls the two basal embeddings of a pair toward the same distribution:
/// mean over the batch of KL(softmax(Saᵢ) ‖ softmax(Sbᵢ)), natural log.
pub fn loss_sim<T: Scalar>(sa: &Tensor<T>, sb: &Tensor<T>) -> Result<f64> {
    check_same_shape("loss_sim", sa, sb)?;
    let (n, _) = sa.dims2()?;
    let mut acc = 0.0f64;
    for i in 0..n {
        let lp = log_softmax_row(sa.row(i));
        let lq = log_softmax_row(sb.row(i));
        acc += lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum::<f64>();
    }
    Ok(acc / n as f64)
}

/// (1/N) Σᵢ ‖r1ᵢ−t1ᵢ‖² + ‖r2ᵢ−t2ᵢ‖², the shared reduction of the
/// reconstruction-style terms: squared error summed over genes per sample,
/// averaged over the batch.
fn paired_mse<T: Scalar>(
    r1: &Tensor<T>,
    t1: &Tensor<T>,
    r2: &Tensor<T>,
    t2: &Tensor<T>,
) -> Result<f64> {
    check_same_shape("reconstruction", r1, t1)?;
    check_same_shape("reconstruction", r2, t2)?;
    check_same_shape("reconstruction", r1, r2)?;
    let (n, _) = r1.dims2()?;
    let mut acc = 0.0f64;
    for (recon, target) in [(r1, t1), (r2, t2)] {
        for (&r, &t) in recon.data().iter().zip(target.data()) {
            let d = r.as_f64() - t.as_f64();
            acc += d * d;
        }
    }
    Ok(acc / n as f64)
}

fn decode_eval<T: Scalar>(
    dec_spec: &NetworkSpec,
    dec: &ParamSet<T>,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(forward(dec_spec, dec, z, Mode::Eval, 0)?.0)
}

/// Basal-only reconstruction: both basal embeddings must decode back to the
/// pair's shared unperturbed profile X.
pub fn loss_reco1<T: Scalar>(
    dec_spec: &NetworkSpec,
    dec: &ParamSet<T>,
    sa: &Tensor<T>,
    sb: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<f64> {
    let ra = decode_eval(dec_spec, dec, sa)?;
    let rb = decode_eval(dec_spec, dec, sb)?;
    paired_mse(&ra, x, &rb, x)
}

/// Perturbed reconstruction: each sample's own basal + perturbation embedding
/// must decode to its own perturbed profile.
pub fn loss_reco2<T: Scalar>(
    dec_spec: &NetworkSpec,
    dec: &ParamSet<T>,
    sa: &Tensor<T>,
    pa: &Tensor<T>,
    sb: &Tensor<T>,
    pb: &Tensor<T>,
    xa: &Tensor<T>,
    xb: &Tensor<T>,
) -> Result<f64> {
    let raa = decode_eval(dec_spec, dec, &sa.add(pa)?)?;
    let rbb = decode_eval(dec_spec, dec, &sb.add(pb)?)?;
    paired_mse(&raa, xa, &rbb, xb)
}

/// Cross-transfer: swapping the perturbation embeddings across the pair must
/// still reproduce each perturbation's own target profile.
pub fn loss_cross<T: Scalar>(
    dec_spec: &NetworkSpec,
    dec: &ParamSet<T>,
    sa: &Tensor<T>,
    pa: &Tensor<T>,
    sb: &Tensor<T>,
    pb: &Tensor<T>,
    xa: &Tensor<T>,
    xb: &Tensor<T>,
) -> Result<f64> {
    let rab = decode_eval(dec_spec, dec, &sb.add(pa)?)?;
    let rba = decode_eval(dec_spec, dec, &sa.add(pb)?)?;
    paired_mse(&rab, xa, &rba, xb)
}
