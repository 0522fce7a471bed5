//! Synthetic benchmark generator with an exact oracle.
//!
//! Profiles are built from known latent state: each cell line has a basal
//! latent vector, each perturbation an additive latent effect, and a fixed
//! map lifts latent vectors to gene space. Because the generating process is
//! known, the expected profile of any (cell line, perturbation set) pair can
//! be computed exactly, which is what makes transfer accuracy measurable
//! without reference data.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{CellRow, ExpressionDataset, CONTROL_LABEL};
use crate::error::{Error, Result};
use crate::util::{atomic_write, derive_seed};

/// Gene-space mapping applied on top of the linear lift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Identity,
    Softplus,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Identity => x,
            // ln(1 + eˣ), computed without overflow for large |x|.
            Nonlinearity::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }
}

/// Parameters of the generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Genes per profile (G).
    pub genes: usize,
    /// True latent dimension (d), at most `genes`.
    pub latent_dim: usize,
    /// Number of distinct perturbations (K).
    pub perturbations: usize,
    /// Number of cell lines (C).
    pub cell_lines: usize,
    /// Cells drawn per (cell line, condition) pair, controls included.
    pub cells_per_condition: usize,
    /// Standard deviation of i.i.d. Gaussian measurement noise.
    pub noise_sigma: f64,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.genes < self.latent_dim {
            return Err(Error::Config(format!(
                "need genes ≥ latent_dim ≥ 1, got genes={} latent_dim={}",
                self.genes, self.latent_dim
            )));
        }
        if self.perturbations < 4 {
            return Err(Error::Config(format!(
                "need at least 4 perturbations, got {}",
                self.perturbations
            )));
        }
        if self.cell_lines < 1 {
            return Err(Error::Config("need at least 1 cell line".into()));
        }
        if self.cells_per_condition < 1 {
            return Err(Error::Config("need at least 1 cell per condition".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be a non-negative finite number, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// The exact generating state: latent vectors by name plus the gene-space
/// map. Everything needed to evaluate noiseless expected profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cell_line_names: Vec<String>,
    pub perturbation_names: Vec<String>,
    /// C × d basal latent vectors, aligned with `cell_line_names`.
    pub basal: Vec<Vec<f64>>,
    /// K × d additive latent effects, aligned with `perturbation_names`.
    pub pert: Vec<Vec<f64>>,
    /// G × d linear map from latent to gene space.
    pub map_weights: Vec<Vec<f64>>,
    /// G-vector added after the linear map.
    pub map_bias: Vec<f64>,
    pub nonlinearity: Nonlinearity,
}

impl GroundTruth {
    pub fn gene_dim(&self) -> usize {
        self.map_bias.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.map_weights.first().map_or(0, Vec::len)
    }

    fn cell_line_index(&self, name: &str) -> Result<usize> {
        self.cell_line_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown cell line {name:?}")))
    }

    fn perturbation_index(&self, name: &str) -> Result<usize> {
        self.perturbation_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown perturbation {name:?}")))
    }

    /// Noiseless gene-space profile for `cell_line` under the summed latent
    /// effect of `perturbations`; an empty list gives the control target.
    pub fn oracle_profile<S: AsRef<str>>(
        &self,
        cell_line: &str,
        perturbations: &[S],
    ) -> Result<Vec<f32>> {
        let c = self.cell_line_index(cell_line)?;
        let mut z = self.basal[c].clone();
        for name in perturbations {
            let k = self.perturbation_index(name.as_ref())?;
            for (zi, pi) in z.iter_mut().zip(&self.pert[k]) {
                *zi += pi;
            }
        }
        Ok(self.lift(&z))
    }

    /// f(W·z + bias), computed in f64 and cast once at the end — the same
    /// arithmetic path `generate` uses, so noiseless rows match bit-exactly.
    fn lift(&self, z: &[f64]) -> Vec<f32> {
        self.map_weights
            .iter()
            .zip(&self.map_bias)
            .map(|(row, b)| {
                let dot: f64 = row.iter().zip(z).map(|(w, v)| w * v).sum();
                self.nonlinearity.apply(dot + b) as f32
            })
            .collect()
    }
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Draws the generating state for a config. Latent vectors are standard
/// normal; map weights are normal scaled by 1/√d so gene variances stay
/// O(1) regardless of latent width.
pub fn sample_ground_truth(config: &SynthConfig) -> Result<GroundTruth> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "ground_truth", &[]));
    let d = config.latent_dim;
    let basal = sample_matrix(&mut rng, config.cell_lines, d, 1.0);
    let pert = sample_matrix(&mut rng, config.perturbations, d, 1.0);
    let map_weights = sample_matrix(&mut rng, config.genes, d, 1.0 / (d as f64).sqrt());
    let map_bias: Vec<f64> = (0..config.genes)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();

    // Distinct effects are a structural requirement: two identical
    // perturbations would make transfer between them vacuous.
    for i in 0..pert.len() {
        for j in (i + 1)..pert.len() {
            let dist2: f64 = pert[i]
                .iter()
                .zip(&pert[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist2 <= 0.0 {
                return Err(Error::Config(format!(
                    "sampled perturbation effects {i} and {j} coincide; choose another seed"
                )));
            }
        }
    }

    Ok(GroundTruth {
        cell_line_names: (0..config.cell_lines).map(|c| format!("line{c:02}")).collect(),
        perturbation_names: (0..config.perturbations)
            .map(|k| format!("pert{k:03}"))
            .collect(),
        basal,
        pert,
        map_weights,
        map_bias,
        nonlinearity: config.nonlinearity,
    })
}

/// Generates the full dataset: for every cell line, `cells_per_condition`
/// control rows followed by `cells_per_condition` rows per perturbation,
/// each `f(W·(s_c + p_k) + bias) + ε` with ε ~ N(0, σ²) i.i.d. per entry.
/// Deterministic given the config.
pub fn generate(config: &SynthConfig) -> Result<(ExpressionDataset, GroundTruth)> {
    let gt = sample_ground_truth(config)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise", &[]));
    let gene_ids: Vec<String> = (0..config.genes).map(|g| format!("gene{g:04}")).collect();

    let mut rows = Vec::with_capacity(
        config.cell_lines * (config.perturbations + 1) * config.cells_per_condition,
    );
    for line in &gt.cell_line_names {
        // Control condition first, then each perturbation in name order.
        let mut conditions: Vec<(&str, f32, Vec<f32>)> = Vec::new();
        conditions.push((CONTROL_LABEL, 0.0, gt.oracle_profile::<&str>(line, &[])?));
        for pert in &gt.perturbation_names {
            conditions.push((pert, 1.0, gt.oracle_profile(line, &[pert])?));
        }
        for (label, dose, clean) in conditions {
            for i in 0..config.cells_per_condition {
                let values: Vec<f32> = clean
                    .iter()
                    .map(|&v| {
                        let eps: f64 = noise_rng.sample(StandardNormal);
                        (f64::from(v) + config.noise_sigma * eps) as f32
                    })
                    .collect();
                rows.push(CellRow {
                    cell_id: format!("{line}_{label}_{i:03}"),
                    cell_line: line.clone(),
                    perturbation: label.to_string(),
                    dose,
                    values,
                });
            }
        }
    }

    Ok((ExpressionDataset { gene_ids, rows }, gt))
}

// ---------------------------------------------------------------------------
// Ground-truth serialization. Floats are written as decimal strings so the
// file round-trips bit-exactly through JSON.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthFile {
    cell_line_names: Vec<String>,
    perturbation_names: Vec<String>,
    basal: Vec<Vec<String>>,
    pert: Vec<Vec<String>>,
    map_weights: Vec<Vec<String>>,
    map_bias: Vec<String>,
    nonlinearity: Nonlinearity,
}

fn floats_to_strings(m: &[Vec<f64>]) -> Vec<Vec<String>> {
    m.iter()
        .map(|row| row.iter().map(|v| format!("{v}")).collect())
        .collect()
}

fn parse_float(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Format(format!("invalid float {s:?} in ground truth file")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!(
            "non-finite value {s:?} in ground truth file"
        )));
    }
    Ok(v)
}

fn strings_to_floats(m: &[Vec<String>]) -> Result<Vec<Vec<f64>>> {
    m.iter()
        .map(|row| row.iter().map(|s| parse_float(s)).collect())
        .collect()
}

/// Writes `ground_truth.json`-style content atomically.
pub fn save_ground_truth(gt: &GroundTruth, path: &std::path::Path) -> Result<()> {
    let file = GroundTruthFile {
        cell_line_names: gt.cell_line_names.clone(),
        perturbation_names: gt.perturbation_names.clone(),
        basal: floats_to_strings(&gt.basal),
        pert: floats_to_strings(&gt.pert),
        map_weights: floats_to_strings(&gt.map_weights),
        map_bias: gt.map_bias.iter().map(|v| format!("{v}")).collect(),
        nonlinearity: gt.nonlinearity,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("could not serialize ground truth: {e}")))?;
    atomic_write(path, json.as_bytes())
}

pub fn load_ground_truth(path: &std::path::Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: GroundTruthFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("invalid ground truth file: {e}")))?;
    let gt = GroundTruth {
        cell_line_names: file.cell_line_names,
        perturbation_names: file.perturbation_names,
        basal: strings_to_floats(&file.basal)?,
        pert: strings_to_floats(&file.pert)?,
        map_weights: strings_to_floats(&file.map_weights)?,
        map_bias: file
            .map_bias
            .iter()
            .map(|s| parse_float(s))
            .collect::<Result<_>>()?,
        nonlinearity: file.nonlinearity,
    };
    if gt.cell_line_names.len() != gt.basal.len()
        || gt.perturbation_names.len() != gt.pert.len()
        || gt.map_weights.len() != gt.map_bias.len()
    {
        return Err(Error::Format(
            "ground truth file has inconsistent dimensions".into(),
        ));
    }
    Ok(gt)
}
