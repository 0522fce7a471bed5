//! The disentanglement model: a basal-state encoder and a perturbation
//! encoder over expression profiles, a shared decoder, the loss terms that
//! tie them together, and the two inference procedures (cross-context
//! transfer and dual-perturbation composition).

pub mod checkpoint;
pub mod losses;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, init_params, LayerSpec, Mode, NetworkSpec, ParamSet, Trace};
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

/// Batchnorm epsilon used by every block in both networks.
pub const BN_EPS: f64 = 1e-5;

/// Per-term weights of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_sim: f64,
    pub w_orth: f64,
    pub w_reco1: f64,
    pub w_reco2: f64,
    pub w_cross: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_sim: 1.0,
            w_orth: 1.0,
            w_reco1: 1.0,
            w_reco2: 1.0,
            w_cross: 1.0,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_sim", self.w_sim),
            ("w_orth", self.w_orth),
            ("w_reco1", self.w_reco1),
            ("w_reco2", self.w_reco2),
            ("w_cross", self.w_cross),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be a non-negative finite number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of the model and its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of genes per expression profile.
    pub gene_dim: usize,
    /// Hidden widths of each encoder, outermost first.
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
    /// Width of the basal and perturbation embeddings.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Dropout rate applied after every hidden block.
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_encoder_hidden() -> Vec<usize> {
    vec![1024, 512, 256]
}
fn default_latent_dim() -> usize {
    128
}
fn default_dropout_rate() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    2e-4
}
fn default_epochs() -> usize {
    60
}
fn default_batch_size() -> usize {
    128
}

impl ModelConfig {
    /// A config with every tunable at its default, for the given gene count.
    pub fn with_defaults(gene_dim: usize, seed: u64) -> Self {
        Self {
            gene_dim,
            encoder_hidden: default_encoder_hidden(),
            latent_dim: default_latent_dim(),
            dropout_rate: default_dropout_rate(),
            loss_weights: LossWeights::default(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gene_dim == 0 {
            return Err(Error::Config("gene_dim must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.encoder_hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(
                "encoder_hidden widths must all be positive".into(),
            ));
        }
        if !self.dropout_rate.is_finite() || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        self.loss_weights.validate()?;
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch normalization needs two samples)".into(),
            ));
        }
        Ok(())
    }

    /// Encoder topology: hidden blocks of dense → batchnorm → relu → dropout,
    /// then a linear head onto the latent width. Both encoders use this shape.
    pub fn encoder_spec(&self) -> Result<NetworkSpec> {
        self.validate()?;
        Ok(stack_spec(
            self.gene_dim,
            &self.encoder_hidden,
            self.latent_dim,
            self.dropout_rate,
        ))
    }

    /// Decoder topology: the encoder stack mirrored, linear final layer.
    pub fn decoder_spec(&self) -> Result<NetworkSpec> {
        self.validate()?;
        let mirrored: Vec<usize> = self.encoder_hidden.iter().rev().copied().collect();
        Ok(stack_spec(
            self.latent_dim,
            &mirrored,
            self.gene_dim,
            self.dropout_rate,
        ))
    }
}

fn stack_spec(in_dim: usize, hidden: &[usize], out_dim: usize, dropout: f64) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut prev = in_dim;
    for &h in hidden {
        layers.push(LayerSpec::Dense {
            in_dim: prev,
            out_dim: h,
        });
        layers.push(LayerSpec::BatchNorm { eps: BN_EPS });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: dropout });
        prev = h;
    }
    layers.push(LayerSpec::Dense {
        in_dim: prev,
        out_dim,
    });
    NetworkSpec::new(layers).expect("stack_spec builds a valid chain")
}

/// The trainable state of the three networks. The two encoders are
/// architecture-identical but never share parameters; the decoder is shared
/// by every decoding path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub es: ParamSet<T>,
    pub ep: ParamSet<T>,
    pub dec: ParamSet<T>,
}

/// A model bundles its config, the derived network topologies, and the
/// current parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub es_spec: NetworkSpec,
    pub ep_spec: NetworkSpec,
    pub dec_spec: NetworkSpec,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with parameters drawn deterministically from config.seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let es_spec = config.encoder_spec()?;
        let ep_spec = config.encoder_spec()?;
        let dec_spec = config.decoder_spec()?;
        let params = ModelParams {
            es: init_params(&es_spec, derive_seed(config.seed, "init.es", &[]))?,
            ep: init_params(&ep_spec, derive_seed(config.seed, "init.ep", &[]))?,
            dec: init_params(&dec_spec, derive_seed(config.seed, "init.dec", &[]))?,
        };
        Ok(Self {
            config,
            es_spec,
            ep_spec,
            dec_spec,
            params,
        })
    }

    /// Rebuild a model around existing parameters, checking them against the
    /// topologies the config implies.
    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        let es_spec = config.encoder_spec()?;
        let ep_spec = config.encoder_spec()?;
        let dec_spec = config.decoder_spec()?;
        params.es.validate_against(&es_spec)?;
        params.ep.validate_against(&ep_spec)?;
        params.dec.validate_against(&dec_spec)?;
        Ok(Self {
            config,
            es_spec,
            ep_spec,
            dec_spec,
            params,
        })
    }

    /// Basal-state embedding S = E_s(X).
    pub fn encode_basal(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng_seed: u64,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        forward(&self.es_spec, &self.params.es, x, mode, rng_seed)
    }

    /// Perturbation embedding P = E_p(X).
    pub fn encode_perturbation(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng_seed: u64,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        forward(&self.ep_spec, &self.params.ep, x, mode, rng_seed)
    }

    /// Profile reconstruction X̂ = D(z).
    pub fn decode(
        &self,
        z: &Tensor<T>,
        mode: Mode,
        rng_seed: u64,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        forward(&self.dec_spec, &self.params.dec, z, mode, rng_seed)
    }

    fn encode_basal_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode_basal(x, Mode::Eval, 0)?.0)
    }

    fn encode_perturbation_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode_perturbation(x, Mode::Eval, 0)?.0)
    }

    fn decode_eval(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.decode(z, Mode::Eval, 0)?.0)
    }

    /// Lift the perturbation out of `x_src_perturbed` and apply it to the
    /// basal state of `x_tgt_control`: D(E_s(X_ctrl) + E_p(X_pert)).
    /// Rows are matched positionally, so both inputs need equal batch sizes.
    pub fn predict_transfer(
        &self,
        x_src_perturbed: &Tensor<T>,
        x_tgt_control: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let s = self.encode_basal_eval(x_tgt_control)?;
        let p = self.encode_perturbation_eval(x_src_perturbed)?;
        self.decode_eval(&s.add(&p)?)
    }

    /// Compose two perturbations on one basal state:
    /// D(E_s(X_ctrl) + E_p(X_a) + E_p(X_b)).
    pub fn predict_combo(
        &self,
        x_pert_a: &Tensor<T>,
        x_pert_b: &Tensor<T>,
        x_control: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let s = self.encode_basal_eval(x_control)?;
        let pa = self.encode_perturbation_eval(x_pert_a)?;
        let pb = self.encode_perturbation_eval(x_pert_b)?;
        self.decode_eval(&s.add(&pa)?.add(&pb)?)
    }

    /// Combo prediction with pooled embeddings: each perturbation's latent
    /// effect is the mean of E_p over that perturbation's cells, applied to
    /// the basal state of a single control profile. Returns one row.
    pub fn predict_combo_pooled(
        &self,
        x_pert_a_cells: &Tensor<T>,
        x_pert_b_cells: &Tensor<T>,
        x_control: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let s = self.encode_basal_eval(x_control)?;
        let pa = row_mean(&self.encode_perturbation_eval(x_pert_a_cells)?)?;
        let pb = row_mean(&self.encode_perturbation_eval(x_pert_b_cells)?)?;
        self.decode_eval(&s.add(&pa)?.add(&pb)?)
    }
}

/// Column-wise mean over the rows of a matrix, as a 1-row tensor.
fn row_mean<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = m.dims2()?;
    if n == 0 {
        return Err(Error::Shape("cannot average zero rows".into()));
    }
    let mut acc = vec![0.0f64; d];
    for i in 0..n {
        for (a, v) in acc.iter_mut().zip(m.row(i)) {
            *a += v.as_f64();
        }
    }
    let inv = 1.0 / n as f64;
    Tensor::new(
        vec![1, d],
        acc.into_iter().map(|v| T::from_f64(v * inv)).collect(),
    )
}

/// Per-term values of the objective for one batch or one epoch, always
/// carried in f64 regardless of the parameter precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub orth: f64,
    pub reco1: f64,
    pub reco2: f64,
    pub cross: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(w: &LossWeights, sim: f64, orth: f64, reco1: f64, reco2: f64, cross: f64) -> Self {
        Self {
            sim,
            orth,
            reco1,
            reco2,
            cross,
            total: w.w_sim * sim
                + w.w_orth * orth
                + w.w_reco1 * reco1
                + w.w_reco2 * reco2
                + w.w_cross * cross,
        }
    }

    /// Errors on the first non-finite term, in declaration order.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("sim", self.sim),
            ("orth", self.orth),
            ("reco1", self.reco1),
            ("reco2", self.reco2),
            ("cross", self.cross),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss term {name} is non-finite ({v})"
                )));
            }
        }
        Ok(())
    }
}
