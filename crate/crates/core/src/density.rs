//! CVAE-based conditional density estimation for the mixed behavior policy
//! and the target-domain transition model, with ensemble-min likelihoods and
//! thresholded support tests.
//!
//! Encoder q(z|x,y) and decoder p(y|x,z) are diagonal Gaussians; the latent
//! prior is standard normal. Likelihood inference is importance sampling
//! through the encoder proposal, computed in log space with max-shift.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::{self, DomainTag, NormStats, OfflineDataset};
use crate::nn::{Mlp, MlpSpec, NnError, Tape, Var};
use crate::params::{self, ParamStore};
use crate::rng::Stream;

const LN_2PI: f64 = 1.8378770664093453;
/// Returned instead of -inf when every importance sample underflows.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -1e6;
const DECODER_LOGVAR_RANGE: (f64, f64) = (-6.0, 2.0);

#[derive(Debug, thiserror::Error)]
pub enum DensityError {
    #[error("non-finite input to density model")]
    NonFiniteInput,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("likelihood threshold exp value must lie in (0,1], got {0}")]
    BadThreshold(f64),
    #[error("sample count L must be >= 1")]
    BadSampleCount,
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Log-space support threshold. The paper's grids are given in exp space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportThreshold {
    pub log_value: f64,
    pub from_likelihood: bool,
}

impl SupportThreshold {
    pub fn from_exp_likelihood(p: f64) -> Result<Self, DensityError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DensityError::BadThreshold(p));
        }
        Ok(SupportThreshold {
            log_value: p.ln(),
            from_likelihood: true,
        })
    }

    pub fn from_log(log_value: f64) -> Self {
        SupportThreshold {
            log_value,
            from_likelihood: false,
        }
    }
}

/// Conditional VAE over (condition, output) pairs.
#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub cond_dim: usize,
    pub out_dim: usize,
    pub latent_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub enc_params: ParamStore,
    pub dec_params: ParamStore,
    pub kl_weight: f64,
}

impl CvaeModel {
    /// Latent dim is 2x the output-variable dim.
    pub fn new(
        cond_dim: usize,
        out_dim: usize,
        hidden_dim: usize,
        depth: usize,
        kl_weight: f64,
        rng: &mut Stream,
    ) -> Result<Self, DensityError> {
        let latent_dim = 2 * out_dim;
        let encoder = Mlp::new(MlpSpec::new(cond_dim + out_dim, hidden_dim, depth, 2 * latent_dim))?;
        let decoder = Mlp::new(MlpSpec::new(cond_dim + latent_dim, hidden_dim, depth, 2 * out_dim))?;
        let enc_params = encoder.init_params(&mut rng.split("enc"));
        let dec_params = decoder.init_params(&mut rng.split("dec"));
        Ok(CvaeModel {
            cond_dim,
            out_dim,
            latent_dim,
            encoder,
            decoder,
            enc_params,
            dec_params,
            kl_weight,
        })
    }

    /// Encoder pass on the tape: returns latent (mean, logvar).
    pub fn encode_graph(&self, tape: &mut Tape, cond: Var, y: Var) -> Result<(Var, Var), DensityError> {
        let input = tape.concat_cols(cond, y);
        let out = self
            .encoder
            .forward_on_tape(tape, &self.enc_params, input, false, None)?;
        let mu = tape.slice_cols(out, 0, self.latent_dim);
        let logvar = tape.slice_cols(out, self.latent_dim, 2 * self.latent_dim);
        Ok((mu, logvar))
    }

    /// Decoder pass on the tape: returns reconstruction (mean, clamped logvar).
    pub fn decode_graph(&self, tape: &mut Tape, cond: Var, z: Var) -> Result<(Var, Var), DensityError> {
        let input = tape.concat_cols(cond, z);
        let out = self
            .decoder
            .forward_on_tape(tape, &self.dec_params, input, false, None)?;
        let mu = tape.slice_cols(out, 0, self.out_dim);
        let logvar = tape.slice_cols(out, self.out_dim, 2 * self.out_dim);
        let logvar = tape.clamp(logvar, DECODER_LOGVAR_RANGE.0, DECODER_LOGVAR_RANGE.1);
        Ok((mu, logvar))
    }

    /// Negative empirical lower bound, averaged over the batch:
    /// kl_weight * KL(q || N(0,I)) - (1/L) sum_l log p(y|x,z_l).
    pub fn elbo_loss_graph(
        &self,
        tape: &mut Tape,
        cond: Var,
        y: Var,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Var, DensityError> {
        if l_samples == 0 {
            return Err(DensityError::BadSampleCount);
        }
        check_finite(tape.value(cond))?;
        check_finite(tape.value(y))?;
        let batch = tape.value(cond).nrows();
        let (mu, logvar) = self.encode_graph(tape, cond, y)?;
        let kl = kl_to_standard_normal(tape, mu, logvar);

        let mut recon_sum: Option<Var> = None;
        for l in 0..l_samples {
            let eps = Array2::from_shape_fn((batch, self.latent_dim), |_| rng.normal());
            let z = reparameterize(tape, mu, logvar, eps);
            let (dmu, dlogvar) = self.decode_graph(tape, cond, z)?;
            let logp = gaussian_log_density(tape, y, dmu, dlogvar);
            recon_sum = Some(match recon_sum {
                None => logp,
                Some(acc) => tape.add(acc, logp),
            });
            let _ = l;
        }
        let recon = tape.scale(recon_sum.unwrap(), 1.0 / l_samples as f64);
        let kl_w = tape.scale(kl, self.kl_weight);
        let per_item = tape.sub(kl_w, recon);
        Ok(tape.mean_all(per_item))
    }

    /// Importance-sampled log-likelihood as a differentiable graph (b x 1).
    /// Gradients flow through `cond` and `y`.
    pub fn log_likelihood_graph(
        &self,
        tape: &mut Tape,
        cond: Var,
        y: Var,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Var, DensityError> {
        if l_samples == 0 {
            return Err(DensityError::BadSampleCount);
        }
        let batch = tape.value(cond).nrows();
        let (mu, logvar) = self.encode_graph(tape, cond, y)?;
        let mut log_weights = Vec::with_capacity(l_samples);
        for _ in 0..l_samples {
            let eps = Array2::from_shape_fn((batch, self.latent_dim), |_| rng.normal());
            let z = reparameterize(tape, mu, logvar, eps);
            let (dmu, dlogvar) = self.decode_graph(tape, cond, z)?;
            let logp_dec = gaussian_log_density(tape, y, dmu, dlogvar);
            let logp_prior = standard_normal_log_density(tape, z);
            let logq = gaussian_log_density(tape, z, mu, logvar);
            let a = tape.add(logp_dec, logp_prior);
            log_weights.push(tape.sub(a, logq));
        }
        let lse = tape.log_sum_exp_cols(log_weights);
        Ok(tape.add_scalar(lse, -(l_samples as f64).ln()))
    }

    /// Tape-free batched log-likelihood (floored at [`LOG_LIKELIHOOD_FLOOR`]).
    pub fn log_likelihood_batch(
        &self,
        cond: &Array2<f64>,
        y: &Array2<f64>,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Vec<f64>, DensityError> {
        if l_samples == 0 {
            return Err(DensityError::BadSampleCount);
        }
        check_finite(cond)?;
        check_finite(y)?;
        let batch = cond.nrows();
        let enc_in = ndarray::concatenate(ndarray::Axis(1), &[cond.view(), y.view()]).unwrap();
        let enc_out = self.encoder.forward_array(&self.enc_params, &enc_in)?;
        let mu = enc_out.slice(ndarray::s![.., ..self.latent_dim]);
        let logvar = enc_out.slice(ndarray::s![.., self.latent_dim..]);

        let mut log_weights = Array2::zeros((batch, l_samples));
        for l in 0..l_samples {
            let eps = Array2::from_shape_fn((batch, self.latent_dim), |_| rng.normal());
            let z = &mu.to_owned() + &(logvar.mapv(|v| (0.5 * v).exp()) * &eps);
            let dec_in = ndarray::concatenate(ndarray::Axis(1), &[cond.view(), z.view()]).unwrap();
            let dec_out = self.decoder.forward_array(&self.dec_params, &dec_in)?;
            let dmu = dec_out.slice(ndarray::s![.., ..self.out_dim]);
            let dlogvar = dec_out
                .slice(ndarray::s![.., self.out_dim..])
                .mapv(|v| v.clamp(DECODER_LOGVAR_RANGE.0, DECODER_LOGVAR_RANGE.1));
            for i in 0..batch {
                let mut logp_dec = 0.0;
                for d in 0..self.out_dim {
                    let diff = y[[i, d]] - dmu[[i, d]];
                    let lv = dlogvar[[i, d]];
                    logp_dec += -0.5 * (diff * diff * (-lv).exp() + lv + LN_2PI);
                }
                let mut logp_prior = 0.0;
                let mut logq = 0.0;
                for d in 0..self.latent_dim {
                    let zv = z[[i, d]];
                    logp_prior += -0.5 * (zv * zv + LN_2PI);
                    let diff = zv - mu[[i, d]];
                    let lv = logvar[[i, d]];
                    logq += -0.5 * (diff * diff * (-lv).exp() + lv + LN_2PI);
                }
                log_weights[[i, l]] = logp_dec + logp_prior - logq;
            }
        }
        let mut out = Vec::with_capacity(batch);
        for i in 0..batch {
            let row = log_weights.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ll = if m.is_finite() {
                m + (row.iter().map(|x| (x - m).exp()).sum::<f64>() / l_samples as f64).ln()
            } else {
                f64::NEG_INFINITY
            };
            out.push(if ll.is_finite() {
                ll.max(LOG_LIKELIHOOD_FLOOR)
            } else {
                LOG_LIKELIHOOD_FLOOR
            });
        }
        Ok(out)
    }

    /// Sample one output per condition row from the decoder.
    pub fn sample(&self, cond: &Array2<f64>, rng: &mut Stream) -> Result<Array2<f64>, DensityError> {
        let batch = cond.nrows();
        let z = Array2::from_shape_fn((batch, self.latent_dim), |_| rng.normal());
        let dec_in = ndarray::concatenate(ndarray::Axis(1), &[cond.view(), z.view()]).unwrap();
        let dec_out = self.decoder.forward_array(&self.dec_params, &dec_in)?;
        let mut out = Array2::zeros((batch, self.out_dim));
        for i in 0..batch {
            for d in 0..self.out_dim {
                let lv = dec_out[[i, self.out_dim + d]].clamp(DECODER_LOGVAR_RANGE.0, DECODER_LOGVAR_RANGE.1);
                out[[i, d]] = dec_out[[i, d]] + (0.5 * lv).exp() * rng.normal();
            }
        }
        Ok(out)
    }
}

fn check_finite(a: &Array2<f64>) -> Result<(), DensityError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(DensityError::NonFiniteInput);
    }
    Ok(())
}

/// z = mu + exp(0.5 logvar) * eps
fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Array2<f64>) -> Var {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps);
    let noise = tape.mul(std, e);
    tape.add(mu, noise)
}

/// Row-wise diagonal-Gaussian log density (b x 1).
pub fn gaussian_log_density(tape: &mut Tape, x: Var, mu: Var, logvar: Var) -> Var {
    let diff = tape.sub(x, mu);
    let sq = tape.square(diff);
    let neg_lv = tape.neg(logvar);
    let prec = tape.exp(neg_lv);
    let maha = tape.mul(sq, prec);
    let t = tape.add(maha, logvar);
    let t = tape.add_scalar(t, LN_2PI);
    let row = tape.sum_rows(t);
    tape.scale(row, -0.5)
}

fn standard_normal_log_density(tape: &mut Tape, z: Var) -> Var {
    let sq = tape.square(z);
    let t = tape.add_scalar(sq, LN_2PI);
    let row = tape.sum_rows(t);
    tape.scale(row, -0.5)
}

/// Row-wise KL(N(mu, diag exp(logvar)) || N(0, I)) (b x 1).
pub fn kl_to_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let t = tape.add(mu2, var);
    let t = tape.sub(t, logvar);
    let t = tape.add_scalar(t, -1.0);
    let row = tape.sum_rows(t);
    tape.scale(row, 0.5)
}

/// Ensemble of CVAEs aggregated by the minimum log-likelihood.
#[derive(Debug, Clone)]
pub struct DensityEnsemble {
    pub members: Vec<CvaeModel>,
}

impl DensityEnsemble {
    pub fn new(members: Vec<CvaeModel>) -> Result<Self, DensityError> {
        if members.is_empty() {
            return Err(DensityError::EmptyEnsemble);
        }
        Ok(DensityEnsemble { members })
    }

    /// Minimum member log-likelihood per batch row.
    pub fn log_likelihood_batch(
        &self,
        cond: &Array2<f64>,
        y: &Array2<f64>,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Vec<f64>, DensityError> {
        let mut min_ll: Option<Vec<f64>> = None;
        for (k, m) in self.members.iter().enumerate() {
            let ll = m.log_likelihood_batch(cond, y, &mut rng.split(&format!("member{k}")), l_samples)?;
            min_ll = Some(match min_ll {
                None => ll,
                Some(acc) => acc.into_iter().zip(ll).map(|(a, b)| a.min(b)).collect(),
            });
        }
        Ok(min_ll.unwrap())
    }

    pub fn in_support_batch(
        &self,
        threshold: &SupportThreshold,
        cond: &Array2<f64>,
        y: &Array2<f64>,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Vec<bool>, DensityError> {
        Ok(self
            .log_likelihood_batch(cond, y, rng, l_samples)?
            .into_iter()
            .map(|ll| ll > threshold.log_value)
            .collect())
    }
}

/// Training hyperparameters for one CVAE. Paper values are lr 1e-3,
/// batch 256, 1e5 iterations, hidden 750, 3 layers, KL weight 0.5; the
/// desk-scale defaults shrink the net and iteration count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeTrainConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub kl_weight: f64,
    /// Reconstruction samples per ELBO term during training.
    pub train_samples: usize,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        CvaeTrainConfig {
            hidden_dim: 96,
            depth: 3,
            lr: 1e-3,
            batch_size: 256,
            iters: 4000,
            kl_weight: 0.5,
            train_samples: 1,
        }
    }
}

/// Fit one CVAE on (condition, output) rows; returns the model and the
/// per-iteration loss history.
pub fn train_cvae(
    cond: &Array2<f64>,
    out: &Array2<f64>,
    cfg: &CvaeTrainConfig,
    seed: u64,
    label: &str,
) -> Result<(CvaeModel, Vec<f64>), DensityError> {
    assert_eq!(cond.nrows(), out.nrows());
    let mut init_rng = Stream::derive(seed, &format!("cvae-init/{label}"));
    let mut model = CvaeModel::new(
        cond.ncols(),
        out.ncols(),
        cfg.hidden_dim,
        cfg.depth,
        cfg.kl_weight,
        &mut init_rng,
    )?;
    let mut batch_rng = Stream::derive(seed, &format!("cvae-batch/{label}"));
    let mut latent_rng = Stream::derive(seed, &format!("cvae-latent/{label}"));
    let n = cond.nrows();
    let mut history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch_size.min(n)).map(|_| batch_rng.index(n)).collect();
        let cb = gather_rows(cond, &idx);
        let yb = gather_rows(out, &idx);
        let mut tape = Tape::new();
        let cv = tape.constant(cb);
        let yv = tape.constant(yb);
        let loss = model.elbo_loss_graph(&mut tape, cv, yv, &mut latent_rng, cfg.train_samples)?;
        history.push(tape.scalar(loss));
        tape.backward(loss)?;
        model.enc_params.zero_grad();
        model.dec_params.zero_grad();
        tape.accumulate_param_grads(&mut model.enc_params)?;
        tape.accumulate_param_grads(&mut model.dec_params)?;
        model.enc_params.adam_step_accumulated(cfg.lr)?;
        model.dec_params.adam_step_accumulated(cfg.lr)?;
    }
    Ok((model, history))
}

fn gather_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

/// Behavior-policy density pi_beta_mix(a|s): a single CVAE conditioned on
/// the normalized state (stats of the dataset it was fit on).
#[derive(Debug, Clone)]
pub struct BehaviorDensity {
    pub model: CvaeModel,
    pub stats: NormStats,
    pub dataset_hash: String,
}

impl BehaviorDensity {
    pub fn log_likelihood(
        &self,
        states_raw: &Array2<f64>,
        actions: &Array2<f64>,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Vec<f64>, DensityError> {
        let cond = normalize_rows(states_raw, &self.stats);
        self.model.log_likelihood_batch(&cond, actions, rng, l_samples)
    }
}

/// Target transition density T(s'|s,a): a k-member CVAE ensemble on
/// target-only normalization stats; condition = norm(s) ++ a, output = norm(s').
#[derive(Debug, Clone)]
pub struct TransitionDensity {
    pub ensemble: DensityEnsemble,
    pub stats: NormStats,
    pub dataset_hash: String,
}

impl TransitionDensity {
    pub fn log_likelihood(
        &self,
        states_raw: &Array2<f64>,
        actions: &Array2<f64>,
        next_states_raw: &Array2<f64>,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Vec<f64>, DensityError> {
        let s = normalize_rows(states_raw, &self.stats);
        let cond = ndarray::concatenate(ndarray::Axis(1), &[s.view(), actions.view()]).unwrap();
        let y = normalize_rows(next_states_raw, &self.stats);
        self.ensemble.log_likelihood_batch(&cond, &y, rng, l_samples)
    }

    pub fn in_support(
        &self,
        threshold: &SupportThreshold,
        states_raw: &Array2<f64>,
        actions: &Array2<f64>,
        next_states_raw: &Array2<f64>,
        rng: &mut Stream,
        l_samples: usize,
    ) -> Result<Vec<bool>, DensityError> {
        Ok(self
            .log_likelihood(states_raw, actions, next_states_raw, rng, l_samples)?
            .into_iter()
            .map(|ll| ll > threshold.log_value)
            .collect())
    }
}

pub fn normalize_rows(a: &Array2<f64>, stats: &NormStats) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        for (d, x) in row.iter_mut().enumerate() {
            *x = (*x - stats.mean[d]) / stats.std[d];
        }
    }
    out
}

fn dataset_arrays(data: &OfflineDataset) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let b = data.gather(&(0..data.len()).collect::<Vec<_>>(), false);
    (b.states, b.actions, b.next_states)
}

/// Fit the mixed behavior policy on D_mix.
pub fn train_behavior_density(
    d_mix: &OfflineDataset,
    cfg: &CvaeTrainConfig,
    seed: u64,
) -> Result<BehaviorDensity, DensityError> {
    let (states, actions, _) = dataset_arrays(d_mix);
    let cond = normalize_rows(&states, &d_mix.stats);
    let (model, _) = train_cvae(&cond, &actions, cfg, seed, "behavior")?;
    Ok(BehaviorDensity {
        model,
        stats: d_mix.stats.clone(),
        dataset_hash: dataset::content_hash(d_mix),
    })
}

/// Fit the k-member target transition ensemble on D_target only.
/// Members train in parallel with independent streams.
pub fn train_transition_ensemble(
    d_target: &OfflineDataset,
    k: usize,
    cfg: &CvaeTrainConfig,
    seed: u64,
) -> Result<TransitionDensity, DensityError> {
    assert!(
        d_target
            .transitions
            .iter()
            .all(|t| t.tag == DomainTag::Target),
        "transition ensemble must be fit on target-domain data only"
    );
    let (states, actions, next_states) = dataset_arrays(d_target);
    let s = normalize_rows(&states, &d_target.stats);
    let cond = ndarray::concatenate(ndarray::Axis(1), &[s.view(), actions.view()]).unwrap();
    let y = normalize_rows(&next_states, &d_target.stats);
    let members: Result<Vec<CvaeModel>, DensityError> = (0..k)
        .into_par_iter()
        .map(|i| train_cvae(&cond, &y, cfg, seed, &format!("transition{i}")).map(|(m, _)| m))
        .collect();
    Ok(TransitionDensity {
        ensemble: DensityEnsemble::new(members?)?,
        stats: d_target.stats.clone(),
        dataset_hash: dataset::content_hash(d_target),
    })
}

#[derive(Serialize, Deserialize)]
struct CvaeSidecar {
    cond_dim: usize,
    out_dim: usize,
    latent_dim: usize,
    hidden_dim: usize,
    depth: usize,
    kl_weight: f64,
    ensemble_index: usize,
    dataset_hash: String,
    stats: NormStats,
}

/// Save one CVAE as nn checkpoints plus a JSON sidecar.
pub fn save_cvae(
    dir: &Path,
    model: &CvaeModel,
    ensemble_index: usize,
    dataset_hash: &str,
    stats: &NormStats,
    seed: u64,
) -> Result<(), DensityError> {
    std::fs::create_dir_all(dir)?;
    let sidecar = CvaeSidecar {
        cond_dim: model.cond_dim,
        out_dim: model.out_dim,
        latent_dim: model.latent_dim,
        hidden_dim: model.encoder.spec.hidden_dim,
        depth: model.encoder.spec.depth,
        kl_weight: model.kl_weight,
        ensemble_index,
        dataset_hash: dataset_hash.to_string(),
        stats: stats.clone(),
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&sidecar).unwrap(),
    )?;
    params::save_checkpoint(
        &dir.join("encoder.ckpt"),
        &model.enc_params,
        &[model.cond_dim + model.out_dim, 2 * model.latent_dim],
        seed,
    )?;
    params::save_checkpoint(
        &dir.join("decoder.ckpt"),
        &model.dec_params,
        &[model.cond_dim + model.latent_dim, 2 * model.out_dim],
        seed,
    )?;
    Ok(())
}

pub fn load_cvae(dir: &Path) -> Result<(CvaeModel, String, NormStats), DensityError> {
    let sidecar: CvaeSidecar = serde_json::from_str(
        &std::fs::read_to_string(dir.join("meta.json"))?,
    )
    .map_err(|e| DensityError::BadCheckpoint(e.to_string()))?;
    let mut rng = Stream::from_seed(0);
    let mut model = CvaeModel::new(
        sidecar.cond_dim,
        sidecar.out_dim,
        sidecar.hidden_dim,
        sidecar.depth,
        sidecar.kl_weight,
        &mut rng,
    )?;
    let (enc, _, _) = params::load_checkpoint(&dir.join("encoder.ckpt"))?;
    let (dec, _, _) = params::load_checkpoint(&dir.join("decoder.ckpt"))?;
    if enc.len() != model.enc_params.len() || dec.len() != model.dec_params.len() {
        return Err(DensityError::BadCheckpoint(
            "parameter count does not match sidecar dims".into(),
        ));
    }
    model.enc_params = enc;
    model.dec_params = dec;
    Ok((model, sidecar.dataset_hash, sidecar.stats))
}
