//! Loss assembly, fold planning, and the deterministic training loop.

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reconstruction weight of the composite objective.
pub const LAMBDA1: f64 = 0.15;

/// KL weight, tied to `LAMBDA1` by a fixed e^-2 factor.
pub fn lambda2() -> f64 {
    LAMBDA1 * (-2.0f64).exp()
}

/// Turn weights w(y) = exp(|y|^alpha), computed off-tape: the weights are
/// data-dependent constants, not a gradient path.
pub fn turn_weights<T: Scalar>(y: &Tensor<T>, alpha: f64) -> Tensor<T> {
    y.map(|v| T::from_f64(v.as_f64().abs().powf(alpha).exp()))
}

/// Weighted prediction loss: sum_i w(y_i)(yhat_i - y_i)^2 / sum_i w(y_i).
pub fn prediction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    yhat: Var,
    y: &Tensor<T>,
    alpha: f64,
) -> Result<Var> {
    let mut acc = WeightedSse::new();
    acc.add(tape, yhat, y, alpha)?;
    acc.finish(tape)
}

/// Accumulates the weighted prediction loss across timesteps so the
/// normalization spans every (window, timestep) sample of a batch.
pub struct WeightedSse {
    terms: Option<Var>,
    weight_sum: f64,
    samples: usize,
}

impl Default for WeightedSse {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightedSse {
    pub fn new() -> Self {
        WeightedSse { terms: None, weight_sum: 0.0, samples: 0 }
    }

    pub fn add<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        yhat: Var,
        y: &Tensor<T>,
        alpha: f64,
    ) -> Result<()> {
        if tape.value(yhat).shape() != y.shape() {
            return Err(Error::dim(format!(
                "prediction/target shape mismatch: {:?} vs {:?}",
                tape.value(yhat).shape(),
                y.shape()
            )));
        }
        if y.numel() == 0 {
            return Err(Error::data("prediction loss over an empty batch"));
        }
        let w = turn_weights(y, alpha);
        self.weight_sum += w.data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.samples += y.numel();
        let target = tape.leaf(y.clone());
        let weights = tape.leaf(w);
        let d = tape.sub(yhat, target);
        let sq = tape.square(d);
        let wsq = tape.mul(sq, weights);
        let s = tape.sum_all(wsq);
        self.terms = Some(match self.terms {
            None => s,
            Some(t) => tape.add(t, s),
        });
        Ok(())
    }

    pub fn finish<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        match self.terms {
            None => Err(Error::data("prediction loss over an empty sequence")),
            Some(t) => Ok(tape.scale(t, 1.0 / self.weight_sum)),
        }
    }
}

/// KL divergence of N(mu, sigma^2) from N(0,1), averaged over batch and
/// latent dimensions: mean of (mu^2 + sigma^2 - log sigma^2 - 1) / 2.
pub fn kl_term<T: Scalar>(tape: &mut Tape<T>, mu: Var, logv: Var) -> Var {
    let mu2 = tape.square(mu);
    let var = tape.exp(logv);
    let a = tape.add(mu2, var);
    let b = tape.sub(a, logv);
    let c = tape.add_const(b, -1.0);
    let m = tape.mean_all(c);
    tape.scale(m, 0.5)
}

/// Composite VAE regularizer: LAMBDA1 * mean squared reconstruction error
/// plus lambda2 * KL.
pub fn vae_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, recon: Var, mu: Var, logv: Var) -> Var {
    let d = tape.sub(x, recon);
    let sq = tape.square(d);
    let rec = tape.mean_all(sq);
    let kl = kl_term(tape, mu, logv);
    let a = tape.scale(rec, LAMBDA1);
    let b = tape.scale(kl, lambda2());
    tape.add(a, b)
}

/// beta * L_vae + L_prediction, with beta restricted to the two supported
/// operating points (0: plain CNN, 1: VAE).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    vae: Option<Var>,
    beta: f64,
) -> Result<Var> {
    if beta == 0.0 {
        Ok(pred)
    } else if beta == 1.0 {
        let v = vae.ok_or_else(|| Error::config("beta = 1 needs the VAE loss terms"))?;
        Ok(tape.add(v, pred))
    } else {
        Err(Error::config(format!("beta must be 0 or 1, got {beta}")))
    }
}

/// Contiguous-in-time partition of `n` sequences into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

/// Sequence indices each role sees for one cross-validation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions [0, n) into k contiguous folds of near-equal size. Sequences
/// are temporal, so no shuffling happens here or anywhere downstream.
pub fn make_folds(n: usize, k: usize) -> Result<FoldPlan> {
    if k == 0 || n < k {
        return Err(Error::data(format!("cannot make {k} folds from {n} sequences")));
    }
    let folds = (0..k).map(|i| (i * n / k..(i + 1) * n / k).collect()).collect();
    Ok(FoldPlan { folds })
}

/// Roles for the run that holds out `test_fold`: the remaining folds form
/// the pool, whose last 10% of sequences (at least one) become validation.
pub fn fold_split(plan: &FoldPlan, test_fold: usize) -> Result<FoldSplit> {
    if test_fold >= plan.folds.len() {
        return Err(Error::config(format!(
            "test fold {test_fold} out of range (have {})",
            plan.folds.len()
        )));
    }
    let mut pool: Vec<usize> = Vec::new();
    for (i, f) in plan.folds.iter().enumerate() {
        if i != test_fold {
            pool.extend_from_slice(f);
        }
    }
    let val_n = ((pool.len() as f64) * 0.1).round().max(1.0) as usize;
    if val_n >= pool.len() {
        return Err(Error::data("pool too small to carve out a validation split"));
    }
    let train = pool[..pool.len() - val_n].to_vec();
    let val = pool[pool.len() - val_n..].to_vec();
    Ok(FoldSplit { train, val, test: plan.folds[test_fold].clone() })
}

/// One frame-major training batch: `rgb[t]` stacks every window's frame t
/// as [N,3,H,W]; `labels[t]` is the matching [N,1] steering column.
pub struct FrameBatch<T: Scalar> {
    pub rgb: Vec<Tensor<T>>,
    pub modality: Option<Vec<Tensor<T>>>,
    pub labels: Vec<Tensor<T>>,
}

/// Window supplier for one dataset role. Implementations expose only the
/// windows of their role, which is what keeps the test fold out of reach
/// of the training loop by construction.
pub trait BatchSource<T: Scalar> {
    fn num_windows(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Channel count of the second stream (0 when absent).
    fn modality_channels(&self) -> usize;
    fn batch(&self, indices: &[usize]) -> Result<FrameBatch<T>>;
}

/// Stacks equal-shape [c,h,w] frames into one [N,c,h,w] tensor.
pub fn stack_frames<T: Scalar>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| Error::data("stack of zero frames"))?;
    let shape = first.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("stack_frames wants [c,h,w] frames, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(frames.len() * first.numel());
    for f in frames {
        if f.shape() != shape {
            return Err(Error::dim(format!(
                "stack_frames shape mismatch: {:?} vs {shape:?}",
                f.shape()
            )));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::from_vec(&[frames.len(), shape[0], shape[1], shape[2]], data)
}

/// Training-run settings around a model choice. Defaults follow the
/// reference protocol: 100 Adam steps at 1e-3 on batches of 20 windows of
/// 16 frames.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Upper bound on windows evaluated for the per-step validation MSE;
    /// the subset is evenly spaced and fixed before the loop.
    pub val_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            steps: 100,
            batch: 20,
            seq_len: 16,
            lr: 1e-3,
            clip_norm: 10.0,
            val_windows: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.batch == 0 || self.seq_len == 0 {
            return Err(Error::config("steps, batch, and seq_len must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// One learning-curve row; `step` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Renders the learning curve in the `step,train_mse,val_mse` layout.
pub fn format_curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,train_mse,val_mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.train_mse, r.val_mse));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutput<T: Scalar> {
    pub params: ParamSet<T>,
    pub curve: Vec<CurveRow>,
}

fn check_source<T: Scalar>(cfg: &TrainConfig, src: &dyn BatchSource<T>, role: &str) -> Result<()> {
    if src.num_windows() == 0 {
        return Err(Error::data(format!("{role} set has no windows")));
    }
    if src.seq_len() != cfg.seq_len {
        return Err(Error::config(format!(
            "{role} windows are {} frames long but seq_len is {}",
            src.seq_len(),
            cfg.seq_len
        )));
    }
    if src.modality_channels() != cfg.model.modality.channels() {
        return Err(Error::config(format!(
            "{role} set carries {} modality channels but config modality {} wants {}",
            src.modality_channels(),
            cfg.model.modality,
            cfg.model.modality.channels()
        )));
    }
    Ok(())
}

/// Evenly spaced subset of [0, n), at most `cap` indices.
fn spaced_subset(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|j| j * n / cap).collect()
}

struct ForwardOutcome {
    ys: Vec<Var>,
    vae: Option<Var>,
}

/// Runs one batch through the model, collecting per-step outputs and, when
/// the encoder is variational, the averaged VAE loss term.
fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    cfg: &ModelConfig,
    batch: &FrameBatch<T>,
    seq_len: usize,
    eps_rng: Option<&mut Rng>,
) -> Result<ForwardOutcome> {
    if batch.rgb.len() != seq_len || batch.labels.len() != seq_len {
        return Err(Error::data(format!(
            "batch carries {} frames / {} label steps, expected {seq_len}",
            batch.rgb.len(),
            batch.labels.len()
        )));
    }
    let n = batch.rgb[0].shape()[0];
    let mut state = model::init_state(tape, cfg, n);
    let mut ys = Vec::with_capacity(seq_len);
    let mut vae_sum: Option<Var> = None;
    let mut eps_rng = eps_rng;
    for t in 0..seq_len {
        let modality_t = batch.modality.as_ref().map(|m| &m[t]);
        let eps = match (&cfg.encoder, eps_rng.as_deref_mut()) {
            (model::EncoderKind::Vae, Some(rng)) => {
                Some(Tensor::randn(&[n, crate::encoders::LATENT], 1.0, rng))
            }
            _ => None,
        };
        let out = model::model_step(tape, bp, cfg, &mut state, &batch.rgb[t], modality_t, eps.as_ref())?;
        ys.push(out.y);
        if let Some(aux) = out.vae {
            let v = vae_loss(tape, aux.input, aux.recon, aux.stats.mu, aux.stats.logv);
            vae_sum = Some(match vae_sum {
                None => v,
                Some(s) => tape.add(s, v),
            });
        }
    }
    let vae = vae_sum.map(|s| tape.scale(s, 1.0 / seq_len as f64));
    Ok(ForwardOutcome { ys, vae })
}

/// Unweighted MSE and MAE of the model over the given windows,
/// forward-only and deterministic (VAE runs at z = mu). Windows are
/// processed in index order in chunks of `chunk`, so the result is
/// independent of the chunk size.
pub fn evaluate_errors<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    src: &dyn BatchSource<T>,
    indices: &[usize],
    chunk: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::data("evaluation over zero windows"));
    }
    let chunk = chunk.max(1);
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut count = 0usize;
    for ids in indices.chunks(chunk) {
        let batch = src.batch(ids)?;
        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, params);
        let out = forward_batch(&mut tape, &bp, cfg, &batch, src.seq_len(), None)?;
        for (t, y) in out.ys.iter().enumerate() {
            let pred = tape.value(*y);
            let label = &batch.labels[t];
            for (p, l) in pred.data().iter().zip(label.data()) {
                let d = p.as_f64() - l.as_f64();
                sq += d * d;
                ab += d.abs();
                count += 1;
            }
        }
    }
    Ok((sq / count as f64, ab / count as f64))
}

/// Runs the full training loop. Parameters come from `cfg.model.seed`;
/// `seed` drives batch sampling and reparameterization draws. The returned
/// curve has exactly `cfg.steps` rows. Non-finite losses abort with a
/// step-stamped error rather than silently continuing.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_src: &dyn BatchSource<T>,
    val_src: &dyn BatchSource<T>,
    seed: u64,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    check_source(cfg, train_src, "train")?;
    check_source(cfg, val_src, "validation")?;

    let mut params: ParamSet<T> = model::init_model(&cfg.model)?;
    let names = params.trainable_names();
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_cfg, &params.select(&names));

    let root = Rng::new(seed);
    let mut batch_rng = root.derive(3);
    let mut eps_rng = root.derive(4);
    let val_ids = spaced_subset(val_src.num_windows(), cfg.val_windows);

    let beta = cfg.model.beta();
    let n_train = train_src.num_windows();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let ids: Vec<usize> = (0..cfg.batch).map(|_| batch_rng.below(n_train)).collect();
        let batch = train_src.batch(&ids)?;

        let mut tape = Tape::new();
        let bp = BoundParams::bind(&mut tape, &params);
        let out = forward_batch(&mut tape, &bp, &cfg.model, &batch, cfg.seq_len, Some(&mut eps_rng))?;

        let mut acc = WeightedSse::new();
        let mut sq = 0.0;
        let mut count = 0usize;
        for (t, y) in out.ys.iter().enumerate() {
            acc.add(&mut tape, *y, &batch.labels[t], cfg.model.alpha)?;
            for (p, l) in tape.value(*y).data().iter().zip(batch.labels[t].data()) {
                let d = p.as_f64() - l.as_f64();
                sq += d * d;
                count += 1;
            }
        }
        let train_mse = sq / count as f64;
        let pred = acc.finish(&mut tape)?;
        let loss = total_loss(&mut tape, pred, out.vae, beta)?;
        let loss_val = tape.value(loss).item().as_f64();
        if !loss_val.is_finite() {
            return Err(Error::numeric(format!("training diverged at step {step}: loss {loss_val}")));
        }

        let grads = tape.backward(loss);
        let mut grad_list: Vec<Tensor<T>> = names
            .iter()
            .map(|n| grads.dense(bp.var(n), params.get(n).expect("trainable exists").shape()))
            .collect();
        clip_global_norm(&mut grad_list, cfg.clip_norm);
        drop(tape);
        adam.step(&mut params.select_mut(&names), &grad_list);

        let (val_mse, _) = evaluate_errors(&cfg.model, &params, val_src, &val_ids, cfg.batch)?;
        curve.push(CurveRow { step, train_mse, val_mse });
    }
    Ok(TrainOutput { params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{INPUT_H, INPUT_W};
    use crate::model::{EncoderKind, FusionKind, Head, Modality};

    fn f64_tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let mut tape = f64_tape();
        let y = Tensor::from_vec(&[4], vec![0.3, -0.7, 0.1, 0.9]).unwrap();
        let yhat = tape.leaf(y.clone());
        let loss = prediction_loss(&mut tape, yhat, &y, 1.0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-15);
    }

    #[test]
    fn unit_error_at_zero_target_costs_one() {
        let mut tape = f64_tape();
        let y = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let yhat = tape.leaf(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let loss = prediction_loss(&mut tape, yhat, &y, 1.0).unwrap();
        assert!((tape.value(loss).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn turn_weighting_matches_the_closed_form() {
        // y = [0, 1], yhat = [0, 0], alpha = 1:
        // weights are [1, e], only the second errs -> e / (1 + e).
        let mut tape = f64_tape();
        let y = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let yhat = tape.leaf(Tensor::zeros(&[2]));
        let loss = prediction_loss(&mut tape, yhat, &y, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(loss).item() - e / (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn constant_magnitude_targets_reduce_to_plain_mse() {
        let mut rng = Rng::new(3);
        let signs: Vec<f64> = (0..16).map(|_| if rng.below(2) == 0 { 0.6 } else { -0.6 }).collect();
        let y = Tensor::from_vec(&[16], signs).unwrap();
        let pred: Tensor<f64> = Tensor::randn(&[16], 1.0, &mut rng);
        let mut tape = f64_tape();
        let yhat = tape.leaf(pred.clone());
        let loss = prediction_loss(&mut tape, yhat, &y, 1.3).unwrap();
        let mse = pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / 16.0;
        assert!((tape.value(loss).item() - mse).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant_and_even() {
        let mut rng = Rng::new(4);
        let y: Tensor<f64> = Tensor::randn(&[8], 0.5, &mut rng);
        let p: Tensor<f64> = Tensor::randn(&[8], 0.5, &mut rng);

        let eval = |pred: &Tensor<f64>, targ: &Tensor<f64>| -> f64 {
            let mut tape = f64_tape();
            let yhat = tape.leaf(pred.clone());
            let loss = prediction_loss(&mut tape, yhat, targ, 1.0).unwrap();
            tape.value(loss).item()
        };

        let base = eval(&p, &y);
        let perm: Vec<usize> = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let yp = Tensor::from_vec(&[8], perm.iter().map(|&i| y.data()[i]).collect()).unwrap();
        let pp = Tensor::from_vec(&[8], perm.iter().map(|&i| p.data()[i]).collect()).unwrap();
        assert!((eval(&pp, &yp) - base).abs() < 1e-12);

        let yn = y.map(|v| -v);
        let pn = p.map(|v| -v);
        assert!((eval(&pn, &yn) - base).abs() < 1e-12);
    }

    #[test]
    fn vae_loss_zero_case_and_unit_reconstruction_error() {
        let mut tape = f64_tape();
        let x = tape.leaf(Tensor::full(&[1, 2, 3, 3], 0.25));
        let mu = tape.leaf(Tensor::zeros(&[1, 4]));
        let logv = tape.leaf(Tensor::zeros(&[1, 4]));
        let zero = vae_loss(&mut tape, x, x, mu, logv);
        assert!(tape.value(zero).item().abs() < 1e-15);

        let recon = tape.leaf(Tensor::full(&[1, 2, 3, 3], 1.25));
        let unit = vae_loss(&mut tape, x, recon, mu, logv);
        assert!((tape.value(unit).item() - LAMBDA1).abs() < 1e-12);
    }

    #[test]
    fn kl_example_single_active_dimension() {
        // mu = [1, 0, ..., 0] over 32 dims, sigma = 1, x = recon:
        // loss = lambda2 * (1/2) / 32.
        let mut tape = f64_tape();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let mut mu_t = Tensor::zeros(&[1, 32]);
        mu_t.data_mut()[0] = 1.0;
        let mu = tape.leaf(mu_t);
        let logv = tape.leaf(Tensor::zeros(&[1, 32]));
        let loss = vae_loss(&mut tape, x, x, mu, logv);
        assert!((tape.value(loss).item() - lambda2() * 0.5 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_the_prior() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let mu_t: Tensor<f64> = Tensor::randn(&[2, 6], 1.5, &mut rng);
            let lv_t: Tensor<f64> = Tensor::randn(&[2, 6], 1.5, &mut rng);
            let mut tape = f64_tape();
            let mu = tape.leaf(mu_t.clone());
            let lv = tape.leaf(lv_t.clone());
            let kl = kl_term(&mut tape, mu, lv);
            let v = tape.value(kl).item();
            assert!(v >= 0.0, "kl {v} negative for mu {mu_t:?} logv {lv_t:?}");
        }
        let mut tape = f64_tape();
        let mu = tape.leaf(Tensor::zeros(&[3, 5]));
        let lv = tape.leaf(Tensor::zeros(&[3, 5]));
        let kl = kl_term(&mut tape, mu, lv);
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn beta_switch_is_exact() {
        let mut tape = f64_tape();
        let pred = tape.leaf(Tensor::scalar(0.3));
        let vae = tape.leaf(Tensor::scalar(0.2));
        let off = total_loss(&mut tape, pred, Some(vae), 0.0).unwrap();
        assert_eq!(tape.value(off).item(), 0.3);
        let on = total_loss(&mut tape, pred, Some(vae), 1.0).unwrap();
        assert!((tape.value(on).item() - 0.5).abs() < 1e-15);
        assert!(total_loss(&mut tape, pred, Some(vae), 0.5).is_err());
        assert!(total_loss(&mut tape, pred, None, 1.0).is_err());
    }

    #[test]
    fn folds_partition_the_index_range() {
        let plan = make_folds(100, 10).unwrap();
        assert_eq!(plan.folds.len(), 10);
        assert!(plan.folds.iter().all(|f| f.len() == 10));

        let uneven = make_folds(43, 10).unwrap();
        let mut all: Vec<usize> = uneven.folds.iter().flatten().copied().collect();
        assert_eq!(all.len(), 43);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all, (0..43).collect::<Vec<_>>());
        for f in &uneven.folds {
            assert!(f.windows(2).all(|w| w[1] == w[0] + 1), "folds must be contiguous");
        }
        assert!(make_folds(9, 10).is_err());
        assert!(make_folds(5, 0).is_err());
    }

    #[test]
    fn fold_split_carves_the_last_tenth_for_validation() {
        let plan = make_folds(40, 10).unwrap();
        let split = fold_split(&plan, 0).unwrap();
        assert_eq!(split.test, vec![0, 1, 2, 3]);
        assert_eq!(split.train.len(), 32);
        assert_eq!(split.val.len(), 4);
        assert_eq!(split.val, vec![36, 37, 38, 39]);
        let mut joined = split.train.clone();
        joined.extend(&split.val);
        joined.extend(&split.test);
        joined.sort_unstable();
        assert_eq!(joined, (0..40).collect::<Vec<_>>());
        assert!(fold_split(&plan, 10).is_err());
    }

    /// In-memory window store: flow u-channel is the label everywhere, so
    /// the mapping is linearly solvable from the modality stream.
    struct ToySource {
        rgb: Vec<Vec<Tensor<f32>>>,
        flow: Option<Vec<Vec<Tensor<f32>>>>,
        labels: Vec<Vec<f32>>,
        seq_len: usize,
    }

    impl ToySource {
        fn new(windows: usize, seq_len: usize, with_flow: bool, seed: u64) -> Self {
            let mut rng = Rng::new(seed);
            let mut rgb = Vec::new();
            let mut flow = Vec::new();
            let mut labels = Vec::new();
            for w in 0..windows {
                let mut frames = Vec::new();
                let mut flows = Vec::new();
                let mut labs = Vec::new();
                for t in 0..seq_len {
                    let y = 0.6 * ((w as f32) * 0.8 + (t as f32) * 0.35).sin();
                    labs.push(y);
                    frames.push(Tensor::rand_uniform(&[3, INPUT_H, INPUT_W], 0.0, 1.0, &mut rng));
                    if with_flow {
                        let mut f = Tensor::full(&[2, INPUT_H, INPUT_W], y);
                        for v in &mut f.data_mut()[INPUT_H * INPUT_W..] {
                            *v = 0.0;
                        }
                        flows.push(f);
                    }
                }
                rgb.push(frames);
                flow.push(flows);
                labels.push(labs);
            }
            ToySource { rgb, flow: with_flow.then_some(flow), labels, seq_len }
        }
    }

    impl BatchSource<f32> for ToySource {
        fn num_windows(&self) -> usize {
            self.rgb.len()
        }
        fn seq_len(&self) -> usize {
            self.seq_len
        }
        fn modality_channels(&self) -> usize {
            if self.flow.is_some() {
                2
            } else {
                0
            }
        }
        fn batch(&self, indices: &[usize]) -> Result<FrameBatch<f32>> {
            let mut rgb = Vec::new();
            let mut modality = self.flow.as_ref().map(|_| Vec::new());
            let mut labels = Vec::new();
            for t in 0..self.seq_len {
                let frames: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.rgb[i][t]).collect();
                rgb.push(stack_frames(&frames)?);
                if let (Some(out), Some(fl)) = (modality.as_mut(), self.flow.as_ref()) {
                    let frames: Vec<&Tensor<f32>> = indices.iter().map(|&i| &fl[i][t]).collect();
                    out.push(stack_frames(&frames)?);
                }
                labels.push(Tensor::from_vec(
                    &[indices.len(), 1],
                    indices.iter().map(|&i| self.labels[i][t]).collect(),
                )?);
            }
            Ok(FrameBatch { rgb, modality, labels })
        }
    }

    fn tiny_cfg(steps: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderKind::Cnn,
                head: Head::Ncp,
                fusion: FusionKind::Early,
                modality: Modality::Flow,
                ..ModelConfig::default()
            },
            steps,
            batch,
            seq_len: 4,
            lr: 1e-3,
            clip_norm: 10.0,
            val_windows: 2,
        }
    }

    #[test]
    fn default_protocol_matches_the_reference() {
        let d = TrainConfig::default();
        assert_eq!(d.steps, 100);
        assert_eq!(d.batch, 20);
        assert_eq!(d.seq_len, 16);
        assert!((d.lr - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn curve_csv_has_one_row_per_step_plus_header() {
        let rows = vec![
            CurveRow { step: 1, train_mse: 0.5, val_mse: 0.25 },
            CurveRow { step: 2, train_mse: 0.125, val_mse: 0.0625 },
        ];
        let csv = format_curve_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,train_mse,val_mse");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "1,0.5,0.25");
    }

    #[test]
    fn training_is_deterministic_and_fills_the_curve() {
        let src = ToySource::new(6, 4, true, 10);
        let val = ToySource::new(2, 4, true, 11);
        let cfg = tiny_cfg(3, 2);
        let a = train(&cfg, &src, &val, 42).unwrap();
        let b = train(&cfg, &src, &val, 42).unwrap();
        assert_eq!(a.curve.len(), 3);
        assert_eq!(a.curve, b.curve);
        let bytes = |ps: &ParamSet<f32>| -> Vec<u32> {
            ps.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bytes(&a.params), bytes(&b.params));

        let c = train(&cfg, &src, &val, 43).unwrap();
        assert_ne!(bytes(&a.params), bytes(&c.params));
    }

    #[test]
    fn descent_on_a_linearly_solvable_toy() {
        // Per-step curve entries use different random batches, so descent
        // is judged on the whole train set before vs after.
        let src = ToySource::new(8, 4, true, 20);
        let val = ToySource::new(2, 4, true, 21);
        let cfg = TrainConfig { lr: 3e-3, ..tiny_cfg(25, 4) };
        let ids: Vec<usize> = (0..src.num_windows()).collect();
        let init: ParamSet<f32> = model::init_model(&cfg.model).unwrap();
        let (before, _) = evaluate_errors(&cfg.model, &init, &src, &ids, 4).unwrap();
        let out = train(&cfg, &src, &val, 7).unwrap();
        let (after, _) = evaluate_errors(&cfg.model, &out.params, &src, &ids, 4).unwrap();
        assert!(
            after < before,
            "train MSE should fall on the solvable toy: before {before}, after {after}"
        );
    }

    #[test]
    fn divergence_aborts_with_a_step_stamped_error() {
        let src = ToySource::new(4, 4, true, 30);
        let val = ToySource::new(2, 4, true, 31);
        let cfg = TrainConfig { lr: 1e18, ..tiny_cfg(6, 1) };
        let err = train(&cfg, &src, &val, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("diverged at step"), "unexpected error: {msg}");
    }

    #[test]
    fn mismatched_sources_are_rejected() {
        let with_flow = ToySource::new(4, 4, true, 40);
        let no_flow = ToySource::new(4, 4, false, 41);
        let cfg = tiny_cfg(1, 1);
        assert!(train(&cfg, &no_flow, &with_flow, 1).is_err());
        assert!(train(&cfg, &with_flow, &no_flow, 1).is_err());
        let short = ToySource::new(4, 3, true, 42);
        assert!(train(&cfg, &short, &with_flow, 1).is_err());
    }

    #[test]
    fn evaluation_is_chunk_size_invariant() {
        let src = ToySource::new(5, 4, true, 50);
        let cfg = tiny_cfg(1, 1);
        let params: ParamSet<f32> = model::init_model(&cfg.model).unwrap();
        let ids: Vec<usize> = (0..5).collect();
        let whole = evaluate_errors(&cfg.model, &params, &src, &ids, 5).unwrap();
        let single = evaluate_errors(&cfg.model, &params, &src, &ids, 1).unwrap();
        let ragged = evaluate_errors(&cfg.model, &params, &src, &ids, 3).unwrap();
        assert_eq!(whole, single);
        assert_eq!(whole, ragged);
        assert!(whole.0.is_finite() && whole.1.is_finite());
        assert!(evaluate_errors(&cfg.model, &params, &src, &[], 2).is_err());
    }
}
