//! Mini-batch training with Adam on the reconstruction MSE.
//!
//! Shuffling, initialization and batching are driven by ChaCha streams derived
//! from the run seed, so two runs with the same inputs produce bit-identical
//! loss trajectories and checkpoints. Checkpoints carry the optimizer moments
//! and the history so far, which is what [`Trainer::resume`] needs.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetBundle;
use crate::error::{Error, Result};
use crate::evaluation::{cosine_similarity, nmse, reconstruct_all};
use crate::model::{Autoencoder, Checkpoint, Param, Parametric, Scalar, TrainingState};

/// Mean squared error over every element, and its gradient with respect to `output`.
pub fn mse_loss<F: Scalar>(output: &Array4<F>, target: &Array4<F>) -> (F, Array4<F>) {
    let n = F::of(output.len() as f64);
    let diff = output - target;
    let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
    let grad = diff * (F::of(2.0) / n);
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per trainable parameter in visiting order.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<(String, ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new<M: Parametric<F> + ?Sized>(config: AdamConfig, model: &M) -> Self {
        let mut moments = Vec::new();
        model.visit("", &mut |name, p| {
            if p.trainable {
                moments.push((name.to_string(), ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
        });
        Adam { config, step: 0, moments }
    }

    /// Applies one update from the gradients currently accumulated in `model`.
    pub fn update<M: Parametric<F> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr_t = c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let (b1, b2, eps, lr_t) = (F::of(c.beta1), F::of(c.beta2), F::of(c.epsilon), F::of(lr_t));
        let one = F::one();
        let mut it = self.moments.iter_mut();
        model.visit_mut("", &mut |_, p: &mut Param<F>| {
            if !p.trainable {
                return;
            }
            let (_, m, v) = it.next().expect("optimizer built for this model");
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= lr_t * *m / (v.sqrt() + eps);
            });
        });
    }

    fn export(&self, ck: &mut Checkpoint) {
        for (name, m, v) in &self.moments {
            ck.push_extra(format!("adam.m.{name}"), m.mapv(|x| x.as_f64() as f32));
            ck.push_extra(format!("adam.v.{name}"), v.mapv(|x| x.as_f64() as f32));
        }
    }

    fn import(&mut self, ck: &Checkpoint, step: u64) -> Result<()> {
        let m_all = ck.extras("adam.m.");
        let v_all = ck.extras("adam.v.");
        for (name, m, v) in &mut self.moments {
            let (Some(ms), Some(vs)) = (m_all.get(name.as_str()), v_all.get(name.as_str())) else {
                return Err(Error::Config(format!("checkpoint has no optimizer state for '{name}'")));
            };
            if ms.shape() != m.shape() || vs.shape() != v.shape() {
                return Err(Error::shape(format!("{:?}", m.shape()), format!("{:?}", ms.shape())));
            }
            *m = ms.mapv(|x| F::of(x as f64));
            *v = vs.mapv(|x| F::of(x as f64));
        }
        self.step = step;
        Ok(())
    }
}

/// Scales all trainable gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients<F: Scalar, M: Parametric<F> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, p| {
        if p.trainable {
            sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::of(max_norm / norm);
        model.visit_mut("", &mut |_, p| {
            if p.trainable {
                p.grad.mapv_inplace(|g| g * scale);
            }
        });
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 250,
            optimizer: AdamConfig::default(),
            seed: 2024,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be positive and finite")));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse_db: f64,
    pub val_rho: f64,
    /// Wall-clock seconds; kept out of checkpoints and CSV so artifacts stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Loss of the first mini-batch before any update.
    pub initial_train_loss: Option<f64>,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_nmse_db,val_rho";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_nmse_db, r.val_rho));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::Config("history CSV has an unexpected header".into()));
        }
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Config(format!("bad history row '{line}'"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    train_loss: f[1].parse().map_err(|_| bad())?,
                    val_nmse_db: f[2].parse().map_err(|_| bad())?,
                    val_rho: f[3].parse().map_err(|_| bad())?,
                    seconds: 0.0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainHistory { initial_train_loss: None, records })
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().min_by(|a, b| a.val_nmse_db.total_cmp(&b.val_nmse_db))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    state: TrainingState,
    train: TrainConfig,
    history: TrainHistory,
    role: String,
}

/// Validation NMSE (dB) and ρ on normalized images.
pub fn validation_metrics<F: Scalar>(model: &Autoencoder<F>, images: &Array4<f32>) -> Result<(f64, f64)> {
    let recon = reconstruct_all(model, images, 250)?;
    let db = nmse(images.view(), recon.view())?;
    let rho = cosine_similarity(images.view(), recon.view())?.rho;
    Ok((db, rho))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Autoencoder<f32>,
    pub history: TrainHistory,
    optimizer: Adam<f32>,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(model: Autoencoder<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.optimizer, &model);
        Ok(Trainer { config, model, history: TrainHistory::default(), optimizer, best: None })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. `config.epochs`
    /// is the total target, so epochs already done are not repeated.
    pub fn resume(checkpoint: &Checkpoint, mut config: TrainConfig) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(checkpoint.metadata.clone())
            .map_err(|e| Error::Config(format!("checkpoint carries no training state: {e}")))?;
        config.validate()?;
        config.seed = meta.train.seed;
        let model = checkpoint.to_model::<f32>()?;
        let mut optimizer = Adam::new(config.optimizer, &model);
        optimizer.import(checkpoint, meta.state.optimizer_step)?;
        Ok(Trainer { config, model, history: meta.history, optimizer, best: None })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.records.len()
    }

    pub fn optimizer_step(&self) -> u64 {
        self.optimizer.step
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `train` followed by validation on `val`.
    pub fn run_epoch(&mut self, train: &Array4<f32>, val: &Array4<f32>) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epochs_done() + 1;
        let order = self.epoch_order(epoch, train.dim().0);
        let mut total = 0.0;
        let mut seen = 0usize;
        for (step, batch_idx) in order.chunks(self.config.batch_size).enumerate() {
            let x = train.select(Axis(0), batch_idx);
            self.model.zero_grad();
            let out = self.model.forward_train(&x)?;
            let (loss, grad) = mse_loss(&out, &x);
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss });
            }
            if self.history.initial_train_loss.is_none() {
                self.history.initial_train_loss = Some(loss);
            }
            self.model.backward(&grad);
            if let Some(cap) = self.config.clip_grad_norm {
                clip_gradients(&mut self.model, cap);
            }
            self.optimizer.update(&mut self.model);
            total += loss * batch_idx.len() as f64;
            seen += batch_idx.len();
        }
        let (val_nmse_db, val_rho) = validation_metrics(&self.model, val)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / seen.max(1) as f64,
            val_nmse_db,
            val_rho,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.history.records.push(record.clone());
        if self.history.best().map(|b| b.epoch) == Some(epoch) {
            self.best = Some(self.snapshot("best"));
        }
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are recorded, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        bundle: &DatasetBundle,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done() < self.config.epochs {
            let record = self.run_epoch(&bundle.train, &bundle.val)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    fn snapshot(&self, role: &str) -> Checkpoint {
        let last = self.history.records.last();
        let meta = CheckpointMeta {
            state: TrainingState {
                epoch: last.map_or(0, |r| r.epoch),
                optimizer_step: self.optimizer.step,
                seed: self.config.seed,
                val_nmse_db: last.map_or(f64::NAN, |r| r.val_nmse_db),
            },
            train: self.config.clone(),
            history: self.history.clone(),
            role: role.to_string(),
        };
        let mut ck = Checkpoint::from_model(&self.model, serde_json::to_value(meta).expect("serializable metadata"));
        self.optimizer.export(&mut ck);
        ck
    }

    /// Checkpoint of the current state, resumable.
    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot("final")
    }

    /// Checkpoint from the epoch with the lowest validation NMSE so far.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// Writes `best.ck`, `final.ck` and `history.csv` into `dir`.
    pub fn save_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint().save(&dir.join("final.ck"))?;
        if let Some(best) = &self.best {
            best.save(&dir.join("best.ck"))?;
        }
        std::fs::write(dir.join("history.csv"), self.history.to_csv())?;
        Ok(())
    }
}

/// Reads the history stored in a trainer checkpoint.
pub fn checkpoint_history(checkpoint: &Checkpoint) -> Option<TrainHistory> {
    checkpoint.metadata.get("history").and_then(|h| serde_json::from_value(h.clone()).ok())
}

/// A differentiable objective whose parameters can be probed by finite differences.
pub trait GradientProbe: Parametric<f64> {
    fn loss(&mut self, input: &Array4<f64>) -> Result<f64>;
    /// Loss, with analytic gradients accumulated into the parameters' `grad`.
    fn loss_and_grad(&mut self, input: &Array4<f64>) -> Result<f64>;
}

impl GradientProbe for Autoencoder<f64> {
    fn loss(&mut self, input: &Array4<f64>) -> Result<f64> {
        let out = self.forward_train(input)?;
        Ok(mse_loss(&out, input).0)
    }

    fn loss_and_grad(&mut self, input: &Array4<f64>) -> Result<f64> {
        self.zero_grad();
        let out = self.forward_train(input)?;
        let (loss, grad) = mse_loss(&out, input);
        self.backward(&grad);
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    /// Largest analytic gradient magnitude, for scale-aware comparisons.
    pub gradient_scale: f64,
    /// Per tensor: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub tensor_errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }

    /// Largest absolute error relative to the largest gradient.
    pub fn scaled_error(&self) -> f64 {
        if self.gradient_scale == 0.0 {
            self.max_absolute_error
        } else {
            self.max_absolute_error / self.gradient_scale
        }
    }
}

/// Compares analytic gradients with central differences on every trainable scalar.
pub fn gradient_check<M: GradientProbe + ?Sized>(
    model: &mut M,
    input: &Array4<f64>,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    model.loss_and_grad(input)?;
    let mut targets = Vec::new();
    model.visit("", &mut |name, p| {
        if p.trainable {
            for (i, &g) in p.grad.iter().enumerate() {
                targets.push((name.to_string(), i, g));
            }
        }
    });
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: (String::new(), 0),
        gradient_scale: 0.0,
        tensor_errors: Vec::new(),
    };
    let mut sums: Vec<(String, f64, f64, f64)> = Vec::new();
    let h = options.step;
    for (name, index, analytic) in targets {
        let nudge = |model: &mut M, delta: f64| {
            model.visit_mut("", &mut |n, p| {
                if n == name {
                    p.value.as_slice_mut().expect("standard layout")[index] += delta;
                }
            })
        };
        nudge(model, h);
        let plus = model.loss(input)?;
        nudge(model, -2.0 * h);
        let minus = model.loss(input)?;
        nudge(model, h);
        let numeric = (plus - minus) / (2.0 * h);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(options.floor);
        match sums.last_mut() {
            Some(last) if last.0 == name => {
                last.1 += (analytic - numeric).powi(2);
                last.2 += analytic * analytic;
                last.3 += numeric * numeric;
            }
            _ => sums.push((name.clone(), (analytic - numeric).powi(2), analytic * analytic, numeric * numeric)),
        }
        report.checked += 1;
        report.gradient_scale = report.gradient_scale.max(analytic.abs());
        report.max_absolute_error = report.max_absolute_error.max(abs);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = (name, index);
        }
    }
    report.tensor_errors = sums
        .into_iter()
        .map(|(n, d, a, b)| (n, d.sqrt() / a.sqrt().max(b.sqrt()).max(options.floor)))
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn mse_gradient_matches_definition() {
        let out = Array4::from_shape_fn((2, 1, 2, 2), |(a, _, b, c)| (a + b + c) as f64 * 0.1);
        let target = Array4::from_elem((2, 1, 2, 2), 0.2);
        let (loss, grad) = mse_loss(&out, &target);
        let expected: f64 = out.iter().map(|v| (v - 0.2) * (v - 0.2)).sum::<f64>() / 8.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!((grad[[1, 0, 1, 1]] - 2.0 * (0.3 - 0.2) / 8.0).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![Param::<f64>::filled(&[3], 1.0)];
        p[0].grad = ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![0.5, -2.0, 0.0]).unwrap();
        struct Holder(Vec<Param<f64>>);
        impl Parametric<f64> for Holder {
            fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
                f("w", &self.0[0])
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
                f("w", &mut self.0[0])
            }
        }
        let mut h = Holder(p);
        let mut adam = Adam::new(AdamConfig::default(), &h);
        adam.update(&mut h);
        let w = &h.0[0].value;
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut model = Autoencoder::<f64>::new(ModelConfig::csinet(8).with_spatial(4, 4), 3).unwrap();
        let x = Array4::from_shape_fn((2, 2, 4, 4), |(a, b, c, d)| ((a + b * 3 + c * 5 + d) % 7) as f64 / 7.0);
        model.loss_and_grad(&x).unwrap();
        clip_gradients(&mut model, 1e-6);
        let after = clip_gradients(&mut model, f64::INFINITY);
        assert!((after - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn history_csv_round_trip() {
        let history = TrainHistory {
            initial_train_loss: None,
            records: vec![
                EpochRecord { epoch: 1, train_loss: 0.5, val_nmse_db: -3.25, val_rho: 0.75, seconds: 0.0 },
                EpochRecord { epoch: 2, train_loss: 0.25, val_nmse_db: -6.5, val_rho: 0.875, seconds: 0.0 },
            ],
        };
        assert_eq!(TrainHistory::from_csv(&history.to_csv()).unwrap(), history);
        assert_eq!(history.best().unwrap().epoch, 2);
        assert!(TrainHistory::from_csv("a,b\n").is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.learning_rate = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn csinet_miniature_gradients_agree_at_small_step() {
        let mut model = Autoencoder::<f64>::new(ModelConfig::csinet(8).with_spatial(4, 4), 5).unwrap();
        let x = Array4::from_shape_fn((3, 2, 4, 4), |(a, b, c, d)| 0.5 + 0.4 * ((a * 7 + b * 5 + c * 3 + d) as f64).sin());
        let options = GradCheckOptions { step: 1e-5, ..Default::default() };
        let report = gradient_check(&mut model, &x, options).unwrap();
        assert!(report.scaled_error() < 1e-6, "{report:?}");
    }
}
