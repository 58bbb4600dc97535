use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_center, loss_mse, loss_softmax, CenterState};
use super::net::{LayerKind, Mode, Network};
use super::optim::{Optimizer, OptimizerKind};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Softmax,
    /// Softmax first, then softmax plus centre loss on the layer feeding the
    /// classification head.
    SoftmaxCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Main schedule length; for `SoftmaxCenter`, the softmax-only phase.
    pub epochs: usize,
    pub loss: LossKind,
    pub center_loss_weight: f64,
    pub center_update_rate: f64,
    /// Centre phase stops after this many epochs without a lower training loss.
    pub patience_epochs: usize,
    /// Hard cap on the centre phase.
    pub max_center_epochs: usize,
    /// Nesterov only: ×0.1 at 50% and again at 75% of `epochs`.
    pub lr_decay: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn landmark(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::nesterov(),
            batch_size: 128,
            epochs,
            loss: LossKind::Mse,
            center_loss_weight: 0.0,
            center_update_rate: 0.5,
            patience_epochs: 50,
            max_center_epochs: 0,
            lr_decay: true,
            seed,
        }
    }

    pub fn descriptor(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::adam(),
            batch_size: 128,
            epochs,
            loss: LossKind::SoftmaxCenter,
            center_loss_weight: 0.003,
            center_update_rate: 0.5,
            patience_epochs: 50,
            max_center_epochs: 1000,
            lr_decay: false,
            seed,
        }
    }

    pub fn side(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::adam(),
            loss: LossKind::Softmax,
            max_center_epochs: 0,
            ..Self::descriptor(epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::BadTrainConfig("batch_size must be at least 1".into()));
        }
        if !(self.center_loss_weight >= 0.0) {
            return Err(Error::BadTrainConfig("center_loss_weight must be non-negative".into()));
        }
        if !(self.optimizer.learning_rate() >= 0.0) {
            return Err(Error::BadTrainConfig("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    fn rate(&self, epoch: usize) -> f64 {
        let lr = self.optimizer.learning_rate();
        if !self.lr_decay || !matches!(self.optimizer, OptimizerKind::Nesterov { .. }) || self.epochs == 0 {
            return lr;
        }
        let f = epoch as f64 / self.epochs as f64;
        if f >= 0.75 {
            lr * 0.01
        } else if f >= 0.5 {
            lr * 0.1
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Row-major `samples × width`.
    Values { width: usize, data: Vec<f32> },
    Classes { classes: usize, labels: Vec<usize> },
}

/// Training samples stored as `f32` rows of `c·h·w` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: [usize; 3],
    pub inputs: Vec<f32>,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        let n: usize = self.sample_shape.iter().product();
        if n == 0 {
            0
        } else {
            self.inputs.len() / n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyInput("training set"));
        }
        let ok = match &self.targets {
            Targets::Values { width, data } => data.len() == n * width,
            Targets::Classes { classes, labels } => {
                if let Some(&label) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::BadLabel { label, classes: *classes });
                }
                labels.len() == n
            }
        };
        if !ok || self.inputs.len() != n * self.sample_shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch("inputs and targets disagree on sample count".into()));
        }
        Ok(())
    }

    fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let n: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(self.inputs[i * n..(i + 1) * n].iter().map(|&v| T::of(v as f64)));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("batch shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:e}\n", r.epoch, r.phase, r.loss));
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

pub struct Trained<T> {
    pub net: Network<T>,
    pub log: TrainLog,
    pub centers: Option<CenterState>,
}

fn epoch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((batch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Mini-batch training; a deterministic function of (net, data, config).
pub fn train<T: Scalar>(mut net: Network<T>, data: &Dataset, config: &TrainConfig) -> Result<Trained<T>> {
    config.validate()?;
    data.validate()?;
    if data.sample_shape != net.spec().input {
        return Err(Error::ShapeMismatch(format!(
            "samples are {:?}, network expects {:?}",
            data.sample_shape,
            net.spec().input
        )));
    }
    let out_layer = net.spec().layers.len() - 1;
    let out_width = net.output_width();
    match (&data.targets, config.loss) {
        (Targets::Values { width, .. }, LossKind::Mse) if *width == out_width => {}
        (Targets::Classes { classes, .. }, LossKind::Softmax | LossKind::SoftmaxCenter) if *classes == out_width => {}
        _ => return Err(Error::BadTrainConfig("targets do not match the loss or the output width".into())),
    }
    let feature_layer = match config.loss {
        LossKind::SoftmaxCenter => {
            let i = net.spec().layers[out_layer].input.unwrap_or(out_layer.saturating_sub(1));
            if out_layer == 0 || !matches!(net.spec().layers[i].kind, LayerKind::Dense { .. }) {
                return Err(Error::BadTrainConfig("centre loss needs a dense feature layer under the head".into()));
            }
            Some(i)
        }
        _ => None,
    };
    let mut centers = feature_layer.map(|f| CenterState::zeros(out_width, net.shapes()[f].len()));
    let mut opt = Optimizer::for_params(config.optimizer, net.params());
    let mut log = TrainLog::default();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();

    let mut run_epoch = |net: &mut Network<T>, centers: &mut Option<CenterState>, epoch: usize, with_center: bool| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch, usize::MAX));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = config.rate(epoch);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.batch::<T>(idx);
            let trace = net.trace(&x, Mode::Train, epoch_seed(config.seed, epoch, bi))?;
            let out = trace.output();
            let mut seeds = Vec::new();
            let loss = match &data.targets {
                Targets::Values { width, data: t } => {
                    let mut tv = Vec::with_capacity(idx.len() * width);
                    for &i in idx {
                        tv.extend(t[i * width..(i + 1) * width].iter().map(|&v| T::of(v as f64)));
                    }
                    let target = Tensor::new(vec![idx.len(), *width], tv)?;
                    let (l, g) = loss_mse(out, &target)?;
                    seeds.push((out_layer, g));
                    l
                }
                Targets::Classes { labels, .. } => {
                    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    let (mut l, g) = loss_softmax(out, &y)?;
                    seeds.push((out_layer, g));
                    if let (true, Some(f), Some(c)) = (with_center, feature_layer, centers.as_mut()) {
                        let feats = &trace.acts[f];
                        let (lc, gc) = loss_center(feats, &y, c, config.center_loss_weight)?;
                        l += lc;
                        seeds.push((f, gc));
                        c.update(feats, &y, config.center_update_rate)?;
                    }
                    l
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * idx.len() as f64;
            let (grads, _) = net.backward(&x, &trace, seeds)?;
            let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.data()).collect();
            let mut param_refs: Vec<&mut [T]> = net.params_mut().iter_mut().map(|p| p.data_mut()).collect();
            opt.step(&mut param_refs, &grad_refs, lr);
        }
        Ok(total / n as f64)
    };

    let first_phase = match config.loss {
        LossKind::Mse => "mse",
        LossKind::Softmax | LossKind::SoftmaxCenter => "softmax",
    };
    for epoch in 0..config.epochs {
        let loss = run_epoch(&mut net, &mut centers, epoch, false)?;
        log::debug!("epoch {epoch} {first_phase} loss {loss:.6}");
        log.rows.push(LogRow {
            epoch,
            phase: first_phase.into(),
            loss,
        });
    }
    if config.loss == LossKind::SoftmaxCenter {
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for k in 0..config.max_center_epochs {
            let epoch = config.epochs + k;
            let loss = run_epoch(&mut net, &mut centers, epoch, true)?;
            log::debug!("epoch {epoch} softmax+center loss {loss:.6}");
            log.rows.push(LogRow {
                epoch,
                phase: "softmax+center".into(),
                loss,
            });
            if loss < best {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience_epochs {
                    break;
                }
            }
        }
    }
    Ok(Trained { net, log, centers })
}
