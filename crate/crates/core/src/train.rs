//! Training loop, best-on-validation checkpoints and evaluation.

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{network_from_arrays, Container};
use crate::compiler::{compile, run_compiled, FrozenNetwork};
use crate::densenet::{build_model, ModelConfig};
use crate::error::{Error, Result};
use crate::hsi::{patch_batch, HsiCube, SampleSplit};
use crate::lgc::SelectionMode;
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::network::Network;
use crate::ops::argmax_rows;
use crate::optim::{RmsProp, RmsPropConfig};
use crate::tensor::NdArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the group regularizer in the loss.
    pub reg_weight: f64,
    /// Selection-logit temperature, interpolated geometrically over the epochs.
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.0005,
            alpha: 0.99,
            eps: 1e-8,
            batch_size: 32,
            seed: 0,
            reg_weight: 0.1,
            temperature_start: 1.0,
            temperature_end: 1.0,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text)?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    // negated comparisons so NaN fields are rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.eval_batch == 0 {
            return Err(Error::Config(
                "epochs >= 1, batch_size >= 2 and eval_batch >= 1 required".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.alpha) || !(self.eps > 0.0) {
            return Err(Error::Config("lr > 0, 0 <= alpha < 1 and eps > 0 required".into()));
        }
        if !(self.reg_weight >= 0.0) || !(self.temperature_start > 0.0) || !(self.temperature_end > 0.0) {
            return Err(Error::Config(
                "reg_weight >= 0 and positive temperatures required".into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr,
            alpha: self.alpha,
            eps: self.eps,
        }
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.temperature_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub regularizer: f64,
    /// Accuracy of the frozen (hard-grouped) model; drives checkpointing.
    pub val_oa: f64,
    /// Accuracy of the soft-masked training model.
    pub val_oa_soft: f64,
    pub temperature: f64,
    pub seconds: f64,
}

/// Keeps the epoch with the strictly highest validation accuracy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `oa` beats every earlier value.
    pub fn observe(&mut self, epoch: usize, oa: f64) -> bool {
        match self.best {
            Some((_, b)) if oa <= b => false,
            _ => {
                self.best = Some((epoch, oa));
                true
            }
        }
    }
}

/// Serializable generator position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Config(format!("corrupt rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epoch whose weights are stored.
    pub epoch: usize,
    pub best_val_oa: f64,
    pub history: Vec<EpochLog>,
    pub rng: RngState,
    pub network: Network<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    best_val_oa: f64,
    history: Vec<EpochLog>,
    rng: RngState,
    mode: SelectionMode,
    temperature: f64,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container<f32>> {
        let temperature = self
            .network
            .lgc_layers()
            .next()
            .map_or(1.0, |l| f64::from(l.temperature));
        let mode = self
            .network
            .lgc_layers()
            .next()
            .map_or(SelectionMode::Soft, |l| l.mode());
        let meta = CheckpointMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_val_oa: self.best_val_oa,
            history: self.history.clone(),
            rng: self.rng.clone(),
            mode,
            temperature,
        };
        let mut c = Container::new("checkpoint", serde_json::to_value(meta)?);
        for (name, _, a) in self.network.arrays() {
            c.push(name, a.clone());
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: Container<f32>) -> Result<Self> {
        if c.kind != "checkpoint" {
            return Err(Error::Config(format!(
                "expected a checkpoint container, found {:?}",
                c.kind
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        let network = network_from_arrays(&meta.model, &c.arrays, meta.mode, meta.temperature as f32)?;
        Ok(Self {
            model: meta.model,
            train: meta.train,
            epoch: meta.epoch,
            best_val_oa: meta.best_val_oa,
            history: meta.history,
            rng: meta.rng,
            network,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Frozen-model predictions for labeled pixels, in `coords` order.
pub fn predict_frozen(
    frozen: &FrozenNetwork<f32>,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    patch: usize,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(batch.max(1)) {
        let (x, _) = patch_batch(cube, chunk, patch)?;
        out.extend(argmax_rows(&frozen.forward_naive(&x)?.0));
    }
    Ok(out)
}

fn labels_of(cube: &HsiCube, coords: &[(usize, usize)]) -> Vec<usize> {
    coords.iter().map(|&(r, c)| usize::from(cube.label(r, c)) - 1).collect()
}

fn check_compatible(net: &Network<f32>, cube: &HsiCube, patch: usize) -> Result<()> {
    if net.num_classes() != cube.classes {
        return Err(Error::dim("classes", net.num_classes(), cube.classes));
    }
    if net.input_dims != [cube.bands, patch, patch] {
        return Err(Error::Shape(format!(
            "model input {:?} does not match cube bands {} with patch {patch}",
            net.input_dims, cube.bands
        )));
    }
    Ok(())
}

/// Accuracy of the soft-masked network in eval mode.
fn soft_accuracy(
    net: &Network<f32>,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    patch: usize,
    batch: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for chunk in coords.chunks(batch.max(1)) {
        let (x, labels) = patch_batch(cube, chunk, patch)?;
        let pred = argmax_rows(&net.logits(&x)?);
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / coords.len().max(1) as f64)
}

/// Metrics of the frozen model; with `compiled`, also run the compiled plan and
/// require an identical confusion matrix.
pub fn evaluate(
    net: &Network<f32>,
    cube: &HsiCube,
    coords: &[(usize, usize)],
    patch: usize,
    compiled: bool,
    batch: usize,
) -> Result<MetricsReport> {
    check_compatible(net, cube, patch)?;
    if coords.is_empty() {
        return Err(Error::Empty("evaluation split is empty".into()));
    }
    let frozen = FrozenNetwork::from_network(net)?;
    let truth = labels_of(cube, coords);
    let pred = predict_frozen(&frozen, cube, coords, patch, batch)?;
    let report = evaluate_predictions(&truth, &pred, cube.classes)?;
    if compiled {
        let plan = compile(&frozen)?;
        let mut fast = Vec::with_capacity(coords.len());
        for chunk in coords.chunks(batch.max(1)) {
            let (x, _) = patch_batch(cube, chunk, patch)?;
            fast.extend(argmax_rows(&run_compiled(&x, &plan)?.0));
        }
        let other = evaluate_predictions(&truth, &fast, cube.classes)?;
        if other.confusion != report.confusion {
            let diff = pred.iter().zip(&fast).filter(|(a, b)| a != b).count() as f64;
            return Err(Error::Equivalence { diff, tol: 0.0 });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Final-epoch network (the checkpoint holds the best one).
    pub last: Network<f32>,
}

/// Train from scratch on `split.train`, selecting the best epoch on `split.val`.
/// Writes the checkpoint to `save_to` whenever validation accuracy strictly improves.
pub fn train(
    cube: &HsiCube,
    split: &SampleSplit,
    model: &ModelConfig,
    cfg: &TrainConfig,
    save_to: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = model.with_input(cube.bands, model.patch);
    model.validate()?;
    if model.num_classes != cube.classes {
        return Err(Error::dim("classes", model.num_classes, cube.classes));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let patch = model.patch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net: Network<f32> = build_model(&model, &mut rng)?;
    let mut opt = {
        let params: Vec<&NdArray<f32>> = net
            .arrays()
            .into_iter()
            .filter(|(_, r, _)| r.trainable())
            .map(|(_, _, a)| a)
            .collect();
        RmsProp::new(cfg.optimizer(), &params)
    };
    let mut order = split.train.clone();
    let mut tracker = BestTracker::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let temperature = cfg.temperature(epoch - 1);
        net.set_temperature(temperature as f32);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut reg_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = patch_batch(cube, chunk, patch)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = net.forward_graph(&mut g, xv, true)?;
            let ce = g.cross_entropy(out.logits, &labels)?;
            let (loss, reg) = match out.regularizer {
                Some(r) if cfg.reg_weight > 0.0 => {
                    let scaled = g.scale(r, cfg.reg_weight as f32);
                    (g.add(ce, scaled)?, f64::from(g.value(r).data()[0]))
                }
                _ => (ce, 0.0),
            };
            let value = f64::from(g.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b + 1 });
            }
            g.backward(loss)?;
            let grads: Vec<NdArray<f32>> = out
                .params
                .iter()
                .map(|&v| g.take_grad(v).unwrap_or_else(|| NdArray::zeros(g.value(v).shape())))
                .collect();
            let grad_refs: Vec<&NdArray<f32>> = grads.iter().collect();
            opt.step(&mut net.trainable_mut(), &grad_refs)?;
            net.update_running_stats(&out.batch_stats)?;
            loss_sum += value * chunk.len() as f64;
            reg_sum += reg * chunk.len() as f64;
            seen += chunk.len();
        }
        let frozen = FrozenNetwork::from_network(&net)?;
        let val_pred = predict_frozen(&frozen, cube, &split.val, patch, cfg.eval_batch)?;
        let val_truth = labels_of(cube, &split.val);
        let val_oa = val_pred.iter().zip(&val_truth).filter(|(p, t)| p == t).count() as f64 / val_truth.len() as f64;
        let val_oa_soft = soft_accuracy(&net, cube, &split.val, patch, cfg.eval_batch)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            regularizer: reg_sum / seen.max(1) as f64,
            val_oa,
            val_oa_soft,
            temperature,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4} reg {:.4} val OA {:.4} (soft {:.4}) in {:.1}s",
            log.train_loss, log.regularizer, log.val_oa, log.val_oa_soft, log.seconds
        );
        history.push(log);
        if tracker.observe(epoch, val_oa) {
            let ckpt = Checkpoint {
                model: model.clone(),
                train: cfg.clone(),
                epoch,
                best_val_oa: val_oa,
                history: history.clone(),
                rng: RngState::capture(&rng),
                network: net.clone(),
            };
            if let Some(p) = save_to {
                ckpt.save(p)?;
            }
            best = Some(ckpt);
        } else if let Some(b) = best.as_mut() {
            b.history = history.clone();
        }
    }
    let mut checkpoint = best.ok_or_else(|| Error::Empty("no epoch completed".into()))?;
    checkpoint.history = history;
    if let Some(p) = save_to {
        checkpoint.save(p)?;
    }
    Ok(TrainOutcome { checkpoint, last: net })
}
