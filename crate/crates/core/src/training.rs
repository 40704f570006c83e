//! Loss, weight decay, optimizers and the checkpointed training loop.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointError, Entry};
use crate::data::{images_to_tensor, BatchStream, CorruptionSpec, DataError, MnistSet, RngState, SamplePair, StreamState};
use crate::layers::{DropoutCtx, Param, ParamKind};
use crate::models::{bind_model, AnyModel, ModelKind, RestorationModel};
use crate::tensor::{Scalar, Tensor, TensorError};

const STREAM_BATCHES: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite {
        iteration: u64,
        /// Parameters as they were before the failing update.
        checkpoint: Box<Checkpoint>,
    },
}

/// Root-mean-square error over every element of two equal-shape tensors.
pub fn rmse_loss<T: Scalar>(predicted: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    if predicted.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "rmse",
            left: predicted.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let n = T::from_f64(predicted.len() as f64);
    let ss: T = predicted
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// `lambda` times the sum of squared weights; biases are exempt.
pub fn l2_penalty<T: Scalar>(params: &[&Param<T>], lambda: f64) -> T {
    let ss: T = params
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.sum_squares())
        .sum();
    T::from_f64(lambda) * ss
}

/// Graph form of [`l2_penalty`]; `None` when nothing is penalized.
pub fn l2_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &[Var],
    params: &[&Param<T>],
    lambda: f64,
) -> Result<Option<Var>, TensorError> {
    if lambda == 0.0 {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for (v, p) in vars.iter().zip(params) {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let s = g.sum_squares(*v);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.map(|a| g.scale(a, T::from_f64(lambda))))
}

fn check_pairs<T: Scalar>(params: &[&mut Tensor<T>], grads: &[Tensor<T>], state: &[Tensor<T>]) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer got {} parameters, {} gradients, state for {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "optimizer",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adadelta,
}

impl OptimizerKind {
    pub fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adadelta => "adadelta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "adadelta" => Some(OptimizerKind::Adadelta),
            _ => None,
        }
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    lr: f64,
) -> Result<(), TensorError> {
    check_pairs(params, grads, &state.m)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let (lr, eps) = (T::from_f64(lr), T::from_f64(state.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Running averages of squared gradients and squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T> {
    pub sq_grad: Vec<Tensor<T>>,
    pub sq_update: Vec<Tensor<T>>,
    pub rho: f64,
    pub eps: f64,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdadeltaState {
            sq_grad: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            sq_update: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

pub fn adadelta_step<T: Scalar>(
    state: &mut AdadeltaState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
) -> Result<(), TensorError> {
    check_pairs(params, grads, &state.sq_grad)?;
    let rho = T::from_f64(state.rho);
    let eps = T::from_f64(state.eps);
    let one = T::one();
    for (((p, g), eg), ex) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.sq_grad)
        .zip(&mut state.sq_update)
    {
        let (eg, ex) = (eg.data_mut(), ex.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            eg[i] = rho * eg[i] + (one - rho) * gi * gi;
            let dx = -((ex[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
            ex[i] = rho * ex[i] + (one - rho) * dx * dx;
            *w = *w + dx;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState<T> {
    Adam(AdamState<T>),
    Adadelta(AdadeltaState<T>),
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, shapes: &[Vec<usize>]) -> Self {
        match kind {
            OptimizerKind::Adam => OptimizerState::Adam(AdamState::new(shapes)),
            OptimizerKind::Adadelta => OptimizerState::Adadelta(AdadeltaState::new(shapes)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Adam(_) => OptimizerKind::Adam,
            OptimizerState::Adadelta(_) => OptimizerKind::Adadelta,
        }
    }

    /// `lr` is ignored by Adadelta.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
        match self {
            OptimizerState::Adam(s) => adam_step(s, params, grads, lr),
            OptimizerState::Adadelta(s) => adadelta_step(s, params, grads),
        }
    }

    pub fn to_entries(&self, names: &[String]) -> Vec<Entry> {
        let mut out = Vec::new();
        match self {
            OptimizerState::Adam(s) => {
                out.push(Entry::words("opt/step", vec![s.t]));
                out.push(Entry::floats("opt/hyper", vec![s.beta1, s.beta2, s.eps]));
                for (n, (m, v)) in names.iter().zip(s.m.iter().zip(&s.v)) {
                    out.push(Entry::tensor(format!("opt/m/{n}"), m));
                    out.push(Entry::tensor(format!("opt/v/{n}"), v));
                }
            }
            OptimizerState::Adadelta(s) => {
                out.push(Entry::floats("opt/hyper", vec![s.rho, s.eps]));
                for (n, (a, b)) in names.iter().zip(s.sq_grad.iter().zip(&s.sq_update)) {
                    out.push(Entry::tensor(format!("opt/sq_grad/{n}"), a));
                    out.push(Entry::tensor(format!("opt/sq_update/{n}"), b));
                }
            }
        }
        out
    }

    pub fn from_checkpoint(kind: OptimizerKind, ckpt: &Checkpoint, names: &[String]) -> Result<Self, CheckpointError> {
        let hyper = ckpt.floats("opt/hyper")?;
        let load = |prefix: &str| -> Result<Vec<Tensor<T>>, CheckpointError> {
            names
                .iter()
                .map(|n| ckpt.entry(&format!("opt/{prefix}/{n}"))?.to_tensor())
                .collect()
        };
        match kind {
            OptimizerKind::Adam => {
                let [beta1, beta2, eps] = hyper[..] else {
                    return Err(CheckpointError::Malformed("opt/hyper needs 3 values for adam".into()));
                };
                let t = *ckpt
                    .words("opt/step")?
                    .first()
                    .ok_or_else(|| CheckpointError::Malformed("empty opt/step".into()))?;
                Ok(OptimizerState::Adam(AdamState {
                    m: load("m")?,
                    v: load("v")?,
                    t,
                    beta1,
                    beta2,
                    eps,
                }))
            }
            OptimizerKind::Adadelta => {
                let [rho, eps] = hyper[..] else {
                    return Err(CheckpointError::Malformed("opt/hyper needs 2 values for adadelta".into()));
                };
                Ok(OptimizerState::Adadelta(AdadeltaState {
                    sq_grad: load("sq_grad")?,
                    sq_update: load("sq_update")?,
                    rho,
                    eps,
                }))
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub corruption: CorruptionSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            l2_lambda: 1e-4,
            dropout: 0.25,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_interval: 500,
            clip_norm: Some(5.0),
            corruption: CorruptionSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2 lambda must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip norm must be positive");
            }
        }
        Ok(())
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        let c = &self.corruption;
        [
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("l2_lambda", self.l2_lambda.to_string()),
            ("dropout", self.dropout.to_string()),
            ("optimizer", self.optimizer.tag().to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("clip_norm", self.clip_norm.map_or("off".to_string(), |v| v.to_string())),
            ("blank_start", c.blank_start.to_string()),
            ("blank_end", c.blank_end.to_string()),
            ("density", c.density.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }

    pub fn from_echo(echo: &[(String, String)]) -> Result<Self, TrainError> {
        let get = |k: &str| -> Result<&str, TrainError> {
            echo.iter()
                .find(|(key, _)| key == &format!("train.{k}"))
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| TrainError::Config(format!("missing train.{k}")))
        };
        fn num<V: std::str::FromStr>(k: &str, s: &str) -> Result<V, TrainError> {
            s.parse().map_err(|_| TrainError::Config(format!("bad value {s:?} for {k}")))
        }
        let clip = get("clip_norm")?;
        let cfg = TrainConfig {
            iterations: num("iterations", get("iterations")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            l2_lambda: num("l2_lambda", get("l2_lambda")?)?,
            dropout: num("dropout", get("dropout")?)?,
            optimizer: OptimizerKind::parse(get("optimizer")?)
                .ok_or_else(|| TrainError::Config("unknown optimizer".into()))?,
            seed: num("seed", get("seed")?)?,
            checkpoint_interval: num("checkpoint_interval", get("checkpoint_interval")?)?,
            clip_norm: if clip == "off" { None } else { Some(num("clip_norm", clip)?) },
            corruption: CorruptionSpec {
                blank_start: num("blank_start", get("blank_start")?)?,
                blank_end: num("blank_end", get("blank_end")?)?,
                density: num("density", get("density")?)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One logged training iteration (1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub rmse: f64,
    pub l2: f64,
    pub total: f64,
    pub ms: u64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,rmse,l2,total,ms";

/// Loss log as CSV. With `timing` off the `ms` column is written as 0 so
/// that repeated runs produce identical bytes.
pub fn loss_csv(records: &[LossRecord], timing: bool) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let ms = if timing { r.ms } else { 0 };
        let _ = writeln!(out, "{},{:?},{:?},{:?},{ms}", r.iteration, r.rmse, r.l2, r.total);
    }
    out
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(TrainError::Config("loss CSV header missing".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || TrainError::Config(format!("bad loss CSV line {}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(LossRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                rmse: f[1].parse().map_err(|_| bad())?,
                l2: f[2].parse().map_err(|_| bad())?,
                total: f[3].parse().map_err(|_| bad())?,
                ms: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loss terms and gradients of one batch.
pub struct BatchEval<T> {
    pub rmse: f64,
    pub l2: f64,
    pub grads: Vec<Tensor<T>>,
}

impl<T> BatchEval<T> {
    pub fn total(&self) -> f64 {
        self.rmse + self.l2
    }
}

/// Forward and backward over `pairs`; dropout only when `dropout` is given.
pub fn evaluate_batch<T: Scalar, M: RestorationModel<T> + ?Sized>(
    model: &M,
    pairs: &[SamplePair],
    lambda: f64,
    dropout: Option<DropoutCtx<'_>>,
    want_grads: bool,
) -> Result<BatchEval<T>, TrainError> {
    let corrupted: Vec<_> = pairs.iter().map(|p| p.corrupted.clone()).collect();
    let clean: Vec<_> = pairs.iter().map(|p| p.clean.clone()).collect();
    let mut g = Graph::new();
    let vars = bind_model(&mut g, model);
    let x = g.constant(images_to_tensor::<T>(&corrupted));
    let target = images_to_tensor::<T>(&clean);
    let mut dropout = dropout;
    let y = model.forward_graph(&mut g, &vars, x, &mut dropout)?;
    let rmse = g.rmse(y, &target)?;
    let params = model.params();
    let penalty = l2_graph(&mut g, &vars, &params, lambda)?;
    let total = match penalty {
        Some(p) => g.add(rmse, p)?,
        None => rmse,
    };
    let rmse_v = g.value(rmse).data()[0].as_f64();
    let l2_v = penalty.map_or(0.0, |p| g.value(p).data()[0].as_f64());
    let grads = if want_grads && g.value(total).all_finite() {
        let mut gr = g.backward(total)?;
        vars.iter().map(|&v| gr.take(v)).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    Ok(BatchEval {
        rmse: rmse_v,
        l2: l2_v,
        grads,
    })
}

/// Sum of squares of all weight tensors (biases excluded).
pub fn weight_norm_sq<T: Scalar, M: RestorationModel<T> + ?Sized>(model: &M) -> f64 {
    model
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum()
}

/// Stateful training run that can be checkpointed and resumed exactly.
pub struct Trainer<T: Scalar, M> {
    model: M,
    config: TrainConfig,
    optimizer: OptimizerState<T>,
    set: Arc<MnistSet>,
    indices: Vec<usize>,
    stream: BatchStream,
    dropout_rng: ChaCha8Rng,
    iteration: u64,
    log: Vec<LossRecord>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar, M: RestorationModel<T>> Trainer<T, M> {
    pub fn new(model: M, set: Arc<MnistSet>, indices: Vec<usize>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if set.side() != model.image_side() {
            return Err(TrainError::Config(format!(
                "dataset images are {0}x{0} but the model expects {1}x{1}",
                set.side(),
                model.image_side()
            )));
        }
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.value.shape().to_vec()).collect();
        let stream = BatchStream::new(
            set.clone(),
            indices.clone(),
            config.batch_size,
            config.corruption,
            seeded(config.seed, STREAM_BATCHES),
        )?;
        Ok(Trainer {
            optimizer: OptimizerState::new(config.optimizer, &shapes),
            dropout_rng: seeded(config.seed, STREAM_DROPOUT),
            model,
            config,
            set,
            indices,
            stream,
            iteration: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    /// Changes the stopping point, e.g. to extend a resumed run.
    pub fn set_iterations(&mut self, iterations: u64) {
        self.config.iterations = iterations;
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Draws a batch and applies one optimizer update.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let start = Instant::now();
        let pairs = self.stream.next_batch();
        let dropout = (self.config.dropout > 0.0).then(|| DropoutCtx {
            rate: self.config.dropout,
            rng: &mut self.dropout_rng,
        });
        let eval = evaluate_batch(&self.model, &pairs, self.config.l2_lambda, dropout, true)?;
        if !eval.total().is_finite() {
            let checkpoint = Box::new(self.checkpoint());
            return Err(TrainError::NonFinite {
                iteration: self.iteration + 1,
                checkpoint,
            });
        }
        let mut grads = eval.grads;
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let mut params: Vec<&mut Tensor<T>> = self.model.params_mut().into_iter().map(|p| &mut p.value).collect();
        self.optimizer.step(&mut params, &grads, self.config.learning_rate)?;
        self.iteration += 1;
        let record = LossRecord {
            iteration: self.iteration,
            rmse: eval.rmse,
            l2: eval.l2,
            total: eval.rmse + eval.l2,
            ms: start.elapsed().as_millis() as u64,
        };
        self.log.push(record);
        Ok(record)
    }

    /// Steps until the configured iteration count, calling `on_checkpoint`
    /// at every checkpoint interval.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while !self.is_done() {
            self.step()?;
            let every = self.config.checkpoint_interval;
            if every > 0 && self.iteration % every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.model.params();
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let mut entries: Vec<Entry> = params
            .iter()
            .map(|p| Entry::tensor(format!("param/{}", p.name), &p.value))
            .collect();
        entries.extend(self.optimizer.to_entries(&names));
        entries.push(Entry::words("rng/dropout", RngState::capture(&self.dropout_rng).to_words()));
        let stream = self.stream.state();
        entries.push(Entry::words("rng/stream", stream.rng.to_words()));
        entries.push(Entry::words("stream/order", stream.order.iter().map(|&i| i as u64).collect()));
        entries.push(Entry::words("stream/position", vec![stream.cursor as u64, stream.epoch]));
        entries.push(Entry::words("data/indices", self.indices.iter().map(|&i| i as u64).collect()));
        entries.push(Entry::words("log/iteration", self.log.iter().map(|r| r.iteration).collect()));
        entries.push(Entry::floats("log/rmse", self.log.iter().map(|r| r.rmse).collect()));
        entries.push(Entry::floats("log/l2", self.log.iter().map(|r| r.l2).collect()));
        entries.push(Entry::words("log/ms", self.log.iter().map(|r| r.ms).collect()));

        let mut echo: Vec<(String, String)> = self
            .model
            .config_echo()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        echo.push(("model.precision".into(), format!("{:?}", T::PRECISION).to_lowercase()));
        echo.extend(self.config.echo());
        echo.push(("data.checksum".into(), self.set.checksum().to_string()));
        echo.push(("data.images".into(), self.set.len().to_string()));
        Checkpoint {
            kind: self.model.kind().tag().to_string(),
            echo,
            iteration: self.iteration,
            entries,
        }
    }
}

/// Model-only section of a checkpoint echo, with the `model.` prefix removed.
pub fn model_echo(ckpt: &Checkpoint) -> Vec<(String, String)> {
    ckpt.echo
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
        .collect()
}

/// Rebuilds the model stored in a checkpoint and loads its parameters.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<AnyModel<T>, TrainError> {
    let kind = ModelKind::parse(&ckpt.kind)
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown model kind {:?}", ckpt.kind)))?;
    let mut model = AnyModel::from_echo(kind, &model_echo(ckpt), 0)?;
    for p in model.params_mut() {
        let t = ckpt.entry(&format!("param/{}", p.name))?.to_tensor::<T>()?;
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::Malformed(format!(
                "param/{} has shape {:?}, model expects {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            ))
            .into());
        }
        p.value = t;
    }
    Ok(model)
}

impl<T: Scalar> Trainer<T, AnyModel<T>> {
    /// Restores a run so that continuing it matches an uninterrupted run.
    pub fn resume(ckpt: &Checkpoint, set: Arc<MnistSet>) -> Result<Self, TrainError> {
        let checksum = ckpt.echo_value("data.checksum")?;
        if checksum != set.checksum() {
            return Err(TrainError::Config(format!(
                "checkpoint was trained on data {checksum}, got {}",
                set.checksum()
            )));
        }
        let config = TrainConfig::from_echo(&ckpt.echo)?;
        let model = model_from_checkpoint::<T>(ckpt)?;
        let indices: Vec<usize> = ckpt.words("data/indices")?.iter().map(|&i| i as usize).collect();
        let mut trainer = Trainer::new(model, set, indices, config)?;
        let names: Vec<String> = trainer.model.params().iter().map(|p| p.name.clone()).collect();
        trainer.optimizer = OptimizerState::from_checkpoint(trainer.config.optimizer, ckpt, &names)?;
        let rng = |name: &str| -> Result<RngState, TrainError> {
            RngState::from_words(ckpt.words(name)?)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name} is not an rng state")).into())
        };
        trainer.dropout_rng = rng("rng/dropout")?.restore();
        let position = ckpt.words("stream/position")?;
        let [cursor, epoch] = position[..] else {
            return Err(CheckpointError::Malformed("stream/position needs 2 words".into()).into());
        };
        trainer.stream.restore(&StreamState {
            rng: rng("rng/stream")?,
            order: ckpt.words("stream/order")?.iter().map(|&i| i as usize).collect(),
            cursor: cursor as usize,
            epoch,
        })?;
        let iters = ckpt.words("log/iteration")?;
        let rmse = ckpt.floats("log/rmse")?;
        let l2 = ckpt.floats("log/l2")?;
        let ms = ckpt.words("log/ms")?;
        if rmse.len() != iters.len() || l2.len() != iters.len() || ms.len() != iters.len() {
            return Err(CheckpointError::Malformed("loss log columns differ in length".into()).into());
        }
        trainer.log = (0..iters.len())
            .map(|i| LossRecord {
                iteration: iters[i],
                rmse: rmse[i],
                l2: l2[i],
                total: rmse[i] + l2[i],
                ms: ms[i],
            })
            .collect();
        trainer.iteration = ckpt.iteration;
        Ok(trainer)
    }
}
