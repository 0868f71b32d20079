//! Deterministic minibatch training, evaluation and finite-difference
//! gradient checking.

use std::fmt::Write as _;

use crate::analysis::stall::{stall_diagnostic_with, StallConfig, StallVerdict, StepGradients};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::init::{initialize_network, InitScheme};
use crate::model::layers::Mode;
use crate::model::network::{loss_and_grads, loss_only};
use crate::model::params::{LayerParams, Params};
use crate::model::spec::{ActivationKind, NetworkSpec};
use crate::model::{forward, softmax_xent_per_example};
use crate::optim::{sgd_step, OptState, OptimConfig};
use crate::par;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub scheme: InitScheme,
    /// Replaces every activation layer of the spec when set.
    pub activation: Option<ActivationKind>,
    pub seed: u64,
    /// Validation is evaluated every `eval_every` epochs (0 = never).
    pub eval_every: usize,
    /// Keep PReLU slopes at their initial values.
    pub freeze_slopes: bool,
    pub stall: StallConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            optim: OptimConfig::default(),
            scheme: InitScheme::HeForward,
            activation: None,
            seed: 0,
            eval_every: 1,
            freeze_slopes: false,
            stall: StallConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Loss became non-finite or exceeded [`DIVERGENCE_LOSS`].
    Diverged,
    /// Gradients were flagged diminishing and the training loss improved
    /// by less than 1% over the run.
    Stalled,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
            RunStatus::Stalled => "stalled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub loss: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
    /// Mean loss-gradient norm of each weighted layer's weights.
    pub grad_norms: Vec<f64>,
    /// Mean and max |a| of each PReLU layer's slopes after the epoch.
    pub slope_means: Vec<f64>,
    pub slope_abs_max: Vec<f64>,
    pub stall: Option<StallVerdict>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    pub params: Params,
    pub status: RunStatus,
    /// Fraction of learned slopes with |a| > 1 (None without PReLU layers).
    pub slope_fraction_above_one: Option<f64>,
    pub depth: usize,
    pub prelu_layers: usize,
}

impl TrainRun {
    pub fn initial_train_loss(&self) -> f64 {
        self.records[0].train.loss
    }

    pub fn final_train(&self) -> SplitMetrics {
        self.records.last().expect("epoch 0 is always recorded").train
    }

    /// Epochs completed after initialization.
    pub fn epochs_completed(&self) -> usize {
        self.records.len() - 1
    }

    /// `(initial - final) / initial` of the training loss.
    pub fn loss_improvement(&self) -> f64 {
        let init = self.initial_train_loss();
        (init - self.final_train().loss) / init
    }

    pub fn any_diminishing(&self) -> bool {
        self.records.iter().any(|r| r.stall == Some(StallVerdict::Diminishing))
    }

    /// First epoch whose training loss is at or below `threshold`.
    pub fn epochs_to_loss(&self, threshold: f64) -> Option<usize> {
        self.records.iter().skip(1).find(|r| r.train.loss <= threshold).map(|r| r.epoch)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["epoch".to_string(), "split".into(), "loss".into(), "top1".into()];
        cols.extend((1..=self.depth).map(|i| format!("grad_norm_l{i}")));
        cols.extend((1..=self.prelu_layers).map(|j| format!("slope_mean_l{j}")));
        cols.extend((1..=self.prelu_layers).map(|j| format!("slope_absmax_l{j}")));
        cols.push("stall_verdict".into());
        cols.join(",")
    }

    /// Column header and one `train` (and optional `val`) row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        let blanks = |n: usize| ",".repeat(n);
        for r in &self.records {
            let _ = write!(out, "{},train,{},{}", r.epoch, r.train.loss, r.train.top1);
            if r.grad_norms.is_empty() {
                out += &blanks(self.depth);
            } else {
                for g in &r.grad_norms {
                    let _ = write!(out, ",{g}");
                }
            }
            for v in r.slope_means.iter().chain(&r.slope_abs_max) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", r.stall.map_or("", |s| s.as_str()));
            if let Some(v) = r.val {
                let _ = writeln!(
                    out,
                    "{},val,{},{}{},",
                    r.epoch,
                    v.loss,
                    v.top1,
                    blanks(self.depth + 2 * self.prelu_layers)
                );
            }
        }
        out
    }
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let batch = logits.shape()[0];
    let classes = logits.len() / batch.max(1);
    (0..batch)
        .map(|b| {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn prepare(spec: &NetworkSpec, dataset: &Dataset) -> Result<Dataset> {
    if dataset.classes() > spec.classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, network outputs {}",
            dataset.classes(),
            spec.classes()
        )));
    }
    dataset.clone().reshaped(spec.input_shape())
}

const EVAL_BATCH: usize = 256;

fn evaluate_prepared(params: &Params, spec: &NetworkSpec, data: &Dataset) -> Result<SplitMetrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.gather(chunk);
        let trace = forward(spec, params, &x, Mode::Eval, None)?;
        let (losses, _) = softmax_xent_per_example(trace.logits(), &labels)?;
        loss_sum += losses.iter().sum::<f64>();
        wrong += argmax_rows(trace.logits())
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(SplitMetrics {
        loss: loss_sum / data.len() as f64,
        top1: wrong as f64 / data.len() as f64,
    })
}

/// Top-1 error and mean loss in eval mode (dropout off).
pub fn evaluate(params: &Params, spec: &NetworkSpec, dataset: &Dataset) -> Result<(f64, f64)> {
    let data = prepare(spec, dataset)?;
    let m = evaluate_prepared(params, spec, &data)?;
    Ok((m.top1, m.loss))
}

fn slope_stats(params: &Params) -> (Vec<f64>, Vec<f64>) {
    params
        .layers
        .iter()
        .filter_map(LayerParams::slopes)
        .map(|s| {
            let mean = s.data().iter().sum::<f64>() / s.len() as f64;
            let max = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (mean, max)
        })
        .unzip()
}

fn zero_slope_grads(grads: &mut Params) {
    for g in &mut grads.layers {
        if let LayerParams::Slopes(s) = g {
            s.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Trains `spec` with minibatch SGD. Epoch `e` visits the training set in
/// the order given by `batches(train, batch_size, seed, e)`; dropout masks
/// come from a per-step stream of `seed`. Identical inputs give identical
/// runs regardless of thread count.
pub fn train(spec: &NetworkSpec, train_set: &Dataset, val_set: Option<&Dataset>, config: &TrainConfig) -> Result<TrainRun> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be >= 1"));
    }
    config.optim.validate()?;
    let spec = match config.activation {
        Some(kind) => spec.with_activation(kind),
        None => spec.clone(),
    };
    let train_data = prepare(&spec, train_set)?;
    let val_data = val_set.map(|v| prepare(&spec, v)).transpose()?;

    let mut params = initialize_network(&spec, &config.scheme, config.seed)?;
    let mut state = OptState::new(&params);
    let depth = spec.depth();
    let prelu_layers = params.layers.iter().filter(|l| l.slopes().is_some()).count();

    let (slope_means, slope_abs_max) = slope_stats(&params);
    let mut records = vec![EpochRecord {
        epoch: 0,
        train: evaluate_prepared(&params, &spec, &train_data)?,
        val: val_data.as_ref().map(|v| evaluate_prepared(&params, &spec, v)).transpose()?,
        grad_norms: Vec::new(),
        slope_means,
        slope_abs_max,
        stall: None,
    }];

    let mut history: Vec<StepGradients> = Vec::new();
    let mut step: u64 = 0;
    let mut diverged = false;
    let n = train_data.len();

    'epochs: for epoch in 1..=config.epochs {
        let mut optim = config.optim.clone();
        optim.learning_rate = config.optim.lr_for_epoch(epoch);
        let mut example_loss = vec![0.0; n];
        let mut wrong = 0usize;
        let mut grad_sums = vec![0.0; depth];
        let mut steps = 0usize;

        for batch in batches(&train_data, config.batch_size, config.seed, epoch as u64)? {
            let (x, labels) = train_data.gather(&batch);
            let mut dropout_rng = RngStream::derived(config.seed, step + 16);
            let eval = match loss_and_grads(&spec, &params, &x, &labels, Mode::Train, Some(&mut dropout_rng)) {
                Ok(e) => e,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mean = eval.mean_loss();
            if !mean.is_finite() || mean > DIVERGENCE_LOSS {
                diverged = true;
                break 'epochs;
            }
            for (&i, &l) in batch.iter().zip(&eval.losses) {
                example_loss[i] = l;
            }
            wrong += argmax_rows(&eval.logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p != l)
                .count();

            let mut grads = eval.grads;
            if config.freeze_slopes {
                zero_slope_grads(&mut grads);
            }
            let sample = StepGradients::from_loss_grads(&grads, &params);
            for (acc, l) in grad_sums.iter_mut().zip(&sample.layers) {
                *acc += l.loss_grad_norm;
            }
            history.push(sample);
            sgd_step(&mut params, &grads, &mut state, &optim)?;
            if !params.is_finite() {
                diverged = true;
                break 'epochs;
            }
            steps += 1;
            step += 1;
        }

        let train_loss = example_loss.iter().sum::<f64>() / n as f64;
        let val = match &val_data {
            Some(v) if config.eval_every > 0 && epoch % config.eval_every == 0 => {
                Some(evaluate_prepared(&params, &spec, v)?)
            }
            _ => None,
        };
        let stall = if history.len() >= 2 {
            stall_diagnostic_with(&history, config.optim.weight_decay, &config.stall)?
        } else {
            StallVerdict::Healthy
        };
        let (slope_means, slope_abs_max) = slope_stats(&params);
        records.push(EpochRecord {
            epoch,
            train: SplitMetrics {
                loss: train_loss,
                top1: wrong as f64 / n as f64,
            },
            val,
            grad_norms: grad_sums.iter().map(|s| s / steps.max(1) as f64).collect(),
            slope_means,
            slope_abs_max,
            stall: Some(stall),
        });
    }

    let slope_values: Vec<f64> = params
        .layers
        .iter()
        .filter_map(LayerParams::slopes)
        .flat_map(|s| s.data().iter().copied())
        .collect();
    let slope_fraction_above_one = (!slope_values.is_empty())
        .then(|| slope_values.iter().filter(|a| a.abs() > 1.0).count() as f64 / slope_values.len() as f64);

    let mut run = TrainRun {
        records,
        params,
        status: RunStatus::Completed,
        slope_fraction_above_one,
        depth,
        prelu_layers,
    };
    run.status = if diverged {
        RunStatus::Diverged
    } else if run.any_diminishing() && run.loss_improvement() < 0.01 {
        RunStatus::Stalled
    } else {
        RunStatus::Completed
    };
    Ok(run)
}

/// Worst finite-difference disagreement for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    /// Position of the owning layer in the spec.
    pub layer: usize,
    pub layer_kind: &'static str,
    /// `weight`, `bias` or `slopes`.
    pub tensor: &'static str,
    pub count: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,layer_kind,tensor,count,max_rel_error,worst_index,passed\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.layer, c.layer_kind, c.tensor, c.count, c.max_rel_error, c.worst_index, c.passed
            );
        }
        out
    }
}

/// Deliberate analytic-gradient faults, for checking the checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    None,
    DoubleSlopeGrads,
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

pub fn grad_check(spec: &NetworkSpec, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(spec, &InitScheme::HeForward, seed, step, tolerance, GradFault::None)
}

const GRAD_CHECK_BATCH: usize = 4;

/// Compares full-network analytic gradients (weights, biases, slopes) with
/// central differences of the mean loss on a random batch. Weights are
/// drawn with `scheme` from `seed`, biases get small random offsets, and
/// dropout reuses one fixed mask.
pub fn grad_check_with(
    spec: &NetworkSpec,
    scheme: &InitScheme,
    seed: u64,
    step: f64,
    tolerance: f64,
    fault: GradFault,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut params = initialize_network(spec, scheme, seed)?;
    let mut rng = RngStream::derived(seed, 3);
    for layer in &mut params.layers {
        if let LayerParams::Weighted { bias, .. } = layer {
            bias.data_mut().iter_mut().for_each(|b| *b = 0.1 * (2.0 * rng.uniform() - 1.0));
        }
    }
    let shape = spec.input_shape().batched(GRAD_CHECK_BATCH);
    let x = Tensor::from_vec(
        &shape,
        (0..shape.iter().product::<usize>()).map(|_| 2.0 * rng.uniform() - 1.0).collect(),
    )?;
    let classes = spec.classes();
    let labels: Vec<usize> = (0..GRAD_CHECK_BATCH)
        .map(|_| ((rng.uniform() * classes as f64) as usize).min(classes - 1))
        .collect();
    let mask_seed = seed ^ 0x9e37_79b9;
    let loss_at = |p: &Params| loss_only(spec, p, &x, &labels, Mode::Train, Some(&mut RngStream::new(mask_seed)));

    let mut analytic = loss_and_grads(spec, &params, &x, &labels, Mode::Train, Some(&mut RngStream::new(mask_seed)))?.grads;
    if fault == GradFault::DoubleSlopeGrads {
        for g in &mut analytic.layers {
            if let LayerParams::Slopes(s) = g {
                s.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
        }
    }

    // (layer, tensor slot, element)
    let coords: Vec<(usize, usize, usize)> = params
        .layers
        .iter()
        .enumerate()
        .flat_map(|(li, l)| {
            l.tensors()
                .into_iter()
                .enumerate()
                .flat_map(move |(ti, t)| (0..t.len()).map(move |e| (li, ti, e)))
        })
        .collect();
    const CHUNKS: usize = 64;
    let per = coords.len().div_ceil(CHUNKS).max(1);
    let numeric: Vec<Result<Vec<f64>>> = par::map_indexed(coords.len().div_ceil(per), |c| {
        let mut p = params.clone();
        coords[c * per..((c + 1) * per).min(coords.len())]
            .iter()
            .map(|&(li, ti, e)| {
                let orig = p.layers[li].tensors()[ti].data()[e];
                p.layers[li].tensors_mut()[ti].data_mut()[e] = orig + step;
                let plus = loss_at(&p)?;
                p.layers[li].tensors_mut()[ti].data_mut()[e] = orig - step;
                let minus = loss_at(&p)?;
                p.layers[li].tensors_mut()[ti].data_mut()[e] = orig;
                Ok((plus - minus) / (2.0 * step))
            })
            .collect()
    });
    let mut numeric_flat = Vec::with_capacity(coords.len());
    for chunk in numeric {
        numeric_flat.extend(chunk?);
    }

    let mut checks: Vec<ParamCheck> = Vec::new();
    for (&(li, ti, e), &num) in coords.iter().zip(&numeric_flat) {
        let a = analytic.layers[li].tensors()[ti].data()[e];
        let err = relative_error(a, num);
        let name = match (&params.layers[li], ti) {
            (LayerParams::Weighted { .. }, 0) => "weight",
            (LayerParams::Weighted { .. }, _) => "bias",
            _ => "slopes",
        };
        match checks.last_mut() {
            Some(c) if c.layer == li && c.tensor == name => {
                c.count += 1;
                if err > c.max_rel_error {
                    c.max_rel_error = err;
                    c.worst_index = e;
                }
            }
            _ => checks.push(ParamCheck {
                layer: li,
                layer_kind: spec.layers()[li].spec.kind_name(),
                tensor: name,
                count: 1,
                max_rel_error: err,
                worst_index: e,
                passed: true,
            }),
        }
    }
    for c in &mut checks {
        c.passed = c.max_rel_error <= tolerance;
    }
    Ok(GradCheckReport { step, tolerance, checks })
}
