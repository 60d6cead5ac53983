//! Mixed-domain training loop with Adam.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossGrad, LossWeights, PanoItemLoss, CAM_HEIGHT};
use crate::model::checkpoint::{Checkpoint, OptimizerState};
use crate::model::{Branch, Graph, Model, ModelConfig, Params, Tensor};
use crate::par::{self, Execution};

use super::augment::{augment, AugmentToggles};
use super::data::{load_split, prepare, sample_rng, LoadedSample, PreparedSample};
use super::manifest::{Manifest, Split};
use super::synth::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub augment: AugmentToggles,
    pub vertical_shift: bool,
    /// Writes an intermediate checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,
    pub cam_height: f64,
    /// Domains drawn from the manifest.
    pub domains: Vec<Branch>,
    pub mixing: BatchMixing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 1000,
            max_steps: None,
            seed: 0,
            weights: LossWeights::default(),
            augment: AugmentToggles::all(),
            vertical_shift: true,
            checkpoint_every: 0,
            cam_height: CAM_HEIGHT,
            domains: vec![Branch::Pano, Branch::Pp],
            mixing: BatchMixing::Interleaved,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("need 0 <= beta < 1 and eps > 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.domains.is_empty() {
            return bad("no training domain selected");
        }
        if !(self.cam_height > 0.0) {
            return bad("camera height must be positive");
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub l_b: f64,
    pub l_d: f64,
    pub l_n: f64,
    pub l_g: f64,
    pub l_pano: f64,
    pub l_pp: f64,
    pub l_total: f64,
}

impl LogEntry {
    fn new(step: u64, b: &LossBreakdown) -> Self {
        Self {
            step,
            l_b: b.l_b,
            l_d: b.l_d,
            l_n: b.l_n,
            l_g: b.l_g,
            l_pano: b.l_pano,
            l_pp: b.l_pp,
            l_total: b.l_total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Adam over a flat list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: &TrainConfig, params: &Params) -> Self {
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            state: OptimizerState::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.state.m)
            .zip(&mut self.state.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor>,
}

enum ItemLoss {
    Pano(PanoItemLoss),
    Pp(LossGrad),
}

/// Forward and backward over a batch. Panorama and perspective items are
/// weighted so that each domain contributes the mean of its items; per-item
/// gradients are summed in batch order.
pub fn batch_gradients(
    model: &Model,
    params: &Params,
    batch: &[&PreparedSample],
    weights: &LossWeights,
    cam_height: f64,
    exec: Execution,
) -> Result<BatchResult> {
    let n_pano = batch.iter().filter(|s| s.domain == Branch::Pano).count();
    let n_pp = batch.len() - n_pano;
    let results = par::map(exec, batch, |s| -> Result<(ItemLoss, Vec<Option<Tensor>>)> {
        let mut g = Graph::new(params.tensors());
        let x = g.input(s.input.clone());
        let y = model.forward_graph(&mut g, params, x, s.domain);
        let out = g.value(y);
        let l = out.dim(1);
        let (ceil, floor) = out.data().split_at(l);
        let (item, grad, scale) = match s.domain {
            Branch::Pano => {
                let p = losses::pano_item_loss(ceil, floor, &s.target, weights, cam_height)?;
                let grad = p.grad.clone();
                (ItemLoss::Pano(p), grad, 1.0 / n_pano as f64)
            }
            Branch::Pp => {
                let p = losses::pp_item_loss(ceil, floor, &s.target, Some(&s.mask), weights)?;
                let grad = p.clone();
                (ItemLoss::Pp(p), grad, 1.0 / n_pp as f64)
            }
        };
        let seed: Vec<f64> = grad.d_ceiling.iter().chain(&grad.d_floor).map(|v| v * scale).collect();
        let grads = g.backward(y, Tensor::from_vec(&[2, l], seed));
        Ok((item, grads.params))
    });
    let mut pano = Vec::with_capacity(n_pano);
    let mut pp = Vec::with_capacity(n_pp);
    let mut total: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for r in results {
        let (item, grads) = r?;
        match item {
            ItemLoss::Pano(p) => pano.push(p),
            ItemLoss::Pp(p) => pp.push(p),
        }
        for (acc, g) in total.iter_mut().zip(grads) {
            if let Some(g) = g {
                acc.add_assign(&g);
            }
        }
    }
    Ok(BatchResult {
        breakdown: losses::combine(&pano, &pp),
        grads: total,
    })
}

/// How panorama and perspective samples share batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMixing {
    /// Domains interleaved within each batch in proportion to their sizes
    /// (strict alternation when the counts match).
    #[default]
    Interleaved,
    /// Every batch holds a single domain; batches alternate proportionally.
    Homogeneous,
}

/// Merges two sequences so that `a` items are spread in proportion to the
/// sizes.
fn interleave<T: Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let n = a.len() + b.len();
    let mut out = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    for t in 0..n {
        // take from `a` whenever its quota is behind
        let want = (t + 1) * a.len() / n;
        if i < a.len() && (i < want || j == b.len()) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out
}

/// Batches of sample indices for one epoch; each domain is shuffled first.
pub fn epoch_batches(
    samples: &[LoadedSample],
    seed: u64,
    epoch: u64,
    batch_size: usize,
    mixing: BatchMixing,
) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, (1 << 40) + epoch);
    let mut pano: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].domain == Branch::Pano)
        .collect();
    let mut pp: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].domain == Branch::Pp)
        .collect();
    pano.shuffle(&mut rng);
    pp.shuffle(&mut rng);
    match mixing {
        BatchMixing::Interleaved => interleave(&pano, &pp)
            .chunks(batch_size)
            .map(<[usize]>::to_vec)
            .collect(),
        BatchMixing::Homogeneous => {
            let a: Vec<&[usize]> = pano.chunks(batch_size).collect();
            let b: Vec<&[usize]> = pp.chunks(batch_size).collect();
            interleave(&a, &b).into_iter().map(<[usize]>::to_vec).collect()
        }
    }
}

fn numeric_failure(out: Option<&Path>, step: u64, ids: &[String], detail: &str) -> Error {
    if let Some(dir) = out {
        let dump = serde_json::json!({ "step": step, "batch": ids, "detail": detail });
        let _ = std::fs::write(dir.join("nan_batch.json"), dump.to_string());
    }
    Error::Numeric(format!("{detail} at step {step}; batch ids: {}", ids.join(", ")))
}

/// Trains on the manifest's train split. With `out` set, writes
/// `loss_log.jsonl`, periodic `step_XXXXXX.ckpt` files and `final.ckpt`.
pub fn train(manifest: &Manifest, config: &TrainConfig, out: Option<&Path>, exec: Execution) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = manifest.filtered(&config.domains);
    let samples = load_split(&manifest, Split::Train, exec)?;
    if samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let model = Model::new(config.model.clone())?;
    let mut params = model.init_params(config.seed);
    let mut adam = Adam::new(config, &params);
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("loss_log.jsonl"),
            )?))
        }
        None => None,
    };
    let prep = |s: &LoadedSample, epoch: u64| -> Result<PreparedSample> {
        let mut rng = sample_rng(config.seed, &s.id, epoch);
        prepare(
            &augment(s, config.augment, &mut rng),
            &config.model,
            config.vertical_shift,
        )
    };
    let static_data = config.augment == AugmentToggles::none();
    let mut cached: Option<Vec<PreparedSample>> = None;
    let mut log = Vec::new();
    let mut step = 0u64;
    let max_steps = config.max_steps.map(|m| m as u64);
    let checkpoint = |params: &Params, adam: &Adam, step: u64| Checkpoint {
        config: config.model.clone(),
        seed: config.seed,
        step,
        params: params.clone(),
        optimizer: Some(adam.state.clone()),
    };
    'epochs: for epoch in 0..config.epochs as u64 {
        if max_steps.is_some_and(|m| step >= m) {
            break;
        }
        let prepared = match &cached {
            Some(p) => p.clone(),
            None => {
                let p: Vec<PreparedSample> = par::map(exec, &samples, |s| prep(s, epoch))
                    .into_iter()
                    .collect::<Result<_>>()?;
                if static_data {
                    cached = Some(p.clone());
                }
                p
            }
        };
        for chunk in epoch_batches(&samples, config.seed, epoch, config.batch_size, config.mixing) {
            if max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
            let result = batch_gradients(&model, &params, &batch, &config.weights, config.cam_height, exec).map_err(
                |e| match e {
                    Error::DegenerateBoundary { .. } => numeric_failure(out, step + 1, &ids, &e.to_string()),
                    other => other,
                },
            )?;
            if !result.breakdown.l_total.is_finite() {
                return Err(numeric_failure(out, step + 1, &ids, "non-finite loss"));
            }
            if result.grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(numeric_failure(out, step + 1, &ids, "non-finite gradient"));
            }
            adam.step(&mut params, &result.grads);
            step += 1;
            let entry = LogEntry::new(step, &result.breakdown);
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            log.push(entry);
            if let Some(dir) = out {
                if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every as u64) {
                    checkpoint(&params, &adam, step).save(dir.join(format!("step_{step:06}.ckpt")))?;
                }
            }
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    let ck = checkpoint(&params, &adam, step);
    if let Some(dir) = out {
        ck.save(dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}
