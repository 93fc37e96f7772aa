//! Optimizer, training loop, validation and early stopping.

mod checkpoint;

pub use checkpoint::{manifest_path, Checkpoint, MAGIC, VERSION};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{pad_batch, sample_schedule, MultiCityCorpus, PaddedBatch, Split, Trajectory};
use crate::error::{Error, Result};
use crate::eval::Hits;
use crate::loctower::EncoderInputs;
use crate::model::{cross_entropy, Model};
use crate::nn::ParamStore;
use crate::rng::{stream, Rng};
use crate::trajtower::RoutingStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Adds gate noise during training.
    pub gate_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            epochs: 50,
            patience: 3,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            gate_noise: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} is out of range")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr");
        }
        if self.epochs == 0 {
            return bad("epochs");
        }
        if self.patience == 0 {
            return bad("patience");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("weight_decay/clip_norm");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let step = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                *p -= cfg.lr * (step + cfg.weight_decay * *p);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Encoder inputs for every city of a corpus, in corpus order.
pub fn city_inputs(corpus: &MultiCityCorpus) -> Result<Vec<EncoderInputs>> {
    corpus
        .cities
        .iter()
        .map(|c| EncoderInputs::from_features(&c.features))
        .collect()
}

/// Pads to the longest member plus its end token.
pub fn batch_of(trajs: &[&Trajectory]) -> Result<PaddedBatch> {
    let t = trajs.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
    pad_batch(trajs, t)
}

/// Loss and hit counts for one city and split.
#[derive(Clone, Debug, PartialEq)]
pub struct CityMetrics {
    pub city: String,
    /// Mean loss over supervised positions; NaN when there are none.
    pub loss: f64,
    pub hits: Hits,
}

/// One optimizer step. Returns the batch loss and the batch's hit counts
/// under the pre-update parameters.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    inputs: &EncoderInputs,
    batch: &PaddedBatch,
    cfg: &TrainConfig,
    noise: Option<&mut Rng>,
) -> Result<(f64, Hits)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true);
    let f = model.forward(&mut tape, &p, inputs, batch, noise, None)?;
    let loss = cross_entropy(&mut tape, f.logits, &f.targets)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss {value} on a {} batch at optimizer step {}",
            batch.city_id,
            opt.step + 1
        )));
    }
    let mut hits = Hits::default();
    hits.add_rows(tape.value(f.logits), &f.targets);
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    let norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient norm on a {} batch at optimizer step {}",
            batch.city_id,
            opt.step + 1
        )));
    }
    opt.update(&mut model.store, &grads, cfg);
    Ok((value, hits))
}

/// Noise-free evaluation of every city on `split`. Routing statistics, when
/// requested, are collected per city in corpus order.
pub fn evaluate(
    model: &Model,
    corpus: &MultiCityCorpus,
    inputs: &[EncoderInputs],
    split: Split,
    batch_size: usize,
    mut stats: Option<&mut Vec<RoutingStats>>,
) -> Result<Vec<CityMetrics>> {
    let mut out = Vec::with_capacity(corpus.cities.len());
    for (ci, city) in corpus.cities.iter().enumerate() {
        let trajs: Vec<&Trajectory> = city
            .splits
            .get(split)
            .iter()
            .filter(|t| t.len() >= 2)
            .collect();
        let mut total = 0.0;
        let mut hits = Hits::default();
        for chunk in trajs.chunks(batch_size.max(1)) {
            let batch = batch_of(chunk)?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, false);
            let st = stats.as_deref_mut().map(|s| &mut s[ci]);
            let f = model.forward(&mut tape, &p, &inputs[ci], &batch, None, st)?;
            let loss = cross_entropy(&mut tape, f.logits, &f.targets)?;
            total += tape.value(loss).item() * f.targets.len() as f64;
            hits.add_rows(tape.value(f.logits), &f.targets);
        }
        out.push(CityMetrics {
            city: city.id.clone(),
            loss: if hits.n == 0 {
                f64::NAN
            } else {
                total / hits.n as f64
            },
            hits,
        });
    }
    Ok(out)
}

/// Unweighted mean of the per-city mean losses, over cities with samples.
pub fn aggregate_loss(metrics: &[CityMetrics]) -> Option<f64> {
    let losses: Vec<f64> = metrics
        .iter()
        .filter(|m| m.hits.n > 0)
        .map(|m| m.loss)
        .collect();
    (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: Vec<CityMetrics>,
    pub val: Vec<CityMetrics>,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub opt: AdamW,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn checkpoint(&self, corpus_hash: u64) -> Checkpoint {
        Checkpoint {
            cfg: self.model.cfg.clone(),
            epoch: self.best_epoch as u64,
            corpus_hash,
            params: self.model.store.clone(),
            opt: self.opt.clone(),
        }
    }
}

/// Trains on the corpus train splits, validating after every epoch. Stops
/// once validation has not improved for `patience` epochs and returns the
/// best-validation parameters.
pub fn train_loop(
    mut model: Model,
    corpus: &MultiCityCorpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let inputs = city_inputs(corpus)?;
    let mut opt = AdamW::new(&model.store);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model, AdamW)> = None;
    let mut waited = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let mut noise = stream(cfg.seed, &format!("noise/{epoch}"));
        let mut sums = vec![(0.0, Hits::default()); corpus.cities.len()];
        for br in sample_schedule(corpus, cfg.batch_size, cfg.seed, epoch) {
            let city = &corpus.cities[br.city];
            let trajs: Vec<&Trajectory> = br
                .indices
                .iter()
                .map(|&i| &city.splits.train[i])
                .filter(|t| t.len() >= 2)
                .collect();
            if trajs.is_empty() {
                continue;
            }
            let batch = batch_of(&trajs)?;
            let rng = cfg.gate_noise.then_some(&mut noise);
            let (loss, hits) =
                train_step(&mut model, &mut opt, &inputs[br.city], &batch, cfg, rng)?;
            sums[br.city].0 += loss * hits.n as f64;
            sums[br.city].1.merge(&hits);
        }
        let train = corpus
            .cities
            .iter()
            .zip(sums)
            .map(|(c, (total, hits))| CityMetrics {
                city: c.id.clone(),
                loss: if hits.n == 0 {
                    f64::NAN
                } else {
                    total / hits.n as f64
                },
                hits,
            })
            .collect();
        let val = evaluate(&model, corpus, &inputs, Split::Val, cfg.batch_size, None)?;
        let val_loss = aggregate_loss(&val)
            .ok_or_else(|| Error::Data("no validation trajectories with a transition".into()))?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochLog {
            epoch,
            train,
            val,
            val_loss,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.clone(), opt.clone()));
            waited = 0;
        } else {
            waited += 1;
            if waited >= cfg.patience {
                stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    let (best_val, best_epoch, model, opt) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        opt,
        best_epoch,
        best_val,
        history,
        stopped_early,
    })
}

pub const METRICS_HEADER: &str = "epoch,split,city,loss,acc1,acc3,acc5";

/// Metrics log rows for one split, with a trailing `all` row pooling cities.
pub fn metrics_rows(epoch: usize, split: &str, metrics: &[CityMetrics]) -> Vec<String> {
    let mut rows = Vec::new();
    let mut pooled = Hits::default();
    for m in metrics {
        let a = m.hits.acc();
        rows.push(format!(
            "{epoch},{split},{},{},{},{},{}",
            m.city, m.loss, a[0], a[1], a[2]
        ));
        pooled.merge(&m.hits);
    }
    if let Some(loss) = aggregate_loss(metrics) {
        let a = pooled.acc();
        rows.push(format!(
            "{epoch},{split},all,{loss},{},{},{}",
            a[0], a[1], a[2]
        ));
    }
    rows
}

/// The full metrics log as CSV text.
pub fn metrics_csv(history: &[EpochLog]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in history {
        for row in metrics_rows(e.epoch, "train", &e.train)
            .into_iter()
            .chain(metrics_rows(e.epoch, "val", &e.val))
        {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}
