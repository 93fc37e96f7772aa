//! Acc@k metrics, baselines, exports and the joint-vs-separate harness.

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Tensor};
use crate::config::ModelConfig;
use crate::data::{MultiCityCorpus, Split, Trajectory, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::geo::{LocationFeatures, POI_DIM, RANK_BUCKETS};
use crate::loctower::EncoderInputs;
use crate::model::{cross_entropy, Model};
use crate::nn::{Linear, ParamStore};
use crate::rng::stream;
use crate::train::{
    aggregate_loss, city_inputs, clip_global_norm, evaluate, train_loop, AdamW, CityMetrics,
    TrainConfig, METRICS_HEADER,
};
use crate::trajtower::RoutingStats;

/// The cut-offs reported everywhere.
pub const KS: [usize; 3] = [1, 3, 5];

/// Zero-based rank of `target` in `scores`: the number of candidates scored
/// higher, plus equal-scored candidates with a lower id.
pub fn target_rank(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(n, &v)| v > s || (v == s && n < target))
        .count()
}

/// Fraction of rows of `scores: [M, N]` whose target ranks within the top `k`.
pub fn acc_at_k(scores: &Tensor, targets: &[usize], k: usize) -> Result<f64> {
    if targets.is_empty() || k == 0 {
        return Err(Error::invalid(
            "acc_at_k",
            "needs k >= 1 and at least one sample",
        ));
    }
    if scores.rows() != targets.len() {
        return Err(Error::shape("acc_at_k", scores.shape(), &[targets.len()]));
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| target_rank(scores.row(r), t) < k)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Running hit counts at [`KS`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hits {
    pub n: usize,
    pub hits: [usize; 3],
}

impl Hits {
    pub fn add(&mut self, scores: &[f64], target: usize) {
        let r = target_rank(scores, target);
        self.n += 1;
        for (h, &k) in self.hits.iter_mut().zip(&KS) {
            if r < k {
                *h += 1;
            }
        }
    }

    pub fn add_rows(&mut self, scores: &Tensor, targets: &[usize]) {
        for (r, &t) in targets.iter().enumerate() {
            self.add(scores.row(r), t);
        }
    }

    pub fn merge(&mut self, o: &Hits) {
        self.n += o.n;
        for (a, b) in self.hits.iter_mut().zip(&o.hits) {
            *a += b;
        }
    }

    /// Acc@1, Acc@3, Acc@5; zeros when empty.
    pub fn acc(&self) -> [f64; 3] {
        let n = self.n.max(1) as f64;
        self.hits.map(|h| h as f64 / n)
    }
}

/// Add-one smoothed first-order transition model over a city's vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovBaseline {
    /// `[N, N]` smoothed transition probabilities; rows of unseen contexts
    /// hold the fallback distribution.
    pub table: Tensor,
    /// Whether each context occurred in training.
    pub seen: Vec<bool>,
}

/// All `(from, to)` location pairs of consecutive stays.
pub fn transitions(trajs: &[Trajectory]) -> Vec<(usize, usize)> {
    trajs
        .iter()
        .flat_map(|t| t.points.windows(2).map(|w| (w[0].loc, w[1].loc)))
        .collect()
}

impl MarkovBaseline {
    pub fn fit(train: &[Trajectory], n: usize) -> Result<Self> {
        let pairs = transitions(train);
        if n == 0 {
            return Err(Error::invalid("markov_baseline", "empty vocabulary"));
        }
        let mut counts = vec![0.0; n * n];
        let mut freq = vec![0.0; n];
        for &(a, b) in &pairs {
            if a >= n || b >= n {
                return Err(Error::Data(format!(
                    "transition {a}->{b} outside vocabulary of {n}"
                )));
            }
            counts[a * n + b] += 1.0;
            freq[b] += 1.0;
        }
        let total: f64 = freq.iter().sum();
        let fallback: Vec<f64> = if total > 0.0 {
            freq.iter().map(|f| f / total).collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        let mut seen = vec![false; n];
        for a in 0..n {
            let row = &mut counts[a * n..(a + 1) * n];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                seen[a] = true;
                let denom = s + n as f64;
                row.iter_mut().for_each(|c| *c = (*c + 1.0) / denom);
            } else {
                row.copy_from_slice(&fallback);
            }
        }
        Ok(MarkovBaseline {
            table: Tensor::new(vec![n, n], counts)?,
            seen,
        })
    }

    /// Scores for every test transition, one row per transition, and the targets.
    pub fn score(&self, test: &[Trajectory]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.seen.len();
        let pairs = transitions(test);
        if pairs.is_empty() {
            return Err(Error::Data("no test transitions".into()));
        }
        let mut data = Vec::with_capacity(pairs.len() * n);
        for &(a, _) in &pairs {
            data.extend_from_slice(self.table.row(a));
        }
        Ok((
            Tensor::new(vec![pairs.len(), n], data)?,
            pairs.iter().map(|p| p.1).collect(),
        ))
    }
}

/// Markov baseline hit counts on `test`, scored through the shared Acc@k path.
pub fn markov_baseline(train: &[Trajectory], test: &[Trajectory], n: usize) -> Result<Hits> {
    let m = MarkovBaseline::fit(train, n)?;
    let (scores, targets) = m.score(test)?;
    let mut h = Hits::default();
    h.add_rows(&scores, &targets);
    Ok(h)
}

/// Width of the linear baseline input: POI features, coordinates, rank
/// one-hot and time-slot one-hot of the last observed stay.
pub const LINEAR_INPUT: usize = POI_DIM + 2 + RANK_BUCKETS + SLOTS_PER_DAY;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            lr: 1e-2,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Prefix inputs and next-location targets for every transition.
pub fn linear_inputs(
    trajs: &[Trajectory],
    f: &LocationFeatures,
) -> (Vec<[f64; LINEAR_INPUT]>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in trajs {
        for w in t.points.windows(2) {
            let mut x = [0.0; LINEAR_INPUT];
            let l = w[0].loc;
            x[..POI_DIM].copy_from_slice(&f.poi[l]);
            x[POI_DIM..POI_DIM + 2].copy_from_slice(&f.geo[l]);
            x[POI_DIM + 2 + f.rank[l] as usize] = 1.0;
            x[POI_DIM + 2 + RANK_BUCKETS + w[0].slot as usize] = 1.0;
            xs.push(x);
            ys.push(w[1].loc);
        }
    }
    (xs, ys)
}

/// A single linear map from last-stay features to N logits.
#[derive(Clone, Debug)]
pub struct LinearBaseline {
    pub store: ParamStore,
    pub map: Linear,
}

impl LinearBaseline {
    fn design(xs: &[[f64; LINEAR_INPUT]], idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * LINEAR_INPUT);
        for &i in idx {
            data.extend_from_slice(&xs[i]);
        }
        Tensor::new(vec![idx.len(), LINEAR_INPUT], data).expect("non-empty batch")
    }

    /// Trains with cross-entropy and the same optimizer as the main model.
    pub fn fit(train: &[Trajectory], f: &LocationFeatures, cfg: &LinearConfig) -> Result<Self> {
        let (xs, ys) = linear_inputs(train, f);
        if xs.is_empty() {
            return Err(Error::Data("no train transitions".into()));
        }
        let mut rng = stream(cfg.seed, "linear");
        let mut store = ParamStore::new();
        let map = Linear::new(&mut store, "linear", LINEAR_INPUT, f.len(), &mut rng);
        let tc = TrainConfig {
            lr: cfg.lr,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape, true);
                let x = tape.constant(Self::design(&xs, chunk));
                let logits = map.forward(&mut tape, &p, x)?;
                let t: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
                let loss = cross_entropy(&mut tape, logits, &t)?;
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::Numerical("linear baseline loss diverged".into()));
                }
                tape.backward(loss)?;
                let mut grads: Vec<Vec<f64>> = p
                    .vars()
                    .iter()
                    .map(|&v| tape.grad(v).expect("param").to_vec())
                    .collect();
                clip_global_norm(&mut grads, tc.clip_norm);
                opt.update(&mut store, &grads, &tc);
            }
        }
        Ok(LinearBaseline { store, map })
    }

    pub fn score(&self, test: &[Trajectory], f: &LocationFeatures) -> Result<(Tensor, Vec<usize>)> {
        let (xs, ys) = linear_inputs(test, f);
        if xs.is_empty() {
            return Err(Error::Data("no test transitions".into()));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let idx: Vec<usize> = (0..xs.len()).collect();
        let x = tape.constant(Self::design(&xs, &idx));
        let logits = self.map.forward(&mut tape, &p, x)?;
        Ok((tape.value(logits).clone(), ys))
    }
}

pub fn linear_baseline(
    train: &[Trajectory],
    test: &[Trajectory],
    f: &LocationFeatures,
    cfg: &LinearConfig,
) -> Result<Hits> {
    let m = LinearBaseline::fit(train, f, cfg)?;
    let (scores, targets) = m.score(test, f)?;
    let mut h = Hits::default();
    h.add_rows(&scores, &targets);
    Ok(h)
}

/// Accuracy columns for one city.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub city: String,
    pub model: Option<CityMetrics>,
    pub markov: Option<Hits>,
    pub linear: Option<Hits>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub rows: Vec<ReportRow>,
    /// Free-form provenance lines (config, checkpoint, corpus hash).
    pub provenance: Vec<String>,
}

fn fmt_acc(h: Option<&Hits>) -> String {
    match h {
        Some(h) => {
            let a = h.acc();
            format!("{:>7.4} {:>7.4} {:>7.4}", a[0], a[1], a[2])
        }
        None => format!("{:>7} {:>7} {:>7}", "-", "-", "-"),
    }
}

impl EvalReport {
    /// Rows pooled over cities.
    pub fn overall(&self) -> ReportRow {
        let pool = |get: &dyn Fn(&ReportRow) -> Option<Hits>| {
            let mut acc: Option<Hits> = None;
            for r in &self.rows {
                if let Some(h) = get(r) {
                    acc.get_or_insert_with(Hits::default).merge(&h);
                }
            }
            acc
        };
        let model_hits = pool(&|r| r.model.as_ref().map(|m| m.hits));
        let losses: Vec<CityMetrics> = self.rows.iter().filter_map(|r| r.model.clone()).collect();
        ReportRow {
            city: "all".into(),
            model: model_hits.map(|hits| CityMetrics {
                city: "all".into(),
                loss: aggregate_loss(&losses).unwrap_or(f64::NAN),
                hits,
            }),
            markov: pool(&|r| r.markov),
            linear: pool(&|r| r.linear),
        }
    }

    /// CSV with the metrics-log columns; baselines appear as `<split>/markov`
    /// and `<split>/linear` rows with an empty loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in self.rows.iter().cloned().chain([self.overall()]) {
            if let Some(m) = &r.model {
                let a = m.hits.acc();
                out.push_str(&format!(
                    "0,{},{},{},{},{},{}\n",
                    self.split, r.city, m.loss, a[0], a[1], a[2]
                ));
            }
            for (name, h) in [("markov", r.markov), ("linear", r.linear)] {
                if let Some(h) = h {
                    let a = h.acc();
                    out.push_str(&format!(
                        "0,{}/{name},{},,{},{},{}\n",
                        self.split, r.city, a[0], a[1], a[2]
                    ));
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.provenance {
            out.push_str(&format!("# {p}\n"));
        }
        out.push_str(&format!(
            "{:<12} {:>7} {:>9}  {:^23}  {:^23}  {:^23}\n",
            "city", "n", "loss", "model @1 @3 @5", "markov @1 @3 @5", "linear @1 @3 @5"
        ));
        for r in self.rows.iter().cloned().chain([self.overall()]) {
            let n = r
                .model
                .as_ref()
                .map(|m| m.hits.n)
                .or(r.markov.map(|h| h.n))
                .unwrap_or(0);
            let loss = r
                .model
                .as_ref()
                .map_or("-".to_string(), |m| format!("{:.4}", m.loss));
            out.push_str(&format!(
                "{:<12} {:>7} {:>9}  {}  {}  {}\n",
                r.city,
                n,
                loss,
                fmt_acc(r.model.as_ref().map(|m| &m.hits)),
                fmt_acc(r.markov.as_ref()),
                fmt_acc(r.linear.as_ref())
            ));
        }
        out
    }
}

/// Model accuracy on `split` for every city of the corpus.
pub fn evaluate_model(
    model: &Model,
    corpus: &MultiCityCorpus,
    split: Split,
    batch_size: usize,
) -> Result<EvalReport> {
    let inputs = city_inputs(corpus)?;
    let metrics = evaluate(model, corpus, &inputs, split, batch_size, None)?;
    Ok(EvalReport {
        split: split.name().to_string(),
        rows: metrics
            .into_iter()
            .map(|m| ReportRow {
                city: m.city.clone(),
                model: Some(m),
                markov: None,
                linear: None,
            })
            .collect(),
        provenance: vec![
            format!("config_hash {:016x}", model.cfg.hash()),
            format!("corpus_hash {:016x}", corpus.manifest_hash()),
        ],
    })
}

/// Mean gate weight per layer, city and expert over `split`.
pub fn expert_usage(
    model: &Model,
    corpus: &MultiCityCorpus,
    split: Split,
    batch_size: usize,
) -> Result<String> {
    let inputs = city_inputs(corpus)?;
    let mut stats =
        vec![RoutingStats::new(model.cfg.layers, model.cfg.experts); corpus.cities.len()];
    evaluate(model, corpus, &inputs, split, batch_size, Some(&mut stats))?;
    let mut out = String::from("layer,city,expert,mean_gate_weight\n");
    for l in 0..model.cfg.layers {
        for (c, st) in corpus.cities.iter().zip(&stats) {
            for (e, w) in st.mean(l).iter().enumerate() {
                out.push_str(&format!("{l},{},{e},{w}\n", c.id));
            }
        }
    }
    Ok(out)
}

pub const EMBEDDING_STAGES: [&str; 2] = ["pre", "post"];

/// Encoder output (`pre`) and candidate embeddings (`post`) of every
/// location, as `city,location_id,stage,v_0..v_{d-1}`. Values use the
/// shortest representation that parses back to the same float.
pub fn export_embeddings(model: &Model, corpus: &MultiCityCorpus) -> Result<String> {
    let d = model.cfg.d_model;
    let mut out = String::from("city,location_id,stage");
    for i in 0..d {
        out.push_str(&format!(",v_{i}"));
    }
    out.push('\n');
    for c in &corpus.cities {
        let inputs = EncoderInputs::from_features(&c.features)?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, false);
        let t = model.loc.forward(&mut tape, &p, &inputs)?;
        for (stage, v) in EMBEDDING_STAGES.iter().zip([t.encoded, t.candidates]) {
            let v = tape.value(v);
            for n in 0..v.rows() {
                out.push_str(&format!("{},{n},{stage}", c.id));
                for x in v.row(n) {
                    out.push_str(&format!(",{x:?}"));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// One trained arm evaluated on one city.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub city: String,
    pub test: CityMetrics,
    /// Validation loss on this city after each epoch.
    pub curve: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Joint,
    Separate,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Joint => "joint",
            Arm::Separate => "separate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub cities: Vec<String>,
    pub results: Vec<ArmResult>,
}

impl Comparison {
    pub fn get(&self, arm: Arm, seed: u64, city: &str) -> Option<&ArmResult> {
        self.results
            .iter()
            .find(|r| r.arm == arm && r.seed == seed && r.city == city)
    }

    /// Test Acc@k of `arm` on `city`, averaged over seeds.
    pub fn mean_acc(&self, arm: Arm, city: &str) -> [f64; 3] {
        let rs: Vec<[f64; 3]> = self
            .results
            .iter()
            .filter(|r| r.arm == arm && r.city == city)
            .map(|r| r.test.hits.acc())
            .collect();
        let n = rs.len().max(1) as f64;
        std::array::from_fn(|k| rs.iter().map(|a| a[k]).sum::<f64>() / n)
    }

    pub fn val_loss_at(&self, arm: Arm, seed: u64, city: &str, epoch: usize) -> Option<f64> {
        self.get(arm, seed, city)?
            .curve
            .iter()
            .find(|&&(e, _)| e == epoch)
            .map(|&(_, l)| l)
    }

    /// `seed,city,joint_acc1..5,separate_acc1..5,delta_acc1..5`, with a
    /// `mean` row per city.
    pub fn table_csv(&self) -> String {
        let mut out = String::from(
            "seed,city,joint_acc1,joint_acc3,joint_acc5,separate_acc1,separate_acc3,separate_acc5,delta_acc1,delta_acc3,delta_acc5\n",
        );
        let row = |seed: &str, city: &str, j: [f64; 3], s: [f64; 3]| {
            format!(
                "{seed},{city},{},{},{},{},{},{},{},{},{}\n",
                j[0],
                j[1],
                j[2],
                s[0],
                s[1],
                s[2],
                j[0] - s[0],
                j[1] - s[1],
                j[2] - s[2]
            )
        };
        for city in &self.cities {
            for &seed in &self.seeds {
                if let (Some(j), Some(s)) = (
                    self.get(Arm::Joint, seed, city),
                    self.get(Arm::Separate, seed, city),
                ) {
                    out.push_str(&row(
                        &seed.to_string(),
                        city,
                        j.test.hits.acc(),
                        s.test.hits.acc(),
                    ));
                }
            }
            out.push_str(&row(
                "mean",
                city,
                self.mean_acc(Arm::Joint, city),
                self.mean_acc(Arm::Separate, city),
            ));
        }
        out
    }

    /// `arm,seed,epoch,city,val_loss`
    pub fn curves_csv(&self, arm: Arm) -> String {
        let mut out = String::from("arm,seed,epoch,city,val_loss\n");
        for r in self.results.iter().filter(|r| r.arm == arm) {
            for &(e, l) in &r.curve {
                out.push_str(&format!("{},{},{e},{},{l}\n", arm.name(), r.seed, r.city));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>9} {:>9}   seeds {:?}\n",
            "city", "joint@1", "sep@1", "delta", self.seeds
        );
        for city in &self.cities {
            let (j, s) = (
                self.mean_acc(Arm::Joint, city)[0],
                self.mean_acc(Arm::Separate, city)[0],
            );
            out.push_str(&format!("{city:<12} {j:>9.4} {s:>9.4} {:>+9.4}\n", j - s));
        }
        out
    }
}

fn arm_results(
    arm: Arm,
    seed: u64,
    outcome: &crate::train::TrainOutcome,
    corpus: &MultiCityCorpus,
    batch_size: usize,
) -> Result<Vec<ArmResult>> {
    let inputs = city_inputs(corpus)?;
    let test = evaluate(
        &outcome.model,
        corpus,
        &inputs,
        Split::Test,
        batch_size,
        None,
    )?;
    Ok(test
        .into_iter()
        .enumerate()
        .map(|(ci, m)| ArmResult {
            arm,
            seed,
            city: m.city.clone(),
            curve: outcome
                .history
                .iter()
                .map(|e| (e.epoch, e.val[ci].loss))
                .collect(),
            test: m,
        })
        .collect())
}

/// Trains one model on all cities and one model per city, for every seed.
/// Both arms share the initialization seed, training configuration and
/// evaluation sets; each arm is scored on the test split.
pub fn compare_joint_vs_separate(
    corpus: &MultiCityCorpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Comparison> {
    if corpus.cities.len() < 2 {
        return Err(Error::Config("comparison needs at least two cities".into()));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        let tc = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let joint = train_loop(Model::new(model_cfg.clone(), seed)?, corpus, &tc)?;
        results.extend(arm_results(
            Arm::Joint,
            seed,
            &joint,
            corpus,
            tc.batch_size,
        )?);
        for c in &corpus.cities {
            let single = corpus.subset(&[c.id.as_str()])?;
            let sep = train_loop(Model::new(model_cfg.clone(), seed)?, &single, &tc)?;
            results.extend(arm_results(
                Arm::Separate,
                seed,
                &sep,
                &single,
                tc.batch_size,
            )?);
        }
    }
    Ok(Comparison {
        seeds: seeds.to_vec(),
        cities: corpus.cities.iter().map(|c| c.id.clone()).collect(),
        results,
    })
}
