//! The pool-based active-learning loop.
//!
//! Round 0 finetunes a fresh head (and the trunk) on the seed set. Every later
//! round scores the pool with the previous round's model, moves the top-k
//! examples into the labeled set, resets to the original backbone with a
//! freshly seeded head, and retrains from scratch on the enlarged set.

use crate::acquisition::{select_batch, AcqFn, AcquisitionScore};
use crate::datagen::{
    canonical_names, generate, subgroup_key, subgroup_of, Attributes, Confound, DatasetSpec, LabeledExample,
    SplitSet, SubgroupId,
};
use crate::error::{config_err, data_err, Result};
use crate::model::{forward, train_samples, ModelParams, Sample, TrainConfig, TrainTrace};
use crate::pretrain::{attach_head, pretrain_from_splits, random_backbone, Backbone, Provenance};
use crate::rng::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub backbone: Provenance,
    /// Trunk widths after the input layer; the last one is the penultimate feature width.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    pub acq_fn: AcqFn,
    pub seed_size: usize,
    pub batch_k: usize,
    pub rounds: usize,
    /// Score only a fresh random subset of this many pool examples each round.
    #[serde(default)]
    pub pool_subsample: Option<usize>,
    pub train: TrainConfig,
    pub eval_attributes: Vec<String>,
    pub master_seed: u64,
    /// Continue from the previous round's weights instead of resetting.
    #[serde(default)]
    pub warm_start: bool,
    /// Hold the trunk fixed during finetuning.
    #[serde(default)]
    pub frozen_trunk: bool,
    /// Probability that a revealed label is replaced by a different class.
    #[serde(default)]
    pub label_noise: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        batch_size: 64,
        max_steps: 1500,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn trunk_arch(&self) -> Vec<usize> {
        std::iter::once(self.dataset.d).chain(self.hidden.iter().copied()).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = self.dataset.violations("dataset.");
        out.extend(self.train.violations("train."));
        out.extend(self.pretrain.violations("pretrain."));
        if self.train.max_steps == 0 {
            out.push("train.max_steps: must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            out.push(format!("hidden: needs at least one positive width, got {:?}", self.hidden));
        }
        if self.seed_size == 0 {
            out.push("seed_size: must be positive".into());
        }
        if self.seed_size > self.dataset.n_seed {
            out.push(format!(
                "seed_size: {} exceeds dataset.n_seed = {}",
                self.seed_size, self.dataset.n_seed
            ));
        }
        if self.rounds > 0 && self.batch_k == 0 {
            out.push("batch_k: must be positive when rounds > 0".into());
        }
        let budget = self.seed_size.saturating_add(self.rounds.saturating_mul(self.batch_k));
        let available = self.dataset.n_seed + self.dataset.n_pool;
        if budget > available {
            out.push(format!(
                "rounds: seed_size + rounds × batch_k = {budget} exceeds n_seed + n_pool = {available}"
            ));
        }
        if self.pool_subsample == Some(0) {
            out.push("pool_subsample: must be positive when set".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            out.push(format!("label_noise: must lie in [0, 1), got {}", self.label_noise));
        }
        let domains = self.dataset.domains();
        for a in &self.eval_attributes {
            if !domains.contains_key(a) {
                let known: Vec<&String> = domains.keys().collect();
                out.push(format!("eval_attributes: unknown attribute '{a}' (known: {known:?})"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(config_err(v.join("; ")))
        }
    }

    pub fn root_stream(&self) -> SeedStream {
        SeedStream::new(self.master_seed)
    }

    pub fn data_stream(&self) -> SeedStream {
        self.root_stream().child("data")
    }

    pub fn backbone_stream(&self) -> SeedStream {
        self.root_stream().child("backbone")
    }

    pub fn round_stream(&self, round: usize) -> SeedStream {
        self.root_stream().child(format!("round-{round}"))
    }

    pub fn head_stream(&self, round: usize) -> SeedStream {
        self.round_stream(round).child("head")
    }
}

/// The labeled set S, the unlabeled pool P, and the current round.
#[derive(Clone, Debug)]
pub struct PoolState {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<LabeledExample>,
    pub round: usize,
}

impl PoolState {
    pub fn new(labeled: Vec<LabeledExample>, unlabeled: Vec<LabeledExample>) -> Result<Self> {
        let ids: HashSet<u64> = labeled.iter().map(|e| e.id).collect();
        if let Some(e) = unlabeled.iter().find(|e| ids.contains(&e.id)) {
            return Err(data_err(format!("example {} is both labeled and unlabeled", e.id)));
        }
        Ok(Self {
            labeled,
            unlabeled,
            round: 0,
        })
    }

    /// Removes `ids` from the pool, returning them in the given order.
    pub fn take(&mut self, ids: &[u64]) -> Result<Vec<LabeledExample>> {
        let wanted: HashSet<u64> = ids.iter().copied().collect();
        let (mut taken, rest): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.unlabeled).into_iter().partition(|e| wanted.contains(&e.id));
        self.unlabeled = rest;
        if taken.len() != wanted.len() {
            return Err(data_err("acquired id not present in the pool"));
        }
        let pos: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        taken.sort_by_key(|e| pos[&e.id]);
        Ok(taken)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionEntry {
    pub round: usize,
    pub example_id: u64,
    pub score: f64,
    pub label: usize,
    pub attributes: Attributes,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AcquisitionLog {
    pub entries: Vec<AcquisitionEntry>,
}

impl AcquisitionLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> usize {
        self.entries.iter().map(|e| e.round).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub overall: f64,
    pub per_group: BTreeMap<SubgroupId, f64>,
    pub worst_group: f64,
    /// Unweighted mean over core≠spurious cells; `None` without a confound in the eval attributes.
    pub mismatched_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub n_labeled: usize,
    pub n_acquired: usize,
    pub metrics: Metrics,
    pub train: TrainTrace,
    /// SHA-256 of the parameters this round's training started from.
    pub init_digest: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub rounds: Vec<RoundMetrics>,
    pub log: AcquisitionLog,
    pub pool_size: usize,
    pub pool_prevalence: BTreeMap<SubgroupId, f64>,
    pub pool_mismatched_fraction: Option<f64>,
    pub confound: Option<Confound>,
    pub pretrain_trace: Option<TrainTrace>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn final_round(&self) -> &RoundMetrics {
        self.rounds.last().expect("round 0 always recorded")
    }

    /// Mean overall accuracy over rounds 1..=R (round 0 alone when no rounds ran).
    pub fn mean_accuracy_after_seed(&self) -> f64 {
        let tail: Vec<f64> = self.rounds.iter().skip(1).map(|r| r.metrics.overall).collect();
        if tail.is_empty() {
            self.rounds[0].metrics.overall
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

pub fn params_digest(params: &ModelParams) -> String {
    let digest = Sha256::digest(params.to_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Cell {
    attributes: Attributes,
    correct: usize,
    total: usize,
}

pub fn evaluate(
    model: &ModelParams,
    test: &[LabeledExample],
    eval_attributes: &[String],
    confound: Option<&Confound>,
) -> Result<Metrics> {
    let predictions = test
        .iter()
        .map(|e| model.predict(&e.features))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(test, &predictions, eval_attributes, confound)
}

/// Metrics from precomputed predictions, aligned with `test`.
pub fn evaluate_predictions(
    test: &[LabeledExample],
    predictions: &[usize],
    eval_attributes: &[String],
    confound: Option<&Confound>,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(data_err("test set is empty"));
    }
    let names = canonical_names(eval_attributes);
    let mut cells: BTreeMap<SubgroupId, Cell> = BTreeMap::new();
    let mut correct = 0usize;
    for (ex, &pred) in test.iter().zip(predictions) {
        let key = subgroup_of(ex, &names)?;
        let hit = usize::from(pred == ex.label);
        correct += hit;
        let cell = cells.entry(key).or_insert_with(|| Cell {
            attributes: names
                .iter()
                .map(|n| (n.clone(), ex.attributes[n].clone()))
                .collect(),
            correct: 0,
            total: 0,
        });
        cell.correct += hit;
        cell.total += 1;
    }
    let per_group: BTreeMap<SubgroupId, f64> = cells
        .iter()
        .map(|(k, c)| (k.clone(), c.correct as f64 / c.total as f64))
        .collect();
    let worst_group = per_group.values().cloned().fold(f64::INFINITY, f64::min);
    let mismatched_mean = confound.and_then(|cf| {
        let accs: Vec<f64> = cells
            .iter()
            .filter(|(_, c)| cf.is_mismatched(&c.attributes) == Some(true))
            .map(|(k, _)| per_group[k])
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    });
    Ok(Metrics {
        overall: correct as f64 / test.len() as f64,
        per_group,
        worst_group,
        mismatched_mean,
    })
}

/// Data and backbone shared by every round of one experiment.
pub struct Prepared {
    pub splits: SplitSet,
    pub backbone: Backbone,
    pub pretrain_trace: Option<TrainTrace>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let splits = generate(&cfg.dataset, &cfg.data_stream())?;
    let arch = cfg.trunk_arch();
    let (backbone, pretrain_trace) = match cfg.backbone {
        Provenance::Pretrained => {
            let (b, t) = pretrain_from_splits(&splits, &arch, &cfg.pretrain, &cfg.backbone_stream())?;
            (b, Some(t))
        }
        Provenance::Random => (random_backbone(&arch, &cfg.backbone_stream())?, None),
    };
    Ok(Prepared {
        splits,
        backbone,
        pretrain_trace,
    })
}

/// The parameters training starts from in `round` when not warm-starting.
pub fn reset_params(prepared: &Prepared, cfg: &ExperimentConfig, round: usize) -> Result<ModelParams> {
    attach_head(&prepared.backbone, prepared.splits.num_classes, &cfg.head_stream(round))
}

fn train_round(
    init: ModelParams,
    labeled: &[LabeledExample],
    cfg: &ExperimentConfig,
    round: usize,
    frozen: usize,
) -> Result<(ModelParams, TrainTrace)> {
    let samples: Vec<Sample<'_>> = labeled.iter().map(Sample::of).collect();
    let train_cfg = cfg.train.with_stream(cfg.round_stream(round).child("train"));
    train_samples(init, &samples, &train_cfg, frozen)
}

/// Finetunes the round-0 model on the seed set only.
pub fn train_seed_model(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<(ModelParams, TrainTrace)> {
    let labeled = &prepared.splits.seed[..cfg.seed_size];
    let frozen = if cfg.frozen_trunk { prepared.backbone.trunk().len() } else { 0 };
    train_round(reset_params(prepared, cfg, 0)?, labeled, cfg, 0, frozen)
}

fn prevalence(
    pool: &[LabeledExample],
    names: &[String],
    confound: Option<&Confound>,
) -> Result<(BTreeMap<SubgroupId, f64>, Option<f64>)> {
    let mut counts: BTreeMap<SubgroupId, usize> = BTreeMap::new();
    let mut mismatched = 0usize;
    let mut decided = true;
    for ex in pool {
        *counts.entry(subgroup_key(&ex.attributes, names)?).or_insert(0) += 1;
        match confound.and_then(|c| c.is_mismatched(&ex.attributes)) {
            Some(m) => mismatched += usize::from(m),
            None => decided = false,
        }
    }
    let n = pool.len().max(1) as f64;
    let map = counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect();
    let frac = (decided && confound.is_some() && !pool.is_empty()).then(|| mismatched as f64 / n);
    Ok((map, frac))
}

fn reveal(example: &LabeledExample, noise: f64, classes: usize, rng: &mut impl Rng) -> usize {
    if noise > 0.0 && rng.random::<f64>() < noise {
        let shift = rng.random_range(1..classes);
        (example.label + shift) % classes
    } else {
        example.label
    }
}

pub fn run_active_learning(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let prepared = prepare(cfg)?;
    run_prepared(&prepared, cfg)
}

/// Runs the loop on already generated data and backbone.
pub fn run_prepared(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let splits = &prepared.splits;
    let confound = splits.confound.as_ref();
    let names = canonical_names(&cfg.eval_attributes);
    let frozen = if cfg.frozen_trunk { prepared.backbone.trunk().len() } else { 0 };
    let mut warnings = prepared.backbone.warnings.clone();

    let mut state = PoolState::new(splits.seed[..cfg.seed_size].to_vec(), splits.pool.clone())?;
    let (pool_prevalence, pool_mismatched_fraction) = prevalence(&state.unlabeled, &names, confound)?;
    let pool_size = state.unlabeled.len();

    let init = reset_params(prepared, cfg, 0)?;
    let init_digest = params_digest(&init);
    let (mut model, trace) = train_round(init, &state.labeled, cfg, 0, frozen)?;
    let mut rounds = vec![RoundMetrics {
        round: 0,
        n_labeled: state.labeled.len(),
        n_acquired: 0,
        metrics: evaluate(&model, &splits.test, &names, confound)?,
        train: trace,
        init_digest,
    }];
    let mut log = AcquisitionLog::default();

    for r in 1..=cfg.rounds {
        state.round = r;
        let stream = cfg.round_stream(r);
        let mut candidates: Vec<usize> = (0..state.unlabeled.len()).collect();
        if let Some(m) = cfg.pool_subsample {
            if m < candidates.len() {
                candidates.shuffle(&mut stream.child("subsample").rng());
                candidates.truncate(m);
                candidates.sort_unstable();
            }
        }
        let probs = candidates
            .par_iter()
            .map(|&i| forward(&model, &state.unlabeled[i].features))
            .collect::<Result<Vec<_>>>()?;
        let mut acq_rng = stream.child("acquire").rng();
        let scores = candidates
            .iter()
            .zip(&probs)
            .map(|(&i, p)| {
                Ok(AcquisitionScore {
                    example_id: state.unlabeled[i].id,
                    score: cfg.acq_fn.score(p, &mut acq_rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let score_of: BTreeMap<u64, f64> = scores.iter().map(|s| (s.example_id, s.score)).collect();
        let ids = select_batch(&scores, cfg.batch_k)?;
        if ids.len() < cfg.batch_k {
            let msg = format!(
                "round {r}: pool exhausted, acquired {} of {} requested examples",
                ids.len(),
                cfg.batch_k
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut label_rng = stream.child("labels").rng();
        for mut ex in state.take(&ids)? {
            ex.label = reveal(&ex, cfg.label_noise, splits.num_classes, &mut label_rng);
            log.entries.push(AcquisitionEntry {
                round: r,
                example_id: ex.id,
                score: score_of[&ex.id],
                label: ex.label,
                attributes: ex.attributes.clone(),
            });
            state.labeled.push(ex);
        }
        let init = if cfg.warm_start {
            model.clone()
        } else {
            reset_params(prepared, cfg, r)?
        };
        let init_digest = params_digest(&init);
        let (trained, trace) = train_round(init, &state.labeled, cfg, r, frozen)?;
        model = trained;
        rounds.push(RoundMetrics {
            round: r,
            n_labeled: state.labeled.len(),
            n_acquired: ids.len(),
            metrics: evaluate(&model, &splits.test, &names, confound)?,
            train: trace,
            init_digest,
        });
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        provenance: prepared.backbone.provenance,
        rounds,
        log,
        pool_size,
        pool_prevalence,
        pool_mismatched_fraction,
        confound: splits.confound.clone(),
        pretrain_trace: prepared.pretrain_trace.clone(),
        warnings,
    })
}
