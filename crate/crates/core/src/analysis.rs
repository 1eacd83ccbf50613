//! Post-hoc analyses over experiment reports: what got acquired, how much
//! it was upsampled, how label-efficient one policy is relative to another,
//! and how linearly separable the latent attributes are in a feature space.

use crate::acquisition::AcqFn;
use crate::al_loop::{prepare, run_prepared, AcquisitionLog, ExperimentConfig, ExperimentReport};
use crate::datagen::{round_half_up, subgroup_key, SubgroupId};
use crate::error::{config_err, data_err, Error, Result};
use crate::model::{init_mlp, Sample, TrainConfig};
use crate::rng::SeedStream;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct LearningCurve {
    points: Vec<(usize, f64)>,
}

impl LearningCurve {
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(data_err("learning curve n_labeled must be strictly increasing"));
        }
        if points.iter().any(|p| !(0.0..=1.0).contains(&p.1)) {
            return Err(data_err("learning curve accuracies must lie in [0, 1]"));
        }
        Ok(Self { points })
    }

    /// (n_labeled, overall accuracy) per round.
    pub fn from_report(report: &ExperimentReport) -> Result<Self> {
        Self::new(report.rounds.iter().map(|r| (r.n_labeled, r.metrics.overall)).collect())
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelEfficiency {
    Factor(f64),
    NotReached,
}

/// How many times fewer labels `target` needed to first match the final
/// accuracy of `reference`. No interpolation between curve points.
pub fn label_efficiency(target: &LearningCurve, reference: &LearningCurve) -> Result<LabelEfficiency> {
    let (Some(&(ref_n, ref_acc)), Some(_)) = (reference.points.last(), target.points.first()) else {
        return Err(data_err("label efficiency needs two non-empty curves"));
    };
    Ok(match target.points.iter().find(|&&(_, acc)| acc >= ref_acc) {
        Some(&(n, _)) if n > 0 => LabelEfficiency::Factor(ref_n as f64 / n as f64),
        Some(_) => LabelEfficiency::Factor(f64::INFINITY),
        None => LabelEfficiency::NotReached,
    })
}

/// Cumulative acquisitions per subgroup; row `r` covers rounds 1..=r.
#[derive(Clone, Debug, PartialEq)]
pub struct Composition {
    pub subgroups: Vec<SubgroupId>,
    pub cumulative: Vec<Vec<usize>>,
}

pub fn acquisition_composition(
    log: &AcquisitionLog,
    pool_prevalence: &BTreeMap<SubgroupId, f64>,
    attribute_names: &[String],
) -> Result<Composition> {
    let mut keys: Vec<SubgroupId> = Vec::with_capacity(log.len());
    for e in &log.entries {
        keys.push(subgroup_key(&e.attributes, attribute_names)?);
    }
    let mut subgroups: Vec<SubgroupId> = pool_prevalence.keys().cloned().collect();
    subgroups.extend(keys.iter().cloned());
    subgroups.sort();
    subgroups.dedup();
    let index: BTreeMap<&SubgroupId, usize> = subgroups.iter().enumerate().map(|(i, s)| (s, i)).collect();
    let rounds = log.rounds();
    let mut per_round = vec![vec![0usize; subgroups.len()]; rounds + 1];
    for (e, k) in log.entries.iter().zip(&keys) {
        per_round[e.round][index[k]] += 1;
    }
    for r in 1..per_round.len() {
        let (done, rest) = per_round.split_at_mut(r);
        for (c, p) in rest[0].iter_mut().zip(&done[r - 1]) {
            *c += p;
        }
    }
    Ok(Composition {
        subgroups,
        cumulative: per_round,
    })
}

fn ratio(acquired: usize, total: usize, prevalence: f64, what: &str) -> Result<f64> {
    if !(prevalence > 0.0) {
        return Err(Error::UndefinedRatio(format!("{what} has zero prevalence in the pool")));
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(acquired as f64 / total as f64 / prevalence)
}

/// Acquired fraction of `subgroup` divided by its pool prevalence.
pub fn upsampling_ratio(
    log: &AcquisitionLog,
    pool_prevalence: &BTreeMap<SubgroupId, f64>,
    subgroup: &SubgroupId,
    attribute_names: &[String],
) -> Result<f64> {
    let prevalence = pool_prevalence.get(subgroup).copied().unwrap_or(0.0);
    let mut hits = 0;
    for e in &log.entries {
        if &subgroup_key(&e.attributes, attribute_names)? == subgroup {
            hits += 1;
        }
    }
    ratio(hits, log.len(), prevalence, &format!("subgroup '{subgroup}'"))
}

/// Upsampling ratio of the union of core≠spurious cells.
pub fn mismatched_upsampling_ratio(report: &ExperimentReport) -> Result<f64> {
    let confound = report
        .confound
        .as_ref()
        .ok_or_else(|| data_err("dataset has no core/spurious confound"))?;
    let prevalence = report.pool_mismatched_fraction.unwrap_or(0.0);
    let mut hits = 0;
    for e in &report.log.entries {
        let m = confound
            .is_mismatched(&e.attributes)
            .ok_or_else(|| data_err(format!("example {} lacks confound attributes", e.example_id)))?;
        hits += usize::from(m);
    }
    ratio(hits, report.log.len(), prevalence, "the mismatched subgroup")
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Sample std / sqrt(n); zero for a single value.
pub fn standard_error(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    sample_std(values) / (values.len() as f64).sqrt()
}

/// Mean and the half-width of a Gaussian-approximation 95% interval.
pub fn mean_and_ci(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(data_err(format!("need at least two values, got {}", values.len())));
    }
    Ok((mean(values), 1.96 * standard_error(values)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub per_class_accuracy: BTreeMap<SubgroupId, f64>,
    pub overall: f64,
    pub rebalanced_counts: BTreeMap<SubgroupId, usize>,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Fraction of each subgroup's rebalanced examples used to fit the probe.
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;

/// Fits a softmax-linear classifier that predicts the subgroup from frozen
/// features, after downsampling every subgroup to the minority count and
/// holding out a stratified 20% slice for evaluation. Features are z-scored
/// with statistics from the training slice.
pub fn linear_probe(
    features: &[(Vec<f64>, SubgroupId)],
    cfg: &TrainConfig,
    stream: &SeedStream,
) -> Result<ProbeResult> {
    let mut groups: BTreeMap<&SubgroupId, Vec<&[f64]>> = BTreeMap::new();
    for (x, g) in features {
        groups.entry(g).or_default().push(x);
    }
    if groups.len() < 2 {
        return Err(data_err(format!("linear probe needs at least two subgroups, got {}", groups.len())));
    }
    if let Some((g, xs)) = groups.iter().find(|(_, xs)| xs.len() < 2) {
        return Err(data_err(format!("subgroup '{g}' has {} example(s), need at least 2", xs.len())));
    }
    let width = features[0].0.len();
    if features.iter().any(|(x, _)| x.len() != width) {
        return Err(data_err("probe features have inconsistent widths"));
    }
    let minority = groups.values().map(Vec::len).min().unwrap();
    let n_eval = (minority - round_half_up(minority as f64 * PROBE_TRAIN_FRACTION).min(minority)).max(1);
    let n_train = minority - n_eval;

    let mut rng = stream.child("rebalance").rng();
    let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut eval: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut rebalanced_counts = BTreeMap::new();
    for (class, (g, xs)) in groups.iter().enumerate() {
        let mut xs = xs.clone();
        xs.shuffle(&mut rng);
        xs.truncate(minority);
        rebalanced_counts.insert((*g).clone(), xs.len());
        for (i, x) in xs.into_iter().enumerate() {
            let item = (x.to_vec(), class);
            if i < n_train {
                train.push(item);
            } else {
                eval.push(item);
            }
        }
    }

    let (mu, sd) = column_stats(train.iter().map(|(x, _)| x.as_slice()), width);
    let standardize = |x: &mut Vec<f64>| {
        for ((v, m), s) in x.iter_mut().zip(&mu).zip(&sd) {
            *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
        }
    };
    train.iter_mut().for_each(|(x, _)| standardize(x));
    eval.iter_mut().for_each(|(x, _)| standardize(x));

    let classes = groups.len();
    let init = init_mlp(&[width, classes], &stream.child("probe-init"))?;
    let samples: Vec<Sample<'_>> = train.iter().map(|(x, y)| Sample { x, y: *y }).collect();
    let (probe, _) = crate::model::train_samples(init, &samples, &cfg.with_stream(stream.child("probe-sgd")), 0)?;

    let keys: Vec<&SubgroupId> = groups.keys().copied().collect();
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (x, y) in &eval {
        totals[*y] += 1;
        if probe.predict(x)? == *y {
            hits[*y] += 1;
        }
    }
    let per_class_accuracy = keys
        .iter()
        .enumerate()
        .map(|(i, k)| ((*k).clone(), hits[i] as f64 / totals[i] as f64))
        .collect();
    Ok(ProbeResult {
        per_class_accuracy,
        overall: hits.iter().sum::<usize>() as f64 / eval.len() as f64,
        rebalanced_counts,
        n_train: train.len(),
        n_eval: eval.len(),
    })
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mu = vec![0.0; width];
    for r in rows.clone() {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mu) {
            *s += (v - m).powi(2);
        }
    }
    let sd = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 0.0 }).collect();
    (mu, sd)
}

/// One (level, seed) cell of a dose-response sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseCell {
    pub p_match: f64,
    pub seed: u64,
    pub uncertainty_final_acc: f64,
    pub random_final_acc: f64,
    pub upsampling_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoseRow {
    pub p_match: f64,
    pub n_seeds: usize,
    pub mean_acc_gap: f64,
    pub se_acc_gap: f64,
    pub mean_upsampling_ratio: f64,
    pub se_upsampling_ratio: f64,
}

pub fn dose_cell(base: &ExperimentConfig, p_match: f64, seed: u64) -> Result<DoseCell> {
    let mut cfg = base.clone();
    cfg.dataset.p_match = p_match;
    cfg.master_seed = seed;
    if !cfg.acq_fn.is_uncertainty() {
        cfg.acq_fn = AcqFn::LeastConfidence;
    }
    let prepared = prepare(&cfg)?;
    let uncertain = run_prepared(&prepared, &cfg)?;
    let random_cfg = ExperimentConfig {
        acq_fn: AcqFn::Random,
        ..cfg.clone()
    };
    let random = run_prepared(&prepared, &random_cfg)?;
    Ok(DoseCell {
        p_match,
        seed,
        uncertainty_final_acc: uncertain.final_round().metrics.overall,
        random_final_acc: random.final_round().metrics.overall,
        upsampling_ratio: mismatched_upsampling_ratio(&uncertain)?,
    })
}

/// Runs uncertainty and random acquisition for every (level, seed) pair and
/// aggregates per level, sorted by `p_match`. Cells run on the current rayon pool.
pub fn dose_response(base: &ExperimentConfig, p_match_levels: &[f64], seeds: &[u64]) -> Result<(Vec<DoseRow>, Vec<DoseCell>)> {
    if p_match_levels.is_empty() {
        return Err(config_err("p_match_levels: must not be empty"));
    }
    if seeds.is_empty() {
        return Err(config_err("seeds: must not be empty"));
    }
    if let Some(l) = p_match_levels.iter().find(|l| !(0.5..=1.0).contains(*l)) {
        return Err(config_err(format!("p_match_levels: {l} is outside [0.5, 1.0]")));
    }
    let mut levels = p_match_levels.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let grid: Vec<(f64, u64)> = levels.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let cells = grid
        .par_iter()
        .map(|&(l, s)| dose_cell(base, l, s))
        .collect::<Result<Vec<_>>>()?;
    let rows = levels
        .iter()
        .map(|&l| {
            let here: Vec<&DoseCell> = cells.iter().filter(|c| c.p_match == l).collect();
            let gaps: Vec<f64> = here.iter().map(|c| c.uncertainty_final_acc - c.random_final_acc).collect();
            let ratios: Vec<f64> = here.iter().map(|c| c.upsampling_ratio).collect();
            DoseRow {
                p_match: l,
                n_seeds: here.len(),
                mean_acc_gap: mean(&gaps),
                se_acc_gap: standard_error(&gaps),
                mean_upsampling_ratio: mean(&ratios),
                se_upsampling_ratio: standard_error(&ratios),
            }
        })
        .collect();
    Ok((rows, cells))
}
