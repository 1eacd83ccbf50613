//! Subcommands and the artifacts they write.
//!
//! Every artifact starts with `# master_seed=<n> config_hash=<hex>`. Runs fan
//! out across seeds on a rayon pool, but results are collected before any
//! file is written, so outputs do not depend on `--jobs`.

use crate::al_loop::{prepare, run_active_learning, train_seed_model, ExperimentConfig, ExperimentReport};
use crate::analysis::{dose_response, linear_probe, mean_and_ci, mismatched_upsampling_ratio, DoseCell, DoseRow};
use crate::config::{read_config, ConfigFile, ProbeStage};
use crate::csvfmt::fmt_real;
use crate::datagen::{canonical_names, subgroup_key, SubgroupId};
use crate::error::{config_err, Error, Result};
use crate::pretrain::{extract_features, FeatureExtractor, Provenance};
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn header(master_seed: u64, config_hash: &str) -> String {
    format!("# master_seed={master_seed} config_hash={config_hash}\n")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_else(|| "NA".into())
}

pub fn config_echo(cfg: &ConfigFile, master_seed: u64) -> String {
    let body = serde_json::to_string_pretty(cfg).expect("config serializes");
    format!("{}{body}\n", header(master_seed, &cfg.hash()))
}

pub fn metrics_csv(report: &ExperimentReport, config_hash: &str) -> String {
    let groups: BTreeSet<&SubgroupId> = report.rounds.iter().flat_map(|r| r.metrics.per_group.keys()).collect();
    let mut out = header(report.config.master_seed, config_hash);
    out.push_str("round,n_labeled,acc_overall,acc_worst_group,acc_mismatched_mean");
    for g in &groups {
        write!(out, ",acc_group_{g}").unwrap();
    }
    out.push_str(",train_steps,final_train_loss,stopped_by\n");
    for r in &report.rounds {
        let m = &r.metrics;
        write!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.n_labeled,
            fmt_real(m.overall),
            fmt_real(m.worst_group),
            opt_real(m.mismatched_mean)
        )
        .unwrap();
        for g in &groups {
            write!(out, ",{}", opt_real(m.per_group.get(*g).copied())).unwrap();
        }
        writeln!(
            out,
            ",{},{},{}",
            r.train.steps_taken,
            fmt_real(r.train.final_loss),
            r.train.stopped_by.as_str()
        )
        .unwrap();
    }
    out
}

pub fn acquisitions_csv(report: &ExperimentReport, config_hash: &str) -> String {
    let attrs: Vec<String> = report.config.dataset.domains().keys().cloned().collect();
    let mut out = header(report.config.master_seed, config_hash);
    out.push_str("round,example_id,score,label");
    for a in &attrs {
        write!(out, ",{a}").unwrap();
    }
    out.push('\n');
    for e in &report.log.entries {
        write!(out, "{},{},{},{}", e.round, e.example_id, fmt_real(e.score), e.label).unwrap();
        for a in &attrs {
            write!(out, ",{}", e.attributes.get(a).map(String::as_str).unwrap_or("")).unwrap();
        }
        out.push('\n');
    }
    out
}

fn upsampling(report: &ExperimentReport) -> Option<f64> {
    if report.log.is_empty() {
        return None;
    }
    mismatched_upsampling_ratio(report).ok()
}

pub fn summary_text(report: &ExperimentReport, config_hash: &str) -> String {
    let cfg = &report.config;
    let last = report.final_round();
    let mut out = header(cfg.master_seed, config_hash);
    writeln!(out, "dataset: {:?}, d = {}", cfg.dataset.kind, cfg.dataset.d).unwrap();
    writeln!(out, "backbone: {}", report.provenance).unwrap();
    if let Some(t) = &report.pretrain_trace {
        writeln!(
            out,
            "pretraining: {} steps, loss {} -> {} ({})",
            t.steps_taken,
            fmt_real(t.initial_loss),
            fmt_real(t.final_loss),
            t.stopped_by.as_str()
        )
        .unwrap();
    }
    writeln!(
        out,
        "acquisition: {}, seed set {}, {} rounds of {}",
        cfg.acq_fn, cfg.seed_size, cfg.rounds, cfg.batch_k
    )
    .unwrap();
    writeln!(out, "pool size: {}", report.pool_size).unwrap();
    writeln!(out, "labeled at end: {}", last.n_labeled).unwrap();
    writeln!(out, "round 0 accuracy: {}", fmt_real(report.rounds[0].metrics.overall)).unwrap();
    writeln!(out, "final accuracy: {}", fmt_real(last.metrics.overall)).unwrap();
    writeln!(out, "final worst-group accuracy: {}", fmt_real(last.metrics.worst_group)).unwrap();
    writeln!(out, "final mismatched-cell accuracy: {}", opt_real(last.metrics.mismatched_mean)).unwrap();
    writeln!(out, "mean accuracy after round 0: {}", fmt_real(report.mean_accuracy_after_seed())).unwrap();
    if let Some(f) = report.pool_mismatched_fraction {
        writeln!(out, "pool mismatched fraction: {}", fmt_real(f)).unwrap();
    }
    writeln!(out, "mismatched upsampling ratio: {}", opt_real(upsampling(report))).unwrap();
    for w in &report.warnings {
        writeln!(out, "warning: {w}").unwrap();
    }
    out
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::write(dir.join(name), body)?;
    Ok(())
}

/// Loads and fully validates a config, reporting every violation at once.
pub fn load_validated(source: &str) -> Result<ConfigFile> {
    let cfg = read_config(source)?;
    cfg.validate()?;
    Ok(cfg)
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Err(config_err("jobs: must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Data(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn with_seed(base: &ExperimentConfig, seed: u64) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig {
        master_seed: seed,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(dir: &Path, report: &ExperimentReport, hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(dir, "metrics.csv", &metrics_csv(report, hash))?;
    write(dir, "acquisitions.csv", &acquisitions_csv(report, hash))?;
    write(dir, "summary.txt", &summary_text(report, hash))
}

fn multi_seed_summary(reports: &[ExperimentReport], master_seed: u64, hash: &str) -> String {
    let mut out = header(master_seed, hash);
    out.push_str("seed,final_accuracy,final_worst_group,mismatched_upsampling_ratio\n");
    for r in reports {
        let last = r.final_round();
        writeln!(
            out,
            "{},{},{},{}",
            r.config.master_seed,
            fmt_real(last.metrics.overall),
            fmt_real(last.metrics.worst_group),
            opt_real(upsampling(r))
        )
        .unwrap();
    }
    let finals: Vec<f64> = reports.iter().map(|r| r.final_round().metrics.overall).collect();
    if let Ok((m, h)) = mean_and_ci(&finals) {
        writeln!(out, "# final accuracy mean {} +/- {} (95% CI)", fmt_real(m), fmt_real(h)).unwrap();
    }
    out
}

/// Runs the configured experiment once per seed. A single seed writes its
/// artifacts straight into `out`; several seeds each get a `seed_<n>/` directory.
pub fn cmd_run(source: &str, out: &Path, seeds: Option<&[u64]>, jobs: usize) -> Result<()> {
    let cfg = load_validated(source)?;
    let hash = cfg.hash();
    let seeds: Vec<u64> = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| vec![cfg.experiment.master_seed]);
    if seeds.is_empty() {
        return Err(config_err("seeds: must not be empty"));
    }
    let configs = seeds
        .iter()
        .map(|&s| with_seed(&cfg.experiment, s))
        .collect::<Result<Vec<_>>>()?;
    let reports = in_pool(jobs, || {
        configs
            .par_iter()
            .map(run_active_learning)
            .collect::<Result<Vec<_>>>()
    })??;
    fs::create_dir_all(out)?;
    let top_seed = if seeds.len() == 1 { seeds[0] } else { cfg.experiment.master_seed };
    write(out, "config_echo.json", &config_echo(&cfg, top_seed))?;
    if let [report] = reports.as_slice() {
        return write_run(out, report, &hash);
    }
    for r in &reports {
        write_run(&out.join(format!("seed_{}", r.config.master_seed)), r, &hash)?;
    }
    write(out, "summary.txt", &multi_seed_summary(&reports, top_seed, &hash))
}

pub fn dose_response_csv(rows: &[DoseRow], master_seed: u64, hash: &str) -> String {
    let mut out = header(master_seed, hash);
    out.push_str("p_match,n_seeds,mean_acc_gap,se_acc_gap,mean_upsampling_ratio,se_upsampling_ratio\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_real(r.p_match),
            r.n_seeds,
            fmt_real(r.mean_acc_gap),
            fmt_real(r.se_acc_gap),
            fmt_real(r.mean_upsampling_ratio),
            fmt_real(r.se_upsampling_ratio)
        )
        .unwrap();
    }
    out
}

pub fn dose_cells_csv(cells: &[DoseCell], master_seed: u64, hash: &str) -> String {
    let mut out = header(master_seed, hash);
    out.push_str("p_match,seed,uncertainty_final_acc,random_final_acc,upsampling_ratio\n");
    for c in cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            fmt_real(c.p_match),
            c.seed,
            fmt_real(c.uncertainty_final_acc),
            fmt_real(c.random_final_acc),
            fmt_real(c.upsampling_ratio)
        )
        .unwrap();
    }
    out
}

/// Dose-response sweep over `sweep.p_match_levels`; `seeds` overrides `sweep.seeds`.
pub fn cmd_sweep(source: &str, out: &Path, seeds: Option<&[u64]>, jobs: usize) -> Result<()> {
    let cfg = load_validated(source)?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| config_err("sweep: section is required for the sweep command"))?;
    let seeds: Vec<u64> = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| sweep.seeds.clone());
    let (rows, cells) = in_pool(jobs, || dose_response(&cfg.experiment, &sweep.p_match_levels, &seeds))??;
    let hash = cfg.hash();
    let seed = cfg.experiment.master_seed;
    fs::create_dir_all(out)?;
    write(out, "config_echo.json", &config_echo(&cfg, seed))?;
    write(out, "dose_response.csv", &dose_response_csv(&rows, seed, &hash))?;
    write(out, "dose_cells.csv", &dose_cells_csv(&cells, seed, &hash))?;
    let mut summary = header(seed, &hash);
    writeln!(
        summary,
        "dose-response over p_match {:?} with seeds {seeds:?}; gap = uncertainty ({}) minus random final accuracy",
        sweep.p_match_levels,
        if cfg.experiment.acq_fn.is_uncertainty() { cfg.experiment.acq_fn.as_str() } else { "least_confidence" }
    )
    .unwrap();
    for r in &rows {
        writeln!(
            summary,
            "p_match {}: accuracy gap {} (se {}), upsampling ratio {} (se {})",
            fmt_real(r.p_match),
            fmt_real(r.mean_acc_gap),
            fmt_real(r.se_acc_gap),
            fmt_real(r.mean_upsampling_ratio),
            fmt_real(r.se_upsampling_ratio)
        )
        .unwrap();
    }
    write(out, "summary.txt", &summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub provenance: Provenance,
    pub stage: ProbeStage,
    pub attributes: String,
    pub subgroup: SubgroupId,
    pub rebalanced_count: usize,
    pub accuracy: f64,
    pub overall: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

fn probe_features(
    extractor: &impl FeatureExtractor,
    cfg: &ConfigFile,
    prepared: &crate::al_loop::Prepared,
    provenance: Provenance,
    stage: ProbeStage,
) -> Result<Vec<ProbeRow>> {
    let section = cfg.probe.as_ref().expect("checked by caller");
    let feats = prepared
        .splits
        .pool
        .iter()
        .map(|ex| extract_features(extractor, &ex.features))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for set in &section.attribute_sets {
        let names = canonical_names(set);
        let labelled = prepared
            .splits
            .pool
            .iter()
            .zip(&feats)
            .map(|(ex, f)| Ok((f.clone(), subgroup_key(&ex.attributes, &names)?)))
            .collect::<Result<Vec<_>>>()?;
        let label = names.join("+");
        let stream = cfg
            .experiment
            .root_stream()
            .child("probe")
            .child(provenance.as_str())
            .child(stage.as_str())
            .child(&label);
        let result = linear_probe(&labelled, &section.train, &stream)?;
        for (g, acc) in &result.per_class_accuracy {
            rows.push(ProbeRow {
                provenance,
                stage,
                attributes: label.clone(),
                subgroup: g.clone(),
                rebalanced_count: result.rebalanced_counts[g],
                accuracy: *acc,
                overall: result.overall,
                n_train: result.n_train,
                n_eval: result.n_eval,
            });
        }
    }
    Ok(rows)
}

/// Linear probes of pool features for each configured provenance and stage.
pub fn run_probes(cfg: &ConfigFile) -> Result<Vec<ProbeRow>> {
    let section = cfg
        .probe
        .as_ref()
        .ok_or_else(|| config_err("probe: section is required for the probe command"))?;
    let jobs: Vec<Provenance> = section.provenances.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let per = jobs
        .par_iter()
        .map(|&provenance| {
            let exp = ExperimentConfig {
                backbone: provenance,
                ..cfg.experiment.clone()
            };
            let prepared = prepare(&exp)?;
            let mut rows = Vec::new();
            let stages: BTreeSet<ProbeStage> = section.stages.iter().copied().collect();
            for stage in stages {
                rows.extend(match stage {
                    ProbeStage::Initial => probe_features(&prepared.backbone, cfg, &prepared, provenance, stage)?,
                    ProbeStage::Finetuned => {
                        let (model, _) = train_seed_model(&prepared, &exp)?;
                        probe_features(&model, cfg, &prepared, provenance, stage)?
                    }
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn probe_csv(rows: &[ProbeRow], master_seed: u64, hash: &str) -> String {
    let mut out = header(master_seed, hash);
    out.push_str("provenance,stage,attributes,subgroup,rebalanced_count,accuracy,overall_accuracy,n_train,n_eval\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.provenance,
            r.stage.as_str(),
            r.attributes,
            r.subgroup,
            r.rebalanced_count,
            fmt_real(r.accuracy),
            fmt_real(r.overall),
            r.n_train,
            r.n_eval
        )
        .unwrap();
    }
    out
}

pub fn cmd_probe(source: &str, out: &Path, jobs: usize) -> Result<()> {
    let cfg = load_validated(source)?;
    let rows = in_pool(jobs, || run_probes(&cfg))??;
    let hash = cfg.hash();
    let seed = cfg.experiment.master_seed;
    fs::create_dir_all(out)?;
    write(out, "config_echo.json", &config_echo(&cfg, seed))?;
    write(out, "probe.csv", &probe_csv(&rows, seed, &hash))?;
    let mut summary = header(seed, &hash);
    summary.push_str(
        "linear probes on pool features; every subgroup is downsampled to the minority count, \
         and accuracy is measured on a held-out 20% slice of each subgroup\n",
    );
    let mut seen = BTreeSet::new();
    for r in &rows {
        if seen.insert((r.provenance, r.stage, r.attributes.clone())) {
            writeln!(
                summary,
                "{} / {} / {}: overall accuracy {} on {} held-out examples",
                r.provenance,
                r.stage.as_str(),
                r.attributes,
                fmt_real(r.overall),
                r.n_eval
            )
            .unwrap();
        }
    }
    write(out, "summary.txt", &summary)
}

/// `Ok(violations)`; an empty list means the config is valid. I/O and
/// parse failures are errors.
pub fn cmd_validate(source: &str) -> Result<Vec<String>> {
    Ok(read_config(source)?.violations())
}
