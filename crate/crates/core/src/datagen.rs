//! Synthetic datasets with controlled task ambiguity.
//!
//! Every example is a sum of fixed random embeddings, one per attribute value,
//! plus isotropic Gaussian noise. Attribute counts per cell are realized by
//! deterministic rounding, and ids are assigned after shuffling so that id
//! order carries no information about the cell.

use crate::csvfmt::fmt_real;
use crate::error::{config_err, data_err, Result};
use crate::rng::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

pub type Attributes = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub attributes: Attributes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ShapesColor,
    Correlated,
    LatentSubgroups,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub d: usize,
    pub n_seed: usize,
    pub n_pool: usize,
    pub n_test: usize,
    pub n_pretrain: usize,
    /// Fraction of each class whose spurious attribute agrees with the core one.
    #[serde(default = "defaults::p_match")]
    pub p_match: f64,
    /// Fraction of seed/pool examples with core = 0.
    #[serde(default = "defaults::class_prior")]
    pub class_prior: f64,
    #[serde(default = "defaults::n_categories")]
    pub n_categories: usize,
    #[serde(default = "defaults::category_skew")]
    pub category_skew: f64,
    /// Class count for the latent-subgroup kind; the other kinds are binary.
    #[serde(default = "defaults::n_classes")]
    pub n_classes: usize,
    #[serde(default = "defaults::noise_sigma")]
    pub noise_sigma: f64,
    /// Expected norm of each attribute-value embedding vector.
    #[serde(default = "defaults::signal_scale")]
    pub signal_scale: f64,
}

mod defaults {
    pub fn p_match() -> f64 {
        0.95
    }
    pub fn class_prior() -> f64 {
        0.5
    }
    pub fn n_categories() -> usize {
        5
    }
    pub fn category_skew() -> f64 {
        2.0
    }
    pub fn n_classes() -> usize {
        2
    }
    pub fn noise_sigma() -> f64 {
        0.1
    }
    pub fn signal_scale() -> f64 {
        0.5
    }
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            d: 64,
            n_seed: 40,
            n_pool: 1000,
            n_test: 400,
            n_pretrain: 2000,
            p_match: defaults::p_match(),
            class_prior: defaults::class_prior(),
            n_categories: defaults::n_categories(),
            category_skew: defaults::category_skew(),
            n_classes: defaults::n_classes(),
            noise_sigma: defaults::noise_sigma(),
            signal_scale: defaults::signal_scale(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::LatentSubgroups => self.n_classes,
            _ => 2,
        }
    }

    /// Declared attributes and their value sets, sorted by attribute name.
    pub fn domains(&self) -> BTreeMap<String, Vec<String>> {
        let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut out = BTreeMap::new();
        match self.kind {
            DatasetKind::ShapesColor => {
                out.insert("shape".to_string(), strs(&["square", "circle"]));
                out.insert("color".to_string(), strs(&["red", "blue"]));
            }
            DatasetKind::Correlated => {
                out.insert("core".to_string(), strs(&["0", "1"]));
                out.insert("spurious".to_string(), strs(&["0", "1"]));
            }
            DatasetKind::LatentSubgroups => {
                out.insert(
                    "category".to_string(),
                    (0..self.n_categories).map(|k| k.to_string()).collect(),
                );
            }
        }
        out
    }

    pub fn confound(&self) -> Option<Confound> {
        match self.kind {
            DatasetKind::ShapesColor => Some(Confound {
                core: "shape".into(),
                spurious: "color".into(),
                matched: vec![("square".into(), "red".into()), ("circle".into(), "blue".into())],
            }),
            DatasetKind::Correlated => Some(Confound {
                core: "core".into(),
                spurious: "spurious".into(),
                matched: vec![("0".into(), "0".into()), ("1".into(), "1".into())],
            }),
            DatasetKind::LatentSubgroups => None,
        }
    }

    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, key: &str, msg: String| {
            if !ok {
                out.push(format!("{prefix}{key}: {msg}"));
            }
        };
        need(self.d > 0, "d", "must be positive".into());
        need(self.n_seed > 0, "n_seed", "must be positive".into());
        need(self.n_pool > 0, "n_pool", "must be positive".into());
        need(self.n_test > 0, "n_test", "must be positive".into());
        need(self.n_pretrain > 0, "n_pretrain", "must be positive".into());
        need(
            (0.5..=1.0).contains(&self.p_match),
            "p_match",
            format!("must lie in [0.5, 1.0], got {}", self.p_match),
        );
        need(
            self.class_prior > 0.0 && self.class_prior < 1.0,
            "class_prior",
            format!("must lie in (0, 1), got {}", self.class_prior),
        );
        need(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            "noise_sigma",
            format!("must be non-negative, got {}", self.noise_sigma),
        );
        need(
            self.signal_scale.is_finite() && self.signal_scale > 0.0,
            "signal_scale",
            format!("must be positive, got {}", self.signal_scale),
        );
        match self.kind {
            DatasetKind::ShapesColor => need(
                self.n_seed % 2 == 0,
                "n_seed",
                format!("must be even to balance the two seed cells, got {}", self.n_seed),
            ),
            DatasetKind::LatentSubgroups => {
                need(
                    self.n_categories >= 2,
                    "n_categories",
                    format!("must be at least 2, got {}", self.n_categories),
                );
                need(
                    self.category_skew >= 1.0,
                    "category_skew",
                    format!("must be at least 1, got {}", self.category_skew),
                );
                need(
                    self.n_classes >= 2,
                    "n_classes",
                    format!("must be at least 2, got {}", self.n_classes),
                );
                let width = self.n_categories + 2;
                need(
                    self.d >= width,
                    "d",
                    format!("must be at least n_categories + 2 = {width}, got {}", self.d),
                );
            }
            DatasetKind::Correlated => {}
        }
        if self.kind != DatasetKind::LatentSubgroups {
            need(self.d >= 4, "d", format!("must be at least 4, got {}", self.d));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(config_err(v.join("; ")))
        }
    }
}

/// Which attribute pairs count as "matched" for a core/spurious confound.
#[derive(Clone, Debug, PartialEq)]
pub struct Confound {
    pub core: String,
    pub spurious: String,
    pub matched: Vec<(String, String)>,
}

impl Confound {
    pub fn pair_is_mismatched(&self, core: &str, spurious: &str) -> bool {
        !self.matched.iter().any(|(c, s)| c == core && s == spurious)
    }

    /// `None` when either attribute is absent.
    pub fn is_mismatched(&self, attributes: &Attributes) -> Option<bool> {
        let core = attributes.get(&self.core)?;
        let spurious = attributes.get(&self.spurious)?;
        Some(self.pair_is_mismatched(core, spurious))
    }
}

/// Named columns of the linear map from attribute one-hots (and latent
/// directions) to features.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub columns: Vec<(String, Vec<f64>)>,
}

impl Embedding {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct SplitSet {
    pub seed: Vec<LabeledExample>,
    pub pool: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Carries every attribute; its `label` field is not used.
    pub pretrain: Vec<LabeledExample>,
    pub domains: BTreeMap<String, Vec<String>>,
    pub confound: Option<Confound>,
    pub num_classes: usize,
    pub embedding: Embedding,
}

/// Canonical key over a set of attributes, e.g. `core=1|spurious=0`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubgroupId(pub String);

impl SubgroupId {
    pub const GLOBAL: &'static str = "all";

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubgroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn canonical_names(names: &[String]) -> Vec<String> {
    let mut sorted = names.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted
}

pub fn subgroup_key(attributes: &Attributes, names: &[String]) -> Result<SubgroupId> {
    let names = canonical_names(names);
    if names.is_empty() {
        return Ok(SubgroupId(SubgroupId::GLOBAL.to_string()));
    }
    let mut parts = Vec::with_capacity(names.len());
    for n in &names {
        let v = attributes
            .get(n)
            .ok_or_else(|| data_err(format!("attribute '{n}' missing")))?;
        parts.push(format!("{n}={v}"));
    }
    Ok(SubgroupId(parts.join("|")))
}

pub fn subgroup_of(example: &LabeledExample, attribute_names: &[String]) -> Result<SubgroupId> {
    subgroup_key(&example.attributes, attribute_names)
        .map_err(|e| data_err(format!("example {}: {e}", example.id)))
}

/// Every cell of the cross-product of `names`, as attribute maps in canonical order.
pub fn cross_product(domains: &BTreeMap<String, Vec<String>>, names: &[String]) -> Result<Vec<Attributes>> {
    let mut cells = vec![Attributes::new()];
    for n in canonical_names(names) {
        let values = domains
            .get(&n)
            .ok_or_else(|| data_err(format!("unknown attribute '{n}'")))?;
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                let n = &n;
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.insert(n.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

/// Rounds halves up. The small bias absorbs products like 770 × 0.95 that land
/// a hair below the half-way point in binary floating point.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Split `n` into `cells` counts that differ by at most one; earlier cells get the extras.
pub fn balanced_counts(n: usize, cells: usize) -> Vec<usize> {
    (0..cells).map(|i| n / cells + usize::from(i < n % cells)).collect()
}

/// Largest-remainder apportionment of `n` according to `weights`.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Category prevalence ∝ skew^(−index), normalized.
pub fn category_weights(n_categories: usize, skew: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n_categories).map(|k| skew.powi(-(k as i32))).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

struct Generator {
    spec: DatasetSpec,
    embedding: Embedding,
    /// Per-category rule directions in the 2-d latent plane (latent kind only).
    rule_angles: Vec<f64>,
    stream: SeedStream,
    next_id: u64,
}

impl Generator {
    fn new(spec: &DatasetSpec, stream: &SeedStream) -> Self {
        let mut rng = stream.child("embedding").rng();
        let d = spec.d;
        let scale = spec.signal_scale / (d as f64).sqrt();
        let mut columns = Vec::new();
        for (name, values) in spec.domains() {
            for v in values {
                let col = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
                columns.push((format!("{name}={v}"), col));
            }
        }
        let mut rule_angles = Vec::new();
        if spec.kind == DatasetKind::LatentSubgroups {
            for j in 0..2 {
                let col = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
                columns.push((format!("latent{j}"), col));
            }
            rule_angles = (0..spec.n_categories)
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect();
        }
        Self {
            spec: spec.clone(),
            embedding: Embedding { columns },
            rule_angles,
            stream: stream.clone(),
            next_id: 0,
        }
    }

    /// Shuffle the cell assignments, then give each one an id and features.
    fn realize(&mut self, split: &str, mut cells: Vec<Attributes>) -> Vec<LabeledExample> {
        let mut rng = self.stream.child(split).rng();
        cells.shuffle(&mut rng);
        let mut out = Vec::with_capacity(cells.len());
        for attributes in cells {
            let mut features = vec![0.0; self.spec.d];
            for (k, v) in &attributes {
                let col = self
                    .embedding
                    .column(&format!("{k}={v}"))
                    .expect("every attribute value has an embedding column");
                for (f, c) in features.iter_mut().zip(col) {
                    *f += c;
                }
            }
            let label = match self.spec.kind {
                DatasetKind::ShapesColor => usize::from(attributes["shape"] == "circle"),
                DatasetKind::Correlated => usize::from(attributes["core"] == "1"),
                DatasetKind::LatentSubgroups => {
                    let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                    for (j, zj) in z.iter().enumerate() {
                        let col = self.embedding.column(&format!("latent{j}")).unwrap();
                        for (f, c) in features.iter_mut().zip(col) {
                            *f += zj * c;
                        }
                    }
                    let k: usize = attributes["category"].parse().unwrap();
                    latent_label(z, self.rule_angles[k], self.spec.n_classes)
                }
            };
            if self.spec.noise_sigma > 0.0 {
                for f in features.iter_mut() {
                    *f += self.spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            out.push(LabeledExample {
                id: self.next_id,
                features,
                label,
                attributes,
            });
            self.next_id += 1;
        }
        out
    }

    fn finish(
        self,
        seed: Vec<LabeledExample>,
        pool: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
        pretrain: Vec<LabeledExample>,
    ) -> SplitSet {
        SplitSet {
            seed,
            pool,
            test,
            pretrain,
            domains: self.spec.domains(),
            confound: self.spec.confound(),
            num_classes: self.spec.num_classes(),
            embedding: self.embedding,
        }
    }
}

/// Class = sector of the latent point's angle relative to the category's rule direction.
fn latent_label(z: [f64; 2], rule_angle: f64, n_classes: usize) -> usize {
    let angle = (z[1].atan2(z[0]) - rule_angle).rem_euclid(std::f64::consts::TAU);
    ((angle / std::f64::consts::TAU * n_classes as f64) as usize).min(n_classes - 1)
}

fn cell(pairs: &[(&str, &str)]) -> Attributes {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn repeat_cells(cells: &[Attributes], counts: &[usize]) -> Vec<Attributes> {
    cells
        .iter()
        .zip(counts)
        .flat_map(|(c, &n)| std::iter::repeat_n(c.clone(), n))
        .collect()
}

fn balanced_cells(spec: &DatasetSpec, n: usize) -> Vec<Attributes> {
    let names: Vec<String> = spec.domains().keys().cloned().collect();
    let cells = cross_product(&spec.domains(), &names).expect("declared attributes");
    repeat_cells(&cells, &balanced_counts(n, cells.len()))
}

fn expect_kind(spec: &DatasetSpec, kind: DatasetKind) -> Result<()> {
    if spec.kind != kind {
        return Err(config_err(format!("expected dataset kind {kind:?}, got {:?}", spec.kind)));
    }
    spec.validate()
}

pub fn gen_shapes_color(spec: &DatasetSpec, stream: &SeedStream) -> Result<SplitSet> {
    expect_kind(spec, DatasetKind::ShapesColor)?;
    let mut g = Generator::new(spec, stream);
    let red_square = cell(&[("color", "red"), ("shape", "square")]);
    let blue_circle = cell(&[("color", "blue"), ("shape", "circle")]);
    let seed_cells = repeat_cells(&[red_square, blue_circle], &[spec.n_seed / 2, spec.n_seed / 2]);
    let seed = g.realize("seed", seed_cells);
    let pool = g.realize("pool", balanced_cells(spec, spec.n_pool));
    let test = g.realize("test", balanced_cells(spec, spec.n_test));
    let pretrain = g.realize("pretrain", balanced_cells(spec, spec.n_pretrain));
    Ok(g.finish(seed, pool, test, pretrain))
}

/// Cell sizes for a confounded split of `n`: (core, spurious, count).
pub fn correlated_counts(n: usize, class_prior: f64, p_match: f64) -> Vec<(u8, u8, usize)> {
    let n0 = round_half_up(n as f64 * class_prior).min(n);
    let n1 = n - n0;
    let m0 = round_half_up(n0 as f64 * p_match).min(n0);
    let m1 = round_half_up(n1 as f64 * p_match).min(n1);
    vec![(0, 0, m0), (0, 1, n0 - m0), (1, 1, m1), (1, 0, n1 - m1)]
}

pub fn gen_correlated(spec: &DatasetSpec, stream: &SeedStream) -> Result<SplitSet> {
    expect_kind(spec, DatasetKind::Correlated)?;
    let mut g = Generator::new(spec, stream);
    let confounded = |n: usize| -> Vec<Attributes> {
        correlated_counts(n, spec.class_prior, spec.p_match)
            .into_iter()
            .flat_map(|(c, s, k)| {
                let a = cell(&[("core", &c.to_string()), ("spurious", &s.to_string())]);
                std::iter::repeat_n(a, k)
            })
            .collect()
    };
    let seed = g.realize("seed", confounded(spec.n_seed));
    let pool = g.realize("pool", confounded(spec.n_pool));
    let test = g.realize("test", balanced_cells(spec, spec.n_test));
    let pretrain = g.realize("pretrain", balanced_cells(spec, spec.n_pretrain));
    Ok(g.finish(seed, pool, test, pretrain))
}

pub fn gen_latent_subgroups(spec: &DatasetSpec, stream: &SeedStream) -> Result<SplitSet> {
    expect_kind(spec, DatasetKind::LatentSubgroups)?;
    let mut g = Generator::new(spec, stream);
    let categories: Vec<Attributes> = (0..spec.n_categories)
        .map(|k| cell(&[("category", &k.to_string())]))
        .collect();
    let weights = category_weights(spec.n_categories, spec.category_skew);
    let skewed = |n: usize| repeat_cells(&categories, &apportion(n, &weights));
    let seed = g.realize("seed", skewed(spec.n_seed));
    let pool = g.realize("pool", skewed(spec.n_pool));
    let test = g.realize("test", balanced_cells(spec, spec.n_test));
    let pretrain = g.realize("pretrain", balanced_cells(spec, spec.n_pretrain));
    Ok(g.finish(seed, pool, test, pretrain))
}

pub fn generate(spec: &DatasetSpec, stream: &SeedStream) -> Result<SplitSet> {
    match spec.kind {
        DatasetKind::ShapesColor => gen_shapes_color(spec, stream),
        DatasetKind::Correlated => gen_correlated(spec, stream),
        DatasetKind::LatentSubgroups => gen_latent_subgroups(spec, stream),
    }
}

/// Writes `id,label,<attr>...,f0..f{d-1}` with attributes sorted by name.
pub fn write_dataset_csv(examples: &[LabeledExample], out: &mut impl Write) -> Result<()> {
    let Some(first) = examples.first() else {
        writeln!(out, "id,label")?;
        return Ok(());
    };
    let attrs: Vec<&String> = first.attributes.keys().collect();
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(attrs.iter().map(|a| a.to_string()));
    header.extend((0..first.features.len()).map(|j| format!("f{j}")));
    writeln!(out, "{}", header.join(","))?;
    for ex in examples {
        let mut row = vec![ex.id.to_string(), ex.label.to_string()];
        for a in &attrs {
            let v = ex
                .attributes
                .get(*a)
                .ok_or_else(|| data_err(format!("example {} lacks attribute '{a}'", ex.id)))?;
            row.push(v.clone());
        }
        row.extend(ex.features.iter().map(|&f| fmt_real(f)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
