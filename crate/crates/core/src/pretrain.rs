//! Backbones: the trunk of the classifier, either trained to predict every
//! latent attribute of the pretrain split or left at its random init.

use crate::datagen::{generate, DatasetSpec, LabeledExample, SplitSet};
use crate::error::{config_err, data_err, shape_err, Result};
use crate::model::{descend, init_mlp, log_sum_exp, softmax, Layer, ModelParams, ParamSet, TrainConfig, TrainTrace};
use crate::rng::SeedStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Pretrained,
    Random,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Pretrained => "pretrained",
            Provenance::Random => "random",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Provenance::Pretrained),
            "random" => Ok(Provenance::Random),
            other => Err(config_err(format!("unknown provenance '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    trunk: Vec<Layer>,
    /// Only populated by pretraining; never part of a finetuned model.
    pub attribute_heads: BTreeMap<String, Layer>,
    pub provenance: Provenance,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl Backbone {
    pub fn from_trunk(trunk: Vec<Layer>, provenance: Provenance, seed: u64) -> Result<Self> {
        // Reuse the chaining checks.
        let trunk = ModelParams::new(trunk)?.into_layers();
        Ok(Self {
            trunk,
            attribute_heads: BTreeMap::new(),
            provenance,
            seed,
            warnings: Vec::new(),
        })
    }

    pub fn trunk(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn arch(&self) -> Vec<usize> {
        std::iter::once(self.trunk[0].cols())
            .chain(self.trunk.iter().map(Layer::rows))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].cols()
    }

    pub fn feature_width(&self) -> usize {
        self.trunk[self.trunk.len() - 1].rows()
    }

    pub fn trunk_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.trunk {
            l.write_bytes(&mut out);
        }
        out
    }

    /// Fraction of `examples` whose `attribute` the pretraining head predicts correctly.
    pub fn attribute_accuracy(
        &self,
        examples: &[LabeledExample],
        attribute: &str,
        values: &[String],
    ) -> Result<f64> {
        let head = self
            .attribute_heads
            .get(attribute)
            .ok_or_else(|| data_err(format!("backbone has no head for '{attribute}'")))?;
        if examples.is_empty() {
            return Err(data_err("no examples to score"));
        }
        let mut correct = 0usize;
        let mut logits = vec![0.0; head.rows()];
        for ex in examples {
            let feats = self.extract_features(&ex.features)?;
            head.forward_into(&feats, &mut logits, false);
            let want = value_index(values, ex, attribute)?;
            if crate::model::argmax(&logits) == want {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

fn value_index(values: &[String], ex: &LabeledExample, attribute: &str) -> Result<usize> {
    let v = ex
        .attributes
        .get(attribute)
        .ok_or_else(|| data_err(format!("example {} lacks attribute '{attribute}'", ex.id)))?;
    values
        .iter()
        .position(|x| x == v)
        .ok_or_else(|| data_err(format!("value '{v}' not in the domain of '{attribute}'")))
}

/// Penultimate-layer (post-rectifier) activations.
pub trait FeatureExtractor {
    fn extract_features(&self, x: &[f64]) -> Result<Vec<f64>>;
}

fn run_trunk(layers: &[Layer], x: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = layers.first() else {
        return Ok(x.to_vec());
    };
    if x.len() != first.cols() {
        return Err(shape_err(format!(
            "input has {} features, trunk expects {}",
            x.len(),
            first.cols()
        )));
    }
    let mut cur = x.to_vec();
    for l in layers {
        let mut next = vec![0.0; l.rows()];
        l.forward_into(&cur, &mut next, true);
        cur = next;
    }
    Ok(cur)
}

impl FeatureExtractor for Backbone {
    fn extract_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        run_trunk(&self.trunk, x)
    }
}

impl FeatureExtractor for ModelParams {
    fn extract_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(shape_err(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        run_trunk(&self.layers()[..self.head_index()], x)
    }
}

pub fn extract_features(model: &impl FeatureExtractor, x: &[f64]) -> Result<Vec<f64>> {
    model.extract_features(x)
}

pub fn random_backbone(arch: &[usize], stream: &SeedStream) -> Result<Backbone> {
    let trunk = init_mlp(arch, stream)?.into_layers();
    Backbone::from_trunk(trunk, Provenance::Random, stream.seed())
}

pub fn attach_head(backbone: &Backbone, num_classes: usize, stream: &SeedStream) -> Result<ModelParams> {
    if num_classes < 2 {
        return Err(config_err(format!("num_classes must be at least 2, got {num_classes}")));
    }
    let head = Layer::random(num_classes, backbone.feature_width(), &mut stream.rng());
    let mut layers = backbone.trunk.clone();
    layers.push(head);
    ModelParams::new(layers)
}

#[derive(Clone)]
struct MultiHead {
    trunk: Vec<Layer>,
    heads: Vec<Layer>,
}

impl ParamSet for MultiHead {
    fn scaled_add(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.trunk.iter_mut().zip(&other.trunk) {
            a.scaled_add(b, scale);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.scaled_add(b, scale);
        }
    }
}

struct Targets<'a> {
    x: &'a [f64],
    ys: Vec<usize>,
}

impl MultiHead {
    fn zeros_like(&self) -> Self {
        let z = |l: &Layer| Layer::zeros(l.rows(), l.cols());
        Self {
            trunk: self.trunk.iter().map(z).collect(),
            heads: self.heads.iter().map(z).collect(),
        }
    }

    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in &self.trunk {
            let mut next = vec![0.0; l.rows()];
            l.forward_into(acts.last().unwrap(), &mut next, true);
            acts.push(next);
        }
        acts
    }

    /// Summed per-attribute cross-entropy for one example, optionally accumulating its gradient.
    fn example_loss(&self, t: &Targets<'_>, grad: Option<&mut MultiHead>) -> f64 {
        let acts = self.activations(t.x);
        let feats = acts.last().unwrap();
        let mut loss = 0.0;
        let mut feat_delta = vec![0.0; feats.len()];
        let mut scratch = vec![0.0; feats.len()];
        let mut deltas = Vec::with_capacity(self.heads.len());
        for (head, &y) in self.heads.iter().zip(&t.ys) {
            let mut logits = vec![0.0; head.rows()];
            head.forward_into(feats, &mut logits, false);
            loss += log_sum_exp(&logits) - logits[y];
            let mut delta = softmax(&logits);
            delta[y] -= 1.0;
            deltas.push(delta);
        }
        let Some(grad) = grad else {
            return loss;
        };
        for (h, (head, delta)) in self.heads.iter().zip(&deltas).enumerate() {
            head.accumulate(delta, feats, &mut grad.heads[h]);
            head.backprop_into(delta, feats, &mut scratch);
            for (f, s) in feat_delta.iter_mut().zip(&scratch) {
                *f += s;
            }
        }
        let mut delta = feat_delta;
        for l in (0..self.trunk.len()).rev() {
            let layer = &self.trunk[l];
            layer.accumulate(&delta, &acts[l], &mut grad.trunk[l]);
            if l > 0 {
                let mut next = vec![0.0; layer.cols()];
                layer.backprop_into(&delta, &acts[l], &mut next);
                delta = next;
            }
        }
        loss
    }
}

/// Trains the trunk jointly with one linear head per attribute in `domains`.
pub fn pretrain_on(
    examples: &[LabeledExample],
    domains: &BTreeMap<String, Vec<String>>,
    arch: &[usize],
    cfg: &TrainConfig,
    stream: &SeedStream,
) -> Result<(Backbone, TrainTrace)> {
    if examples.is_empty() {
        return Err(data_err("pretrain split is empty"));
    }
    if domains.is_empty() {
        return Err(data_err("no attributes to pretrain on"));
    }
    let trunk = init_mlp(arch, stream)?.into_layers();
    let width = arch[arch.len() - 1];
    let mut head_rng = stream.child("attribute-heads").rng();
    let heads: Vec<Layer> = domains
        .values()
        .map(|values| Layer::random(values.len(), width, &mut head_rng))
        .collect();
    let targets: Vec<Targets<'_>> = examples
        .iter()
        .map(|ex| {
            if ex.features.len() != arch[0] {
                return Err(shape_err(format!(
                    "example {} has {} features, trunk expects {}",
                    ex.id,
                    ex.features.len(),
                    arch[0]
                )));
            }
            let ys = domains
                .iter()
                .map(|(name, values)| value_index(values, ex, name))
                .collect::<Result<Vec<_>>>()?;
            Ok(Targets { x: &ex.features, ys })
        })
        .collect::<Result<_>>()?;
    let params = MultiHead { trunk, heads };
    let n = targets.len();
    let (params, trace) = descend(
        params,
        n,
        &cfg.with_stream(stream.child("sgd")),
        |p| targets.iter().map(|t| p.example_loss(t, None)).sum::<f64>() / n as f64,
        |p, batch| {
            let mut g = p.zeros_like();
            for &i in batch {
                p.example_loss(&targets[i], Some(&mut g));
            }
            let s = 1.0 / batch.len() as f64;
            g.trunk.iter_mut().chain(g.heads.iter_mut()).for_each(|l| l.scale(s));
            g
        },
    )?;
    let mut backbone = Backbone::from_trunk(params.trunk, Provenance::Pretrained, stream.seed())?;
    backbone.attribute_heads = domains.keys().cloned().zip(params.heads).collect();
    if trace.steps_taken == 0 {
        backbone
            .warnings
            .push("pretraining took zero steps; backbone equals its random initialization".into());
    }
    Ok((backbone, trace))
}

/// Generates the dataset for `spec` from `data_stream` and pretrains on its pretrain split.
pub fn pretrain_backbone(
    spec: &DatasetSpec,
    data_stream: &SeedStream,
    arch: &[usize],
    cfg: &TrainConfig,
    stream: &SeedStream,
) -> Result<Backbone> {
    let splits = generate(spec, data_stream)?;
    pretrain_from_splits(&splits, arch, cfg, stream).map(|(b, _)| b)
}

pub fn pretrain_from_splits(
    splits: &SplitSet,
    arch: &[usize],
    cfg: &TrainConfig,
    stream: &SeedStream,
) -> Result<(Backbone, TrainTrace)> {
    pretrain_on(&splits.pretrain, &splits.domains, arch, cfg, stream)
}

/// Writes the manifest line `arch=<dims>;provenance=<tag>;seed=<n>` followed by
/// one block per trunk layer: `layer=<i>;rows=<r>;cols=<c>`, `r` weight rows, one bias row.
pub fn save_backbone(backbone: &Backbone, out: &mut impl Write) -> Result<()> {
    let arch: Vec<String> = backbone.arch().iter().map(|d| d.to_string()).collect();
    writeln!(
        out,
        "arch={};provenance={};seed={}",
        arch.join(","),
        backbone.provenance,
        backbone.seed
    )?;
    for (i, l) in backbone.trunk.iter().enumerate() {
        writeln!(out, "layer={i};rows={};cols={}", l.rows(), l.cols())?;
        for r in 0..l.rows() {
            let row: Vec<String> = l.weights()[r * l.cols()..(r + 1) * l.cols()]
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        let bias: Vec<String> = l.bias().iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", bias.join(","))?;
    }
    Ok(())
}

fn parse_kv<'a>(line: &'a str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split(';').collect();
    if parts.len() != keys.len() {
        return Err(data_err(format!("malformed line '{line}'")));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(p, k)| {
            p.strip_prefix(&format!("{k}="))
                .ok_or_else(|| data_err(format!("expected key '{k}' in '{line}'")))
        })
        .collect()
}

fn parse_row(line: &str, expect: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> = line
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| data_err(format!("bad number '{v}': {e}"))))
        .collect::<Result<_>>()?;
    if row.len() != expect {
        return Err(data_err(format!("expected {expect} values, got {}", row.len())));
    }
    Ok(row)
}

pub fn load_backbone(input: impl BufRead) -> Result<Backbone> {
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| data_err("unexpected end of backbone file"))?
            .map_err(Into::into)
    };
    let manifest = next()?;
    let fields = parse_kv(&manifest, &["arch", "provenance", "seed"])?;
    let arch: Vec<usize> = fields[0]
        .split(',')
        .map(|v| v.parse().map_err(|_| data_err(format!("bad arch entry '{v}'"))))
        .collect::<Result<_>>()?;
    let provenance: Provenance = fields[1].parse()?;
    let seed: u64 = fields[2].parse().map_err(|_| data_err("bad seed"))?;
    if arch.len() < 2 {
        return Err(data_err("arch needs at least two entries"));
    }
    let mut trunk = Vec::new();
    for i in 0..arch.len() - 1 {
        let header = next()?;
        let f = parse_kv(&header, &["layer", "rows", "cols"])?;
        let (rows, cols): (usize, usize) = (
            f[1].parse().map_err(|_| data_err("bad rows"))?,
            f[2].parse().map_err(|_| data_err("bad cols"))?,
        );
        if f[0] != i.to_string() || rows != arch[i + 1] || cols != arch[i] {
            return Err(data_err(format!("layer header '{header}' disagrees with arch")));
        }
        let mut weights = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            weights.extend(parse_row(&next()?, cols)?);
        }
        let bias = parse_row(&next()?, rows)?;
        trunk.push(Layer::new(rows, cols, weights, bias)?);
    }
    Backbone::from_trunk(trunk, provenance, seed)
}
