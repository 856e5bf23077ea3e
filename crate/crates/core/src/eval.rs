//! MAE / SRCC and the 20-sample zero-shot and fine-tuning protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledRecord;
use crate::graph::ComputeGraph;
use crate::predictor::{Mode, Predictor, PredictorError, TrainHyper};
use crate::scaling::{fit_scaling, ScalingError, ScalingSpec};
use crate::stats::mean_std;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("rank correlation undefined: {0} are constant")]
    Constant(&'static str),
    #[error("test set has {got} records; more than {need} are required")]
    TestsetTooSmall { need: usize, got: usize },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::TooFew { need: 1, got: 0 });
    }
    Ok(preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / preds.len() as f64)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn srcc(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.len() < 2 {
        return Err(EvalError::TooFew { need: 2, got: preds.len() });
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(preds) {
        return Err(EvalError::Constant("predictions"));
    }
    if constant(labels) {
        return Err(EvalError::Constant("labels"));
    }
    Ok(pearson(&average_ranks(preds), &average_ranks(labels)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    ZeroShot,
    FineTune,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::ZeroShot => "zero-shot",
            EvalMode::FineTune => "fine-tune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: String,
    pub mode: EvalMode,
    pub mae: f64,
    pub srcc: f64,
    pub seed: u64,
    pub n_eval: usize,
    /// Test-set positions used for scaling (and fine-tuning), not evaluated.
    pub excluded: Vec<usize>,
    pub scaling: ScalingSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOptions {
    pub samples: usize,
    pub use_flops_transform: bool,
    pub finetune: TrainHyper,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions { samples: 20, use_flops_transform: true, finetune: TrainHyper::finetune() }
    }
}

/// Positions of the scaling samples: depends only on `seed` and the test-set size.
pub fn scaling_sample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

struct Split<'a> {
    held: Vec<usize>,
    rest: Vec<usize>,
    scaling: ScalingSpec,
    testset: &'a [LabeledRecord],
}

fn split<'a>(testset: &'a [LabeledRecord], seed: u64, opts: &ProtocolOptions) -> Result<Split<'a>, EvalError> {
    if testset.len() <= opts.samples {
        return Err(EvalError::TestsetTooSmall { need: opts.samples, got: testset.len() });
    }
    let held = scaling_sample(testset.len(), opts.samples, seed);
    let mut is_held = vec![false; testset.len()];
    for &i in &held {
        is_held[i] = true;
    }
    let rest = (0..testset.len()).filter(|&i| !is_held[i]).collect();
    let task = &testset[0].task;
    let pairs: Vec<(f64, f64)> = held.iter().map(|&i| (testset[i].label, testset[i].flops)).collect();
    let scaling = fit_scaling(task, &pairs, opts.use_flops_transform)?;
    Ok(Split { held, rest, scaling, testset })
}

fn evaluate(p: &Predictor, s: Split<'_>, mode: EvalMode, seed: u64) -> Result<EvalReport, EvalError> {
    let graphs: Vec<ComputeGraph> = s.rest.iter().map(|&i| s.testset[i].graph.clone()).collect();
    let z = p.predict_many(&graphs, Mode::Auto)?;
    let mut preds = Vec::with_capacity(z.len());
    let mut labels = Vec::with_capacity(z.len());
    for (&i, zi) in s.rest.iter().zip(z) {
        preds.push(s.scaling.invert(zi, s.testset[i].flops)?);
        labels.push(s.testset[i].label);
    }
    Ok(EvalReport {
        task: s.scaling.task.clone(),
        mode,
        mae: mae(&preds, &labels)?,
        srcc: srcc(&preds, &labels)?,
        seed,
        n_eval: s.rest.len(),
        excluded: s.held,
        scaling: s.scaling,
    })
}

/// Fits scaling on a seeded sample, predicts the remainder without updating
/// the predictor, and scores the inverted predictions.
pub fn zero_shot_protocol(
    p: &Predictor,
    testset: &[LabeledRecord],
    seed: u64,
    opts: &ProtocolOptions,
) -> Result<EvalReport, EvalError> {
    let s = split(testset, seed, opts)?;
    evaluate(p, s, EvalMode::ZeroShot, seed)
}

/// Like [`zero_shot_protocol`], but a copy of the predictor is first
/// fine-tuned on the scaling samples.
pub fn finetune_protocol(
    p: &Predictor,
    testset: &[LabeledRecord],
    seed: u64,
    opts: &ProtocolOptions,
) -> Result<EvalReport, EvalError> {
    let s = split(testset, seed, opts)?;
    let graphs: Vec<ComputeGraph> = s.held.iter().map(|&i| testset[i].graph.clone()).collect();
    let targets = s
        .held
        .iter()
        .map(|&i| s.scaling.apply(testset[i].label, testset[i].flops))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tuned = p.clone();
    let hyper = TrainHyper { seed, ..opts.finetune };
    tuned.finetune(&graphs, &targets, &hyper)?;
    evaluate(&tuned, s, EvalMode::FineTune, seed)
}

/// Aligned `mean ± std` table over seeds, one row per (task, mode).
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut groups: BTreeMap<(String, EvalMode), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.task.clone(), r.mode)).or_default().push(r);
    }
    let width = groups.keys().map(|(t, _)| t.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:<9}  {:>5}  {:>15}  {:>15}", "task", "mode", "seeds", "MAE [%]", "SRCC").unwrap();
    for ((task, mode), rs) in &groups {
        let maes: Vec<f64> = rs.iter().map(|r| r.mae).collect();
        let srccs: Vec<f64> = rs.iter().map(|r| r.srcc).collect();
        let (mm, ms) = mean_std(&maes).expect("group is non-empty");
        let (sm, ss) = mean_std(&srccs).expect("group is non-empty");
        writeln!(
            out,
            "{:<width$}  {:<9}  {:>5}  {:>15}  {:>15}",
            task,
            mode.name(),
            rs.len(),
            format!("{mm:.2} ± {ms:.2}"),
            format!("{sm:.3} ± {ss:.3}")
        )
        .unwrap();
    }
    out
}
