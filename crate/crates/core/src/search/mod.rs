//! FLOPs-reducing search over graphs guided by a trained predictor.

mod mutate;

pub use mutate::{apply, candidates, channel_groups, mutate, replay, Mutation, MutationKind, Rule};

use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::graph::{flops, validate, ComputeGraph};
use crate::predictor::{Mode, Predictor, PredictorError};
use crate::scaling::{ScalingError, ScalingSpec};

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error("no applicable mutation")]
    NoMutation,
    #[error("bad mutation: {0}")]
    BadMutation(String),
    #[error("predictor has no scaling for task `{0}`")]
    UnknownTask(String),
    #[error("bad search config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Stop once FLOPs fall by this fraction of the starting FLOPs.
    pub target_reduction: f64,
    /// Candidate evaluations, including the starting graph.
    pub budget: usize,
    /// Largest accepted predicted drop from the starting graph, in
    /// standardized units.
    pub tolerance: f64,
    /// Consecutive rejections before restarting from the starting graph.
    pub patience: usize,
    pub rules: Vec<Rule>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { target_reduction: 0.135, budget: 2000, tolerance: 0.5, patience: 200, rules: Rule::ALL.to_vec(), seed: 0 }
    }
}

/// One accepted step of the returned trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub kind: MutationKind,
    pub rule: Rule,
    pub flops: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub task: String,
    pub seed: u64,
    pub initial_flops: f64,
    pub final_flops: f64,
    pub flops_reduction: f64,
    pub target_reduction: f64,
    pub target_met: bool,
    pub initial_predicted: f64,
    pub final_predicted: f64,
    pub evaluations: usize,
    pub restarts: usize,
    pub steps: Vec<StepRecord>,
    pub history: Vec<Mutation>,
}

struct Scorer<'a> {
    predictor: &'a Predictor,
    scaling: &'a ScalingSpec,
}

impl Scorer<'_> {
    /// Predicted metric and FLOPs.
    fn score(&self, cg: &ComputeGraph) -> Result<(f64, f64), SearchError> {
        let f = flops(cg)?;
        let z = self.predictor.predict(cg, Mode::Auto)?;
        Ok((self.scaling.invert(z, f)?, f))
    }
}

struct Run {
    graph: ComputeGraph,
    flops: f64,
    predicted: f64,
    steps: Vec<StepRecord>,
    history: Vec<Mutation>,
}

/// Hill climbing with restarts. A candidate is accepted iff its FLOPs are
/// strictly below the incumbent's and its predicted metric is at most
/// `tolerance` standardized units below that of `cg0`. Each run starts from
/// `cg0`; the run with the lowest FLOPs is returned.
pub fn search(
    predictor: &Predictor,
    task: &str,
    cg0: &ComputeGraph,
    config: &SearchConfig,
) -> Result<(ComputeGraph, SearchReport), SearchError> {
    if !(0.0..1.0).contains(&config.target_reduction) || config.tolerance < 0.0 || config.patience == 0 {
        return Err(SearchError::Config("need target_reduction in [0, 1), tolerance >= 0, patience > 0".into()));
    }
    let v = validate(cg0);
    if !v.is_empty() {
        return Err(GraphError::Invalid(v).into());
    }
    let scaling = predictor.scalings.get(task).ok_or_else(|| SearchError::UnknownTask(task.to_string()))?;
    let scorer = Scorer { predictor, scaling };
    let (p0, f0) = scorer.score(cg0)?;
    let unit = scaling.metric_per_unit(f0)?;
    let floor = p0 - config.tolerance * unit;
    let goal = f0 * (1.0 - config.target_reduction);
    let mut rng = crate::seeds::rng(config.seed, "search");

    let fresh = || Run { graph: cg0.clone(), flops: f0, predicted: p0, steps: Vec::new(), history: Vec::new() };
    let mut best = fresh();
    let mut run = fresh();
    let mut evaluations = 1;
    let mut restarts = 0;
    let mut rejections = 0;
    while best.flops > goal && evaluations < config.budget {
        match mutate(&run.graph, &mut rng, &config.rules) {
            Ok((cand, m)) => {
                evaluations += 1;
                let f = flops(&cand)?;
                let p = if f < run.flops { Some(scorer.score(&cand)?.0) } else { None };
                match p {
                    Some(p) if p >= floor => {
                        let step = run.steps.len() + 1;
                        run.steps.push(StepRecord { step, kind: m.kind(), rule: m.rule, flops: f, predicted: p });
                        run.history.push(m);
                        run.graph = cand;
                        run.flops = f;
                        run.predicted = p;
                        rejections = 0;
                        if run.flops < best.flops {
                            best = Run {
                                graph: run.graph.clone(),
                                flops: run.flops,
                                predicted: run.predicted,
                                steps: run.steps.clone(),
                                history: run.history.clone(),
                            };
                        }
                    }
                    _ => rejections += 1,
                }
            }
            Err(SearchError::NoMutation) if run.history.is_empty() => break,
            Err(SearchError::NoMutation) => rejections = config.patience,
            Err(e) => return Err(e),
        }
        if rejections >= config.patience {
            run = fresh();
            restarts += 1;
            rejections = 0;
        }
    }
    let reduction = 1.0 - best.flops / f0;
    let report = SearchReport {
        task: task.to_string(),
        seed: config.seed,
        initial_flops: f0,
        final_flops: best.flops,
        flops_reduction: reduction,
        target_reduction: config.target_reduction,
        target_met: best.flops <= goal,
        initial_predicted: p0,
        final_predicted: best.predicted,
        evaluations,
        restarts,
        steps: best.steps,
        history: best.history,
    };
    Ok((best.graph, report))
}
