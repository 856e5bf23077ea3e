//! Config-driven experiment stages shared by the command line and tests.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{LabeledRecord, Provenance};
use crate::eval::{finetune_protocol, zero_shot_protocol, EvalError, EvalMode, EvalReport, ProtocolOptions};
use crate::graph::{flops, gen_space, ComputeGraph, SpaceError, SpaceSpec};
use crate::predictor::{AdaProxyHyper, Predictor, PredictorConfig, PredictorError, TrainHyper};
use crate::scaling::{fit_scaling, ScalingError};
use crate::search::SearchConfig;
use crate::sim::{HeadHyper, PseudoHyper, SimError, Strategy, SyntheticBody, SyntheticTask, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("records mix tasks `{0}` and `{1}`")]
    MixedTasks(String, String),
    #[error("no records")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainHyper::backbone")]
    pub backbone: TrainHyper,
    #[serde(default = "TrainHyper::adapter")]
    pub adapter: TrainHyper,
    #[serde(default = "TrainHyper::finetune")]
    pub finetune: TrainHyper,
    #[serde(default)]
    pub adaproxy: AdaProxyHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone: TrainHyper::backbone(),
            adapter: TrainHyper::adapter(),
            finetune: TrainHyper::finetune(),
            adaproxy: AdaProxyHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub use_flops_transform: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig { use_flops_transform: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub strategy: Strategy,
    pub head: HeadHyper,
    pub finetune: PseudoHyper,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig { strategy: Strategy::LatentSampling, head: HeadHyper::default(), finetune: PseudoHyper::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test-set samples used to fit scaling (and to fine-tune).
    pub samples: usize,
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { samples: 20, seeds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out: PathBuf::from("out") }
    }
}

/// Everything one experiment needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Custom spaces, consulted before the presets.
    pub spaces: Vec<SpaceSpec>,
    pub tasks: Vec<TaskSpec>,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub scaling: ScalingConfig,
    pub pseudo: PseudoConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            spaces: Vec::new(),
            tasks: Vec::new(),
            predictor: PredictorConfig::default(),
            train: TrainConfig::default(),
            scaling: ScalingConfig::default(),
            pseudo: PseudoConfig::default(),
            eval: EvalConfig::default(),
            search: SearchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn cfg_err(locus: &str, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{locus}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (i, s) in self.spaces.iter().enumerate() {
            s.validate().map_err(|e| cfg_err(&format!("spaces[{i}]"), e))?;
        }
        let mut tags = std::collections::BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let locus = format!("tasks[{i}]");
            crate::predictor::check_tag(&t.tag).map_err(|e| cfg_err(&format!("{locus}.tag"), e))?;
            if !tags.insert(t.tag.as_str()) {
                return Err(cfg_err(&format!("{locus}.tag"), format!("duplicate task `{}`", t.tag)));
            }
            self.space(&t.space).map_err(|e| cfg_err(&format!("{locus}.space"), e))?;
            if !(t.lo < t.hi) {
                return Err(cfg_err(&format!("{locus}.lo"), "lo must be below hi"));
            }
        }
        self.predictor.validate().map_err(|e| cfg_err("predictor", e))?;
        for (name, h) in [("backbone", &self.train.backbone), ("adapter", &self.train.adapter), ("finetune", &self.train.finetune)] {
            if h.batch_size == 0 || !(h.lr >= 0.0) {
                return Err(cfg_err(&format!("train.{name}"), "batch_size must be positive and lr non-negative"));
            }
        }
        if self.eval.samples < 2 || self.eval.seeds == 0 {
            return Err(cfg_err("eval", "samples must be at least 2 and seeds positive"));
        }
        if !(0.0..1.0).contains(&self.search.target_reduction) {
            return Err(cfg_err("search.target_reduction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form, with
    /// `paths` reset so the output location does not change artifacts.
    pub fn hash(&self) -> String {
        let canon = ExperimentConfig { paths: PathsConfig::default(), ..self.clone() };
        let json = serde_json::to_string(&canon).expect("config serializes");
        let d = Sha256::digest(json.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn space(&self, name: &str) -> Result<SpaceSpec, SpaceError> {
        match self.spaces.iter().find(|s| s.name == name) {
            Some(s) => Ok(s.clone()),
            None => SpaceSpec::preset(name),
        }
    }

    pub fn task_spec(&self, tag: &str) -> Result<&TaskSpec, PipelineError> {
        self.tasks.iter().find(|t| t.tag == tag).ok_or_else(|| cfg_err("tasks", format!("no task `{tag}`")))
    }

    pub fn task(&self, tag: &str) -> Result<SyntheticTask, PipelineError> {
        let spec = self.task_spec(tag)?.clone();
        let space = self.space(&spec.space)?;
        Ok(SyntheticTask::from_space(spec, &space)?)
    }

    pub fn protocol(&self) -> ProtocolOptions {
        ProtocolOptions {
            samples: self.eval.samples,
            use_flops_transform: self.scaling.use_flops_transform,
            finetune: self.train.finetune,
        }
    }
}

/// `n` graphs from `space`; graph `i` uses a seed derived from `(seed, i)`.
pub fn gen_data(space: &SpaceSpec, n: usize, seed: u64) -> Result<Vec<ComputeGraph>, PipelineError> {
    (0..n)
        .map(|i| {
            let mut g = gen_space(space, crate::seeds::derive(seed, &format!("gen-data/{}/{i}", space.name)))?;
            g.meta.name = format!("{}-{seed}-{i}", space.name);
            Ok(g)
        })
        .collect()
}

/// Labels `graphs` for `task`, with the oracle or with pseudo-labels from a
/// shared head trained on bodies of the task's space.
pub fn label(
    cfg: &ExperimentConfig,
    task: &SyntheticTask,
    graphs: &[ComputeGraph],
    provenance: Provenance,
    seed: u64,
) -> Result<Vec<LabeledRecord>, PipelineError> {
    let labels: Vec<f64> = match provenance {
        Provenance::GroundTruth => graphs.iter().map(|g| task.measure(g)).collect::<Result<_, _>>()?,
        Provenance::Pseudo => {
            let space = cfg.space(&task.spec.space)?;
            let head_hyper = HeadHyper { seed: crate::seeds::derive(seed, "pseudo-head"), ..cfg.pseudo.head };
            let ph = PseudoHyper { seed: crate::seeds::derive(seed, "pseudo-finetune"), ..cfg.pseudo.finetune };
            let head = crate::sim::train_shared_head(task, &space, cfg.pseudo.strategy, &head_hyper)?;
            graphs
                .par_iter()
                .map(|g| crate::sim::pseudo_label(&head, &SyntheticBody::new(task, g.clone())?, task, &ph))
                .collect::<Result<_, _>>()?
        }
    };
    graphs
        .iter()
        .zip(labels)
        .map(|(g, label)| {
            Ok(LabeledRecord {
                graph: g.clone(),
                task: task.tag().to_string(),
                label,
                flops: flops(g).map_err(SimError::from)?,
                provenance,
            })
        })
        .collect()
}

fn task_of(records: &[LabeledRecord]) -> Result<&str, PipelineError> {
    let first = records.first().ok_or(PipelineError::Empty)?;
    if let Some(r) = records.iter().find(|r| r.task != first.task) {
        return Err(PipelineError::MixedTasks(first.task.clone(), r.task.clone()));
    }
    Ok(&first.task)
}

fn standardized(cfg: &ExperimentConfig, predictor: &mut Predictor, records: &[LabeledRecord]) -> Result<Vec<f64>, PipelineError> {
    let task = task_of(records)?.to_string();
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.label, r.flops)).collect();
    let scaling = fit_scaling(&task, &pairs, cfg.scaling.use_flops_transform)?;
    let z = pairs.iter().map(|&(y, f)| scaling.apply(y, f)).collect::<Result<Vec<_>, _>>()?;
    predictor.scalings.insert(task, scaling);
    Ok(z)
}

/// Fresh predictor trained on one task; the fitted scaling is stored in it.
pub fn train_backbone(cfg: &ExperimentConfig, records: &[LabeledRecord], seed: u64) -> Result<Predictor, PipelineError> {
    let mut p = Predictor::new(cfg.predictor.clone(), crate::seeds::derive(seed, "predictor-init"))?;
    let z = standardized(cfg, &mut p, records)?;
    let graphs: Vec<ComputeGraph> = records.iter().map(|r| r.graph.clone()).collect();
    let hyper = TrainHyper { seed: crate::seeds::derive(seed, "train-backbone"), ..cfg.train.backbone };
    p.train_backbone(&graphs, &z, &hyper)?;
    Ok(p)
}

/// Adds an adapter named after the records' task.
pub fn train_adapter(
    cfg: &ExperimentConfig,
    predictor: &mut Predictor,
    records: &[LabeledRecord],
    seed: u64,
) -> Result<(), PipelineError> {
    let tag = task_of(records)?.to_string();
    let z = standardized(cfg, predictor, records)?;
    let graphs: Vec<ComputeGraph> = records.iter().map(|r| r.graph.clone()).collect();
    let hyper = TrainHyper { seed: crate::seeds::derive(seed, &format!("train-adapter/{tag}")), ..cfg.train.adapter };
    predictor.train_adapter(&tag, &graphs, &z, &hyper)?;
    Ok(())
}

/// One protocol run per seed `seed, seed + 1, ...`, in seed order.
pub fn evaluate(
    cfg: &ExperimentConfig,
    predictor: &Predictor,
    records: &[LabeledRecord],
    mode: EvalMode,
    seed: u64,
    seeds: usize,
) -> Result<Vec<EvalReport>, PipelineError> {
    task_of(records)?;
    let opts = cfg.protocol();
    (0..seeds as u64)
        .into_par_iter()
        .map(|s| {
            let r = match mode {
                EvalMode::ZeroShot => zero_shot_protocol(predictor, records, seed + s, &opts),
                EvalMode::FineTune => finetune_protocol(predictor, records, seed + s, &opts),
            };
            r.map_err(PipelineError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_appendix() {
        let c = ExperimentConfig::default();
        assert_eq!((c.train.backbone.epochs, c.train.backbone.lr, c.train.backbone.batch_size), (40, 1e-4, 32));
        assert_eq!(c.train.adapter.epochs, 100);
        assert_eq!((c.train.finetune.epochs, c.train.finetune.batch_size), (100, 1));
        assert_eq!((c.train.adaproxy.epochs, c.train.adaproxy.lambda), (1000, 1e-5));
        assert_eq!((c.eval.samples, c.eval.seeds), (20, 5));
        assert!(c.scaling.use_flops_transform);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let text = "seed = 3\n[[tasks]]\ntag = \"pose\"\nlo = 55.0\nhi = 67.0\n[train.backbone]\nepochs = 2\nlr = 0.001\nbatch_size = 8\nseed = 0\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.backbone.epochs, 2);
        assert_eq!(c.train.adapter, TrainHyper::adapter());
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(ExperimentConfig::default().hash(), c.hash());
    }

    #[test]
    fn bad_configs_name_the_field() {
        let e = ExperimentConfig::from_toml("[eval]\nsampels = 3\n").unwrap_err().to_string();
        assert!(e.contains("sampels"), "{e}");
        let e = ExperimentConfig::from_toml("[[tasks]]\ntag = \"a b\"\n").unwrap_err().to_string();
        assert!(e.contains("tasks[0].tag"), "{e}");
        let e = ExperimentConfig::from_toml("[[tasks]]\ntag = \"a\"\nspace = \"nope\"\n").unwrap_err().to_string();
        assert!(e.contains("tasks[0].space"), "{e}");
        let e = ExperimentConfig::from_toml("[eval]\nseeds = 0\n").unwrap_err().to_string();
        assert!(e.contains("eval"), "{e}");
    }

    #[test]
    fn gen_data_is_deterministic() {
        let s = SpaceSpec::preset("cell-like").unwrap();
        let a = gen_data(&s, 4, 1).unwrap();
        assert_eq!(a, gen_data(&s, 4, 1).unwrap());
        assert_ne!(a, gen_data(&s, 4, 2).unwrap());
        assert_eq!(a[2].meta.name, "cell-like-1-2");
    }
}
