//! The pipeline configuration file (TOML). Every section is optional and
//! falls back to the library defaults.

use std::path::Path;

use perfinline::corpus::CorpusSpec;
use perfinline::dataset::CollectConfig;
use perfinline::ir2perf::TrainSpec;
use perfinline::perf_oracle::CostModel;
use perfinline::policy::{EvalConfig, Strategy, TrainerConfig};
use perfinline::progmodel::GenConfig;
use perfinline::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub noise_epsilon: f64,
    pub runs: usize,
    pub seed: u64,
    pub strategies: Vec<Strategy>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let ec = EvalConfig::default();
        EvaluateSection {
            noise_epsilon: ec.noise_epsilon,
            runs: ec.runs,
            seed: ec.seed,
            strategies: vec![
                Strategy::NeverInline,
                Strategy::Heuristic,
                Strategy::SizeBaseline,
                Strategy::Random,
                Strategy::Policy,
            ],
        }
    }
}

impl EvaluateSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            noise_epsilon: self.noise_epsilon,
            runs: self.runs,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutotuneSection {
    pub budget: usize,
    pub seed: u64,
    pub strategies: Vec<Strategy>,
}

impl Default for AutotuneSection {
    fn default() -> Self {
        AutotuneSection {
            budget: 120,
            seed: 0,
            strategies: vec![Strategy::NeverInline, Strategy::SizeBaseline, Strategy::Policy],
        }
    }
}

/// The three disjoint corpora of the demo pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub data: CorpusSpec,
    pub train: CorpusSpec,
    pub test: CorpusSpec,
}

fn demo_family() -> GenConfig {
    GenConfig {
        callsite_density: 0.2,
        arith_fraction: 0.8,
        ..GenConfig::default()
    }
}

fn demo_corpus(prefix: &str, count: usize, first_seed: u64) -> CorpusSpec {
    CorpusSpec {
        prefix: prefix.into(),
        count,
        first_seed,
        min_callsites: 1,
        max_callsites: Some(10),
        gen: demo_family(),
        ..CorpusSpec::default()
    }
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection {
            data: demo_corpus("data", 12, 10_000),
            train: demo_corpus("train", 8, 20_000),
            test: demo_corpus("test", 8, 30_000),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Replaces every stage seed when set.
    pub seed: Option<u64>,
    pub cost_model: CostModel,
    pub corpus: Option<CorpusSpec>,
    pub collect: CollectConfig,
    pub ir2perf: TrainSpec,
    pub policy: TrainerConfig,
    pub evaluate: EvaluateSection,
    pub autotune: AutotuneSection,
    pub demo: DemoSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            cost_model: CostModel::default(),
            corpus: None,
            collect: CollectConfig {
                iterations: 16,
                ..CollectConfig::default()
            },
            ir2perf: TrainSpec {
                learning_rate: 0.004,
                epochs: 20,
                ..TrainSpec::default()
            },
            policy: TrainerConfig {
                iterations: 100,
                ..TrainerConfig::default()
            },
            evaluate: EvaluateSection::default(),
            autotune: AutotuneSection::default(),
            demo: DemoSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Applies a seed override (flag first, then the file's top-level
    /// `seed`) to every stage.
    pub fn resolve(mut self, flag: Option<u64>) -> Result<Self> {
        if let Some(seed) = flag.or(self.seed) {
            self.seed = Some(seed);
            self.collect.seed = seed;
            self.ir2perf.seed = seed;
            self.policy.seed = seed;
            self.evaluate.seed = seed;
            self.autotune.seed = seed;
        }
        self.cost_model.validate()?;
        self.collect.validate()?;
        self.ir2perf.validate()?;
        self.policy.validate()?;
        Ok(self)
    }
}

/// Reads a standalone corpus spec file.
pub fn load_corpus_spec(path: &Path) -> Result<CorpusSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("corpus spec {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("corpus spec {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("sed = 3").is_err());
        assert!(toml::from_str::<PipelineConfig>("[collect]\niteration = 3").is_err());
    }

    #[test]
    fn sections_parse() {
        let c: PipelineConfig = toml::from_str(
            r#"
            seed = 4
            [corpus]
            prefix = "p"
            seeds = [1, 2]
            [corpus.gen]
            n_functions = 3
            [collect]
            strategy = "hill-climb"
            [ir2perf]
            clamp = [0.2, 5.0]
            [evaluate]
            strategies = ["never-inline", "policy"]
            "#,
        )
        .unwrap();
        let c = c.resolve(None).unwrap();
        assert_eq!(c.corpus.unwrap().gen.n_functions, 3);
        assert_eq!(c.collect.seed, 4);
        assert_eq!(c.ir2perf.clamp, Some((0.2, 5.0)));
        assert_eq!(c.evaluate.strategies, [Strategy::NeverInline, Strategy::Policy]);
    }

    #[test]
    fn flag_overrides_file_seed() {
        let c = PipelineConfig {
            seed: Some(1),
            ..PipelineConfig::default()
        };
        assert_eq!(c.resolve(Some(9)).unwrap().policy.seed, 9);
    }
}
