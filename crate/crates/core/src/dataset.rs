//! Autotuned collection of (features, speedup) samples and the scaling +
//! PCA preprocessing fitted on them.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{expect_schema, Error, Result};
use crate::features::{FeatureVector, ModuleFeatures};
use crate::linalg::symmetric_eigen;
use crate::perf_oracle::{func_speedup, module_runtime, CostModel, Runtime};
use crate::progmodel::{apply_inline, enumerate_callsites, Module, SiteId};
use crate::util::derive_seed;

pub const PREPROC_SCHEMA: &str = "preproc/1";
pub const PCA_COMPONENTS: usize = 7;
pub const MIN_FIT_SAMPLES: usize = 8;

/// Inline decision per call site of the pristine module.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InlineConfig(pub BTreeMap<SiteId, bool>);

impl InlineConfig {
    pub fn never(m: &Module) -> Self {
        InlineConfig(m.call_sites().into_iter().map(|c| (c.id, false)).collect())
    }
}

/// Applies the `true` entries of `cfg` in call-site enumeration order of
/// `m`. Direct recursion and refused splices are left as calls.
pub fn apply_config(m: &Module, cfg: &InlineConfig) -> Result<Module> {
    let mut out = m.clone();
    for cs in enumerate_callsites(m) {
        if !cfg.0.get(&cs.id).copied().unwrap_or(false) || cs.is_direct_recursion() {
            continue;
        }
        match apply_inline(&out, cs.id) {
            Ok(next) => out = next,
            Err(Error::RefusedInline(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub program: String,
    pub function: String,
    pub config: usize,
    pub global_speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: FeatureVector,
    pub label: f64,
    pub meta: SampleMeta,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStrategy {
    #[default]
    Random,
    HillClimb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub exclusion_threshold: f64,
    pub min_overhead_fraction: f64,
    /// Configurations evaluated per program, the all-false one included.
    pub iterations: usize,
    pub strategy: SearchStrategy,
    pub seed: u64,
    /// Also drop labels below `1 / exclusion_threshold`.
    pub symmetric_guard: bool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            exclusion_threshold: 3.0,
            min_overhead_fraction: 0.01,
            iterations: 32,
            strategy: SearchStrategy::Random,
            seed: 0,
            symmetric_guard: false,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exclusion_threshold > 1.0) {
            return Err(Error::Config(format!(
                "exclusion threshold {} must exceed 1",
                self.exclusion_threshold
            )));
        }
        if !(self.min_overhead_fraction > 0.0 && self.min_overhead_fraction < 1.0) {
            return Err(Error::Config(format!(
                "min overhead fraction {} outside (0, 1)",
                self.min_overhead_fraction
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }

    fn keeps(&self, label: f64) -> bool {
        label > 0.0
            && label <= self.exclusion_threshold
            && (!self.symmetric_guard || label >= 1.0 / self.exclusion_threshold)
    }
}

struct Evaluated {
    module: Module,
    runtime: Runtime,
}

fn evaluate(m: &Module, sites: &[SiteId], bits: &[bool], cm: &CostModel) -> Result<Evaluated> {
    let cfg = InlineConfig(sites.iter().copied().zip(bits.iter().copied()).collect());
    let module = apply_config(m, &cfg)?;
    let runtime = module_runtime(&module, cm)?;
    Ok(Evaluated { module, runtime })
}

fn emit(
    program: &str,
    config: usize,
    ev: &Evaluated,
    baseline: &Runtime,
    cc: &CollectConfig,
) -> Result<Vec<TrainingSample>> {
    let global_speedup = baseline.total / ev.runtime.total;
    let feats = ModuleFeatures::new(&ev.module)?;
    let mut records: Vec<_> = ev.runtime.profile.iter().collect();
    records.sort_by(|a, b| a.function.cmp(&b.function));
    let mut out = Vec::new();
    for r in records {
        if r.t_func < cc.min_overhead_fraction {
            continue;
        }
        let (Some(base), Some(now)) = (
            baseline.function_runtime(&r.function),
            ev.runtime.function_runtime(&r.function),
        ) else {
            continue;
        };
        let label = func_speedup(base, now)?;
        if !cc.keeps(label) {
            continue;
        }
        out.push(TrainingSample {
            features: feats.function_features(&r.function)?,
            label,
            meta: SampleMeta {
                program: program.to_string(),
                function: r.function.clone(),
                config,
                global_speedup,
            },
        });
    }
    Ok(out)
}

struct Search {
    sites: Vec<SiteId>,
    configs: Vec<Vec<bool>>,
    evaluated: Vec<Evaluated>,
}

fn search(m: &Module, cc: &CollectConfig, cm: &CostModel) -> Result<Search> {
    cc.validate()?;
    cm.validate()?;
    m.validate()?;
    let all = enumerate_callsites(m);
    let sites: Vec<SiteId> = all.iter().map(|c| c.id).collect();
    let flippable: Vec<usize> = all
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_direct_recursion())
        .map(|(i, _)| i)
        .collect();
    let never = vec![false; sites.len()];

    let mut configs: Vec<Vec<bool>> = vec![never.clone()];
    let mut evaluated: Vec<Evaluated> = Vec::new();
    match cc.strategy {
        SearchStrategy::Random => {
            configs.extend((1..cc.iterations).map(|idx| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cc.seed, idx as u64));
                let mut bits = never.clone();
                for &i in &flippable {
                    bits[i] = rng.random_bool(0.5);
                }
                bits
            }));
            evaluated = configs
                .par_iter()
                .map(|bits| evaluate(m, &sites, bits, cm))
                .collect::<Result<_>>()?;
        }
        SearchStrategy::HillClimb => {
            let mut rng = ChaCha8Rng::seed_from_u64(cc.seed);
            let mut best = never.clone();
            let first = evaluate(m, &sites, &never, cm)?;
            let mut best_total = first.runtime.total;
            evaluated.push(first);
            for _ in 1..cc.iterations {
                let mut cand = best.clone();
                if !flippable.is_empty() {
                    let i = flippable[rng.random_range(0..flippable.len())];
                    cand[i] = !cand[i];
                }
                let ev = evaluate(m, &sites, &cand, cm)?;
                if ev.runtime.total < best_total {
                    best_total = ev.runtime.total;
                    best = cand.clone();
                }
                configs.push(cand);
                evaluated.push(ev);
            }
        }
    }
    Ok(Search {
        sites,
        configs,
        evaluated,
    })
}

/// The configurations [`autotune_collect`] explores, indexed as in
/// [`SampleMeta::config`].
pub fn search_configs(m: &Module, cc: &CollectConfig, cm: &CostModel) -> Result<Vec<InlineConfig>> {
    let s = search(m, cc, cm)?;
    Ok(s.configs
        .iter()
        .map(|bits| InlineConfig(s.sites.iter().copied().zip(bits.iter().copied()).collect()))
        .collect())
}

/// Explores inlining configurations of one program and labels every
/// qualifying function of every configuration against the never-inline
/// baseline. Configuration 0 is always the all-false one.
pub fn autotune_collect(
    program: &str,
    m: &Module,
    cc: &CollectConfig,
    cm: &CostModel,
) -> Result<Vec<TrainingSample>> {
    let s = search(m, cc, cm)?;
    let base = &s.evaluated[0].runtime;
    let per_config = s
        .evaluated
        .par_iter()
        .enumerate()
        .map(|(idx, ev)| emit(program, idx, ev, base, cc))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_config.into_iter().flatten().collect())
}

/// Collects every program of a corpus; program `i` searches with seed
/// stream `i` of `cc.seed`.
pub fn collect_corpus(
    programs: &[(String, Module)],
    cc: &CollectConfig,
    cm: &CostModel,
) -> Result<Vec<TrainingSample>> {
    let per_program = programs
        .par_iter()
        .enumerate()
        .map(|(i, (name, m))| {
            let cc = CollectConfig {
                seed: derive_seed(cc.seed, i as u64),
                ..cc.clone()
            };
            autotune_collect(name, m, &cc, cm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_program.into_iter().flatten().collect())
}

fn sample_key(s: &TrainingSample) -> Vec<u64> {
    let mut k: Vec<u64> = s.features.to_array().iter().map(|v| v.to_bits()).collect();
    k.push(s.label.to_bits());
    k
}

/// Drops exact repeats of (features, label), keeping first occurrences.
pub fn dedup(samples: Vec<TrainingSample>) -> Vec<TrainingSample> {
    let mut seen = HashSet::new();
    samples
        .into_iter()
        .filter(|s| seen.insert(sample_key(s)))
        .collect()
}

/// Share of samples whose function got faster while the program got slower.
pub fn contradiction_fraction(samples: &[TrainingSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples
        .iter()
        .filter(|s| s.label > 1.0 && s.meta.global_speedup < 1.0)
        .count();
    n as f64 / samples.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub schema: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero spread, passed through centered with std 1.
    pub constant: Vec<bool>,
    /// Unit component vectors over the 20 scaled features.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, descending.
    pub variances: Vec<f64>,
}

/// Fits scaling and PCA on raw feature rows.
pub fn fit_preprocess_rows(rows: &[[f64; FeatureVector::LEN]]) -> Result<PreprocessState> {
    const D: usize = FeatureVector::LEN;
    let n = rows.len();
    if n < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "preprocessing needs at least {MIN_FIT_SAMPLES} samples, got {n}"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite feature value".into()));
    }
    let nf = n as f64;
    let mut mean = vec![0.0; D];
    for r in rows {
        for j in 0..D {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut std = vec![0.0; D];
    for r in rows {
        for j in 0..D {
            std[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let mut constant = vec![false; D];
    for j in 0..D {
        std[j] = (std[j] / (nf - 1.0)).sqrt();
        if std[j] == 0.0 {
            std[j] = 1.0;
            constant[j] = true;
        }
    }

    let mut z = Array2::<f64>::zeros((n, D));
    for (i, r) in rows.iter().enumerate() {
        for j in 0..D {
            z[[i, j]] = (r[j] - mean[j]) / std[j];
        }
    }
    let mut cov = z.t().dot(&z) / (nf - 1.0);
    // exact symmetry for the solver
    for i in 0..D {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    let eig = symmetric_eigen(&cov)?;
    let mut components = Vec::with_capacity(PCA_COMPONENTS);
    let mut variances = Vec::with_capacity(PCA_COMPONENTS);
    for k in 0..PCA_COMPONENTS {
        let mut c = eig.vectors.column(k).to_vec();
        let lead = c
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > c[best].abs() { i } else { best });
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        variances.push(eig.values[k].max(0.0));
    }
    Ok(PreprocessState {
        schema: PREPROC_SCHEMA.to_string(),
        mean,
        std,
        constant,
        components,
        variances,
    })
}

/// Fits on the feature vectors of `samples`, which must contain at least
/// eight distinct samples.
pub fn fit_preprocess(samples: &[TrainingSample]) -> Result<PreprocessState> {
    let distinct = dedup(samples.to_vec()).len();
    if distinct < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "preprocessing needs at least {MIN_FIT_SAMPLES} distinct samples, got {distinct}"
        )));
    }
    let rows: Vec<_> = samples.iter().map(|s| s.features.to_array()).collect();
    fit_preprocess_rows(&rows)
}

impl PreprocessState {
    pub fn validate(&self) -> Result<()> {
        expect_schema(PREPROC_SCHEMA, &self.schema)?;
        let d = FeatureVector::LEN;
        let ok = self.mean.len() == d
            && self.std.len() == d
            && self.constant.len() == d
            && self.components.len() == PCA_COMPONENTS
            && self.variances.len() == PCA_COMPONENTS
            && self.components.iter().all(|c| c.len() == d)
            && self.std.iter().all(|s| *s > 0.0);
        if !ok {
            return Err(Error::Invariant("malformed preprocessing state".into()));
        }
        Ok(())
    }

    pub fn transform_array(&self, v: &[f64; FeatureVector::LEN]) -> [f64; PCA_COMPONENTS] {
        let mut out = [0.0; PCA_COMPONENTS];
        for (k, c) in self.components.iter().enumerate() {
            out[k] = c
                .iter()
                .enumerate()
                .map(|(j, w)| w * (v[j] - self.mean[j]) / self.std[j])
                .sum();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        expect_schema(PREPROC_SCHEMA, found)?;
        let ps: PreprocessState = serde_json::from_value(value)?;
        ps.validate()?;
        Ok(ps)
    }
}

/// Projects the z-scored `v` onto the stored components.
pub fn transform(ps: &PreprocessState, v: &FeatureVector) -> [f64; PCA_COMPONENTS] {
    ps.transform_array(&v.to_array())
}

const META_COLUMNS: [&str; 5] = ["label", "program", "function", "config", "global_speedup"];

pub fn write_dataset_csv<W: Write>(samples: &[TrainingSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = FeatureVector::NAMES
        .iter()
        .chain(META_COLUMNS.iter())
        .copied()
        .collect();
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.features.to_array().iter().map(f64::to_string).collect();
        rec.push(s.label.to_string());
        rec.push(s.meta.program.clone());
        rec.push(s.meta.function.clone());
        rec.push(s.meta.config.to_string());
        rec.push(s.meta.global_speedup.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset_csv`]; `#` lines are skipped.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<TrainingSample>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(input);
    let header = r.headers()?.clone();
    let expected: Vec<&str> = FeatureVector::NAMES
        .iter()
        .chain(META_COLUMNS.iter())
        .copied()
        .collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Schema {
            expected: "dataset header".into(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let d = FeatureVector::LEN;
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Config(format!("bad number `{s}`: {e}")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let feats = (0..d).map(|j| num(&rec[j])).collect::<Result<Vec<_>>>()?;
        out.push(TrainingSample {
            features: FeatureVector::from_slice(&feats)?,
            label: num(&rec[d])?,
            meta: SampleMeta {
                program: rec[d + 1].to_string(),
                function: rec[d + 2].to_string(),
                config: rec[d + 3]
                    .parse()
                    .map_err(|e| Error::Config(format!("bad config id: {e}")))?,
                global_speedup: num(&rec[d + 4])?,
            },
        });
    }
    Ok(out)
}
