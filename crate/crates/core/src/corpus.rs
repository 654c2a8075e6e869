//! Seeded program corpora and their on-disk layout (one module file per
//! program, named `<program>.json`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::progmodel::{generate_program, GenConfig, Module};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Program names are `<prefix><seed>`.
    pub prefix: String,
    /// Explicit generator seeds.
    pub seeds: Vec<u64>,
    /// Draw `count` programs from consecutive seeds starting at `first_seed`,
    /// skipping those outside the call-site bounds.
    pub count: usize,
    pub first_seed: u64,
    pub min_callsites: usize,
    pub max_callsites: Option<usize>,
    /// Generator knobs; `seed` is overwritten per program.
    pub gen: GenConfig,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() && self.count == 0 {
            return Err(Error::Config("corpus spec names no programs".into()));
        }
        if !self.seeds.is_empty() && self.count > 0 {
            return Err(Error::Config("give either seeds or count, not both".into()));
        }
        if let Some(max) = self.max_callsites {
            if max < self.min_callsites {
                return Err(Error::Config("max_callsites below min_callsites".into()));
            }
        }
        self.gen.validate()
    }

    fn accepts(&self, m: &Module) -> bool {
        let k = m.call_sites().len();
        k >= self.min_callsites && self.max_callsites.is_none_or(|max| k <= max)
    }
}

const SEARCH_LIMIT: u64 = 100_000;

/// Generates the programs of `spec` in seed order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<(String, Module)>> {
    spec.validate()?;
    let build = |seed: u64| {
        let cfg = GenConfig {
            seed,
            ..spec.gen.clone()
        };
        generate_program(&cfg).map(|m| (format!("{}{seed}", spec.prefix), m))
    };
    if !spec.seeds.is_empty() {
        let out = spec.seeds.iter().map(|&s| build(s)).collect::<Result<Vec<_>>>()?;
        if let Some((name, _)) = out.iter().find(|(_, m)| !spec.accepts(m)) {
            return Err(Error::Config(format!(
                "program {name} is outside the call-site bounds"
            )));
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(spec.count);
    let mut seed = spec.first_seed;
    while out.len() < spec.count {
        if seed - spec.first_seed >= SEARCH_LIMIT {
            return Err(Error::Config(format!(
                "only {} of {} programs satisfy the call-site bounds",
                out.len(),
                spec.count
            )));
        }
        let (name, m) = build(seed)?;
        if spec.accepts(&m) {
            out.push((name, m));
        }
        seed += 1;
    }
    Ok(out)
}

/// Writes `<dir>/<name>.json` per program and returns the written paths.
pub fn write_corpus(dir: &Path, corpus: &[(String, Module)]) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    corpus
        .iter()
        .map(|(name, m)| {
            let path = dir.join(format!("{name}.json"));
            fs::write(&path, m.to_json()?)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.json` module in `dir`, sorted by program name. Other
/// files (manifests included) are skipped.
pub fn read_corpus(dir: &Path) -> Result<Vec<(String, Module)>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("corpus directory {}", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("json") || stem == "manifest" {
            continue;
        }
        let m = Module::from_json(&fs::read_to_string(&path)?)?;
        out.push((stem.to_string(), m));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    if out.is_empty() {
        return Err(Error::NotFound(format!("no modules in {}", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_is_rejected() {
        assert!(matches!(
            generate_corpus(&CorpusSpec::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn explicit_seeds_name_programs() {
        let spec = CorpusSpec {
            prefix: "p".into(),
            seeds: vec![3, 1, 4, 1, 5],
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let names: Vec<_> = c.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["p3", "p1", "p4", "p1", "p5"]);
    }

    #[test]
    fn count_respects_bounds() {
        let spec = CorpusSpec {
            prefix: "q".into(),
            count: 6,
            min_callsites: 1,
            max_callsites: Some(10),
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.len(), 6);
        assert!(c
            .iter()
            .all(|(_, m)| (1..=10).contains(&m.call_sites().len())));
    }

    #[test]
    fn roundtrips_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            prefix: "r".into(),
            seeds: vec![2, 9],
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
    }
}
