//! Output files tagged with the digest of the run that produced them, and
//! the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use perfinline::util::sha256_hex;
use perfinline::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct WallClock {
    pub started_unix: u64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub run_digest: String,
    pub wall_clock: WallClock,
}

/// A run in progress: inputs are registered first, which fixes the run
/// digest, then outputs are written under `out`.
pub struct Run {
    subcommand: String,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    out: PathBuf,
    digest: Option<String>,
    started: SystemTime,
    clock: Instant,
}

impl Run {
    pub fn new(subcommand: &str, seed: Option<u64>, config: Value, out: &Path) -> Self {
        Run {
            subcommand: subcommand.into(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            out: out.to_path_buf(),
            digest: None,
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    /// Reads an input file and records its digest under `name`.
    pub fn read_input(&mut self, path: &Path, name: &str) -> Result<String> {
        assert!(self.digest.is_none(), "inputs after the first output");
        let bytes = fs::read(path)
            .map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest {
            name: name.into(),
            sha256: sha256_hex(&bytes),
        });
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Reads every module file of a corpus directory as inputs.
    pub fn read_corpus(
        &mut self,
        dir: &Path,
        label: &str,
    ) -> Result<Vec<(String, perfinline::progmodel::Module)>> {
        let corpus = perfinline::corpus::read_corpus(dir)?;
        for (name, _) in &corpus {
            self.read_input(&dir.join(format!("{name}.json")), &format!("{label}/{name}.json"))?;
        }
        Ok(corpus)
    }

    pub fn digest(&mut self) -> String {
        self.digest
            .get_or_insert_with(|| {
                let canonical = json!({
                    "tool_version": TOOL_VERSION,
                    "subcommand": self.subcommand,
                    "seed": self.seed,
                    "config": self.config,
                    "inputs": self.inputs,
                });
                sha256_hex(canonical.to_string().as_bytes())
            })
            .clone()
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push(FileDigest {
            name: name.into(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Writes a JSON object with `run_digest` and `extra` fields prepended.
    pub fn write_json(&mut self, name: &str, text: &str, extra: &[(&str, Value)]) -> Result<PathBuf> {
        let digest = self.digest();
        let tagged = annotate_json(text, &digest, extra)?;
        self.write(name, tagged.as_bytes())
    }

    /// Writes CSV (or other line-oriented) text behind a `# run_digest=` line.
    pub fn write_csv(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let digest = self.digest();
        self.write(name, format!("# run_digest={digest}\n{text}").as_bytes())
    }

    /// Writes the manifest; returns its path.
    pub fn finish(mut self) -> Result<PathBuf> {
        let run_digest = self.digest();
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.into(),
            subcommand: self.subcommand,
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            run_digest,
            wall_clock: WallClock {
                started_unix: self
                    .started
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs()),
                elapsed_seconds: self.clock.elapsed().as_secs_f64(),
            },
        };
        fs::create_dir_all(&self.out)?;
        let path = self.out.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

/// Inserts `"run_digest"` and `extra` as the first keys of a JSON object,
/// leaving the rest of the text untouched.
pub fn annotate_json(text: &str, digest: &str, extra: &[(&str, Value)]) -> Result<String> {
    let Some(rest) = text.strip_prefix('{') else {
        return Err(Error::Invariant("artifact is not a JSON object".into()));
    };
    let mut fields = vec![format!("\"run_digest\": {}", Value::from(digest))];
    for (k, v) in extra {
        fields.push(format!("{}: {}", Value::from(*k), v));
    }
    let body = rest.trim_start_matches('\n');
    let empty = body.trim_start().starts_with('}');
    let sep = if empty { "\n" } else { ",\n" };
    Ok(format!("{{\n  {}{sep}{body}", fields.join(",\n  ")))
}

/// String array stored under `key` of a JSON artifact, empty when absent.
pub fn string_list(text: &str, key: &str) -> Result<Vec<String>> {
    let v: Value = serde_json::from_str(text)?;
    Ok(v.get(key)
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .unwrap_or_default())
}
