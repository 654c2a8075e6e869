//! One function per subcommand. Each reads its inputs through a [`Run`],
//! writes its artifacts and manifest under `out`, and returns the report
//! for stdout.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use perfinline::corpus::generate_corpus;
use perfinline::dataset::{
    collect_corpus, contradiction_fraction, dedup, fit_preprocess, read_dataset_csv,
    write_dataset_csv, PreprocessState, TrainingSample,
};
use perfinline::ir2perf::{cross_validate, train, write_loss_history_csv, Ir2PerfModel};
use perfinline::policy::{
    autotune_report, evaluate, train_policy, IterationRecord, PolicyParams, Strategy,
};
use perfinline::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{string_list, Run};
use crate::config::PipelineConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    #[default]
    Table,
}

/// Where a stage writes and how it reports.
pub struct Ctx<'a> {
    pub config: &'a PipelineConfig,
    pub out: &'a Path,
    pub format: Format,
}

impl Ctx<'_> {
    fn run(&self, subcommand: &str) -> Result<Run> {
        Ok(Run::new(
            subcommand,
            self.config.seed,
            serde_json::to_value(self.config)?,
            self.out,
        ))
    }

    fn render<T: Serialize>(&self, value: &T, table: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
        match self.format {
            Format::Json => Ok(serde_json::to_string_pretty(value)? + "\n"),
            Format::Table => {
                let mut buf = Vec::new();
                table(&mut buf)?;
                String::from_utf8(buf).map_err(|e| Error::Invariant(e.to_string()))
            }
        }
    }
}

fn load_dataset(run: &mut Run, path: &Path) -> Result<Vec<TrainingSample>> {
    let text = run.read_input(path, "dataset.csv")?;
    read_dataset_csv(text.as_bytes())
}

fn programs_of(samples: &[TrainingSample]) -> BTreeSet<String> {
    samples.iter().map(|s| s.meta.program.clone()).collect()
}

pub fn gen(ctx: &Ctx) -> Result<String> {
    let mut spec = ctx
        .config
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("the config has no [corpus] section".into()))?;
    if let (Some(seed), true) = (ctx.config.seed, spec.count > 0) {
        spec.first_seed = seed;
    }
    let corpus = generate_corpus(&spec)?;
    let mut run = ctx.run("gen")?;
    #[derive(Serialize)]
    struct Row {
        program: String,
        functions: usize,
        call_sites: usize,
        instructions: usize,
    }
    let mut rows = Vec::new();
    for (name, m) in &corpus {
        run.write_json(&format!("{name}.json"), &m.to_json()?, &[])?;
        rows.push(Row {
            program: name.clone(),
            functions: m.functions.len(),
            call_sites: m.call_sites().len(),
            instructions: m.instruction_count(),
        });
    }
    run.finish()?;
    log::info!("generated {} programs into {}", rows.len(), ctx.out.display());
    ctx.render(&rows, |w| {
        writeln!(w, "{:<16} {:>9} {:>10} {:>12}", "program", "functions", "call-sites", "instructions")?;
        for r in &rows {
            writeln!(w, "{:<16} {:>9} {:>10} {:>12}", r.program, r.functions, r.call_sites, r.instructions)?;
        }
        Ok(())
    })
}

#[derive(Debug, Serialize)]
pub struct ContradictionReport {
    pub samples: usize,
    pub contradictions: usize,
    pub fraction: f64,
    pub programs: usize,
}

pub fn collect(ctx: &Ctx, corpus_dir: &Path) -> Result<String> {
    let mut run = ctx.run("collect")?;
    let corpus = run.read_corpus(corpus_dir, "corpus")?;
    let samples = collect_corpus(&corpus, &ctx.config.collect, &ctx.config.cost_model)?;
    let mut csv = Vec::new();
    write_dataset_csv(&samples, &mut csv)?;
    run.write_csv("dataset.csv", &String::from_utf8_lossy(&csv))?;
    let fraction = contradiction_fraction(&samples);
    let report = ContradictionReport {
        samples: samples.len(),
        contradictions: (fraction * samples.len() as f64).round() as usize,
        fraction,
        programs: corpus.len(),
    };
    run.write_json("contradiction.json", &serde_json::to_string_pretty(&report)?, &[])?;
    run.finish()?;
    log::info!("collected {} samples from {} programs", report.samples, report.programs);
    ctx.render(&report, |w| {
        writeln!(w, "samples         {}", report.samples)?;
        writeln!(w, "programs        {}", report.programs)?;
        writeln!(w, "contradictions  {}", report.contradictions)?;
        writeln!(w, "fraction        {:.6}", report.fraction)?;
        writeln!(w, "(function speedup > 1 while global speedup < 1)")?;
        Ok(())
    })
}

pub fn preprocess(ctx: &Ctx, dataset: &Path) -> Result<String> {
    let mut run = ctx.run("preprocess")?;
    let samples = dedup(load_dataset(&mut run, dataset)?);
    let ps = fit_preprocess(&samples)?;
    run.write_json("preproc.json", &ps.to_json()?, &[])?;
    run.finish()?;
    let summary = json!({ "samples": samples.len(), "variances": ps.variances });
    ctx.render(&summary, |w| {
        writeln!(w, "distinct samples  {}", samples.len())?;
        writeln!(w, "{:<10} {:>14}", "component", "variance")?;
        for (k, v) in ps.variances.iter().enumerate() {
            writeln!(w, "{:<10} {:>14.6}", k + 1, v)?;
        }
        Ok(())
    })
}

pub fn train_ir2perf(ctx: &Ctx, dataset: &Path, preproc: &Path) -> Result<String> {
    let mut run = ctx.run("train-ir2perf")?;
    let samples = dedup(load_dataset(&mut run, dataset)?);
    let ps = PreprocessState::from_json(&run.read_input(preproc, "preproc.json")?)?;
    let outcome = train(&samples, ps, &ctx.config.ir2perf)?;
    let programs: Vec<String> = programs_of(&samples).into_iter().collect();
    run.write_json(
        "ir2perf.json",
        &outcome.model.to_json()?,
        &[("training_programs", json!(programs))],
    )?;
    let mut csv = Vec::new();
    write_loss_history_csv(&outcome.history, &mut csv)?;
    run.write_csv("loss_history.csv", &String::from_utf8_lossy(&csv))?;
    run.finish()?;
    let summary = json!({
        "samples": samples.len(),
        "epochs": outcome.epoch_loss.len(),
        "first_epoch_loss": outcome.epoch_loss.first(),
        "final_epoch_loss": outcome.epoch_loss.last(),
    });
    ctx.render(&summary, |w| {
        writeln!(w, "{:<8} {:>14}", "epoch", "mean loss")?;
        for (e, l) in outcome.epoch_loss.iter().enumerate() {
            writeln!(w, "{:<8} {:>14.6}", e, l)?;
        }
        Ok(())
    })
}

pub fn crossval(ctx: &Ctx, dataset: &Path) -> Result<String> {
    let mut run = ctx.run("crossval")?;
    let samples = load_dataset(&mut run, dataset)?;
    let report = cross_validate(&samples, &ctx.config.ir2perf)?;
    run.write_json(
        "crossval.json",
        &serde_json::to_string_pretty(&report)?,
        &[("relative_mse", json!(report.relative_mse()))],
    )?;
    let mut table = Vec::new();
    report.write_table(&mut table)?;
    run.write_csv("crossval.txt", &String::from_utf8_lossy(&table))?;
    run.finish()?;
    ctx.render(&report, |w| {
        report.write_table(&mut *w)?;
        writeln!(w, "relative mse (pooled / mean predictor)  {:.4}", report.relative_mse())?;
        Ok(())
    })
}

fn write_policy_history(history: &[IterationRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

pub fn train_policy_cmd(ctx: &Ctx, corpus_dir: &Path, model: &Path) -> Result<String> {
    let mut run = ctx.run("train-policy")?;
    let model_text = run.read_input(model, "ir2perf.json")?;
    let reward = Ir2PerfModel::from_json(&model_text)?;
    let corpus = run.read_corpus(corpus_dir, "corpus")?;
    let tc = &ctx.config.policy;
    let init = PolicyParams::seeded(tc.seed);
    let outcome = train_policy(tc, &corpus, init, &reward, &ctx.config.cost_model)?;
    let mut programs: BTreeSet<String> = string_list(&model_text, "training_programs")?.into_iter().collect();
    programs.extend(corpus.iter().map(|(n, _)| n.clone()));
    run.write_json(
        "policy.json",
        &outcome.params.to_json()?,
        &[("training_programs", json!(programs))],
    )?;
    run.write_csv("policy_history.csv", &write_policy_history(&outcome.history)?)?;
    run.finish()?;
    let tail = &outcome.history[outcome.history.len().saturating_sub(20)..];
    let mean = |f: fn(&IterationRecord) -> f64| {
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    };
    let summary = json!({
        "iterations": outcome.history.len(),
        "skipped_iterations": outcome.skipped_iterations,
        "guard_triggers": outcome.guard_triggers,
        "recent_mean_reward": mean(|r| r.mean_reward),
        "recent_inline_fraction": mean(|r| r.inline_fraction),
    });
    ctx.render(&summary, |w| {
        for (k, v) in summary.as_object().expect("object") {
            writeln!(w, "{k:<24} {v}")?;
        }
        Ok(())
    })
}

pub fn evaluate_cmd(ctx: &Ctx, corpus_dir: &Path, policy: &Path, train_corpora: &[PathBuf]) -> Result<String> {
    let mut run = ctx.run("evaluate")?;
    let policy_text = run.read_input(policy, "policy.json")?;
    let params = PolicyParams::from_json(&policy_text)?;
    let mut train_ids: BTreeSet<String> =
        string_list(&policy_text, "training_programs")?.into_iter().collect();
    for (i, dir) in train_corpora.iter().enumerate() {
        let c = run.read_corpus(dir, &format!("train{i}"))?;
        train_ids.extend(c.into_iter().map(|(n, _)| n));
    }
    let corpus = run.read_corpus(corpus_dir, "corpus")?;
    let section = &ctx.config.evaluate;
    let report = evaluate(
        &corpus,
        &train_ids,
        Some(&params),
        &section.strategies,
        &ctx.config.cost_model,
        &section.eval_config(),
    )?;
    run.write_json("report.json", &report.to_json()?, &[])?;
    let mut table = Vec::new();
    report.write_table(&mut table)?;
    run.write_csv("report.txt", &String::from_utf8_lossy(&table))?;
    run.finish()?;
    match ctx.format {
        Format::Json => Ok(report.to_json()?),
        Format::Table => Ok(String::from_utf8_lossy(&table).into_owned()),
    }
}

pub fn autotune_cmd(ctx: &Ctx, corpus_dir: &Path, policy: Option<&Path>) -> Result<String> {
    let mut run = ctx.run("autotune")?;
    let params = match policy {
        Some(p) => Some(PolicyParams::from_json(&run.read_input(p, "policy.json")?)?),
        None => None,
    };
    let corpus = run.read_corpus(corpus_dir, "corpus")?;
    let section = &ctx.config.autotune;
    let strategies: Vec<Strategy> = section
        .strategies
        .iter()
        .copied()
        .filter(|s| *s != Strategy::Policy || params.is_some())
        .collect();
    let report = autotune_report(
        &corpus,
        params.as_ref(),
        &strategies,
        &ctx.config.cost_model,
        section.budget,
        section.seed,
    )?;
    run.write_json("regions.json", &report.to_json()?, &[])?;
    let mut table = Vec::new();
    report.write_table(&mut table)?;
    run.write_csv("regions.txt", &String::from_utf8_lossy(&table))?;
    run.finish()?;
    match ctx.format {
        Format::Json => Ok(report.to_json()?),
        Format::Table => Ok(String::from_utf8_lossy(&table).into_owned()),
    }
}

/// gen → collect → preprocess → train-ir2perf → train-policy → evaluate →
/// autotune, each stage in its own directory under `out`.
pub fn demo(ctx: &Ctx) -> Result<String> {
    let out = ctx.out;
    let stage = |dir: &str| out.join(dir);
    let demo = &ctx.config.demo;
    for (name, spec) in [("data", &demo.data), ("train", &demo.train), ("test", &demo.test)] {
        let cfg = PipelineConfig {
            corpus: Some(spec.clone()),
            ..ctx.config.clone()
        };
        let dir = stage(&format!("corpus/{name}"));
        gen(&Ctx { config: &cfg, out: &dir, format: ctx.format })?;
    }
    let dirs: Vec<PathBuf> = ["collect", "preprocess", "ir2perf", "policy", "evaluate", "autotune"]
        .iter()
        .map(|d| stage(d))
        .collect();
    let sub = |i: usize| Ctx {
        config: ctx.config,
        out: &dirs[i],
        format: ctx.format,
    };
    let collected = collect(&sub(0), &stage("corpus/data"))?;
    log::info!("contradiction report:\n{collected}");
    preprocess(&sub(1), &stage("collect/dataset.csv"))?;
    train_ir2perf(
        &sub(2),
        &stage("collect/dataset.csv"),
        &stage("preprocess/preproc.json"),
    )?;
    train_policy_cmd(&sub(3), &stage("corpus/train"), &stage("ir2perf/ir2perf.json"))?;
    let report = evaluate_cmd(
        &sub(4),
        &stage("corpus/test"),
        &stage("policy/policy.json"),
        &[stage("corpus/data"), stage("corpus/train")],
    )?;
    autotune_cmd(&sub(5), &stage("corpus/test"), Some(&stage("policy/policy.json")))?;
    Ok(report)
}
