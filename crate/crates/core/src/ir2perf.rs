//! Speedup regressor over preprocessed function features.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{dedup, fit_preprocess, PreprocessState, TrainingSample, PCA_COMPONENTS};
use crate::error::{expect_schema, Error, Result};
use crate::features::{FeatureVector, ModuleFeatures};
use crate::nn::{Dense, Gradients, Mlp, DEFAULT_LEAKY_SLOPE};
use crate::progmodel::Module;
use crate::util::{geometric_mean, sha256_hex};

pub const IR2PERF_SCHEMA: &str = "ir2perf/1";
pub const IR2PERF_DIMS: [usize; 5] = [PCA_COMPONENTS, 128, 256, 32, 1];
pub const DEFAULT_CLAMP: (f64, f64) = (0.1, 10.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelRepr", try_from = "ModelRepr")]
pub struct Ir2PerfModel {
    pub net: Mlp,
    /// Prediction bounds; `None` serves the raw network output.
    pub clamp: Option<(f64, f64)>,
    pub preprocess: PreprocessState,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    schema: String,
    dims: Vec<usize>,
    layers: Vec<Dense>,
    leaky_slope: f64,
    clamp: Option<[f64; 2]>,
    preprocess: PreprocessState,
}

impl From<Ir2PerfModel> for ModelRepr {
    fn from(m: Ir2PerfModel) -> Self {
        ModelRepr {
            schema: IR2PERF_SCHEMA.into(),
            dims: m.net.dims(),
            layers: m.net.layers,
            leaky_slope: m.net.leaky_slope,
            clamp: m.clamp.map(|(lo, hi)| [lo, hi]),
            preprocess: m.preprocess,
        }
    }
}

impl TryFrom<ModelRepr> for Ir2PerfModel {
    type Error = String;

    fn try_from(r: ModelRepr) -> Result<Self, String> {
        let model = Ir2PerfModel {
            net: Mlp {
                layers: r.layers,
                leaky_slope: r.leaky_slope,
            },
            clamp: r.clamp.map(|[lo, hi]| (lo, hi)),
            preprocess: r.preprocess,
        };
        if model.net.dims() != r.dims {
            return Err(format!("dims {:?} do not match the layers", r.dims));
        }
        model.validate().map_err(|e| e.to_string())?;
        Ok(model)
    }
}

impl Ir2PerfModel {
    pub fn validate(&self) -> Result<()> {
        self.net.check_dims(&IR2PERF_DIMS)?;
        if !self.net.is_finite() {
            return Err(Error::Invariant("non-finite model parameter".into()));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo > 0.0 && lo < hi) {
                return Err(Error::Config(format!("bad clamp bounds [{lo}, {hi}]")));
            }
        }
        self.preprocess.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        expect_schema(IR2PERF_SCHEMA, found)?;
        serde_json::from_value(value).map_err(|e| Error::Invariant(e.to_string()))
    }

    pub fn clamp_value(&self, y: f64) -> f64 {
        match self.clamp {
            Some((lo, hi)) => y.clamp(lo, hi),
            None => y,
        }
    }

    /// Clamped prediction for an already extracted feature vector.
    pub fn predict_features(&self, v: &FeatureVector) -> f64 {
        let x = self.preprocess.transform_array(&v.to_array());
        self.clamp_value(forward(&self.net, &x))
    }
}

/// Raw network output for one preprocessed input.
pub fn forward(net: &Mlp, x: &[f64; PCA_COMPONENTS]) -> f64 {
    net.forward_one(x)[0]
}

/// Mean squared error over the batch and its exact gradients.
pub fn backward(net: &Mlp, xs: &Array2<f64>, ys: &Array1<f64>) -> (f64, Gradients) {
    let cache = net.forward_cached(xs.view());
    let out = cache.output().column(0).to_owned();
    let b = ys.len() as f64;
    let resid = &out - ys;
    let loss = resid.mapv(|r| r * r).sum() / b;
    let grad_out = (resid * (2.0 / b)).insert_axis(ndarray::Axis(1));
    (loss, net.backward(&cache, grad_out))
}

/// Training prediction error of `net` on a batch.
pub fn mse(net: &Mlp, xs: &Array2<f64>, ys: &Array1<f64>) -> f64 {
    let out = net.forward(xs.view());
    let n = ys.len() as f64;
    out.column(0)
        .iter()
        .zip(ys)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub clamp: Option<(f64, f64)>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            learning_rate: 0.002,
            batch_size: 32,
            epochs: 60,
            seed: 0,
            validation_fraction: 0.0,
            clamp: Some(DEFAULT_CLAMP),
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Ir2PerfModel,
    /// Loss of every mini-batch, measured before its update.
    pub history: Vec<LossRecord>,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
}

fn design_matrix(samples: &[&TrainingSample], ps: &PreprocessState) -> (Array2<f64>, Array1<f64>) {
    let mut xs = Array2::zeros((samples.len(), PCA_COMPONENTS));
    let mut ys = Array1::zeros(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let x = ps.transform_array(&s.features.to_array());
        xs.row_mut(i).assign(&Array1::from(x.to_vec()));
        ys[i] = s.label;
    }
    (xs, ys)
}

/// Mini-batch SGD on MSE with per-epoch reshuffling from `spec.seed`.
/// The output bias starts at the mean training label.
pub fn train(
    samples: &[TrainingSample],
    ps: PreprocessState,
    spec: &TrainSpec,
) -> Result<TrainOutcome> {
    spec.validate()?;
    ps.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (spec.validation_fraction * samples.len() as f64).floor() as usize;
    let (train_idx, val_idx) = order.split_at(samples.len() - n_val);
    if train_idx.len() < 2 * spec.batch_size {
        return Err(Error::InsufficientData(format!(
            "training needs at least {} samples, got {}",
            2 * spec.batch_size,
            train_idx.len()
        )));
    }
    let train_set: Vec<&TrainingSample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&TrainingSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let (xs, ys) = design_matrix(&train_set, &ps);
    let (vx, vy) = design_matrix(&val_set, &ps);

    let mut net = Mlp::random(&IR2PERF_DIMS, DEFAULT_LEAKY_SLOPE, &mut rng);
    net.layers.last_mut().expect("output layer").bias[0] = ys.mean().unwrap_or(1.0);

    let mut history = Vec::new();
    let mut epoch_loss = Vec::with_capacity(spec.epochs);
    let mut validation_loss = Vec::new();
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..spec.epochs {
        idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (batch, chunk) in idx.chunks(spec.batch_size).enumerate() {
            let bx = xs.select(ndarray::Axis(0), chunk);
            let by = ys.select(ndarray::Axis(0), chunk);
            let (loss, grads) = backward(&net, &bx, &by);
            if spec.learning_rate > 0.0 {
                net.add_scaled(&grads, -spec.learning_rate);
            }
            history.push(LossRecord { epoch, batch, loss });
            sum += loss;
            batches += 1;
        }
        if !net.is_finite() {
            return Err(Error::Invariant(format!(
                "training diverged in epoch {epoch}; lower the learning rate"
            )));
        }
        epoch_loss.push(sum / batches as f64);
        if !val_set.is_empty() {
            validation_loss.push(mse(&net, &vx, &vy));
        }
    }
    let model = Ir2PerfModel {
        net,
        clamp: spec.clamp,
        preprocess: ps,
    };
    Ok(TrainOutcome {
        model,
        history,
        epoch_loss,
        validation_loss,
    })
}

pub fn write_loss_history_csv<W: Write>(history: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Clamped predicted speedup of `f` in module state `m`.
pub fn predict_speedup(model: &Ir2PerfModel, m: &Module, f: &str) -> Result<f64> {
    let fv = ModuleFeatures::new(m)?.function_features(f)?;
    Ok(model.predict_features(&fv))
}

/// Order-independent digest of a sample set.
pub fn split_hash(samples: &[&TrainingSample]) -> String {
    let mut keys: Vec<String> = samples
        .iter()
        .map(|s| {
            let feats: Vec<String> = s
                .features
                .to_array()
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect();
            format!(
                "{}\t{}\t{}\t{:016x}\t{}",
                s.meta.program,
                s.meta.function,
                s.meta.config,
                s.label.to_bits(),
                feats.join(",")
            )
        })
        .collect();
    keys.sort();
    sha256_hex(keys.join("\n").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValRow {
    pub program: String,
    pub n_train: usize,
    pub n_test: usize,
    /// `None` when the held-out program has no samples.
    pub mse: Option<f64>,
    pub baseline_mse: Option<f64>,
    pub train_hash: String,
    pub test_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub rows: Vec<CrossValRow>,
    pub geomean_mse: Option<f64>,
    /// Held-out squared error pooled over every program.
    pub pooled_mse: f64,
    /// Same, for a predictor of the training-fold mean label.
    pub pooled_baseline_mse: f64,
    pub n_samples: usize,
}

impl CrossValReport {
    pub fn relative_mse(&self) -> f64 {
        self.pooled_mse / self.pooled_baseline_mse
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>12} {:>12}",
            "program", "train", "test", "mse", "mean-pred"
        )?;
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.6}"));
        for r in &self.rows {
            writeln!(
                out,
                "{:<16} {:>8} {:>8} {:>12} {:>12}",
                r.program,
                r.n_train,
                r.n_test,
                fmt(r.mse),
                fmt(r.baseline_mse)
            )?;
        }
        writeln!(out, "{:<16} {:>30}", "geomean", fmt(self.geomean_mse))?;
        writeln!(
            out,
            "{:<16} {:>30} {:>12.6}",
            "pooled",
            format!("{:.6}", self.pooled_mse),
            self.pooled_baseline_mse
        )?;
        Ok(())
    }
}

/// Leave-one-program-out evaluation. Samples are deduplicated once, then
/// each program's samples are held out while preprocessing and model are
/// fitted on the rest.
pub fn cross_validate(samples: &[TrainingSample], spec: &TrainSpec) -> Result<CrossValReport> {
    let all = dedup(samples.to_vec());
    let programs: BTreeSet<&str> = all.iter().map(|s| s.meta.program.as_str()).collect();
    if programs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "cross-validation needs at least 3 programs, got {}",
            programs.len()
        )));
    }
    let programs: Vec<&str> = programs.into_iter().collect();
    let folds = programs
        .par_iter()
        .map(|&p| -> Result<(CrossValRow, f64, f64)> {
            let (test, train): (Vec<&TrainingSample>, Vec<&TrainingSample>) =
                all.iter().partition(|s| s.meta.program == p);
            let train_owned: Vec<TrainingSample> = train.iter().map(|s| (*s).clone()).collect();
            let ps = fit_preprocess(&train_owned)?;
            let outcome = train_model_for_fold(&train_owned, ps, spec)?;
            let mean_label = train.iter().map(|s| s.label).sum::<f64>() / train.len() as f64;
            let (mut sq, mut sq_base) = (0.0, 0.0);
            for s in &test {
                sq += (outcome.predict_features(&s.features) - s.label).powi(2);
                sq_base += (mean_label - s.label).powi(2);
            }
            let n = test.len() as f64;
            Ok((
                CrossValRow {
                    program: p.to_string(),
                    n_train: train.len(),
                    n_test: test.len(),
                    mse: (!test.is_empty()).then(|| sq / n),
                    baseline_mse: (!test.is_empty()).then(|| sq_base / n),
                    train_hash: split_hash(&train),
                    test_hash: split_hash(&test),
                },
                sq,
                sq_base,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_samples = all.len();
    let pooled_mse = folds.iter().map(|f| f.1).sum::<f64>() / n_samples as f64;
    let pooled_baseline_mse = folds.iter().map(|f| f.2).sum::<f64>() / n_samples as f64;
    let rows: Vec<CrossValRow> = folds.into_iter().map(|f| f.0).collect();
    let present: Vec<f64> = rows.iter().filter_map(|r| r.mse).collect();
    Ok(CrossValReport {
        geomean_mse: geometric_mean(&present),
        rows,
        pooled_mse,
        pooled_baseline_mse,
        n_samples,
    })
}

fn train_model_for_fold(
    train: &[TrainingSample],
    ps: PreprocessState,
    spec: &TrainSpec,
) -> Result<Ir2PerfModel> {
    Ok(self::train(train, ps, spec)?.model)
}
