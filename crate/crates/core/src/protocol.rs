//! Repeated random-split evaluation, cross-dataset transfer and
//! data-efficiency sweeps, reported as JSON with seeds and fingerprints.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mat::Scalar;
use crate::metrics;
use crate::model::Model;
use crate::rng;
use crate::train::{train, LabelPolicy, TrainOptions};

const STREAM_SPLIT: u64 = 201;
const STREAM_EVAL: u64 = 202;

pub const DEFAULT_REPEATS: usize = 10;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.8;

/// Predict every image and correlate against normalized MOS.
/// Returns `(srcc, plcc)`.
pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, seed: u64) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut mos = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let img = ds.load_image(i)?;
        preds.push(model.predict(&img, rng::mix(seed, i as u64))?);
        mos.push(ds.normalized_mos(i));
    }
    Ok((metrics::srcc(&preds, &mos)?, metrics::plcc(&preds, &mos)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    /// Training or evaluation failure for this repeat; metrics absent.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub dataset_fingerprint: String,
    pub config_fingerprint: String,
    pub base_seed: u64,
    pub repeats: usize,
    pub train_frac: f64,
    /// Fraction of the training split actually used (1.0 outside sweeps).
    pub train_subsample: f64,
    pub per_repeat: Vec<RepeatResult>,
    /// Medians over successful repeats; absent when every repeat failed.
    pub median_srcc: Option<f64>,
    pub median_plcc: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolOptions {
    pub repeats: usize,
    pub train_frac: f64,
    pub base_seed: u64,
    pub label_policy: LabelPolicy,
    pub verbose: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            repeats: DEFAULT_REPEATS,
            train_frac: DEFAULT_TRAIN_FRAC,
            base_seed: 0,
            label_policy: LabelPolicy::default(),
            verbose: false,
        }
    }
}

/// Seeded shuffle of `0..n` split after `n_train` items. The two sides
/// partition the index range.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!(n_train <= n, "split larger than the dataset");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_for(seed, STREAM_SPLIT));
    let test = idx.split_off(n_train);
    (idx, test)
}

/// Medians of the successful repeats, `(srcc, plcc)`.
pub fn medians(per_repeat: &[RepeatResult]) -> (Option<f64>, Option<f64>) {
    let collect = |f: fn(&RepeatResult) -> Option<f64>| {
        let v: Vec<f64> = per_repeat.iter().filter_map(f).collect();
        metrics::median(&v).ok()
    };
    (collect(|r| r.srcc), collect(|r| r.plcc))
}

/// Repeated-split protocol: for each repeat, split train/test with a seed
/// derived from `(base_seed, repeat)`, train a fresh model on the training
/// side, evaluate on the held-out side, and report medians. Failures are
/// recorded per repeat rather than aborting the protocol.
pub fn run_protocol<T: Scalar>(
    cfg: &ModelConfig,
    dataset: &Dataset,
    opts: &ProtocolOptions,
) -> Result<EvalReport> {
    run_subsampled::<T>(cfg, dataset, opts, 1.0)
}

fn run_subsampled<T: Scalar>(
    cfg: &ModelConfig,
    dataset: &Dataset,
    opts: &ProtocolOptions,
    subsample: f64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Data(format!(
            "protocol needs at least 2 images, dataset {:?} has {}",
            dataset.name,
            dataset.len()
        )));
    }
    if opts.repeats == 0 {
        return Err(Error::Config("protocol needs at least one repeat".into()));
    }
    if !(opts.train_frac > 0.0 && opts.train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} outside (0, 1)",
            opts.train_frac
        )));
    }
    let n = dataset.len();
    let n_pool = ((n as f64 * opts.train_frac).round() as usize).clamp(1, n - 1);
    let n_train = subsampled_count(n_pool, subsample)?;

    let mut per_repeat = Vec::with_capacity(opts.repeats);
    for r in 0..opts.repeats {
        let seed = rng::mix(opts.base_seed, r as u64);
        let (pool, test_idx) = split_indices(n, n_pool, seed);
        let train_ds = dataset.subset(&pool[..n_train]);
        let test_ds = dataset.subset(&test_idx);
        let outcome = run_one::<T>(cfg, &train_ds, &test_ds, seed, opts);
        if opts.verbose {
            match &outcome {
                Ok((s, p)) => eprintln!("repeat {r}: srcc {s:.4} plcc {p:.4}"),
                Err(e) => eprintln!("repeat {r}: failed: {e}"),
            }
        }
        per_repeat.push(match outcome {
            Ok((srcc, plcc)) => RepeatResult {
                seed,
                srcc: Some(srcc),
                plcc: Some(plcc),
                error: None,
            },
            Err(e) => RepeatResult {
                seed,
                srcc: None,
                plcc: None,
                error: Some(e.to_string()),
            },
        });
    }
    let (median_srcc, median_plcc) = medians(&per_repeat);
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        dataset_fingerprint: dataset.fingerprint(),
        config_fingerprint: cfg.fingerprint(),
        base_seed: opts.base_seed,
        repeats: opts.repeats,
        train_frac: opts.train_frac,
        train_subsample: subsample,
        per_repeat,
        median_srcc,
        median_plcc,
    })
}

fn subsampled_count(n_pool: usize, subsample: f64) -> Result<usize> {
    if subsample >= 1.0 {
        return Ok(n_pool);
    }
    let n = (n_pool as f64 * subsample).round() as usize;
    if n < 2 {
        return Err(Error::Data(format!(
            "subsample fraction {subsample} of a {n_pool}-image training split leaves {n} images (need 2)"
        )));
    }
    Ok(n)
}

fn run_one<T: Scalar>(
    cfg: &ModelConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    seed: u64,
    opts: &ProtocolOptions,
) -> Result<(f64, f64)> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut model: Model<T> = Model::new(cfg)?;
    let topts = TrainOptions {
        label_policy: opts.label_policy,
        ..TrainOptions::default()
    };
    train(&mut model, train_ds, &topts)?;
    evaluate(&model, test_ds, rng::mix(seed, STREAM_EVAL))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CrossEvalResult {
    pub srcc: f64,
    pub plcc: f64,
}

/// Evaluate an already trained model on another dataset with no
/// adaptation. Warns on stderr when the dataset names collide.
pub fn cross_eval<T: Scalar>(
    model: &Model<T>,
    train_name: &str,
    test: &Dataset,
    seed: u64,
) -> Result<CrossEvalResult> {
    if train_name == test.name {
        eprintln!("warning: cross-dataset evaluation against the training dataset {train_name:?}");
    }
    let (srcc, plcc) = evaluate(model, test, seed)?;
    Ok(CrossEvalResult { srcc, plcc })
}

/// Run the repeated-split protocol at several training-set fractions.
/// The train/test split of each repeat is shared across fractions; only
/// the leading portion of the shuffled training split is used. Returns
/// `(fraction, report)` pairs sorted by fraction.
pub fn data_efficiency_sweep<T: Scalar>(
    cfg: &ModelConfig,
    dataset: &Dataset,
    fractions: &[f64],
    opts: &ProtocolOptions,
) -> Result<Vec<(f64, EvalReport)>> {
    if fractions.is_empty() {
        return Err(Error::Config("sweep needs at least one fraction".into()));
    }
    let n = dataset.len();
    let n_pool = if n >= 2 {
        ((n as f64 * opts.train_frac).round() as usize).clamp(1, n - 1)
    } else {
        n
    };
    for &f in fractions {
        if !(f > 0.0 && f <= 0.8) {
            return Err(Error::Config(format!("sweep fraction {f} outside (0, 0.8]")));
        }
        subsampled_count(n_pool, f)?;
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("fractions are finite"));
    let mut out = Vec::with_capacity(sorted.len());
    for f in sorted {
        out.push((f, run_subsampled::<T>(cfg, dataset, opts, f)?));
    }
    Ok(out)
}
