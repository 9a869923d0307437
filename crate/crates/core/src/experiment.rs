//! End-to-end experiment drivers shared by the CLI, the Python bindings and
//! the acceptance tests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::csv_io;
use crate::data::{gen_two_domain, split_ssda, Dataset, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, DEFAULT_STEP};
use crate::losses::{
    ce_labeled, ce_pseudo, hmr_loss, mutual_info, spcr_loss_with_weights, spcr_weights, tpr_loss,
    view_pairing, EarlyPredictionStore,
};
use crate::metrics::MetricsWriter;
use crate::model::{init_params, Model};
use crate::seed;
use crate::tensor::Tensor;
use crate::trainer::{adapt_target, evaluate, pretrain_source, RunRecord, Stage};

/// Source domain plus the split target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub source: Dataset,
    pub target: Dataset,
}

/// Generates both domains and splits the target; depends only on `data_seed`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    cfg.validate()?;
    let (source, target) = gen_two_domain(&cfg.domain_spec(), cfg.n_per_class, cfg.data_seed)?;
    let target = split_ssda(&target, cfg.shots, cfg.test_fraction, cfg.data_seed)?;
    Ok(TaskData { source, target })
}

pub fn fresh_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut model = init_params(seed, &cfg.layer_dims(), cfg.classes)?;
    model.classifier.temperature = cfg.cls_temperature;
    Ok(model)
}

/// Result of one seed of one method.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub model: Model,
    pub records: Vec<RunRecord>,
    pub test_acc: f64,
}

pub fn pretrain(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<(Model, RunRecord)> {
    let mut model = fresh_model(cfg, seed)?;
    let record = pretrain_source(
        &mut model,
        &data.source,
        Some(&data.target),
        cfg,
        seed,
        &format!("seed{seed}-pretrain"),
    )?;
    Ok((model, record))
}

/// Freezes a copy of `pretrained` and adapts it on the target.
pub fn adapt(
    cfg: &ExperimentConfig,
    data: &TaskData,
    pretrained: &Model,
    seed: u64,
    run_id: &str,
) -> Result<(Model, RunRecord, f64)> {
    let mut model = pretrained.clone();
    model.classifier.freeze();
    let record = adapt_target(&mut model, &data.target, cfg, seed, run_id)?;
    let acc = evaluate(&model, &data.target, Split::Test)?;
    Ok((model, record, acc))
}

/// Pretrain, freeze, adapt.
pub fn run_serl(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<SeedOutcome> {
    let (pre, pre_record) = pretrain(cfg, data, seed)?;
    let (model, record, test_acc) = adapt(cfg, data, &pre, seed, &format!("seed{seed}-adapt"))?;
    Ok(SeedOutcome {
        seed,
        model,
        records: vec![pre_record, record],
        test_acc,
    })
}

/// Supervised baseline: cross-entropy on labeled source and labeled target
/// rows, no adaptation terms.
pub fn run_source_plus_target(cfg: &ExperimentConfig, data: &TaskData, seed: u64) -> Result<SeedOutcome> {
    let labeled_target = data.target.subset(&data.target.indices(Split::Labeled))?;
    let train = data.source.concat(&labeled_target)?;
    let mut model = fresh_model(cfg, seed)?;
    let record = pretrain_source(
        &mut model,
        &train,
        Some(&data.target),
        cfg,
        seed,
        &format!("seed{seed}-source-plus-target"),
    )?;
    let test_acc = evaluate(&model, &data.target, Split::Test)?;
    Ok(SeedOutcome {
        seed,
        model,
        records: vec![record],
        test_acc,
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Which regularisers are active in an ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TermMask {
    pub prob: bool,
    pub mix: bool,
    pub pre: bool,
}

impl TermMask {
    pub const BASE: TermMask = TermMask { prob: false, mix: false, pre: false };
    pub const FULL: TermMask = TermMask { prob: true, mix: true, pre: true };

    /// All eight rows: base, singles, pairs, full.
    pub fn grid() -> Vec<TermMask> {
        let m = |prob, mix, pre| TermMask { prob, mix, pre };
        vec![
            m(false, false, false),
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            m(true, true, true),
        ]
    }

    /// Parses `base` or a `+`-joined subset of `prob`, `mix`, `pre`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut mask = Self::BASE;
        if s == "base" || s.is_empty() {
            return Ok(mask);
        }
        for term in s.split('+').map(str::trim) {
            match term {
                "prob" => mask.prob = true,
                "mix" => mask.mix = true,
                "pre" => mask.pre = true,
                "full" => mask = Self::FULL,
                other => {
                    return Err(Error::config(
                        "terms",
                        format!("unknown term `{other}`; expected prob, mix, pre, base or full"),
                    ))
                }
            }
        }
        Ok(mask)
    }

    /// Parses a `;`- or `,`-separated list of masks; `all` is the full grid.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s.trim() == "all" {
            return Ok(Self::grid());
        }
        s.split([';', ',']).map(Self::parse).collect()
    }

    pub fn count(&self) -> usize {
        [self.prob, self.mix, self.pre].iter().filter(|&&b| b).count()
    }

    /// Zeroes the weight of every inactive term.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        if !self.prob {
            c.lambda_prob = 0.0;
        }
        if !self.mix {
            c.lambda_mix = 0.0;
        }
        if !self.pre {
            c.lambda_pre = 0.0;
        }
        c
    }
}

impl fmt::Display for TermMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.prob, "prob"), (self.mix, "mix"), (self.pre, "pre")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        if names.is_empty() {
            f.write_str("base")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: TermMask,
    pub label: String,
    pub accs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Runs every mask for every seed, reusing one pretrained model per seed.
/// `on_run` sees each adaptation record as it finishes.
pub fn ablate(
    cfg: &ExperimentConfig,
    data: &TaskData,
    seeds: &[u64],
    masks: &[TermMask],
    mut on_run: impl FnMut(&TermMask, &RunRecord) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut accs = vec![Vec::new(); masks.len()];
    for &s in seeds {
        let (pre, _) = pretrain(cfg, data, s)?;
        for (k, mask) in masks.iter().enumerate() {
            let run_cfg = mask.apply(cfg);
            let (_, record, acc) = adapt(&run_cfg, data, &pre, s, &format!("seed{s}-{mask}"))?;
            on_run(mask, &record)?;
            accs[k].push(acc);
        }
    }
    Ok(masks
        .iter()
        .zip(accs)
        .map(|(mask, accs)| {
            let (mean, std) = mean_std(&accs);
            AblationRow {
                mask: *mask,
                label: mask.to_string(),
                accs,
                mean,
                std,
            }
        })
        .collect())
}

/// Largest allowed relative error in the gradient suite.
pub const GRADCHECK_TOL: f64 = 1e-4;

pub const LOSS_NAMES: [&str; 6] = ["ce_labeled", "ce_pseudo", "mutual_info", "spcr", "hmr", "tpr"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

fn normal(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}

fn simplex(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    let mut t = normal(rng, r, c).map(f64::exp);
    for row in 0..r {
        let s: f64 = t.row(row).iter().sum();
        t.row_mut(row).iter_mut().for_each(|x| *x /= s);
    }
    t
}

fn probs_of<'t>(v: &[Var<'t>]) -> Result<Var<'t>> {
    v[0].matmul(v[1])?.softmax_rows()
}

fn loss_builder<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Finite-difference check of every loss term on `instances` random problems
/// with at most 6 rows, 4 classes and 5 input features. Probabilities are
/// `softmax(x·W)` and gradients are taken with respect to `x` and `W`.
/// `corrupt` plants a wrong gradient in the contrastive term.
pub fn gradcheck_suite(instances: usize, seed: u64, corrupt: bool) -> Result<Vec<LossCheck>> {
    let mut worst = [0.0f64; 6];
    let mut rng = seed::rng(seed, &[]);
    for _ in 0..instances {
        let b = rng.random_range(1..=6usize);
        let c = rng.random_range(2..=4usize);
        let d = rng.random_range(1..=5usize);
        let inputs = [normal(&mut rng, b, d), normal(&mut rng, d, c)];
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let pseudo = Tensor::one_hot(&labels.iter().rev().copied().collect::<Vec<_>>(), c)?;
        let y_mix = simplex(&mut rng, b, c);
        let mut store = EarlyPredictionStore::new(b, c, 0.7)?;
        let ids: Vec<usize> = (0..b).collect();
        store.update(&simplex(&mut rng, b, c), &ids)?;

        let h = DEFAULT_STEP;
        worst[0] = worst[0].max(grad_check(|_, v| ce_labeled(probs_of(v)?, &labels), &inputs, h)?);
        worst[1] = worst[1].max(grad_check(|_, v| ce_pseudo(probs_of(v)?, &pseudo), &inputs, h)?);
        worst[2] = worst[2].max(grad_check(|_, v| mutual_info(probs_of(v)?), &inputs, h)?);
        worst[4] = worst[4].max(grad_check(|_, v| hmr_loss(probs_of(v)?, &y_mix), &inputs, h)?);
        worst[5] = worst[5].max(grad_check(|_, v| tpr_loss(&store, probs_of(v)?, &ids), &inputs, h)?);

        // Two views of `half` instances, at most 6 rows in total.
        let half = rng.random_range(2..=3usize);
        let views = [normal(&mut rng, 2 * half, d), inputs[1].clone()];
        let pairing = view_pairing(half);
        let weights = {
            let tape = Tape::new();
            let v: Vec<_> = views.iter().map(|t| tape.constant(t.clone())).collect();
            spcr_weights(&probs_of(&v)?.value(), &pairing)?
        };
        let spcr = loss_builder(|_, v| {
            let loss = spcr_loss_with_weights(probs_of(v)?, &weights, 0.15, crate::losses::SpcrNorm::Batch)?;
            if corrupt {
                loss.add(v[0].sub(v[0].detach())?.sum()?)
            } else {
                Ok(loss)
            }
        });
        worst[3] = worst[3].max(grad_check(spcr, &views, h)?);
    }
    Ok(LOSS_NAMES
        .iter()
        .zip(worst)
        .map(|(name, e)| LossCheck {
            loss: name.to_string(),
            instances,
            max_rel_error: e,
        })
        .collect())
}

/// Writes bottleneck features of every row with label, domain, split and
/// prediction.
pub fn export_features(model: &Model, datasets: &[&Dataset], path: impl AsRef<Path>) -> Result<()> {
    let dim = model.extractor.out_dim();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    let mut header: Vec<String> = (0..dim).map(|k| format!("z{k}")).collect();
    header.extend(["label", "domain", "split", "pred"].map(String::from));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for ds in datasets {
        let z = model.extractor.extract_features(&ds.features)?;
        let pred = model.predict(&ds.features)?;
        for i in 0..ds.len() {
            let mut rec: Vec<String> = z.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(ds.labels[i].to_string());
            rec.push(ds.domains[i].as_str().to_string());
            rec.push(ds.splits[i].as_str().to_string());
            rec.push(pred[i].to_string());
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Accuracy summary written at the end of `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub test_acc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Output locations of a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["metrics", "checkpoints", "features"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("seed{seed}.ckpt"))
    }

    pub fn features(&self, seed: u64) -> PathBuf {
        self.root.join("features").join(format!("seed{seed}.csv"))
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.jsonl")
    }
}

/// Full SERL pipeline for every seed in the config: one metric stream and
/// one checkpoint per seed. On failure the partial stream of the failing seed
/// is still written before the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, export: bool) -> Result<RunSummary> {
    let data = prepare_data(cfg)?;
    let layout = RunLayout::create(out)?;
    cfg.save(out.join("config.conf"))?;
    let mut timings = MetricsWriter::create(layout.timings())?;
    let mut accs = Vec::new();
    for &s in &cfg.seeds {
        let mut stream = MetricsWriter::create(layout.metrics(&format!("seed{s}")))?;
        let t0 = Instant::now();
        let (pre, pre_record) = match pretrain(cfg, &data, s) {
            Ok(v) => v,
            Err(e) => return Err(preserve_partial(e, &mut stream)),
        };
        stream.write_run(&pre_record)?;
        timings.write_timing(&pre_record.run_id, Stage::Pretrain, t0.elapsed().as_secs_f64())?;
        let t1 = Instant::now();
        let (model, record, acc) = match adapt(cfg, &data, &pre, s, &format!("seed{s}-adapt")) {
            Ok(v) => v,
            Err(e) => return Err(preserve_partial(e, &mut stream)),
        };
        stream.write_run(&record)?;
        timings.write_timing(&record.run_id, Stage::Adapt, t1.elapsed().as_secs_f64())?;
        checkpoint::save(&model, layout.checkpoint(s))?;
        if export {
            export_features(&model, &[&data.source, &data.target], layout.features(s))?;
        }
        accs.push(acc);
    }
    let (mean, std) = mean_std(&accs);
    let summary = RunSummary {
        seeds: cfg.seeds.clone(),
        test_acc: accs,
        mean,
        std,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn preserve_partial<W: std::io::Write>(e: Error, stream: &mut MetricsWriter<W>) -> Error {
    if let Error::Diverged { partial, .. } = &e {
        if let Err(io) = stream.write_run(partial) {
            return io;
        }
    }
    e
}

/// Writes both domains as CSV files and returns their paths.
pub fn write_data(cfg: &ExperimentConfig, out: &Path) -> Result<(TaskData, PathBuf, PathBuf)> {
    let data = prepare_data(cfg)?;
    fs::create_dir_all(out)?;
    let src = out.join("source.csv");
    let tgt = out.join("target.csv");
    csv_io::save_csv(&data.source, &src)?;
    csv_io::save_csv(&data.target, &tgt)?;
    Ok((data, src, tgt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_parse_and_display() {
        assert_eq!(TermMask::parse("base").unwrap(), TermMask::BASE);
        assert_eq!(TermMask::parse("prob+pre").unwrap().to_string(), "prob+pre");
        assert_eq!(TermMask::parse_list("all").unwrap().len(), 8);
        assert!(TermMask::parse("mixx").unwrap_err().is_config());
        let c = TermMask::parse("prob").unwrap().apply(&ExperimentConfig::default());
        assert_eq!((c.lambda_prob, c.lambda_mix, c.lambda_pre), (0.3, 0.0, 0.0));
    }

    #[test]
    fn grid_is_distinct() {
        let g = TermMask::grid();
        let set: std::collections::HashSet<_> = g.iter().collect();
        assert_eq!(set.len(), 8);
    }

    #[test]
    fn gradcheck_suite_passes_and_corruption_is_caught() {
        let ok = gradcheck_suite(3, 11, false).unwrap();
        assert_eq!(ok.len(), 6);
        assert!(ok.iter().all(LossCheck::passed), "{ok:?}");
        let bad = gradcheck_suite(3, 11, true).unwrap();
        let failing: Vec<_> = bad.iter().filter(|c| !c.passed()).map(|c| c.loss.as_str()).collect();
        assert_eq!(failing, vec!["spcr"]);
    }
}
