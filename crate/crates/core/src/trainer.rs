//! Source pretraining and source-free target adaptation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{ExperimentConfig, PseudoSource};
use crate::data::{augment, Dataset, Split, Strength};
use crate::error::{Error, Result};
use crate::losses::{
    ce_labeled, ce_pseudo, hmr_loss, mutual_info, spcr_loss, tpr_loss, view_pairing,
    EarlyPredictionStore, LossBreakdown, LossTerms,
};
use crate::mining::{build_views, mine, mix, MinedSets, MiningStats, MixBatch};
use crate::model::{forward_probs, Model};
use crate::optim::{GroupRates, OptimState};
use crate::propagation::{build_knn_graph, propagate, select_seeds};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Adapt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
        }
    }
}

/// Metrics of one epoch. Loss means are over the epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub total: f64,
    /// Weighted objective of every step, in order.
    pub step_totals: Vec<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub pseudo_acc: Option<f64>,
    pub unreached: Option<usize>,
    pub propagation_iters: Option<usize>,
    pub mining: Option<MiningStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub stage: Stage,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochMetrics>,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>, seed: u64, stage: Stage, config: &ExperimentConfig) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            stage,
            config: config.clone(),
            epochs: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

fn rates(cfg: &ExperimentConfig) -> GroupRates {
    GroupRates {
        backbone: cfg.lr_backbone,
        bottleneck: cfg.lr_bottleneck,
        classifier: cfg.lr_classifier,
    }
}

fn diverged(stage: Stage, epoch: usize, step: usize, record: RunRecord) -> Error {
    Error::Diverged {
        stage: stage.as_str(),
        epoch,
        step,
        partial: Box::new(record),
    }
}

/// Non-finite weights surface as numeric errors in later forward passes.
fn or_diverged<T>(r: Result<T>, stage: Stage, epoch: usize, step: usize, record: &RunRecord) -> Result<T> {
    match r {
        Err(Error::Numeric { .. }) => Err(diverged(stage, epoch, step, record.clone())),
        other => other,
    }
}

/// Fraction of `split` rows whose predicted class equals the label.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split) -> Result<f64> {
    let (x, y) = ds.part(split);
    if y.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", split.as_str())));
    }
    let pred = model.predict(&x)?;
    let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

fn test_acc(model: &Model, eval: Option<&Dataset>) -> Result<Option<f64>> {
    match eval {
        Some(ds) if ds.count(Split::Test) > 0 => evaluate(model, ds, Split::Test).map(Some),
        _ => Ok(None),
    }
}

/// Cross-entropy training of extractor and classifier on the labeled rows of
/// `train`. Classifier rows are renormalized after every step. `eval`, when
/// given, is scored on its test split at the end of each epoch.
pub fn pretrain_source(
    model: &mut Model,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &ExperimentConfig,
    seed: u64,
    run_id: &str,
) -> Result<RunRecord> {
    let mut record = RunRecord::new(run_id, seed, Stage::Pretrain, cfg);
    let (x, y) = train.part(Split::Labeled);
    if y.is_empty() {
        return Err(Error::Data("pretraining needs labeled rows".into()));
    }
    model.classifier.unfreeze();
    let mut opt = OptimState::for_model(model, rates(cfg), cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..y.len()).collect();
    for epoch in 0..cfg.source_epochs {
        order.shuffle(&mut seed::rng(seed, &[seed::stream::PRETRAIN, epoch as u64]));
        let mut sum = 0.0;
        let mut step_totals = Vec::new();
        for (step, batch) in order.chunks(cfg.source_batch).enumerate() {
            let xb = x.select_rows(batch)?;
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let tape = Tape::new();
            let g = model.extractor.bind(&tape, true);
            let f = model.classifier.bind(&tape, true);
            let loss = match forward_probs(&g, &f, tape.constant(xb)).and_then(|p| ce_labeled(p, &yb)) {
                Ok(loss) if loss.item().is_finite() => loss,
                Ok(_) | Err(Error::Numeric { .. }) => return Err(diverged(Stage::Pretrain, epoch, step, record)),
                Err(e) => return Err(e),
            };
            let value = loss.item();
            tape.backward(loss)?;
            let mut grads = g.grads();
            grads.push(f.weight.grad());
            let params = model
                .extractor
                .params_mut()
                .chain(std::iter::once(&mut model.classifier.weight));
            opt.step(params, &grads)?;
            if cfg.lr_classifier != 0.0 {
                model.classifier.normalize_rows();
            }
            sum += value;
            step_totals.push(value);
        }
        let steps = step_totals.len();
        let train_acc = accuracy(&or_diverged(model.predict(&x), Stage::Pretrain, epoch, steps, &record)?, &y);
        let test = or_diverged(test_acc(model, eval), Stage::Pretrain, epoch, steps, &record)?;
        record.epochs.push(EpochMetrics {
            epoch,
            steps,
            loss: LossBreakdown {
                l_l: sum / steps as f64,
                ..Default::default()
            },
            total: sum / steps as f64,
            step_totals,
            train_acc: Some(train_acc),
            test_acc: test,
            pseudo_acc: None,
            unreached: None,
            propagation_iters: None,
            mining: None,
        });
    }
    Ok(record)
}

/// Pseudo-labels of the unlabeled rows for one adaptation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTargets {
    pub pseudo: Vec<usize>,
    pub unreached: usize,
    pub iterations: usize,
}

/// Features → KNN graph → seeds → propagation (or plain argmax).
pub fn pseudo_labels(
    model: &Model,
    x_l: &Tensor,
    y_l: &[usize],
    x_u: &Tensor,
    cfg: &ExperimentConfig,
) -> Result<EpochTargets> {
    let z_u = model.extractor.extract_features(x_u)?;
    let probs_u = model.predict_probs(x_u)?;
    if cfg.pseudo_source == PseudoSource::Argmax {
        return Ok(EpochTargets {
            pseudo: probs_u.argmax_rows(),
            unreached: 0,
            iterations: 0,
        });
    }
    let classes = model.classifier.classes();
    let z = model.extractor.extract_features(x_l)?.vstack(&z_u)?;
    let k = cfg.knn_k.min(z.rows().saturating_sub(1));
    let graph = build_knn_graph(&z, k)?;
    let seeds = select_seeds(&probs_u, y_l, cfg.seed_quantile)?;
    let fallback = Tensor::one_hot(y_l, classes)?.vstack(&probs_u)?;
    let out = propagate(&graph, &seeds, classes, cfg.propagation(), &fallback)?;
    Ok(EpochTargets {
        pseudo: out.labels[y_l.len()..].to_vec(),
        unreached: out.unreached,
        iterations: out.iterations,
    })
}

/// Inputs of one adaptation step.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x_l: Tensor,
    pub y_l: Vec<usize>,
    pub x_weak: Tensor,
    pub x_strong: Tensor,
    /// One-hot pseudo-labels of the unlabeled rows.
    pub pseudo: Tensor,
    /// Row ids into the unlabeled set, for the early-prediction store.
    pub ids: Vec<usize>,
    pub mix: Option<MixBatch>,
}

/// Gradients of one adaptation step for the extractor parameters.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub total: f64,
    pub grads: Vec<Tensor>,
}

/// Evaluates the full objective on one batch and back-propagates into the
/// extractor. Terms whose weight is zero are neither computed nor recorded.
pub fn adapt_step_grads(
    model: &Model,
    batch: &StepBatch,
    store: &mut EarlyPredictionStore,
    cfg: &ExperimentConfig,
) -> Result<StepOutput> {
    let w = cfg.loss_weights();
    let tape = Tape::new();
    let g = model.extractor.bind(&tape, true);
    let f = model.classifier.bind(&tape, false);
    let p_l = forward_probs(&g, &f, tape.constant(batch.x_l.clone()))?;
    let p_w = forward_probs(&g, &f, tape.constant(batch.x_weak.clone()))?;

    let l_l = ce_labeled(p_l, &batch.y_l)?;
    let l_u = ce_pseudo(p_w, &batch.pseudo)?;
    let l_mi = mutual_info(p_w)?;
    let l_prob = if w.prob > 0.0 {
        let p_s = forward_probs(&g, &f, tape.constant(batch.x_strong.clone()))?;
        let both = p_w.concat_rows(p_s)?;
        Some(spcr_loss(both, &view_pairing(p_w.shape().0), cfg.tau, cfg.spcr_norm)?)
    } else {
        None
    };
    let l_mix = match (&batch.mix, w.mix > 0.0) {
        (Some(m), true) => {
            let p_mix = forward_probs(&g, &f, tape.constant(m.x_mix.clone()))?;
            Some(hmr_loss(p_mix, &m.y_mix)?)
        }
        _ => None,
    };
    let l_pre = if w.pre > 0.0 {
        store.update(&p_w.value(), &batch.ids)?;
        Some(tpr_loss(store, p_w, &batch.ids)?)
    } else {
        None
    };
    let terms = LossTerms {
        l_l,
        l_u: Some(l_u),
        l_mi: Some(l_mi),
        l_prob,
        l_mix,
        l_pre,
    };
    let total = terms.total(&w)?;
    let value = total.item();
    let breakdown = terms.breakdown();
    if value.is_finite() {
        tape.backward(total)?;
    }
    Ok(StepOutput {
        breakdown,
        total: value,
        grads: g.grads(),
    })
}

fn mix_batch(
    x_u: &Tensor,
    mined: &MinedSets,
    cfg: &ExperimentConfig,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<Option<MixBatch>> {
    let easy = mined.easy();
    let hard = mined.hard();
    if easy.is_empty() || hard.is_empty() {
        return Ok(None);
    }
    let aug = cfg.augment_spec();
    let path = |k: u64| seed::derive(seed, &[seed::stream::AUGMENT, epoch as u64, step as u64, k]);
    let (xe, ye) = build_views(x_u, &easy, &aug, path(2))?;
    let (xh, yh) = build_views(x_u, &hard, &aug, path(3))?;
    let mix_seed = seed::derive(seed, &[seed::stream::MIX, epoch as u64, step as u64]);
    let m = mix(&xe, &ye, &xh, &yh, cfg.classes, cfg.mixup_alpha, cfg.pair, mix_seed)?;
    Ok(Some(m))
}

fn mean_breakdown(acc: &LossBreakdown, n: usize) -> LossBreakdown {
    let k = n.max(1) as f64;
    LossBreakdown {
        l_l: acc.l_l / k,
        l_u: acc.l_u / k,
        l_mi: acc.l_mi / k,
        l_prob: acc.l_prob / k,
        l_mix: acc.l_mix / k,
        l_pre: acc.l_pre / k,
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_l += b.l_l;
    acc.l_u += b.l_u;
    acc.l_mi += b.l_mi;
    acc.l_prob += b.l_prob;
    acc.l_mix += b.l_mix;
    acc.l_pre += b.l_pre;
}

/// Adapts the extractor on `target`'s labeled and unlabeled rows with the
/// classifier frozen. The test split, if present, is scored every epoch.
pub fn adapt_target(
    model: &mut Model,
    target: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
    run_id: &str,
) -> Result<RunRecord> {
    if !model.classifier.is_frozen() {
        return Err(Error::Contract("adaptation needs a frozen classifier".into()));
    }
    cfg.validate()?;
    let before = model.classifier.digest();
    let mut record = RunRecord::new(run_id, seed, Stage::Adapt, cfg);
    let (x_l, y_l) = target.part(Split::Labeled);
    let (x_u, y_u) = target.part(Split::Unlabeled);
    if y_l.is_empty() || y_u.len() < 2 {
        return Err(Error::Data(format!(
            "adaptation needs labeled rows and at least 2 unlabeled rows, got {} and {}",
            y_l.len(),
            y_u.len()
        )));
    }
    let classes = model.classifier.classes();
    let aug = cfg.augment_spec();
    let mut opt = OptimState::for_extractor(&model.extractor, rates(cfg), cfg.momentum, cfg.weight_decay)?;
    let mut store = EarlyPredictionStore::new(y_u.len(), classes, cfg.beta)?;
    let mut order_u: Vec<usize> = (0..y_u.len()).collect();
    let mut order_l: Vec<usize> = (0..y_l.len()).collect();
    let mut cursor_l = 0;

    for epoch in 0..cfg.adapt_epochs {
        let targets = or_diverged(pseudo_labels(model, &x_l, &y_l, &x_u, cfg), Stage::Adapt, epoch, 0, &record)?;
        let mined = if cfg.lambda_mix > 0.0 {
            let z_u = or_diverged(model.extractor.extract_features(&x_u), Stage::Adapt, epoch, 0, &record)?;
            let anchors = model.classifier.anchors();
            Some(mine(&z_u, &targets.pseudo, &anchors, cfg.n_easy, cfg.n_hard, cfg.hard_pool)?)
        } else {
            None
        };
        let mut rng = seed::rng(seed, &[seed::stream::ADAPT, epoch as u64]);
        order_u.shuffle(&mut rng);

        let mut sum = LossBreakdown::default();
        let mut step_totals = Vec::new();
        let batches: Vec<&[usize]> = order_u
            .chunks(cfg.unlabeled_batch)
            .filter(|b| b.len() >= 2)
            .collect();
        for (step, ids) in batches.into_iter().enumerate() {
            let mut lab = Vec::with_capacity(cfg.labeled_batch);
            for _ in 0..cfg.labeled_batch {
                if cursor_l == 0 {
                    order_l.shuffle(&mut rng);
                }
                lab.push(order_l[cursor_l]);
                cursor_l = (cursor_l + 1) % order_l.len();
            }
            let path = |k: u64| seed::derive(seed, &[seed::stream::AUGMENT, epoch as u64, step as u64, k]);
            let xl = augment(&x_l.select_rows(&lab)?, &aug, Strength::Weak, path(0));
            let xu = x_u.select_rows(ids)?;
            let batch = StepBatch {
                x_l: xl,
                y_l: lab.iter().map(|&i| y_l[i]).collect(),
                x_weak: augment(&xu, &aug, Strength::Weak, path(1)),
                x_strong: augment(&xu, &aug, Strength::Strong, path(4)),
                pseudo: Tensor::one_hot(&ids.iter().map(|&i| targets.pseudo[i]).collect::<Vec<_>>(), classes)?,
                ids: ids.to_vec(),
                mix: match &mined {
                    Some(m) => mix_batch(&x_u, m, cfg, seed, epoch, step)?,
                    None => None,
                },
            };
            let out = match adapt_step_grads(model, &batch, &mut store, cfg) {
                Ok(out) if out.total.is_finite() => out,
                Ok(_) | Err(Error::Numeric { .. }) => return Err(diverged(Stage::Adapt, epoch, step, record)),
                Err(e) => return Err(e),
            };
            opt.step(model.extractor.params_mut(), &out.grads)?;
            add_breakdown(&mut sum, &out.breakdown);
            step_totals.push(out.total);
        }
        let steps = step_totals.len();
        let train_acc = accuracy(&or_diverged(model.predict(&x_l), Stage::Adapt, epoch, steps, &record)?, &y_l);
        let test = or_diverged(test_acc(model, Some(target)), Stage::Adapt, epoch, steps, &record)?;
        record.epochs.push(EpochMetrics {
            epoch,
            steps,
            loss: mean_breakdown(&sum, steps),
            total: step_totals.iter().sum::<f64>() / steps.max(1) as f64,
            step_totals,
            train_acc: Some(train_acc),
            test_acc: test,
            pseudo_acc: Some(accuracy(&targets.pseudo, &y_u)),
            unreached: Some(targets.unreached),
            propagation_iters: Some(targets.iterations),
            mining: mined.map(|m| m.stats),
        });
    }

    let after = model.classifier.digest();
    if after != before {
        return Err(Error::FreezeViolation {
            before: before.to_hex(),
            after: after.to_hex(),
        });
    }
    Ok(record)
}
