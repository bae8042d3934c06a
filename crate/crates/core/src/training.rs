//! Two-stage optimization, evaluation, and the ablation grid.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig, StageHyper};
use crate::dataset::{check_disjoint, Dataset, Split};
use crate::error::{GsError, Result};
use crate::geometry::Category;
use crate::losses::{LossReport, Stage};
use crate::metrics::{metric_table, MetricTable, ObjectScores};
use crate::model::{Embeddings, EvalMode, Features, Model, Prepared};
use crate::nn::Group;
use crate::scoring::ScoreResult;

const STAGE2_GROUPS: [Group; 2] = [Group::DepthLora, Group::Srm];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub trainable_groups: Vec<Group>,
    pub frozen_groups: Vec<Group>,
}

impl StageConfig {
    /// The freeze schedule of `stage` restricted to the groups a model has.
    pub fn new(stage: Stage, hyper: &StageHyper, seed: u64, present: &BTreeSet<Group>) -> Self {
        let allowed: &[Group] = match stage {
            Stage::One => &Group::PROMPT_GENERATOR,
            Stage::Two => &STAGE2_GROUPS,
        };
        let (trainable, frozen) = present.iter().partition(|g| allowed.contains(g));
        StageConfig {
            stage,
            epochs: hyper.epochs,
            learning_rate: hyper.learning_rate,
            batch_size: hyper.batch_size,
            seed,
            trainable_groups: trainable,
            frozen_groups: frozen,
        }
    }

    /// Trainable and frozen groups must partition `present`, and only the
    /// stage's own groups may train.
    pub fn validate(&self, present: &BTreeSet<Group>) -> Result<()> {
        let t: BTreeSet<Group> = self.trainable_groups.iter().copied().collect();
        let f: BTreeSet<Group> = self.frozen_groups.iter().copied().collect();
        if t.len() != self.trainable_groups.len() || f.len() != self.frozen_groups.len() {
            return Err(GsError::config("duplicate parameter group in stage config"));
        }
        if !t.is_disjoint(&f) {
            return Err(GsError::config("a group cannot be both trainable and frozen"));
        }
        let union: BTreeSet<Group> = t.union(&f).copied().collect();
        if &union != present {
            return Err(GsError::config(format!("stage groups {union:?} do not cover the model's groups {present:?}")));
        }
        let allowed: &[Group] = match self.stage {
            Stage::One => &Group::PROMPT_GENERATOR,
            Stage::Two => &STAGE2_GROUPS,
        };
        if let Some(g) = t.iter().find(|g| !allowed.contains(g)) {
            return Err(GsError::config(format!("group {g} may not train in stage {}", self.stage.number())));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(GsError::config("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// One line of `logs/metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub train: LossReport,
    pub val: Option<LossReport>,
    pub checksums: BTreeMap<Group, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub config: StageConfig,
    pub initial_checksums: BTreeMap<Group, String>,
    pub epochs: Vec<EpochLog>,
}

impl StageReport {
    /// Frozen groups whose checksum moved at some epoch boundary.
    pub fn frozen_violations(&self) -> Vec<(usize, Group)> {
        let mut out = Vec::new();
        for e in &self.epochs {
            for g in &self.config.frozen_groups {
                if e.checksums.get(g) != self.initial_checksums.get(g) {
                    out.push((e.epoch, *g));
                }
            }
        }
        out
    }

    /// Trainable groups whose weights differ from the stage start.
    pub fn changed_trainable(&self) -> Vec<Group> {
        let Some(last) = self.epochs.last() else { return Vec::new() };
        self.config.trainable_groups.iter().copied().filter(|g| last.checksums.get(g) != self.initial_checksums.get(g)).collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train.total)
    }
}

fn mean_report(stage: Stage, reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport { stage, cla: sum(|r| r.cla), seg: sum(|r| r.seg), con: sum(|r| r.con), total: sum(|r| r.total) }
}

fn check_classes(data: &[Prepared]) -> Result<()> {
    let anomalous = data.iter().filter(|p| p.object_label).count();
    if anomalous == 0 || anomalous == data.len() {
        return Err(GsError::config("training data needs at least one normal and one anomalous object"));
    }
    Ok(())
}

/// Per-object inputs that stay constant within a stage.
struct Cached {
    render: Option<Features>,
    embeddings: Option<Embeddings>,
}

fn build_cache(model: &Model, stage: Stage, data: &[Prepared]) -> Result<Vec<Cached>> {
    model.frozen(|| {
        data.iter()
            .map(|p| match stage {
                // The vision encoder is frozen in stage 1, so rendered features never change.
                Stage::One => Ok(Cached { render: Some(model.render_features(p)?), embeddings: None }),
                // Prompts are frozen in stage 2; embeddings carry no gradient.
                Stage::Two => Ok(Cached {
                    render: if model.config.ablation.stream == crate::config::Stream::Depth {
                        None
                    } else {
                        Some(model.render_features(p)?)
                    },
                    embeddings: Some(model.embeddings(p)?),
                }),
            })
            .collect()
    })
}

fn object_loss(model: &Model, stage: Stage, p: &Prepared, c: &Cached) -> Result<(Tensor, LossReport)> {
    let e = match &c.embeddings {
        Some(e) => e.clone(),
        None => model.embeddings(p)?,
    };
    let mode = match stage {
        Stage::One => EvalMode::RenderOnly,
        Stage::Two => EvalMode::Full,
    };
    let f = model.features(p, mode, c.render.as_ref())?;
    let s = model.score_tensors(&f, &e, p)?;
    model.loss(stage, &s, &f, p)
}

/// Mean stage objective over `data` with every group frozen.
pub fn stage_loss(model: &Model, stage: Stage, data: &[Prepared]) -> Result<LossReport> {
    let cache = build_cache(model, stage, data)?;
    model.frozen(|| {
        let reports = data.iter().zip(&cache).map(|(p, c)| Ok(object_loss(model, stage, p, c)?.1)).collect::<Result<Vec<_>>>()?;
        Ok(mean_report(stage, &reports))
    })
}

/// Differentiable mean objective of a mini-batch under the current freeze flags.
pub fn batch_loss(model: &Model, stage: Stage, batch: &[Prepared]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for p in batch {
        let c = Cached { render: None, embeddings: None };
        let (l, _) = object_loss(model, stage, p, &c)?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| GsError::config("empty batch"))?;
    Ok((total / batch.len() as f64)?)
}

/// Trains the groups of `cfg` on `train`; `val` is only logged.
pub fn train_stage(
    model: &Model,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &StageConfig,
    sink: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<StageReport> {
    let present = model.store.groups();
    cfg.validate(&present)?;
    check_classes(train)?;
    let initial_checksums = model.store.checksums()?;
    let mut report = StageReport { config: cfg.clone(), initial_checksums, epochs: Vec::new() };
    if cfg.trainable_groups.is_empty() {
        return Ok(report);
    }
    let cache = build_cache(model, cfg.stage, train)?;
    let val_cache = build_cache(model, cfg.stage, val)?;
    model.store.train_only(&cfg.trainable_groups);
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(model.store.vars(&cfg.trainable_groups), params)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((cfg.stage.number() as u64) << 40) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut total: Option<Tensor> = None;
            for &i in batch {
                let (l, r) = object_loss(model, cfg.stage, &train[i], &cache[i])?;
                reports.push(r);
                total = Some(match total {
                    Some(t) => (t + l)?,
                    None => l,
                });
            }
            if let Some(t) = total {
                let loss = (t / batch.len() as f64)?;
                if !loss.to_scalar::<f64>()?.is_finite() {
                    return Err(GsError::Scoring(format!("non-finite loss in stage {} epoch {epoch}", cfg.stage.number())));
                }
                opt.backward_step(&loss)?;
            }
        }
        let val_report = if val.is_empty() {
            None
        } else {
            Some(model.frozen(|| {
                let rs = val.iter().zip(&val_cache).map(|(p, c)| Ok(object_loss(model, cfg.stage, p, c)?.1)).collect::<Result<Vec<_>>>()?;
                Ok(mean_report(cfg.stage, &rs))
            })?)
        };
        let log = EpochLog {
            stage: cfg.stage,
            epoch,
            train: mean_report(cfg.stage, &reports),
            val: val_report,
            checksums: model.store.checksums()?,
        };
        log::info!("stage {} epoch {epoch}: loss {:.5}", cfg.stage.number(), log.train.total);
        sink(&log)?;
        report.epochs.push(log);
    }
    model.store.train_only(&[]);
    Ok(report)
}

/// Prepared train, validation, and test objects.
pub struct PreparedSplits {
    pub train_categories: Vec<Category>,
    pub train: Vec<Prepared>,
    pub val: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

impl PreparedSplits {
    pub fn new(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        dataset.manifest.check_disjoint()?;
        let prep = |split| dataset.split(split).par_iter().map(|s| Prepared::new(s, cfg)).collect::<Result<Vec<_>>>();
        Ok(PreparedSplits {
            train_categories: dataset.manifest.train_categories.clone(),
            train: prep(Split::Train)?,
            val: prep(Split::Val)?,
            test: prep(Split::Test)?,
        })
    }
}

/// Per-object output of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectResult {
    pub id: String,
    pub category: Category,
    pub object_label: bool,
    pub object_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub metrics: MetricTable,
    pub objects: Vec<ObjectResult>,
}

/// Scores every test object and computes the metric table. Fails with a
/// protocol violation when a test category was seen in training.
pub fn evaluate(model: &Model, train_categories: &[Category], test: &[Prepared], mode: EvalMode) -> Result<(Evaluation, Vec<ScoreResult>)> {
    let test_categories: Vec<Category> = test.iter().map(|p| p.category).collect::<BTreeSet<_>>().into_iter().collect();
    check_disjoint(train_categories, &test_categories)?;
    if mode == EvalMode::Full && !model.config.ablation.uses_depth() {
        log::debug!("render-only architecture; full mode equals render-only");
    }
    let results = test.iter().map(|p| model.infer(p, mode)).collect::<Result<Vec<_>>>()?;
    let objects: Vec<ObjectScores<'_>> = test
        .iter()
        .zip(&results)
        .map(|(p, r)| ObjectScores {
            category: p.category.as_str(),
            object_score: r.object_prob,
            object_label: p.object_label,
            point_scores: &r.point_scores,
            point_labels: &p.point_labels,
            regions: p.regions.clone(),
        })
        .collect();
    let metrics = metric_table(&objects, model.config.fpr_limit)?;
    let objects = test
        .iter()
        .zip(&results)
        .map(|(p, r)| ObjectResult { id: p.id.clone(), category: p.category, object_label: p.object_label, object_score: r.object_prob })
        .collect();
    Ok((Evaluation { mode, metrics, objects }, results))
}

/// Stage reports of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: StageReport,
    pub stage2: StageReport,
}

pub fn run_stage1(model: &Model, splits: &PreparedSplits, sink: &mut dyn FnMut(&EpochLog) -> Result<()>) -> Result<StageReport> {
    let cfg = StageConfig::new(Stage::One, &model.config.stage1, model.config.seed, &model.store.groups());
    train_stage(model, &splits.train, &splits.val, &cfg, sink)
}

pub fn run_stage2(model: &Model, splits: &PreparedSplits, sink: &mut dyn FnMut(&EpochLog) -> Result<()>) -> Result<StageReport> {
    let cfg = StageConfig::new(Stage::Two, &model.config.stage2, model.config.seed, &model.store.groups());
    train_stage(model, &splits.train, &splits.val, &cfg, sink)
}

/// Both stages from scratch.
pub fn train_all(cfg: &ExperimentConfig, splits: &PreparedSplits, sink: &mut dyn FnMut(&EpochLog) -> Result<()>) -> Result<(Model, TrainReport)> {
    let model = Model::new(cfg)?;
    let stage1 = run_stage1(&model, splits, sink)?;
    let stage2 = run_stage2(&model, splits, sink)?;
    Ok((model, TrainReport { stage1, stage2 }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub report: TrainReport,
    pub evaluation: Evaluation,
}

/// Trains and evaluates each configuration. Stage 1 depends only on the
/// prompt toggles, so its weights are shared between rows that agree on them.
pub fn run_grid(
    base: &ExperimentConfig,
    rows: &[Ablation],
    splits: &PreparedSplits,
    sink: &mut dyn FnMut(&str, &EpochLog) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut stage1_cache: BTreeMap<(bool, bool), (BTreeMap<String, Tensor>, StageReport)> = BTreeMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for ablation in rows {
        let mut cfg = base.clone();
        cfg.ablation = ablation.clone();
        let label = ablation.label();
        let model = Model::new(&cfg)?;
        let key = (ablation.use_shape_prompt, ablation.use_defect_prompt);
        let stage1 = match stage1_cache.get(&key) {
            Some((weights, report)) => {
                model.store.load_groups(weights, &Group::PROMPT_GENERATOR)?;
                report.clone()
            }
            None => {
                let report = run_stage1(&model, splits, &mut |e| sink(&label, e))?;
                let weights = model.store.tensors();
                stage1_cache.insert(key, (weights, report.clone()));
                report
            }
        };
        let stage2 = run_stage2(&model, splits, &mut |e| sink(&label, e))?;
        let (evaluation, _) = evaluate(&model, &splits.train_categories, &splits.test, EvalMode::Full)?;
        log::info!("{label}: O-AUROC {:?} P-AUROC {:?}", evaluation.metrics.overall.o_auroc, evaluation.metrics.overall.p_auroc);
        out.push(AblationRow { label, ablation: ablation.clone(), report: TrainReport { stage1, stage2 }, evaluation });
    }
    Ok(out)
}

/// Text table of ablation rows in the "(O-R, O-A) (P-R, P-P)" layout.
pub fn format_grid(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
    let mut s = format!("{:<20} {:>14} {:>14}\n", "configuration", "(O-R, O-A)", "(P-R, P-P)");
    for r in rows {
        let m = &r.evaluation.metrics.overall;
        s.push_str(&format!(
            "{:<20} {:>14} {:>14}\n",
            r.label,
            format!("({}, {})", pct(m.o_auroc), pct(m.o_ap)),
            format!("({}, {})", pct(m.p_auroc), pct(m.p_pro))
        ));
    }
    s
}
