use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::metrics::{similarity_matrix, topk_accuracy, FoldResult, Metrics, SimilarityMatrix};
use super::stage::{train_stage1, train_stage2, TrainHistory};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::mesh::{TriMesh, FEATURE_CHANNELS};
use crate::model::{voting_identify, FusionStrategy, Head, Model, ModelConfig};
use crate::raster::{ChannelStats, FlattenSettings, PartitionCache, PartitionSet};
use crate::seed::{derive_seed, rng_for};

/// Rasterized cohort: single-scan subjects and two-scan subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterCohort {
    pub singles: Vec<PartitionSet>,
    pub pairs: Vec<[PartitionSet; 2]>,
}

/// K-fold cross-validation over the two-scan subjects, repeated for several
/// reshuffled rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldPlan {
    pub folds: usize,
    pub rounds: usize,
}

impl Default for FoldPlan {
    fn default() -> Self {
        Self {
            folds: 3,
            rounds: 30,
        }
    }
}

impl FoldPlan {
    /// `(train, test)` subject indices of every fold of `round`. Fold `f` tests
    /// the `f`-th contiguous chunk of a seeded permutation.
    pub fn splits(
        &self,
        n: usize,
        seed: u64,
        round: usize,
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        let k = self.folds;
        if k < 2 || self.rounds == 0 {
            return Err(Error::PlanInfeasible(format!(
                "need at least 2 folds and 1 round, got {k} and {}",
                self.rounds
            )));
        }
        if n < k || n - n.div_ceil(k) < 2 {
            return Err(Error::PlanInfeasible(format!(
                "{n} two-scan subjects cannot fill {k} folds with at least 2 training subjects each"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(seed, &format!("round{round}/split")));
        Ok((0..k)
            .map(|f| {
                let (lo, hi) = (f * n / k, (f + 1) * n / k);
                let test = perm[lo..hi].to_vec();
                let train = perm[..lo].iter().chain(&perm[hi..]).copied().collect();
                (train, test)
            })
            .collect())
    }
}

/// How fingerprints of a model are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Fused(Head),
    /// Mean of the four per-partition distance matrices.
    Voting,
}

impl Readout {
    pub fn of(model: &Model) -> Self {
        match model.config.fusion {
            FusionStrategy::Voting => Readout::Voting,
            _ => Readout::Fused(model.head()),
        }
    }
}

/// Scan-1 versus scan-2 distance matrix of `pairs`.
pub fn identify(
    model: &Model,
    pairs: &[[PartitionSet; 2]],
    readout: Readout,
) -> Result<SimilarityMatrix> {
    let pooled = pairs
        .iter()
        .map(|[a, b]| Ok([model.pooled(a)?, model.pooled(b)?]))
        .collect::<Result<Vec<_>>>()?;
    match readout {
        Readout::Fused(head) => {
            let mut f = [Vec::new(), Vec::new()];
            for p in &pooled {
                for s in 0..2 {
                    f[s].push(model.embed_pooled(&p[s], head)?);
                }
            }
            similarity_matrix(&f[0], &f[1])
        }
        Readout::Voting => {
            let mut per = vec![[Vec::new(), Vec::new()]; 4];
            for p in &pooled {
                for s in 0..2 {
                    for (k, e) in model.partition_embeddings(&p[s])?.into_iter().enumerate() {
                        per[k][s].push(e);
                    }
                }
            }
            let sims = per
                .iter()
                .map(|[a, b]| similarity_matrix(a, b))
                .collect::<Result<Vec<_>>>()?;
            voting_identify(&sims)
        }
    }
}

/// Top-1 and Top-5 of one identification.
pub fn evaluate(
    model: &Model,
    pairs: &[[PartitionSet; 2]],
    readout: Readout,
) -> Result<(f64, f64)> {
    let sim = identify(model, pairs, readout)?;
    Ok((topk_accuracy(&sim, 1)?, topk_accuracy(&sim, 5)?))
}

/// Training variants compared by the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    /// Pre-training, fine-tuning and fusion training.
    Full,
    /// Randomly initialized model without any training.
    Untrained,
    /// Fine-tuning and fusion training without augmented pre-training.
    NoPretrain,
    /// The full schedule with a plain concatenation head in place of excitation fusion.
    NoExcitation,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Full,
        Condition::Untrained,
        Condition::NoPretrain,
        Condition::NoExcitation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Full => "A",
            Condition::Untrained => "B",
            Condition::NoPretrain => "C",
            Condition::NoExcitation => "D",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Condition::Full => "full pipeline",
            Condition::Untrained => "untrained random encoder",
            Condition::NoPretrain => "no augmented pre-training",
            Condition::NoExcitation => "plain concatenation head",
        }
    }
}

fn normalized(
    set: &PartitionSet,
    stats: &ChannelStats,
    keep: Option<&[bool]>,
) -> Result<PartitionSet> {
    let mut s = set.clone();
    stats.apply_set(&mut s)?;
    Ok(match keep {
        Some(k) => s.select_channels(k),
        None => s,
    })
}

/// Trains and evaluates `conditions` on one split. Channel statistics are fit
/// on the training data of the split only.
#[allow(clippy::too_many_arguments)]
pub fn run_fold(
    cohort: &RasterCohort,
    train: &[usize],
    test: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    keep: Option<&[bool]>,
    conditions: &[Condition],
) -> Result<Vec<(Condition, f64, f64)>> {
    let stats = ChannelStats::fit(
        cohort
            .singles
            .iter()
            .chain(train.iter().flat_map(|&i| &cohort.pairs[i]))
            .flat_map(|s| s.images.iter()),
    )?;
    let prep_pairs = |idx: &[usize]| -> Result<Vec<[PartitionSet; 2]>> {
        idx.iter()
            .map(|&i| {
                let [a, b] = &cohort.pairs[i];
                Ok([normalized(a, &stats, keep)?, normalized(b, &stats, keep)?])
            })
            .collect()
    };
    let train_pairs = prep_pairs(train)?;
    let test_pairs = prep_pairs(test)?;
    let needs_singles = conditions
        .iter()
        .any(|c| matches!(c, Condition::Full | Condition::NoExcitation));
    let singles = if needs_singles && cfg.epochs_pretrain > 0 {
        cohort
            .singles
            .iter()
            .map(|s| normalized(s, &stats, keep))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let init = Model::new(model_cfg.clone(), derive_seed(cfg.seed, "init"))?;
    let readout = Readout::of(&init);
    // voting compares per-partition embeddings directly and has no fusion stage
    let fused = model_cfg.fusion != FusionStrategy::Voting;
    let fuse = |mut m: Model, head: Head, train: bool| -> Result<Model> {
        if train {
            train_stage2(
                &mut m,
                &train_pairs,
                head,
                cfg,
                &mut TrainHistory::default(),
            )?;
        }
        Ok(m)
    };
    let mut stage1 = None;
    let mut out = Vec::with_capacity(conditions.len());
    for &c in conditions {
        let (t1, t5) = match c {
            Condition::Untrained => evaluate(&init, &test_pairs, readout)?,
            Condition::Full | Condition::NoExcitation => {
                if stage1.is_none() {
                    let mut m = init.clone();
                    train_stage1(
                        &mut m,
                        &singles,
                        &train_pairs,
                        cfg,
                        &mut TrainHistory::default(),
                    )?;
                    stage1 = Some(m);
                }
                let m = stage1.clone().expect("trained above");
                if c == Condition::Full {
                    evaluate(&fuse(m, init.head(), fused)?, &test_pairs, readout)?
                } else {
                    evaluate(
                        &fuse(m, Head::Plain, true)?,
                        &test_pairs,
                        Readout::Fused(Head::Plain),
                    )?
                }
            }
            Condition::NoPretrain => {
                let mut m = init.clone();
                let c = TrainConfig {
                    epochs_pretrain: 0,
                    ..cfg.clone()
                };
                train_stage1(&mut m, &[], &train_pairs, &c, &mut TrainHistory::default())?;
                evaluate(&fuse(m, init.head(), fused)?, &test_pairs, readout)?
            }
        };
        out.push((c, t1, t5));
    }
    Ok(out)
}

/// Runs every round and fold of `plan` for each condition. Jobs run in
/// parallel; each is seeded from `round{r}/fold{f}` so results do not depend
/// on scheduling.
pub fn run_protocol(
    cohort: &RasterCohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    keep: Option<&[bool]>,
    conditions: &[Condition],
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut jobs = Vec::new();
    for round in 0..plan.rounds {
        for (fold, split) in plan
            .splits(cohort.pairs.len(), cfg.seed, round)?
            .into_iter()
            .enumerate()
        {
            jobs.push((round, fold, split));
        }
    }
    let results = jobs
        .par_iter()
        .map(|(round, fold, (train, test))| {
            let c = TrainConfig {
                seed: derive_seed(cfg.seed, &format!("round{round}/fold{fold}")),
                ..cfg.clone()
            };
            run_fold(cohort, train, test, model_cfg, &c, keep, conditions)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..conditions.len())
        .map(|ci| Metrics {
            folds: jobs
                .iter()
                .zip(&results)
                .map(|((round, fold, (_, test)), r)| FoldResult {
                    round: *round,
                    fold: *fold,
                    n_test: test.len(),
                    top1: r[ci].1,
                    top5: r[ci].2,
                })
                .collect(),
        })
        .collect())
}

/// Top-1/Top-5 of the full pipeline under `plan`.
pub fn cross_validate(
    cohort: &RasterCohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    plan: &FoldPlan,
) -> Result<Metrics> {
    Ok(run_protocol(cohort, model_cfg, cfg, plan, None, &[Condition::Full])?.remove(0))
}

/// One labeled row of an experiment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub label: String,
    pub description: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn row(&self, label: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Header `label,description,n_test,top1,top5` with test-size weighted means.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["label", "description", "n_test", "top1", "top5"])?;
        for r in &self.rows {
            let (t1, t5) = r.metrics.mean();
            let n: usize = r.metrics.folds.iter().map(|f| f.n_test).sum();
            w.write_record([
                r.label.clone(),
                r.description.clone(),
                n.to_string(),
                format!("{t1:.6}"),
                format!("{t5:.6}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Conditions A–D on identical splits and seeds.
pub fn ablation_suite(
    cohort: &RasterCohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    plan: &FoldPlan,
) -> Result<ExperimentTable> {
    let metrics = run_protocol(cohort, model_cfg, cfg, plan, None, &Condition::ALL)?;
    Ok(ExperimentTable {
        rows: Condition::ALL
            .iter()
            .zip(metrics)
            .map(|(c, metrics)| ExperimentRow {
                label: c.label().into(),
                description: c.description().into(),
                metrics,
            })
            .collect(),
    })
}

/// Single-channel runs (the other channels zeroed after normalization) and the
/// all-channel run. Rows are `curvature`, `thickness`, `sulc`, `all`.
pub fn channel_contribution(
    cohort: &RasterCohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    plan: &FoldPlan,
) -> Result<ExperimentTable> {
    let c = cohort.pairs.first().map_or(0, |p| p[0].shape().0);
    if c != FEATURE_CHANNELS.len() {
        return Err(Error::InvalidArgument(format!(
            "channel experiments need the {} standard channels, cohort has {c}",
            FEATURE_CHANNELS.len()
        )));
    }
    let mut rows = Vec::new();
    for name in ["curvature", "thickness", "sulc"] {
        let keep: Vec<bool> = FEATURE_CHANNELS.iter().map(|&ch| ch == name).collect();
        let metrics = run_protocol(
            cohort,
            model_cfg,
            cfg,
            plan,
            Some(&keep),
            &[Condition::Full],
        )?
        .remove(0);
        rows.push(ExperimentRow {
            label: name.into(),
            description: format!("{name} only"),
            metrics,
        });
    }
    rows.push(ExperimentRow {
        label: "all".into(),
        description: "all channels".into(),
        metrics: cross_validate(cohort, model_cfg, cfg, plan)?,
    });
    Ok(ExperimentTable { rows })
}

/// A model trained on a whole cohort with the statistics used to normalize it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub stats: ChannelStats,
    pub history: TrainHistory,
}

/// Both stages on every scan of `cohort`, seeded like a single fold.
pub fn train_model(
    cohort: &RasterCohort,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let stats = ChannelStats::fit(
        cohort
            .singles
            .iter()
            .chain(cohort.pairs.iter().flatten())
            .flat_map(|s| s.images.iter()),
    )?;
    let singles = cohort
        .singles
        .iter()
        .map(|s| normalized(s, &stats, None))
        .collect::<Result<Vec<_>>>()?;
    let pairs = cohort
        .pairs
        .iter()
        .map(|[a, b]| Ok([normalized(a, &stats, None)?, normalized(b, &stats, None)?]))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::new(model_cfg.clone(), derive_seed(cfg.seed, "init"))?;
    let mut history = TrainHistory::default();
    train_stage1(&mut model, &singles, &pairs, cfg, &mut history)?;
    if model_cfg.fusion != FusionStrategy::Voting {
        let head = model.head();
        train_stage2(&mut model, &pairs, head, cfg, &mut history)?;
    }
    Ok(TrainedModel {
        model,
        stats,
        history,
    })
}

/// Fingerprint of one scan: partitions, saved channel statistics, encoder and fusion.
pub fn fingerprint_scan(
    left: &TriMesh,
    right: &TriMesh,
    flatten: &FlattenSettings,
    stats: &ChannelStats,
    model: &Model,
    cache: &PartitionCache,
) -> Result<Vec<f64>> {
    let mut set = cache.build(left, right, flatten)?;
    stats.apply_set(&mut set)?;
    model.fingerprint(&set)
}
