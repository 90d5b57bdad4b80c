//! Experiment configuration, the seeded runner and the ablation presets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedspace::CategorySpace;
use crate::error::{Error, Result};
use crate::eval::{evaluate_detector, write_pl_quality_csv, BranchMode, EvalOptions, EvalReport};
use crate::heads::{save_checkpoint, DetectorParams};
use crate::selftrain::{
    export_pls, train, InjectionScope, Phase, PlInjection, PlTable, RpnScoreFusion, TrainData,
    TrainHistory, TrainerConfig, UpdateStrategy, DEFAULT_UPDATE_FRACTIONS,
};
use crate::synthworld::{gen_category_space, RpnCoverage, SceneSplit, WorldConfig};

/// The shipped reference configuration.
pub const REFERENCE_CONFIG: &str = include_str!("../presets/reference.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: u64,
    pub pl_eval: u64,
    pub test: u64,
    /// Overrides `world.novel_weight` for the training split only, so novel
    /// objects can be rare during training yet common at evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_novel_weight: Option<f64>,
}

impl Splits {
    /// Disjoint consecutive scene-id ranges: train, then PL-eval, then test.
    pub fn ranges(&self) -> [std::ops::Range<u64>; 3] {
        let a = self.train;
        let b = a + self.pl_eval;
        let c = b + self.test;
        [0..a, a..b, b..c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalOptions,
    pub splits: Splits,
    pub output_dir: PathBuf,
    pub repeat_seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_CONFIG).expect("shipped reference config is valid")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train_world().validate().map_err(|_| {
            Error::config("splits.train_novel_weight", "must be > 0")
        })?;
        self.trainer.validate()?;
        self.eval.validate()?;
        if self.repeat_seeds.is_empty() {
            return Err(Error::config("repeat_seeds", "must not be empty"));
        }
        if self.splits.train == 0 {
            return Err(Error::config("splits.train", "must be >= 1"));
        }
        Ok(())
    }

    /// The same experiment with world and trainer seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.world.seed = seed;
        c.trainer.seed = seed;
        c
    }

    /// SHA-256 over the canonical JSON of the world, trainer and split configs.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&(&self.world, &self.trainer, &self.splits)).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Generated world for one seed: category space and the three splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub space: CategorySpace,
    pub train: SceneSplit,
    pub pl_eval: SceneSplit,
    pub test: SceneSplit,
}

impl ExperimentConfig {
    /// World config used to generate the training split.
    pub fn train_world(&self) -> WorldConfig {
        let mut w = self.world.clone();
        if let Some(nw) = self.splits.train_novel_weight {
            w.novel_weight = nw;
        }
        w
    }
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let space = gen_category_space(&cfg.world)?;
        let [tr, pl, te] = cfg.splits.ranges();
        Ok(Self {
            train: SceneSplit::build(&space, &cfg.train_world(), tr),
            pl_eval: SceneSplit::build(&space, &cfg.world, pl),
            test: SceneSplit::build(&space, &cfg.world, te),
            space,
        })
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            pl_eval: &self.pl_eval,
        }
    }
}

/// Outcome of training and evaluating one seeded config.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: DetectorParams,
    pub history: TrainHistory,
    pub report: EvalReport,
}

pub fn report_for(
    cfg: &ExperimentConfig,
    params: &DetectorParams,
    prepared: &Prepared,
    history: Option<&TrainHistory>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = evaluate_detector(params, &prepared.test, &prepared.space, opts)?;
    report.config_fingerprint = cfg.fingerprint();
    if let Some(h) = history {
        report.pl_quality_series = h.pl_quality_series();
    }
    Ok(report)
}

/// Trains one seed of `cfg` (world and trainer reseeded) and evaluates it.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, injection: Option<&PlInjection>) -> Result<SeedRun> {
    let cfg = cfg.with_seed(seed);
    log::info!("training seed {seed}");
    let prepared = Prepared::new(&cfg)?;
    let (params, history) = train(&cfg.trainer, &prepared.space, prepared.data(), injection, &mut ())?;
    let report = report_for(&cfg, &params, &prepared, Some(&history), &cfg.eval)?;
    Ok(SeedRun {
        seed,
        params,
        history,
        report,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_seed_outputs(dir: &Path, run: &SeedRun) -> Result<()> {
    let s = run.seed;
    run.report.write_json(&dir.join(format!("report_seed{s}.json")))?;
    write_text(
        &dir.join(format!("history_seed{s}.json")),
        &(serde_json::to_string_pretty(&run.history)? + "\n"),
    )?;
    let mut csv = Vec::new();
    write_pl_quality_csv(&run.report.pl_quality_series, &mut csv).expect("write to memory");
    let csv_path = dir.join(format!("pl_quality_seed{s}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    save_checkpoint(&run.params, &dir.join(format!("checkpoint_seed{s}.json")))
}

/// Trains and evaluates every repeat seed of the config at `config_path`,
/// writing `report_seed{N}.json`, `history_seed{N}.json`,
/// `pl_quality_seed{N}.csv`, `checkpoint_seed{N}.json` and the train-split
/// `dataset_seed{N}.jsonl` into the config's output directory.
pub fn run_experiment(config_path: &Path) -> Result<Vec<SeedRun>> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_experiment_config(&cfg)
}

pub fn run_experiment_config(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    create_dir(&cfg.output_dir)?;
    let runs: Vec<SeedRun> = cfg
        .repeat_seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, None))
        .collect::<Result<_>>()?;
    for run in &runs {
        write_seed_outputs(&cfg.output_dir, run)?;
        let seeded = cfg.with_seed(run.seed);
        let space = gen_category_space(&seeded.world)?;
        let [tr, _, _] = seeded.splits.ranges();
        crate::synthworld::Dataset::generate(&space, &seeded.train_world(), tr)
            .export(&cfg.output_dir.join(format!("dataset_seed{}.jsonl", run.seed)))?;
    }
    Ok(runs)
}

/// Exports the PLs a checkpointed teacher emits for every training scene.
pub fn export_teacher_pls(
    cfg: &ExperimentConfig,
    params: &DetectorParams,
    seed: u64,
    phase: Phase,
) -> Result<PlTable> {
    let cfg = cfg.with_seed(seed);
    let prepared = Prepared::new(&cfg)?;
    export_pls(params, &prepared.train, &prepared.space, &cfg.trainer, phase)
}

/// Trains a fresh student on a fixed PL file for the whole run.
pub fn retrain_from_pls(cfg: &ExperimentConfig, pl_path: &Path, seed: u64) -> Result<SeedRun> {
    let seeded = cfg.with_seed(seed);
    let prepared = Prepared::new(&seeded)?;
    let known = prepared.train.scenes.iter().map(|s| s.scene_id).collect();
    let table = crate::selftrain::inject_external_pls(pl_path, &known, &prepared.space)?;
    let injection = PlInjection {
        table,
        scope: InjectionScope::WholeRun,
    };
    let (params, history) = train(
        &seeded.trainer,
        &prepared.space,
        prepared.data(),
        Some(&injection),
        &mut (),
    )?;
    let report = report_for(&seeded, &params, &prepared, Some(&history), &seeded.eval)?;
    Ok(SeedRun {
        seed,
        params,
        history,
        report,
    })
}

/// The ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    SafAblation,
    UpdateStrategies,
    NumUpdates,
    RpnVariants,
    RpnFusion,
}

impl PresetName {
    pub const ALL: [PresetName; 5] = [
        PresetName::SafAblation,
        PresetName::UpdateStrategies,
        PresetName::NumUpdates,
        PresetName::RpnVariants,
        PresetName::RpnFusion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::SafAblation => "saf_ablation",
            PresetName::UpdateStrategies => "update_strategies",
            PresetName::NumUpdates => "num_updates",
            PresetName::RpnVariants => "rpn_variants",
            PresetName::RpnFusion => "rpn_fusion",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a variant's number is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ap50Novel,
    Ap50Base,
    Ap50All,
    /// PL quality of the initial teacher.
    InitialPlQuality,
}

impl Metric {
    pub fn read(&self, r: &EvalReport) -> f64 {
        match self {
            Metric::Ap50Novel => r.ap50_novel.unwrap_or(0.0),
            Metric::Ap50Base => r.ap50_base.unwrap_or(0.0),
            Metric::Ap50All => r.ap50_all.unwrap_or(0.0),
            Metric::InitialPlQuality => r.pl_quality_series.first().map_or(0.0, |p| p.1),
        }
    }
}

/// An ordering claim checked against per-seed numbers. Margins are on the
/// `[0, 1]` AP scale (0.01 = one AP point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assertion {
    /// `mean(lhs) - mean(rhs) > margin` (or `>=` when not strict).
    MeanOrder {
        lhs: String,
        rhs: String,
        metric: Metric,
        margin: f64,
        strict: bool,
    },
    /// The seed-median PL-quality series never decreases.
    MedianSeriesNonDecreasing { variant: String },
    /// Seed-median final PL quality exceeds the initial one by `margin`.
    MedianSeriesGain { variant: String, margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub assertion: Assertion,
    pub description: String,
    pub lhs_value: f64,
    pub rhs_value: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub n_seeds: usize,
    pub mean_ap50_novel: f64,
    pub std_ap50_novel: f64,
    pub mean_ap50_base: f64,
    pub std_ap50_base: f64,
    pub mean_ap50_all: f64,
    pub std_ap50_all: f64,
    pub mean_initial_pl_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub per_seed: Vec<(u64, EvalReport)>,
    pub summary: VariantSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub preset: PresetName,
    pub seeds: Vec<u64>,
    /// Variants in preset order.
    pub variant_order: Vec<String>,
    pub variants: BTreeMap<String, VariantResult>,
    pub assertions: Vec<AssertionResult>,
}

impl TrendReport {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `variant,n_seeds,mean_ap50_novel,...` rows in preset order.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "variant,n_seeds,mean_ap50_novel,std_ap50_novel,mean_ap50_base,std_ap50_base,mean_ap50_all,std_ap50_all,mean_initial_pl_quality\n",
        );
        for name in &self.variant_order {
            let v = &self.variants[name].summary;
            s.push_str(&format!(
                "{name},{},{},{},{},{},{},{},{}\n",
                v.n_seeds,
                v.mean_ap50_novel,
                v.std_ap50_novel,
                v.mean_ap50_base,
                v.std_ap50_base,
                v.mean_ap50_all,
                v.std_ap50_all,
                v.mean_initial_pl_quality
            ));
        }
        s
    }

    /// Re-evaluates the assertions from the stored per-seed reports.
    pub fn recheck(&self) -> Vec<AssertionResult> {
        self.assertions
            .iter()
            .map(|a| check_assertion(&a.assertion, &self.variants))
            .collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(per_seed: &[(u64, EvalReport)]) -> VariantSummary {
    let col = |m: Metric| per_seed.iter().map(|(_, r)| m.read(r)).collect::<Vec<_>>();
    let (mn, sn) = mean_std(&col(Metric::Ap50Novel));
    let (mb, sb) = mean_std(&col(Metric::Ap50Base));
    let (ma, sa) = mean_std(&col(Metric::Ap50All));
    let (mq, _) = mean_std(&col(Metric::InitialPlQuality));
    VariantSummary {
        n_seeds: per_seed.len(),
        mean_ap50_novel: mn,
        std_ap50_novel: sn,
        mean_ap50_base: mb,
        std_ap50_base: sb,
        mean_ap50_all: ma,
        std_ap50_all: sa,
        mean_initial_pl_quality: mq,
    }
}

/// Element-wise median over seeds of the PL-quality series.
pub fn median_series(per_seed: &[(u64, EvalReport)]) -> Vec<f64> {
    let len = per_seed
        .iter()
        .map(|(_, r)| r.pl_quality_series.len())
        .min()
        .unwrap_or(0);
    (0..len)
        .map(|i| median(per_seed.iter().map(|(_, r)| r.pl_quality_series[i].1).collect()))
        .collect()
}

fn describe(a: &Assertion) -> String {
    match a {
        Assertion::MeanOrder {
            lhs,
            rhs,
            metric,
            margin,
            strict,
        } => {
            let op = if *strict { ">" } else { ">=" };
            format!(
                "mean {metric:?}: {lhs} {op} {rhs} + {:.1} pt",
                margin * 100.0
            )
        }
        Assertion::MedianSeriesNonDecreasing { variant } => {
            format!("{variant}: median PL-quality series non-decreasing")
        }
        Assertion::MedianSeriesGain { variant, margin } => {
            format!(
                "{variant}: median final PL quality > initial + {:.1} pt",
                margin * 100.0
            )
        }
    }
}

pub fn check_assertion(a: &Assertion, variants: &BTreeMap<String, VariantResult>) -> AssertionResult {
    let description = describe(a);
    let missing = |name: &str| AssertionResult {
        assertion: a.clone(),
        description: format!("{description} (variant `{name}` missing)"),
        lhs_value: f64::NAN,
        rhs_value: f64::NAN,
        passed: false,
    };
    match a {
        Assertion::MeanOrder {
            lhs,
            rhs,
            metric,
            margin,
            strict,
        } => {
            let (Some(l), Some(r)) = (variants.get(lhs), variants.get(rhs)) else {
                return missing(if variants.contains_key(lhs) { rhs } else { lhs });
            };
            let mean = |v: &VariantResult| {
                mean_std(&v.per_seed.iter().map(|(_, r)| metric.read(r)).collect::<Vec<_>>()).0
            };
            let (lv, rv) = (mean(l), mean(r));
            let passed = if *strict {
                lv - rv > *margin
            } else {
                lv - rv >= *margin
            };
            AssertionResult {
                assertion: a.clone(),
                description,
                lhs_value: lv,
                rhs_value: rv,
                passed,
            }
        }
        Assertion::MedianSeriesNonDecreasing { variant } => {
            let Some(v) = variants.get(variant) else {
                return missing(variant);
            };
            let s = median_series(&v.per_seed);
            let worst_step = s
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min);
            AssertionResult {
                assertion: a.clone(),
                description,
                lhs_value: worst_step,
                rhs_value: 0.0,
                passed: s.len() >= 2 && worst_step >= 0.0,
            }
        }
        Assertion::MedianSeriesGain { variant, margin } => {
            let Some(v) = variants.get(variant) else {
                return missing(variant);
            };
            let s = median_series(&v.per_seed);
            let (first, last) = (
                s.first().copied().unwrap_or(0.0),
                s.last().copied().unwrap_or(0.0),
            );
            AssertionResult {
                assertion: a.clone(),
                description,
                lhs_value: last,
                rhs_value: first,
                passed: s.len() >= 2 && last - first >= *margin,
            }
        }
    }
}

/// One training configuration of a preset and the variants read from it.
pub struct RunSpec {
    pub name: &'static str,
    pub tweak: Box<dyn Fn(&mut ExperimentConfig) + Send + Sync>,
    /// `(variant name, branch readout)`; several variants can share a run.
    pub readouts: Vec<(String, BranchMode)>,
    /// Evaluate the untrained detector and initial PL quality only.
    pub initial_only: bool,
}

pub struct Preset {
    pub name: PresetName,
    pub runs: Vec<RunSpec>,
    pub assertions: Vec<Assertion>,
}

fn order(lhs: &str, rhs: &str, margin: f64, strict: bool) -> Assertion {
    Assertion::MeanOrder {
        lhs: lhs.into(),
        rhs: rhs.into(),
        metric: Metric::Ap50Novel,
        margin,
        strict,
    }
}

fn run(
    name: &'static str,
    readouts: &[(&str, BranchMode)],
    tweak: impl Fn(&mut ExperimentConfig) + Send + Sync + 'static,
) -> RunSpec {
    RunSpec {
        name,
        tweak: Box::new(tweak),
        readouts: readouts.iter().map(|(n, m)| (n.to_string(), *m)).collect(),
        initial_only: false,
    }
}

/// Minimum gap where the reported effect is large.
pub const TREND_MARGIN: f64 = 0.01;

impl Preset {
    pub fn get(name: PresetName) -> Preset {
        use BranchMode::*;
        match name {
            PresetName::SafAblation => Preset {
                name,
                runs: vec![
                    run(
                        "self_training",
                        &[
                            ("baseline", OpenOnly),
                            ("open_only", OpenOnly),
                            ("closed_only", ClosedOnly),
                            ("fused", Fused),
                        ],
                        |_| {},
                    ),
                    run("no_pls", &[("no_pls", OpenOnly)], |c| c.trainer.use_pls = false),
                    run(
                        "pseudo_boxes_in_regression",
                        &[("pseudo_boxes_in_regression", OpenOnly)],
                        |c| c.trainer.pseudo_box_regression = true,
                    ),
                ],
                assertions: vec![
                    order("fused", "open_only", 0.0, true),
                    order("open_only", "closed_only", 0.0, false),
                    order("fused", "no_pls", TREND_MARGIN, false),
                    order("baseline", "pseudo_boxes_in_regression", 0.0, true),
                ],
            },
            PresetName::UpdateStrategies => Preset {
                name,
                runs: vec![
                    run("periodic", &[("periodic", Fused)], |c| {
                        c.trainer.strategy =
                            UpdateStrategy::periodic_at(c.trainer.total_iters, &DEFAULT_UPDATE_FRACTIONS)
                    }),
                    run("none", &[("none", Fused)], |c| {
                        c.trainer.strategy = UpdateStrategy::NoUpdate
                    }),
                    run("ema", &[("ema", Fused)], |c| {
                        c.trainer.strategy = UpdateStrategy::Ema { momentum: EMA_MOMENTUM }
                    }),
                    run("every_iter", &[("every_iter", Fused)], |c| {
                        c.trainer.strategy = UpdateStrategy::EveryIter
                    }),
                ],
                assertions: vec![
                    order("periodic", "ema", TREND_MARGIN, false),
                    order("periodic", "every_iter", TREND_MARGIN, false),
                    Assertion::MedianSeriesNonDecreasing {
                        variant: "periodic".into(),
                    },
                    Assertion::MedianSeriesGain {
                        variant: "periodic".into(),
                        margin: TREND_MARGIN,
                    },
                ],
            },
            PresetName::NumUpdates => Preset {
                name,
                runs: [0usize, 1, 2, 3, 4, 8]
                    .into_iter()
                    .map(|n| {
                        let label: &'static str = match n {
                            0 => "updates_0",
                            1 => "updates_1",
                            2 => "updates_2",
                            3 => "updates_3",
                            4 => "updates_4",
                            _ => "updates_8",
                        };
                        run(label, &[(label, Fused)], move |c| {
                            c.trainer.strategy = num_updates_schedule(c.trainer.total_iters, n)
                        })
                    })
                    .collect(),
                assertions: vec![],
            },
            PresetName::RpnVariants => Preset {
                name,
                runs: vec![
                    run("rpn_all", &[("rpn_all", Fused)], |c| {
                        c.world.rpn_coverage = RpnCoverage::All
                    }),
                    run("rpn_base_only", &[("rpn_base_only", Fused)], |c| {
                        c.world.rpn_coverage = RpnCoverage::BaseOnly
                    }),
                ],
                assertions: vec![],
            },
            PresetName::RpnFusion => {
                let mut runs = vec![
                    run("initial_phase", &[("initial_phase", Fused)], |c| {
                        c.trainer.rpn_score_fusion = RpnScoreFusion::InitialPhase
                    }),
                    run("never", &[("never", Fused)], |c| {
                        c.trainer.rpn_score_fusion = RpnScoreFusion::Never
                    }),
                ];
                runs.iter_mut().for_each(|r| r.initial_only = true);
                Preset {
                    name,
                    runs,
                    assertions: vec![Assertion::MeanOrder {
                        lhs: "initial_phase".into(),
                        rhs: "never".into(),
                        metric: Metric::InitialPlQuality,
                        margin: TREND_MARGIN,
                        strict: false,
                    }],
                }
            }
        }
    }

    pub fn variant_names(&self) -> Vec<String> {
        self.runs
            .iter()
            .flat_map(|r| r.readouts.iter().map(|(n, _)| n.clone()))
            .collect()
    }
}

/// EMA momentum used by the update-strategy preset.
pub const EMA_MOMENTUM: f64 = 0.999;

/// Update schedule for `n` teacher updates: 1 at the midpoint, 2 at 40/80%,
/// 3 at 40/60/80%, otherwise evenly spaced.
pub fn num_updates_schedule(total_iters: usize, n: usize) -> UpdateStrategy {
    match n {
        0 => UpdateStrategy::NoUpdate,
        1 => UpdateStrategy::periodic_at(total_iters, &[0.5]),
        2 => UpdateStrategy::periodic_at(total_iters, &[0.4, 0.8]),
        3 => UpdateStrategy::periodic_at(total_iters, &DEFAULT_UPDATE_FRACTIONS),
        n => UpdateStrategy::periodic_evenly(total_iters, n),
    }
}

fn run_variant(base: &ExperimentConfig, spec: &RunSpec, seed: u64) -> Result<Vec<(String, EvalReport)>> {
    let mut cfg = base.clone();
    (spec.tweak)(&mut cfg);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    log::info!("run `{}` seed {seed}", spec.name);
    let prepared = Prepared::new(&cfg)?;
    let (params, history) = if spec.initial_only {
        let teacher = DetectorParams::init(prepared.space.dim());
        let q = crate::eval::evaluate_pl_quality(
            &teacher,
            &prepared.pl_eval,
            &prepared.space,
            &cfg.trainer,
            Phase::PreFirstUpdate,
        )?;
        let history = TrainHistory {
            pl_quality: vec![crate::selftrain::PlQualityPoint {
                update_index: 0,
                iter: None,
                ap50_novel: q,
            }],
            ..Default::default()
        };
        (teacher, history)
    } else {
        train(&cfg.trainer, &prepared.space, prepared.data(), None, &mut ())?
    };
    spec.readouts
        .iter()
        .map(|(name, mode)| {
            let opts = EvalOptions {
                branch_mode: *mode,
                ..cfg.eval.clone()
            };
            Ok((name.clone(), report_for(&cfg, &params, &prepared, Some(&history), &opts)?))
        })
        .collect()
}

/// Runs a preset's variant grid over `seeds` on top of `base`, then checks
/// its ordering assertions.
pub fn run_ablation_with(base: &ExperimentConfig, preset: PresetName, seeds: &[u64]) -> Result<TrendReport> {
    let preset = Preset::get(preset);
    let jobs: Vec<(usize, u64)> = (0..preset.runs.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let outputs: Vec<Vec<(String, EvalReport)>> = jobs
        .par_iter()
        .map(|&(r, s)| run_variant(base, &preset.runs[r], s))
        .collect::<Result<_>>()?;

    let mut per_variant: BTreeMap<String, Vec<(u64, EvalReport)>> = BTreeMap::new();
    for ((_, seed), out) in jobs.iter().zip(outputs) {
        for (name, report) in out {
            per_variant.entry(name).or_default().push((*seed, report));
        }
    }
    let variants: BTreeMap<String, VariantResult> = per_variant
        .into_iter()
        .map(|(name, per_seed)| {
            let summary = summarize(&per_seed);
            (name, VariantResult { per_seed, summary })
        })
        .collect();
    let assertions = preset
        .assertions
        .iter()
        .map(|a| check_assertion(a, &variants))
        .collect();
    Ok(TrendReport {
        preset: preset.name,
        seeds: seeds.to_vec(),
        variant_order: preset.variant_names(),
        variants,
        assertions,
    })
}

/// Writes `trend_report.json`, `summary.csv` and one median PL-quality CSV
/// per variant into `dir`.
pub fn write_trend_outputs(report: &TrendReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    report.write_json(&dir.join("trend_report.json"))?;
    write_text(&dir.join("summary.csv"), &report.summary_csv())?;
    for name in &report.variant_order {
        let series: Vec<(usize, f64)> = median_series(&report.variants[name].per_seed)
            .into_iter()
            .enumerate()
            .collect();
        let mut csv = Vec::new();
        write_pl_quality_csv(&series, &mut csv).expect("write to memory");
        let p = dir.join(format!("pl_quality_{name}.csv"));
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Runs a named preset on the reference configuration.
pub fn run_ablation(preset_name: &str, seeds: Option<&[u64]>) -> Result<TrendReport> {
    let preset: PresetName = preset_name.parse()?;
    let base = ExperimentConfig::reference();
    let seeds = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| base.repeat_seeds.clone());
    run_ablation_with(&base, preset, &seeds)
}
