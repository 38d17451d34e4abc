//! Experiment orchestration.
//!
//! Builds the three synthetic benchmark models, runs paired uniform/adaptive
//! experiments over many independent instances, aggregates error curves with
//! standard deviations and budget-share categories, and replays recorded
//! response logs round by round. All randomness flows from a single master
//! seed through counter-based streams, so runs are reproducible and
//! independent of `--jobs`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adaptive::{hardest_by_estimate, AdaptiveOptions, AdaptiveRun, ScoreMode};
use crate::divergence::golden_section_min;
use crate::error::{Error, Result};
use crate::model::{mix_prob, AnswerSource, Model, SelectionEvent, SimulatedAnswers};
use crate::rng;
use crate::uniform::{
    category_shares, collect_uniform, kmeans_cluster, misclassification_error, normalize_profiles,
    CategoryShares, ClusterResult, ResponseCounts,
};

const STREAM_INSTANCE: u64 = 0x01;
const STREAM_MODEL: u64 = 0x02;
const STREAM_UNIFORM: u64 = 0x03;
const STREAM_ADAPTIVE: u64 = 0x04;
const STREAM_USERS: u64 = 0x05;
const STREAM_REDRAW: u64 = 0x06;

/// The synthetic benchmark models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuiltinModel {
    /// Heterogeneous items, two informative and two dummy questions:
    /// `p_1 = (0.01, 0.99, 0.5, 0.5)`, `p_2 = (0.99, 0.01, 0.5, 0.5)`,
    /// hardness i.i.d. uniform on the hardness interval.
    #[serde(rename = "model-1")]
    Model1,
    /// The two informative questions only.
    #[serde(rename = "model-2")]
    Model2,
    /// Homogeneous items (`h = 1`) with one informative question:
    /// `p_1 = (0.3, 0.2, 0.2, 0.2)`, `p_2 = (0.7, 0.2, 0.2, 0.2)`.
    #[serde(rename = "model-3")]
    Model3,
}

/// Where the experiment model comes from: a builtin name, a JSON document on
/// disk, or an inline document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Builtin(BuiltinModel),
    File { file: String },
    Inline(serde_json::Value),
}

pub const DEFAULT_ITEMS: usize = 1000;
pub const DEFAULT_HARDNESS_INTERVAL: [f64; 2] = [0.55, 1.0];

/// Builds one of the synthetic models with `n` items split into two equal
/// clusters; hardness is sampled i.i.d. from `hardness_interval` keyed by
/// `(seed, item)` (Model 3 pins `h = 1`).
pub fn build_model(
    which: BuiltinModel,
    n: usize,
    seed: u64,
    hardness_interval: [f64; 2],
) -> Result<Model<f64>> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "builtin models use two equal clusters; item count {n} must be even and positive"
        )));
    }
    let [lo, hi] = hardness_interval;
    if !(0.5..=1.0).contains(&lo) || !(0.5..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!(
            "hardness interval [{lo}, {hi}] must be a subinterval of [0.5, 1]"
        )));
    }
    let (l, p) = match which {
        BuiltinModel::Model1 => (4, vec![0.01, 0.99, 0.5, 0.5, 0.99, 0.01, 0.5, 0.5]),
        BuiltinModel::Model2 => (2, vec![0.01, 0.99, 0.99, 0.01]),
        BuiltinModel::Model3 => (4, vec![0.3, 0.2, 0.2, 0.2, 0.7, 0.2, 0.2, 0.2]),
    };
    let h = match which {
        BuiltinModel::Model3 => vec![1.0; n],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * rng::unit_f64(seed, &[i as u64]))
            .collect(),
    };
    let sigma = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    Model::new(2, l, p, h, sigma)
}

impl ModelSource {
    /// Materializes the model for one instance.
    pub fn build(
        &self,
        n: Option<usize>,
        hardness_interval: Option<[f64; 2]>,
        seed: u64,
    ) -> Result<Model<f64>> {
        match self {
            ModelSource::Builtin(which) => build_model(
                *which,
                n.unwrap_or(DEFAULT_ITEMS),
                seed,
                hardness_interval.unwrap_or(DEFAULT_HARDNESS_INTERVAL),
            ),
            ModelSource::File { file } => {
                let doc = std::fs::read_to_string(file)?;
                let model = Model::from_json(&doc)?;
                if let Some(n) = n {
                    if n != model.num_items() {
                        return Err(Error::Config(format!(
                            "config n = {n} does not match the model file's n = {}",
                            model.num_items()
                        )));
                    }
                }
                Ok(model)
            }
            ModelSource::Inline(value) => {
                let model = Model::from_json(&value.to_string())?;
                if let Some(n) = n {
                    if n != model.num_items() {
                        return Err(Error::Config(format!(
                            "config n = {n} does not match the inline model's n = {}",
                            model.num_items()
                        )));
                    }
                }
                Ok(model)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Uniform,
    Adaptive,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Uniform => "uniform",
            Algorithm::Adaptive => "adaptive",
        }
    }
}

fn default_w() -> usize {
    1
}

fn default_instances() -> usize {
    1
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Uniform, Algorithm::Adaptive]
}

fn default_score_mode() -> ScoreMode {
    ScoreMode::Quadratic
}

fn default_k() -> usize {
    2
}

/// Experiment configuration; a single JSON document with unknown keys
/// rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Item count for builtin models (must match the document for file and
    /// inline models). Default 1000.
    #[serde(default)]
    pub n: Option<usize>,
    /// Expected cluster count; checked against the built model when present.
    #[serde(default)]
    pub k: Option<usize>,
    /// Expected question count; checked against the built model when present.
    #[serde(default)]
    pub l: Option<usize>,
    /// Budget checkpoints, strictly increasing.
    pub checkpoints: Vec<u64>,
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_score_mode")]
    pub score_mode: ScoreMode,
    /// Sampling interval for item hardness in builtin models 1 and 2.
    #[serde(default)]
    pub hardness_interval: Option<[f64; 2]>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Config("at least one checkpoint is required".into()));
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        if self.instances == 0 {
            return Err(Error::Config("instances must be at least 1".into()));
        }
        if self.w == 0 {
            return Err(Error::Config("list size w must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm is required".into()));
        }
        let mut seen = Vec::new();
        for alg in &self.algorithms {
            if seen.contains(alg) {
                return Err(Error::Config(format!(
                    "algorithm {} listed twice",
                    alg.name()
                )));
            }
            seen.push(*alg);
        }
        Ok(())
    }

    fn check_shape(&self, model: &Model<f64>) -> Result<()> {
        if let Some(k) = self.k {
            if k != model.num_clusters() {
                return Err(Error::Config(format!(
                    "config K = {k} does not match the model's K = {}",
                    model.num_clusters()
                )));
            }
        }
        if let Some(l) = self.l {
            if l != model.num_questions() {
                return Err(Error::Config(format!(
                    "config L = {l} does not match the model's L = {}",
                    model.num_questions()
                )));
            }
        }
        Ok(())
    }
}

/// One measured point of one instance run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstancePoint {
    pub t: u64,
    pub error: f64,
    pub hard20_error: f64,
    pub easy20_error: f64,
    pub shares: CategoryShares<f64>,
}

/// The checkpoint curve of one (instance, algorithm) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceCurve {
    pub instance: usize,
    pub algorithm: Algorithm,
    pub points: Vec<InstancePoint>,
}

/// Cross-instance aggregate at one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub algorithm: Algorithm,
    pub t: u64,
    pub mean_error: f64,
    /// Sample standard deviation (denominator `instances - 1`; 0 for a single
    /// instance).
    pub std_error: f64,
    pub hard20_error: f64,
    pub easy20_error: f64,
    pub shares: CategoryShares<f64>,
}

/// Everything an experiment produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub curves: Vec<CurvePoint>,
    pub per_instance: Vec<InstanceCurve>,
}

/// Runs the configured experiment; instances are independent and are spread
/// over `jobs` worker threads with a deterministic merge.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    let jobs = jobs.max(1).min(config.instances);
    let slots: Vec<Mutex<Option<Result<Vec<InstanceCurve>>>>> =
        (0..config.instances).map(|_| Mutex::new(None)).collect();
    if jobs == 1 {
        for (idx, slot) in slots.iter().enumerate() {
            *slot.lock().unwrap() = Some(run_instance(config, idx));
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= config.instances {
                        break;
                    }
                    let result = run_instance(config, idx);
                    *slots[idx].lock().unwrap() = Some(result);
                });
            }
        });
    }
    let mut per_instance = Vec::with_capacity(config.instances * config.algorithms.len());
    for slot in slots {
        let result = slot.into_inner().unwrap().expect("every instance ran");
        per_instance.extend(result?);
    }
    let curves = aggregate(&config.algorithms, &config.checkpoints, &per_instance);
    Ok(ExperimentOutcome {
        curves,
        per_instance,
    })
}

fn run_instance(config: &ExperimentConfig, idx: usize) -> Result<Vec<InstanceCurve>> {
    let instance_seed = rng::mix(config.seed, &[STREAM_INSTANCE, idx as u64]);
    let model = config.model.build(
        config.n,
        config.hardness_interval,
        rng::derive(instance_seed, STREAM_MODEL),
    )?;
    config.check_shape(&model)?;
    let truth_h: Vec<f64> = (0..model.num_items()).map(|i| model.hardness(i)).collect();
    let hard = hardest_by_estimate(&truth_h, 0.2);
    let easy = easiest_flags(&truth_h, 0.2);

    let mut curves = Vec::new();
    for &algorithm in &config.algorithms {
        let points = match algorithm {
            Algorithm::Uniform => {
                uniform_instance_curve(config, &model, instance_seed, &hard, &easy)?
            }
            Algorithm::Adaptive => {
                adaptive_instance_curve(config, &model, instance_seed, &hard, &easy)?
            }
        };
        curves.push(InstanceCurve {
            instance: idx,
            algorithm,
            points,
        });
    }
    Ok(curves)
}

fn uniform_instance_curve(
    config: &ExperimentConfig,
    model: &Model<f64>,
    instance_seed: u64,
    hard: &[bool],
    easy: &[bool],
) -> Result<Vec<InstancePoint>> {
    let stream = rng::derive(instance_seed, STREAM_UNIFORM);
    let mut points = Vec::with_capacity(config.checkpoints.len());
    for &t in &config.checkpoints {
        let counts = collect_uniform(model, t, config.w, stream)?;
        let point = measure(
            &counts,
            model.num_clusters(),
            t,
            Some(model.sigma()),
            hard,
            easy,
        )?;
        points.push(point);
    }
    Ok(points)
}

fn adaptive_instance_curve(
    config: &ExperimentConfig,
    model: &Model<f64>,
    instance_seed: u64,
    hard: &[bool],
    easy: &[bool],
) -> Result<Vec<InstancePoint>> {
    let stream = rng::derive(instance_seed, STREAM_ADAPTIVE);
    let source = SimulatedAnswers::new(model, rng::derive(stream, 1));
    let options = AdaptiveOptions {
        score_mode: config.score_mode,
        ..AdaptiveOptions::default()
    };
    let horizon = *config.checkpoints.last().unwrap();
    let mut run = AdaptiveRun::new(
        source,
        model.num_clusters(),
        horizon,
        config.w,
        rng::derive(stream, 2),
        options,
    )?;
    let mut points = Vec::with_capacity(config.checkpoints.len());
    for &t in &config.checkpoints {
        run.advance_until(t)?;
        let point = measure(
            &run.state().counts,
            model.num_clusters(),
            t,
            Some(model.sigma()),
            hard,
            easy,
        )?;
        points.push(point);
    }
    Ok(points)
}

/// Scores the current counts at budget `t`: clusters with the uniform
/// pipeline (the same rule the adaptive loop uses internally) and reads off
/// the error rates and category shares.
fn measure(
    counts: &ResponseCounts<f64>,
    k: usize,
    t: u64,
    truth: Option<&[usize]>,
    hard: &[bool],
    easy: &[bool],
) -> Result<InstancePoint> {
    let profiles = normalize_profiles(counts);
    let clusters = kmeans_cluster(&profiles, k, t)?;
    let (error, hard20_error, easy20_error) = match truth {
        Some(truth) => {
            let record = misclassification_error(&clusters, truth)?;
            (
                record.rate,
                flagged_error_rate(&record.per_item, hard),
                flagged_error_rate(&record.per_item, easy),
            )
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(InstancePoint {
        t,
        error,
        hard20_error,
        easy20_error,
        shares: category_shares(counts, hard),
    })
}

fn flagged_error_rate(per_item: &[bool], flags: &[bool]) -> f64 {
    let total = flags.iter().filter(|&&f| f).count();
    if total == 0 {
        return 0.0;
    }
    let wrong = per_item
        .iter()
        .zip(flags)
        .filter(|&(&m, &f)| m && f)
        .count();
    wrong as f64 / total as f64
}

fn easiest_flags(h: &[f64], fraction: f64) -> Vec<bool> {
    let negated: Vec<f64> = h.iter().map(|&x| -x).collect();
    hardest_by_estimate(&negated, fraction)
}

fn aggregate(
    algorithms: &[Algorithm],
    checkpoints: &[u64],
    per_instance: &[InstanceCurve],
) -> Vec<CurvePoint> {
    let mut curves = Vec::new();
    for &algorithm in algorithms {
        for (ci, &t) in checkpoints.iter().enumerate() {
            let values: Vec<&InstancePoint> = per_instance
                .iter()
                .filter(|c| c.algorithm == algorithm)
                .map(|c| &c.points[ci])
                .collect();
            let count = values.len() as f64;
            let mean = |f: &dyn Fn(&InstancePoint) -> f64| {
                values.iter().map(|p| f(p)).sum::<f64>() / count
            };
            let mean_error = mean(&|p| p.error);
            let variance = if values.len() > 1 {
                values
                    .iter()
                    .map(|p| (p.error - mean_error).powi(2))
                    .sum::<f64>()
                    / (count - 1.0)
            } else {
                0.0
            };
            curves.push(CurvePoint {
                algorithm,
                t,
                mean_error,
                std_error: variance.sqrt(),
                hard20_error: mean(&|p| p.hard20_error),
                easy20_error: mean(&|p| p.easy20_error),
                shares: CategoryShares {
                    hard_informative: mean(&|p| p.shares.hard_informative),
                    hard_dummy: mean(&|p| p.shares.hard_dummy),
                    rest_informative: mean(&|p| p.shares.rest_informative),
                    rest_dummy: mean(&|p| p.shares.rest_dummy),
                },
            });
        }
    }
    curves
}

/// Writes the aggregated curves in the documented CSV schema.
pub fn write_curves_csv<W: Write>(curves: &[CurvePoint], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "algorithm",
        "checkpoint_t",
        "mean_error",
        "std_error",
        "hard20_error",
        "share_hard_informative",
        "share_hard_dummy",
        "share_rest_informative",
        "share_rest_dummy",
    ])?;
    for point in curves {
        wtr.write_record([
            point.algorithm.name().to_string(),
            point.t.to_string(),
            point.mean_error.to_string(),
            point.std_error.to_string(),
            point.hard20_error.to_string(),
            point.shares.hard_informative.to_string(),
            point.shares.hard_dummy.to_string(),
            point.shares.rest_informative.to_string(),
            point.shares.rest_dummy.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// A recorded response log: items, optional per-item labels, and each user's
/// `+1`/`-1` answers.
#[derive(Debug, Clone)]
pub struct ResponseLog {
    pub item_ids: Vec<String>,
    pub labels: Vec<Option<String>>,
    pub user_ids: Vec<String>,
    /// `answers[item][user]`.
    answers: Vec<Vec<Option<i8>>>,
    /// Users with a recorded answer, per item.
    answerers: Vec<Vec<usize>>,
    /// Derived cluster ids when every item is labeled.
    pub truth: Option<Vec<usize>>,
    pub summary: LogSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub items: usize,
    pub users: usize,
    pub answers: usize,
    /// Fraction of answers equal to the answering item's label, when labels
    /// are present and use the answer alphabet.
    pub label_agreement: Option<f64>,
}

impl ResponseLog {
    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn answer(&self, item: usize, user: usize) -> Option<i8> {
        self.answers[item][user]
    }

    /// Replicates the item set `m` times (the original items keep their ids;
    /// copies get a `#<round>` suffix). Per-item answer marginals are
    /// unchanged.
    pub fn replicate(&self, m: usize) -> ResponseLog {
        assert!(m >= 1);
        let mut item_ids = Vec::with_capacity(self.num_items() * m);
        let mut labels = Vec::with_capacity(self.num_items() * m);
        let mut answers = Vec::with_capacity(self.num_items() * m);
        let mut answerers = Vec::with_capacity(self.num_items() * m);
        for round in 0..m {
            for (i, id) in self.item_ids.iter().enumerate() {
                item_ids.push(if round == 0 {
                    id.clone()
                } else {
                    format!("{id}#{round}")
                });
                labels.push(self.labels[i].clone());
                answers.push(self.answers[i].clone());
                answerers.push(self.answerers[i].clone());
            }
        }
        let truth = self.truth.as_ref().map(|t| {
            let mut out = Vec::with_capacity(t.len() * m);
            for _ in 0..m {
                out.extend_from_slice(t);
            }
            out
        });
        let summary = LogSummary {
            items: item_ids.len(),
            users: self.summary.users,
            answers: self.summary.answers * m,
            label_agreement: self.summary.label_agreement,
        };
        ResponseLog {
            item_ids,
            labels,
            user_ids: self.user_ids.clone(),
            answers,
            answerers,
            truth,
            summary,
        }
    }
}

/// Parses a response log CSV with header `item_id,label,user_id,answer`.
///
/// Answers use one alphabet per file: `{+1, -1}` or `{0, 1}` (the latter is
/// mapped to `-1/+1`); mixing alphabets is rejected. The label column may be
/// empty; when every item carries a label, the distinct labels (in order of
/// first appearance) become the ground-truth clusters.
pub fn ingest_responses(path: &Path) -> Result<ResponseLog> {
    let file = std::fs::File::open(path)?;
    parse_responses(file)
}

/// See [`ingest_responses`]; reads from any source.
pub fn parse_responses<R: std::io::Read>(input: R) -> Result<ResponseLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    {
        let headers = reader.headers()?;
        let expected = ["item_id", "label", "user_id", "answer"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "header must be `item_id,label,user_id,answer`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
    }

    #[derive(PartialEq, Clone, Copy)]
    enum Alphabet {
        PlusMinus,
        Binary,
    }

    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_ids = Vec::new();
    let mut user_ids = Vec::new();
    let mut labels: Vec<Option<String>> = Vec::new();
    let mut raw: Vec<(usize, usize, i8)> = Vec::new();
    let mut alphabet: Option<Alphabet> = None;

    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let (item_raw, label_raw, user_raw, answer_raw) = (
            record[0].trim(),
            record[1].trim(),
            record[2].trim(),
            record[3].trim(),
        );
        if item_raw.is_empty() || user_raw.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty item_id or user_id".into(),
            });
        }
        let (token_alphabet, answer) = match answer_raw {
            "+1" => (Alphabet::PlusMinus, 1),
            "-1" => (Alphabet::PlusMinus, -1),
            "1" => (Alphabet::Binary, 1),
            "0" => (Alphabet::Binary, -1),
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unrecognized answer `{other}`"),
                })
            }
        };
        match alphabet {
            None => alphabet = Some(token_alphabet),
            Some(a) if a != token_alphabet => {
                return Err(Error::Parse {
                    line,
                    msg: "mixed answer alphabets ({+1,-1} vs {0,1})".into(),
                })
            }
            _ => {}
        }

        let item = *item_index.entry(item_raw.to_string()).or_insert_with(|| {
            item_ids.push(item_raw.to_string());
            labels.push(None);
            item_ids.len() - 1
        });
        let label = if label_raw.is_empty() {
            None
        } else {
            Some(label_raw.to_string())
        };
        match (&labels[item], &label) {
            (Some(existing), Some(new)) if existing != new => {
                return Err(Error::Parse {
                    line,
                    msg: format!("item `{item_raw}` labeled both `{existing}` and `{new}`"),
                })
            }
            (None, Some(_)) => labels[item] = label,
            _ => {}
        }
        let user = *user_index.entry(user_raw.to_string()).or_insert_with(|| {
            user_ids.push(user_raw.to_string());
            user_ids.len() - 1
        });
        raw.push((item, user, answer));
    }
    if raw.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "log contains no answers".into(),
        });
    }

    let items = item_ids.len();
    let users = user_ids.len();
    let mut answers = vec![vec![None; users]; items];
    for &(item, user, answer) in &raw {
        if answers[item][user].is_some() {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "duplicate answer for item `{}` from user `{}`",
                    item_ids[item], user_ids[user]
                ),
            });
        }
        answers[item][user] = Some(answer);
    }
    let answerers: Vec<Vec<usize>> = answers
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, a)| a.is_some())
                .map(|(u, _)| u)
                .collect()
        })
        .collect();

    let truth = if labels.iter().all(|l| l.is_some()) {
        let mut names: Vec<&str> = Vec::new();
        let mut ids = Vec::with_capacity(items);
        for label in &labels {
            let name = label.as_deref().unwrap();
            let id = match names.iter().position(|&n| n == name) {
                Some(id) => id,
                None => {
                    names.push(name);
                    names.len() - 1
                }
            };
            ids.push(id);
        }
        Some(ids)
    } else {
        None
    };

    let label_agreement = if truth.is_some() {
        let label_as_answer = |label: &str| -> Option<i8> {
            match (alphabet, label) {
                (Some(Alphabet::PlusMinus), "+1") => Some(1),
                (Some(Alphabet::PlusMinus), "-1") => Some(-1),
                (Some(Alphabet::Binary), "1") => Some(1),
                (Some(Alphabet::Binary), "0") => Some(-1),
                _ => None,
            }
        };
        let mapped: Option<Vec<i8>> = labels
            .iter()
            .map(|l| label_as_answer(l.as_deref().unwrap()))
            .collect();
        mapped.map(|expected| {
            let hits = raw.iter().filter(|&&(i, _, a)| a == expected[i]).count();
            hits as f64 / raw.len() as f64
        })
    } else {
        None
    };

    Ok(ResponseLog {
        summary: LogSummary {
            items,
            users,
            answers: raw.len(),
            label_agreement,
        },
        item_ids,
        labels,
        user_ids,
        answers,
        answerers,
        truth,
    })
}

/// Replay configuration; unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    /// Path of the response-log CSV.
    pub log: String,
    pub checkpoints: Vec<u64>,
    #[serde(default = "default_w")]
    pub w: usize,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_score_mode")]
    pub score_mode: ScoreMode,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Optional m-fold replication of the item set at load time.
    #[serde(default)]
    pub replicate: Option<usize>,
}

impl ReplayConfig {
    fn validate(&self, log: &ResponseLog) -> Result<()> {
        if self.checkpoints.is_empty() || self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "checkpoints must be nonempty and strictly increasing".into(),
            ));
        }
        if self.instances == 0 || self.w == 0 {
            return Err(Error::Config("instances and w must be at least 1".into()));
        }
        if self.w > log.num_items() {
            return Err(Error::Config(format!(
                "w = {} exceeds the {} items in the log",
                self.w,
                log.num_items()
            )));
        }
        if self.k < 2 {
            return Err(Error::Config("K must be at least 2".into()));
        }
        if let Some(truth) = &log.truth {
            let distinct = truth.iter().max().unwrap() + 1;
            if distinct != self.k {
                return Err(Error::Config(format!(
                    "log has {distinct} distinct labels but K = {} was requested",
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// Answer source that replays a log: round `t` draws a user uniformly at
/// random (with replacement, keyed by the instance seed and `t`) and reveals
/// that user's recorded answers for the selected items. An item the drawn
/// user never answered falls back to a fresh uniform redraw among the users
/// who did answer it.
pub struct LogReplayAnswers<'a> {
    log: &'a ResponseLog,
    users_seed: u64,
    redraw_seed: u64,
}

impl<'a> LogReplayAnswers<'a> {
    pub fn new(log: &'a ResponseLog, instance_seed: u64) -> Self {
        Self {
            log,
            users_seed: rng::derive(instance_seed, STREAM_USERS),
            redraw_seed: rng::derive(instance_seed, STREAM_REDRAW),
        }
    }

    /// The user drawn for round `t`; identical for every algorithm sharing an
    /// instance seed, which is what pairs the runs.
    pub fn user_for_round(&self, t: u64) -> usize {
        rng::below(self.users_seed, &[t], self.log.num_users() as u64) as usize
    }

    fn answer_for(&self, t: u64, user: usize, item: usize) -> i8 {
        if let Some(a) = self.log.answer(item, user) {
            return a;
        }
        let pool = &self.log.answerers[item];
        let pick = rng::below(self.redraw_seed, &[t, item as u64], pool.len() as u64) as usize;
        self.log
            .answer(item, pool[pick])
            .expect("answerer has an answer")
    }
}

impl AnswerSource for LogReplayAnswers<'_> {
    fn num_items(&self) -> usize {
        self.log.num_items()
    }

    fn num_questions(&self) -> usize {
        1
    }

    fn answers(&mut self, event: &SelectionEvent) -> Option<Vec<i8>> {
        let user = self.user_for_round(event.t);
        Some(
            event
                .items
                .iter()
                .map(|&i| self.answer_for(event.t, user, i))
                .collect(),
        )
    }

    fn truth(&self) -> Option<&[usize]> {
        self.log.truth.as_deref()
    }
}

/// Replays a response log under both selection strategies on a shared
/// user-draw sequence per instance.
pub fn replay_experiment(log: &ResponseLog, config: &ReplayConfig) -> Result<ExperimentOutcome> {
    config.validate(log)?;
    let mut per_instance = Vec::new();
    for idx in 0..config.instances {
        let instance_seed = rng::mix(config.seed, &[STREAM_INSTANCE, idx as u64]);
        for &algorithm in &config.algorithms {
            let points = match algorithm {
                Algorithm::Uniform => replay_uniform(log, config, instance_seed)?,
                Algorithm::Adaptive => replay_adaptive(log, config, instance_seed)?,
            };
            per_instance.push(InstanceCurve {
                instance: idx,
                algorithm,
                points,
            });
        }
    }
    let curves = aggregate(&config.algorithms, &config.checkpoints, &per_instance);
    Ok(ExperimentOutcome {
        curves,
        per_instance,
    })
}

fn replay_uniform(
    log: &ResponseLog,
    config: &ReplayConfig,
    instance_seed: u64,
) -> Result<Vec<InstancePoint>> {
    let n = log.num_items();
    let source = LogReplayAnswers::new(log, instance_seed);
    let mut counts: ResponseCounts<f64> = ResponseCounts::zero(n, 1);
    let mut points = Vec::new();
    let mut t = 0u64;
    for &stop in &config.checkpoints {
        while t < stop {
            t += 1;
            let start = ((t - 1) as usize * config.w) % n;
            let items: Vec<usize> = (0..config.w).map(|j| (start + j) % n).collect();
            let user = source.user_for_round(t);
            for &item in &items {
                counts.record(item, 0, source.answer_for(t, user, item));
            }
        }
        points.push(replay_measure(log, config, &counts, t)?);
    }
    Ok(points)
}

fn replay_adaptive(
    log: &ResponseLog,
    config: &ReplayConfig,
    instance_seed: u64,
) -> Result<Vec<InstancePoint>> {
    let source = LogReplayAnswers::new(log, instance_seed);
    let options = AdaptiveOptions {
        score_mode: config.score_mode,
        ..AdaptiveOptions::default()
    };
    let horizon = *config.checkpoints.last().unwrap();
    let mut run = AdaptiveRun::new(
        source,
        config.k,
        horizon,
        config.w,
        rng::derive(instance_seed, STREAM_ADAPTIVE),
        options,
    )?;
    let mut points = Vec::new();
    for &stop in &config.checkpoints {
        run.advance_until(stop)?;
        points.push(replay_measure(log, config, &run.state().counts, stop)?);
    }
    Ok(points)
}

/// Replay measurement: clusters the counts and scores against the log labels
/// when present. Ground-truth hardness is unknown for a log, so the
/// hardest-20% set is ranked by the fitted hardness estimates.
fn replay_measure(
    log: &ResponseLog,
    config: &ReplayConfig,
    counts: &ResponseCounts<f64>,
    t: u64,
) -> Result<InstancePoint> {
    let profiles = normalize_profiles(counts);
    let clusters = kmeans_cluster(&profiles, config.k, t)?;
    let h_hat = fit_hardness(counts, &clusters);
    let hard = hardest_by_estimate(&h_hat, 0.2);
    let easy = easiest_flags(&h_hat, 0.2);
    let (error, hard20_error, easy20_error) = match &log.truth {
        Some(truth) => {
            let record = misclassification_error(&clusters, truth)?;
            (
                record.rate,
                flagged_error_rate(&record.per_item, &hard),
                flagged_error_rate(&record.per_item, &easy),
            )
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(InstancePoint {
        t,
        error,
        hard20_error,
        easy20_error,
        shares: category_shares(counts, &hard),
    })
}

/// Unpenalized hardness fit against the cluster rate means, used for ranking
/// items when the true hardness is unknown.
pub fn fit_hardness(counts: &ResponseCounts<f64>, clusters: &ClusterResult<f64>) -> Vec<f64> {
    let l = counts.questions();
    let k = clusters.clusters.len();
    let mut p_hat = vec![0.5f64; k * l];
    for (kk, members) in clusters.clusters.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        for ql in 0..l {
            let mean: f64 =
                members.iter().map(|&i| counts.q_hat(i, ql)).sum::<f64>() / members.len() as f64;
            p_hat[kk * l + ql] = mean;
        }
    }
    (0..counts.items())
        .map(|i| {
            let total: u64 = counts.asks_row(i).iter().sum();
            if total == 0 {
                return 0.5;
            }
            let kk = clusters.assignments[i];
            let objective = |h: f64| -> f64 {
                (0..l)
                    .map(|ql| {
                        let asks = counts.asks(i, ql);
                        if asks == 0 {
                            return 0.0;
                        }
                        let eps = 1.0 / (2.0 * asks as f64);
                        let rate = counts.q_hat(i, ql).clamp(eps, 1.0 - eps);
                        asks as f64
                            * crate::divergence::kl_bernoulli(mix_prob(h, p_hat[kk * l + ql]), rate)
                    })
                    .sum()
            };
            golden_section_min(objective, 0.5, 1.0).0
        })
        .collect()
}
