//! Ranking metrics and the frozen-embedding evaluation protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabelVocabulary, RecordingMeta};
use crate::windowing::{enumerate_window_specs, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub score: f64,
    pub positive: bool,
}

impl ScoredExample {
    pub fn new(score: f64, positive: bool) -> Self {
        Self { score, positive }
    }
}

/// Mann–Whitney ROC-AUC with average ranks for ties.
pub fn roc_auc(examples: &[ScoredExample]) -> Result<f64> {
    let pos = examples.iter().filter(|e| e.positive).count();
    let neg = examples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC-AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    if let Some(e) = examples.iter().find(|e| !e.score.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {}", e.score)));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| examples[a].score.total_cmp(&examples[b].score));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && examples[order[j + 1]].score == examples[order[i]].score {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| examples[k].positive).count();
        rank_sum_pos += avg * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Mean over positives of the precision at that positive's rank. Scores are
/// sorted descending; ties keep input order.
pub fn average_precision(examples: &[ScoredExample]) -> Result<f64> {
    let pos = examples.iter().filter(|e| e.positive).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| examples[b].score.total_cmp(&examples[a].score));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if examples[k].positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Class-mean AP over the classes that have at least one positive.
pub fn cmap<K: Ord>(per_class: &BTreeMap<K, Vec<ScoredExample>>) -> Result<f64> {
    let aps: Vec<f64> = per_class
        .values()
        .filter(|ex| ex.iter().any(|e| e.positive))
        .map(|ex| average_precision(ex))
        .collect::<Result<_>>()?;
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Fraction of rows whose arg-max (lowest index on ties) is a true class.
pub fn top1(rows: &[(Vec<f64>, Vec<usize>)]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|(logits, truth)| !logits.is_empty() && truth.contains(&argmax(logits)))
        .count();
    hits as f64 / rows.len() as f64
}

fn macro_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classify,
    Retrieval,
    Transfer,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::Classify, TaskType::Retrieval, TaskType::Transfer];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::Classify => "classify",
            TaskType::Retrieval => "retrieval",
            TaskType::Transfer => "transfer",
        }
    }
}

impl std::str::FromStr for TaskType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Self::Classify),
            "retrieval" => Ok(Self::Retrieval),
            "transfer" => Ok(Self::Transfer),
            other => Err(Error::Usage(format!("unknown task {other:?} (classify|retrieval|transfer)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_type: TaskType,
    pub dataset: String,
    pub value: f64,
}

impl TaskScore {
    fn new(task_type: TaskType, dataset: &str, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Numeric(format!("{} score {value} outside [0, 1]", task_type.name())));
        }
        Ok(Self {
            task_type,
            dataset: dataset.to_string(),
            value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub window_s: f64,
    pub stride_s: f64,
    /// A window is positive for a class when it overlaps an annotation by more than this.
    pub min_overlap_s: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            window_s: 5.0,
            stride_s: 2.5,
            min_overlap_s: 0.0,
        }
    }
}

/// Pretrained-classifier ROC-AUC over strided windows of annotated recordings.
///
/// `recordings` pairs each record with its duration in seconds; `score`
/// returns one score per vocabulary class for a window.
pub fn eval_pretrained<F>(
    dataset: &str,
    recordings: &[(RecordingMeta, f64)],
    vocab: &LabelVocabulary,
    cfg: &ClassifyConfig,
    mut score: F,
) -> Result<TaskScore>
where
    F: FnMut(&RecordingMeta, &WindowSpec) -> Result<Vec<f64>>,
{
    let mut classes = BTreeSet::new();
    for (rec, _) in recordings {
        for span in rec.annotations.iter().flatten() {
            classes.insert(vocab.require_id(&span.label)?);
        }
    }
    let mut per_class: BTreeMap<usize, Vec<ScoredExample>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (rec, duration) in recordings {
        for w in enumerate_window_specs(&rec.recording_id, *duration, cfg.window_s, cfg.stride_s) {
            let scores = score(rec, &w)?;
            if scores.len() != vocab.len() {
                return Err(Error::Shape(format!("{} class scores, vocabulary has {}", scores.len(), vocab.len())));
            }
            for (&c, ex) in per_class.iter_mut() {
                let positive = rec.annotations.iter().flatten().any(|s| {
                    s.label == vocab.classes()[c]
                        && s.end_s.min(w.end_s()) - s.start_s.max(w.start_s) > cfg.min_overlap_s
                });
                ex.push(ScoredExample::new(scores[c], positive));
            }
        }
    }
    let aucs: Vec<f64> = per_class
        .values()
        .filter(|ex| ex.iter().any(|e| e.positive) && ex.iter().any(|e| !e.positive))
        .map(|ex| roc_auc(ex))
        .collect::<Result<_>>()?;
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "dataset {dataset}: no class has both positive and negative windows"
        )));
    }
    TaskScore::new(TaskType::Classify, dataset, macro_mean(&aucs))
}

/// A frozen embedding with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub id: String,
    pub labels: Vec<String>,
    pub embedding: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// One-shot retrieval: per class, one random query ranks every other
/// example by cosine similarity; ROC-AUC with same-class examples positive,
/// macro-averaged over classes.
pub fn eval_retrieval<R: Rng + ?Sized>(dataset: &str, items: &[LabeledEmbedding], rng: &mut R) -> Result<TaskScore> {
    let classes: BTreeSet<&String> = items.iter().flat_map(|i| &i.labels).collect();
    let mut aucs = Vec::new();
    for class in classes {
        let members: Vec<usize> = (0..items.len()).filter(|&i| items[i].labels.contains(class)).collect();
        if members.len() < 2 {
            log::warn!("retrieval {dataset}: class {class} has {} example(s), skipped", members.len());
            continue;
        }
        let q = members[rng.random_range(0..members.len())];
        let ex: Vec<ScoredExample> = (0..items.len())
            .filter(|&i| i != q)
            .map(|i| {
                ScoredExample::new(
                    cosine(&items[q].embedding, &items[i].embedding),
                    items[i].labels.contains(class),
                )
            })
            .collect();
        if ex.iter().all(|e| e.positive) {
            continue;
        }
        aucs.push(roc_auc(&ex)?);
    }
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric(format!("retrieval {dataset}: no usable class")));
    }
    TaskScore::new(TaskType::Retrieval, dataset, macro_mean(&aucs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub shots: usize,
    pub steps: usize,
    pub l2: f64,
    /// Step sizes tried once at step 0; the one with the lowest loss is kept.
    pub step_candidates: [f64; 3],
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            steps: 10_000,
            l2: 1e-4,
            step_candidates: [0.05, 0.5, 5.0],
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// classes × (dim + 1), bias last.
    weights: Vec<f64>,
    classes: usize,
    dim: usize,
}

impl LinearProbe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z = self.standardize(x);
        probe_logits(&self.weights, &z, self.classes, self.dim)
    }

    /// Full-batch gradient descent for `cfg.steps` steps.
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let n = xs.len();
        if n == 0 || classes < 2 {
            return Err(Error::Validation("probe needs examples from at least two classes".into()));
        }
        let dim = xs[0].len();
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        let mut inv_std = vec![0.0; dim];
        for k in 0..dim {
            let var = xs.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n as f64;
            inv_std[k] = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        }
        let mut probe = Self {
            mean,
            inv_std,
            weights: vec![0.0; classes * (dim + 1)],
            classes,
            dim,
        };
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardize(x)).collect();
        let (mut loss, mut grad) = probe_loss_grad(&probe.weights, &zs, ys, classes, dim, cfg.l2);
        let mut lr = cfg.step_candidates[0];
        let mut best = f64::INFINITY;
        for &cand in &cfg.step_candidates {
            let trial: Vec<f64> = probe.weights.iter().zip(&grad).map(|(w, g)| w - cand * g).collect();
            let (l, _) = probe_loss_grad(&trial, &zs, ys, classes, dim, cfg.l2);
            if l < best {
                best = l;
                lr = cand;
            }
        }
        for _ in 0..cfg.steps {
            let trial: Vec<f64> = probe.weights.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
            let (l, g) = probe_loss_grad(&trial, &zs, ys, classes, dim, cfg.l2);
            if !l.is_finite() {
                return Err(Error::Numeric("linear probe diverged".into()));
            }
            if l > loss {
                // overshoot: shrink the step and retry from the same point
                lr *= 0.5;
                continue;
            }
            probe.weights = trial;
            loss = l;
            grad = g;
        }
        Ok(probe)
    }
}

fn probe_logits(w: &[f64], z: &[f64], classes: usize, dim: usize) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let row = &w[c * (dim + 1)..(c + 1) * (dim + 1)];
            row[..dim].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + row[dim]
        })
        .collect()
}

fn probe_loss_grad(w: &[f64], zs: &[Vec<f64>], ys: &[usize], classes: usize, dim: usize, l2: f64) -> (f64, Vec<f64>) {
    let n = zs.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (z, &y) in zs.iter().zip(ys) {
        let logits = probe_logits(w, z, classes, dim);
        let p = crate::train::softmax(&logits);
        loss -= p[y].max(1e-300).ln() / n;
        for c in 0..classes {
            let g = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
            let row = &mut grad[c * (dim + 1)..(c + 1) * (dim + 1)];
            for k in 0..dim {
                row[k] += g * z[k];
            }
            row[dim] += g;
        }
    }
    for c in 0..classes {
        for k in 0..dim {
            let i = c * (dim + 1) + k;
            loss += 0.5 * l2 * w[i] * w[i];
            grad[i] += l2 * w[i];
        }
    }
    (loss, grad)
}

/// Few-shot linear probe: `k` random examples per class train a
/// multinomial logistic regression; all remaining examples are scored with
/// one-vs-rest ROC-AUC, macro-averaged. Each item's class is its first label.
pub fn eval_linear_probe<R: Rng + ?Sized>(
    dataset: &str,
    items: &[LabeledEmbedding],
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<TaskScore> {
    let mut by_class: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        match item.labels.first() {
            Some(l) => by_class.entry(l).or_default().push(i),
            None => log::warn!("transfer {dataset}: item {} has no label, skipped", item.id),
        }
    }
    by_class.retain(|class, members| {
        let keep = members.len() > cfg.shots;
        if !keep {
            log::warn!(
                "transfer {dataset}: class {class} has {} <= {} examples, skipped",
                members.len(),
                cfg.shots
            );
        }
        keep
    });
    if by_class.len() < 2 {
        return Err(Error::UndefinedMetric(format!("transfer {dataset}: fewer than two usable classes")));
    }
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut held: Vec<(usize, usize)> = Vec::new();
    for (ci, members) in by_class.values_mut().enumerate() {
        members.shuffle(rng);
        for (j, &i) in members.iter().enumerate() {
            if j < cfg.shots {
                train_x.push(items[i].embedding.clone());
                train_y.push(ci);
            } else {
                held.push((i, ci));
            }
        }
    }
    let classes = by_class.len();
    let probe = LinearProbe::fit(&train_x, &train_y, classes, cfg)?;
    let probs: Vec<Vec<f64>> = held
        .iter()
        .map(|&(i, _)| crate::train::softmax(&probe.logits(&items[i].embedding)))
        .collect();
    let mut aucs = Vec::new();
    for c in 0..classes {
        let ex: Vec<ScoredExample> = held
            .iter()
            .zip(&probs)
            .map(|(&(_, y), p)| ScoredExample::new(p[c], y == c))
            .collect();
        if ex.iter().any(|e| e.positive) && ex.iter().any(|e| !e.positive) {
            aucs.push(roc_auc(&ex)?);
        }
    }
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric(format!("transfer {dataset}: nothing held out")));
    }
    TaskScore::new(TaskType::Transfer, dataset, macro_mean(&aucs))
}

/// `exp(mean(ln x))`, 0 if any value is 0.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub scores: Vec<TaskScore>,
    pub classify: Option<f64>,
    pub retrieval: Option<f64>,
    pub transfer: Option<f64>,
    pub overall: Option<f64>,
    pub missing_task_types: Vec<TaskType>,
}

impl QualityReport {
    /// Per-type geometric means; `overall` only when all three types are present.
    pub fn summarize(scores: &[TaskScore]) -> Self {
        let mut scores = scores.to_vec();
        scores.sort_by(|a, b| a.task_type.cmp(&b.task_type).then_with(|| a.dataset.cmp(&b.dataset)));
        let mean_of = |t: TaskType| {
            let v: Vec<f64> = scores.iter().filter(|s| s.task_type == t).map(|s| s.value).collect();
            (!v.is_empty()).then(|| geometric_mean(&v))
        };
        let classify = mean_of(TaskType::Classify);
        let retrieval = mean_of(TaskType::Retrieval);
        let transfer = mean_of(TaskType::Transfer);
        let missing: Vec<TaskType> = TaskType::ALL
            .into_iter()
            .zip([classify, retrieval, transfer])
            .filter(|(_, m)| m.is_none())
            .map(|(t, _)| t)
            .collect();
        let overall = match (classify, retrieval, transfer) {
            (Some(a), Some(b), Some(c)) => Some(geometric_mean(&[a, b, c])),
            _ => None,
        };
        Self {
            scores,
            classify,
            retrieval,
            transfer,
            overall,
            missing_task_types: missing,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,task_type,value\n");
        for s in &self.scores {
            let _ = writeln!(out, "{},{},{}", s.dataset, s.task_type.name(), s.value);
        }
        out
    }
}

/// Full report; errors if any task type has no score.
pub fn aggregate(scores: &[TaskScore]) -> Result<QualityReport> {
    let report = QualityReport::summarize(scores);
    if !report.missing_task_types.is_empty() {
        return Err(Error::MissingTaskTypes(
            report.missing_task_types.iter().map(|t| t.name().to_string()).collect(),
        ));
    }
    Ok(report)
}
