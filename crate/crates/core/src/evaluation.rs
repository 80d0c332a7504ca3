//! Confusion-matrix metrics, JSON reports and cross-dataset rank aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::schedule::ScheduleSpec;
use crate::{Error, Result};

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            let class = p.max(g) as usize;
            if class >= self.k {
                return Err(Error::Label {
                    index,
                    class,
                    num_classes: self.k,
                });
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest metrics for `class`; every 0/0 is reported as 0.
pub fn metrics(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let tp = cm.get(class, class);
    let fp: u64 = (0..cm.k).filter(|&g| g != class).map(|g| cm.get(g, class)).sum();
    let fn_: u64 = (0..cm.k).filter(|&p| p != class).map(|p| cm.get(class, p)).sum();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        iou: ratio(tp, tp + fp + fn_),
    }
}

/// Headline `(f1, iou)`: the foreground class for binary problems, the macro
/// mean over classes otherwise.
pub fn headline(cm: &ConfusionMatrix) -> (f64, f64) {
    if cm.k == 2 {
        let m = metrics(cm, 1);
        return (m.f1, m.iou);
    }
    let all: Vec<ClassMetrics> = (0..cm.k).map(|c| metrics(cm, c)).collect();
    let n = all.len() as f64;
    (
        all.iter().map(|m| m.f1).sum::<f64>() / n,
        all.iter().map(|m| m.iou).sum::<f64>() / n,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// Evaluation summary written as JSON. Field order is the key order on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub dataset: String,
    pub per_class: Vec<PerClass>,
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub param_count: usize,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub timestep: usize,
}

impl EvalReport {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        task: &str,
        dataset: &str,
        param_count: usize,
        schedule: &ScheduleSpec,
        seed: u64,
        timestep: usize,
    ) -> Self {
        let per_class = (0..cm.num_classes())
            .map(|c| {
                let m = metrics(cm, c);
                PerClass {
                    class: c,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                    iou: m.iou,
                }
            })
            .collect();
        let (mean_f1, mean_iou) = headline(cm);
        Self {
            task: task.to_string(),
            dataset: dataset.to_string(),
            per_class,
            mean_f1,
            mean_iou,
            param_count,
            schedule: schedule.clone(),
            seed,
            timestep,
        }
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// One row of the rank CSV (`model,dataset,f1,iou`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub model: String,
    pub dataset: String,
    pub f1: f64,
    pub iou: f64,
}

/// Complete model x dataset score grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    pub f1: Vec<Vec<f64>>,
    pub iou: Vec<Vec<f64>>,
}

impl RankTable {
    pub fn new(models: Vec<String>, datasets: Vec<String>, f1: Vec<Vec<f64>>, iou: Vec<Vec<f64>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if let Some(dup) = models.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(Error::Input(format!("duplicate model name '{dup}'")));
        }
        let shape_ok = |g: &Vec<Vec<f64>>| g.len() == models.len() && g.iter().all(|r| r.len() == datasets.len());
        if !shape_ok(&f1) || !shape_ok(&iou) {
            return Err(Error::Input("score grid does not match the model and dataset lists".into()));
        }
        if models.is_empty() || datasets.is_empty() {
            return Err(Error::Input("rank table needs at least one model and one dataset".into()));
        }
        Ok(Self {
            models,
            datasets,
            f1,
            iou,
        })
    }

    /// Models and datasets keep first-appearance order.
    pub fn from_records(records: &[RankRecord]) -> Result<Self> {
        let mut models: Vec<String> = Vec::new();
        let mut datasets: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for r in records {
            let m = match models.iter().position(|x| *x == r.model) {
                Some(i) => i,
                None => {
                    models.push(r.model.clone());
                    models.len() - 1
                }
            };
            let d = match datasets.iter().position(|x| *x == r.dataset) {
                Some(i) => i,
                None => {
                    datasets.push(r.dataset.clone());
                    datasets.len() - 1
                }
            };
            if cells.insert((m, d), (r.f1, r.iou)).is_some() {
                return Err(Error::Input(format!("duplicate row for model '{}' on '{}'", r.model, r.dataset)));
            }
        }
        let mut f1 = vec![vec![0.0; datasets.len()]; models.len()];
        let mut iou = f1.clone();
        for (mi, model) in models.iter().enumerate() {
            for (di, dataset) in datasets.iter().enumerate() {
                let (a, b) = cells
                    .get(&(mi, di))
                    .ok_or_else(|| Error::Input(format!("missing score for model '{model}' on '{dataset}'")))?;
                f1[mi][di] = *a;
                iou[mi][di] = *b;
            }
        }
        Self::new(models, datasets, f1, iou)
    }
}

pub fn read_rank_csv(path: &Path) -> Result<RankTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let records = reader
        .deserialize()
        .collect::<std::result::Result<Vec<RankRecord>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    RankTable::from_records(&records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub ordinal: usize,
    pub model: String,
    pub average_rank: f64,
    pub mean_iou: f64,
    /// Per-dataset competition ranks, in table dataset order.
    pub ranks: Vec<usize>,
}

/// Per dataset, competition-ranks models by F1 (descending; ties share the
/// better rank); orders models by mean rank, then by mean IoU descending.
pub fn rank_aggregate(table: &RankTable) -> Vec<RankEntry> {
    let (m, d) = (table.models.len(), table.datasets.len());
    let mut ranks = vec![vec![0usize; d]; m];
    for di in 0..d {
        for mi in 0..m {
            let better = (0..m).filter(|&o| table.f1[o][di] > table.f1[mi][di]).count();
            ranks[mi][di] = better + 1;
        }
    }
    let mut entries: Vec<RankEntry> = (0..m)
        .map(|mi| RankEntry {
            ordinal: 0,
            model: table.models[mi].clone(),
            average_rank: ranks[mi].iter().sum::<usize>() as f64 / d as f64,
            mean_iou: table.iou[mi].iter().sum::<f64>() / d as f64,
            ranks: ranks[mi].clone(),
        })
        .collect();
    entries.sort_by(|a, b| {
        a.average_rank
            .total_cmp(&b.average_rank)
            .then(b.mean_iou.total_cmp(&a.mean_iou))
    });
    for (i, e) in entries.iter_mut().enumerate() {
        e.ordinal = i + 1;
    }
    entries
}
