use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use crate::corpus::TaskId;
use crate::error::{Error, Result};

/// Externally measured transferability, `sources x targets`.
///
/// CSV layout: the first row holds target ids after one corner cell; each
/// following row is a source id followed by its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub sources: Vec<TaskId>,
    pub targets: Vec<TaskId>,
    values: Vec<f64>,
    source_index: HashMap<TaskId, usize>,
    target_index: HashMap<TaskId, usize>,
}

impl TransferMatrix {
    pub fn new(sources: Vec<TaskId>, targets: Vec<TaskId>, values: Vec<f64>) -> Result<Self> {
        if values.len() != sources.len() * targets.len() {
            return Err(Error::Schema(format!(
                "transfer matrix {}x{} needs {} cells, got {}",
                sources.len(),
                targets.len(),
                sources.len() * targets.len(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("transfer matrix holds non-finite value {v}")));
        }
        let index = |ids: &[TaskId], kind| -> Result<HashMap<TaskId, usize>> {
            let mut m = HashMap::new();
            for (i, id) in ids.iter().enumerate() {
                if m.insert(id.clone(), i).is_some() {
                    return Err(Error::DuplicateId { kind, id: id.0.clone() });
                }
            }
            Ok(m)
        };
        Ok(TransferMatrix {
            source_index: index(&sources, "transfer source")?,
            target_index: index(&targets, "transfer target")?,
            sources,
            targets,
            values,
        })
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_csv(file)
    }

    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("transfer matrix header: {e}")))?
            .clone();
        let targets: Vec<TaskId> = header.iter().skip(1).map(TaskId::from).collect();
        let mut sources = Vec::new();
        let mut values = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Schema(format!("transfer matrix row {}: {e}", n + 2)))?;
            let mut cells = rec.iter();
            let source = cells
                .next()
                .ok_or_else(|| Error::Schema(format!("transfer matrix row {} is empty", n + 2)))?;
            sources.push(TaskId::from(source));
            for cell in cells {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Schema(format!("transfer matrix row {}: {cell:?} is not a number", n + 2))
                })?;
                values.push(v);
            }
        }
        TransferMatrix::new(sources, targets, values)
    }

    pub fn get(&self, source: &TaskId, target: &TaskId) -> Option<f64> {
        let s = *self.source_index.get(source)?;
        let t = *self.target_index.get(target)?;
        Some(self.values[s * self.targets.len() + t])
    }

    pub fn has_target(&self, target: &TaskId) -> bool {
        self.target_index.contains_key(target)
    }
}

/// 1-based ranks, ties sharing the mean of the positions they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 3 {
        return Err(Error::InsufficientOverlap { found: x.len() });
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    if rx.iter().all(|r| *r == rx[0]) {
        return Err(Error::ConstantRanking("selection"));
    }
    pearson(&rx, &ry).ok_or(Error::ConstantRanking("transfer"))
}

/// Rank agreement between selector scores and measured transfer into `target`,
/// over the tasks present in both.
pub fn rank_correlation(
    sel_scores: &BTreeMap<TaskId, f64>,
    tm: &TransferMatrix,
    target: &TaskId,
) -> Result<f64> {
    if !tm.has_target(target) {
        return Err(Error::UnknownTask(target.clone()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = sel_scores
        .iter()
        .filter_map(|(task, &score)| tm.get(task, target).map(|t| (score, t)))
        .unzip();
    if xs.len() < 3 {
        return Err(Error::InsufficientOverlap { found: xs.len() });
    }
    spearman(&xs, &ys)
}
