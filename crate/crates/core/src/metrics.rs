//! Retrieval and cluster-geometry metrics: mean average precision, CMC at
//! rank 1, per-identity compactness, and the Calinski-Harabasz score, plus
//! the CSV and container formats embeddings travel in.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::{self, TensorContainer};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Gallery,
}

/// A block of row embeddings with identity labels and (for export) the view
/// index each row came from.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Tensor,
    pub labels: Vec<usize>,
    pub views: Vec<usize>,
    pub role: Role,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<usize>, role: Role) -> Result<Self> {
        let views = vec![0; labels.len()];
        Self::with_views(vectors, labels, views, role)
    }

    pub fn with_views(
        vectors: Tensor,
        labels: Vec<usize>,
        views: Vec<usize>,
        role: Role,
    ) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] == 0 {
            return Err(CoreError::InvalidDimension {
                op: "embedding_set",
                msg: format!("need a non-empty [M, D] matrix, got {:?}", vectors.shape()),
            });
        }
        if vectors.shape()[0] != labels.len() || labels.len() != views.len() {
            return Err(CoreError::Batch(format!(
                "{} embedding rows, {} labels, {} views",
                vectors.shape()[0],
                labels.len(),
                views.len()
            )));
        }
        Ok(EmbeddingSet { vectors, labels, views, role })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    fn row64(&self, r: usize) -> Vec<f64> {
        self.vectors.row(r).iter().map(|&v| v as f64).collect()
    }

    fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (r, &id) in self.labels.iter().enumerate() {
            by_id.entry(id).or_default().push(r);
        }
        by_id
    }
}

/// One evaluation snapshot, serialized as a JSON line per epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub map: f64,
    pub cmc1: f64,
    pub cp: f64,
    pub ch: f64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let finite = self.map.is_finite()
            && self.cmc1.is_finite()
            && self.cp.is_finite()
            && self.ch.is_finite();
        let in_range = (0.0..=1.0).contains(&self.map)
            && (0.0..=1.0).contains(&self.cmc1)
            && self.cp >= 0.0
            && self.ch >= 0.0;
        if finite && in_range {
            Ok(())
        } else {
            Err(CoreError::Degenerate(format!("metrics out of range: {self:?}")))
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(set: &EmbeddingSet, rows: &[usize]) -> Vec<f64> {
    let d = set.dim();
    let mut c = vec![0f64; d];
    for &r in rows {
        for (acc, &v) in c.iter_mut().zip(set.vectors.row(r)) {
            *acc += v as f64;
        }
    }
    for v in c.iter_mut() {
        *v /= rows.len() as f64;
    }
    c
}

/// Per-identity compactness: the mean (non-squared) Euclidean distance of an
/// identity's embeddings to their centroid, then the mean over identities.
/// Returns the overall value plus the per-identity terms in id order.
pub fn compactness(set: &EmbeddingSet) -> Result<(f64, Vec<(usize, f64)>)> {
    if set.is_empty() {
        return Err(CoreError::Degenerate("compactness of an empty set".into()));
    }
    let mut per_id = Vec::new();
    for (id, rows) in set.groups() {
        let c = centroid(set, &rows);
        let mean_dist = rows
            .iter()
            .map(|&r| sq_dist(&set.row64(r), &c).sqrt())
            .sum::<f64>()
            / rows.len() as f64;
        per_id.push((id, mean_dist));
    }
    let cp = per_id.iter().map(|(_, v)| v).sum::<f64>() / per_id.len() as f64;
    Ok((cp, per_id))
}

/// Calinski-Harabasz score `[B/(k-1)] / [W/(M-k)]` over identity clusters,
/// with between-dispersion B and within-dispersion W in squared Euclidean
/// terms.
pub fn calinski_harabasz(set: &EmbeddingSet) -> Result<f64> {
    let groups = set.groups();
    let k = groups.len();
    let m = set.len();
    if k < 2 {
        return Err(CoreError::Degenerate(format!(
            "calinski-harabasz needs at least 2 identities, got {k}"
        )));
    }
    if m <= k {
        return Err(CoreError::Degenerate(format!(
            "calinski-harabasz needs more points than identities, got {m} points for {k}"
        )));
    }
    let all_rows: Vec<usize> = (0..m).collect();
    let global = centroid(set, &all_rows);
    let mut between = 0f64;
    let mut within = 0f64;
    for rows in groups.values() {
        let c = centroid(set, rows);
        between += rows.len() as f64 * sq_dist(&c, &global);
        for &r in rows {
            within += sq_dist(&set.row64(r), &c);
        }
    }
    if within == 0.0 {
        return Err(CoreError::Degenerate(
            "zero within-cluster dispersion, score unbounded".into(),
        ));
    }
    Ok((between / (k - 1) as f64) / (within / (m - k) as f64))
}

/// Ranks the gallery by ascending Euclidean distance for every query (ties
/// broken by gallery index) and scores mean average precision and CMC@1.
/// AP averages precision at each relevant rank over that query's relevant
/// gallery count.
pub fn retrieval_eval(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<(f64, f64)> {
    if query.dim() != gallery.dim() {
        return Err(CoreError::ShapeMismatch {
            op: "retrieval_eval",
            lhs: query.vectors.shape().to_vec(),
            rhs: gallery.vectors.shape().to_vec(),
        });
    }
    for (q, &id) in query.labels.iter().enumerate() {
        if !gallery.labels.contains(&id) {
            return Err(CoreError::Batch(format!(
                "query {q} has identity {id} with no gallery entry"
            )));
        }
    }
    let mut ap_sum = 0f64;
    let mut top1_hits = 0usize;
    for q in 0..query.len() {
        let qv = query.row64(q);
        let mut order: Vec<(f64, usize)> = (0..gallery.len())
            .map(|g| (sq_dist(&qv, &gallery.row64(g)), g))
            .collect();
        if let Some((d, g)) = order.iter().find(|(d, _)| !d.is_finite()) {
            return Err(CoreError::Degenerate(format!(
                "query {q} and gallery {g} are at non-finite distance {d}"
            )));
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0));

        let relevant = gallery.labels.iter().filter(|&&id| id == query.labels[q]).count();
        let mut hits = 0usize;
        let mut precision_sum = 0f64;
        for (rank, &(_, g)) in order.iter().enumerate() {
            if gallery.labels[g] == query.labels[q] {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant as f64;
        top1_hits += usize::from(gallery.labels[order[0].1] == query.labels[q]);
    }
    Ok((ap_sum / query.len() as f64, top1_hits as f64 / query.len() as f64))
}

// ── Interchange formats ─────────────────────────────────────────────────

const VECTORS: &str = "vectors";
const LABELS: &str = "labels";
const VIEWS: &str = "views";

pub fn to_container(set: &EmbeddingSet) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    c.insert(VECTORS, set.vectors.clone())?;
    c.insert(LABELS, container::indices_to_tensor(&set.labels)?)?;
    c.insert(VIEWS, container::indices_to_tensor(&set.views)?)?;
    Ok(c)
}

pub fn from_container(c: &TensorContainer, role: Role) -> Result<EmbeddingSet> {
    let vectors = c.require(VECTORS)?.clone();
    let labels = container::tensor_to_indices(c.require(LABELS)?, LABELS)?;
    let views = container::tensor_to_indices(c.require(VIEWS)?, VIEWS)?;
    EmbeddingSet::with_views(vectors, labels, views, role)
}

pub fn save_container(set: &EmbeddingSet, path: &Path) -> Result<()> {
    to_container(set)?.save(path)
}

pub fn load_container(path: &Path, role: Role) -> Result<EmbeddingSet> {
    from_container(&TensorContainer::load(path)?, role)
}

/// CSV with header `id,view,d0..d{D-1}`, one embedding per row.
pub fn to_csv(set: &EmbeddingSet) -> String {
    let d = set.dim();
    let mut out = String::from("id,view");
    for i in 0..d {
        out.push_str(&format!(",d{i}"));
    }
    out.push('\n');
    for r in 0..set.len() {
        out.push_str(&format!("{},{}", set.labels[r], set.views[r]));
        for &v in set.vectors.row(r) {
            // enough digits to restore the exact f32
            out.push_str(&format!(",{v:.9e}"));
        }
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str, role: Role) -> Result<EmbeddingSet> {
    let bad = |msg: String| CoreError::Container(msg);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "view" {
        return Err(bad(format!("csv header must be id,view,d0..; got {header:?}")));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("d{i}") {
            return Err(bad(format!("csv header column {} should be d{i}, got {c:?}", i + 2)));
        }
    }
    let d = cols.len() - 2;
    let (mut labels, mut views, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(bad(format!(
                "csv row {} has {} fields, expected {}",
                n + 1,
                fields.len(),
                d + 2
            )));
        }
        let parse_idx = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("csv row {}: bad {what} {s:?}", n + 1)))
        };
        labels.push(parse_idx(fields[0], "id")?);
        views.push(parse_idx(fields[1], "view")?);
        for f in &fields[2..] {
            data.push(
                f.trim()
                    .parse::<f32>()
                    .map_err(|_| bad(format!("csv row {}: bad value {f:?}", n + 1)))?,
            );
        }
    }
    let m = labels.len();
    EmbeddingSet::with_views(Tensor::from_vec(vec![m, d], data)?, labels, views, role)
}
