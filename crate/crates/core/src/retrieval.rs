//! The paired retrieval core: a frozen embedding database with exact cosine
//! top-k search, the retrieval quality metrics (precision, AP@n, mAP@n,
//! Acc@k) and the silhouette score used for representation analysis.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ImageRecord, Split, StructuredFinding, TerritoryLabel};
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::trainer::ClassifierModel;
use crate::volume::Volume;

/// Frozen database of L2-normalized embedding rows with their labels and
/// structured findings. No mutation is possible after build.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    /// Row-major n x dim matrix, every row unit-norm.
    features: Vec<f32>,
    dim: usize,
    labels: Vec<TerritoryLabel>,
    findings: Vec<StructuredFinding>,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub similarity: f64,
    pub label: TerritoryLabel,
    pub finding: StructuredFinding,
}

/// Exact top-k result, hits in non-increasing similarity order; ties break
/// by ascending database insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub k: usize,
}

impl RetrievalResult {
    /// Relevance flags under the default rule: hit label equals the query's
    /// ground-truth label.
    pub fn relevance_to(&self, query_label: TerritoryLabel) -> Vec<bool> {
        self.hits.iter().map(|h| h.label == query_label).collect()
    }
}

impl EmbeddingIndex {
    /// Builds a frozen index from raw rows, normalizing each feature.
    pub fn build(
        rows: Vec<(String, TerritoryLabel, StructuredFinding, FeatureVector)>,
    ) -> Result<EmbeddingIndex> {
        let dim = rows.first().map(|(_, _, _, f)| f.dim()).unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        let mut findings = Vec::with_capacity(rows.len());
        let mut features = Vec::with_capacity(rows.len() * dim);
        let mut seen = HashSet::new();
        for (id, label, finding, feature) in rows {
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            if feature.dim() != dim {
                return Err(Error::VolumeShape {
                    context: format!(
                        "feature for `{id}` has dim {}, index expects {dim}",
                        feature.dim()
                    ),
                });
            }
            let norm = feature.l2_norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::ZeroVector);
            }
            features.extend(feature.0.iter().map(|v| (v / norm) as f32));
            ids.push(id);
            labels.push(label);
            findings.push(finding);
        }
        Ok(EmbeddingIndex {
            ids,
            features,
            dim,
            labels,
            findings,
            frozen: true,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[TerritoryLabel] {
        &self.labels
    }

    pub fn findings(&self) -> &[StructuredFinding] {
        &self.findings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of database rows carrying `label`; the `total relevant` count
    /// that normalizes AP@n under the label-equality relevance rule.
    pub fn count_label(&self, label: TerritoryLabel) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }

    /// Exact (non-approximate) top-k cosine search.
    pub fn query_top_k(
        &self,
        query_id: &str,
        query: &FeatureVector,
        k: usize,
    ) -> Result<RetrievalResult> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let norm = query.l2_norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::ZeroVector);
        }
        if query.dim() != self.dim {
            return Err(Error::VolumeShape {
                context: format!("query dim {} vs index dim {}", query.dim(), self.dim),
            });
        }
        let unit: Vec<f64> = query.0.iter().map(|v| v / norm).collect();
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let dot: f64 = row
                    .iter()
                    .zip(unit.iter())
                    .map(|(a, b)| *a as f64 * b)
                    .sum();
                (i, dot.clamp(-1.0, 1.0))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("similarities are finite")
                .then(a.0.cmp(&b.0))
        });
        let hits = scored
            .into_iter()
            .take(k.min(self.len()))
            .map(|(i, similarity)| Hit {
                id: self.ids[i].clone(),
                similarity,
                label: self.labels[i],
                finding: self.findings[i],
            })
            .collect();
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            hits,
            k,
        })
    }

    /// Serializes the feature matrix as little-endian f32 plus a JSON
    /// manifest with ids, labels, findings and a blob checksum.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut blob = Vec::with_capacity(self.features.len() * 4);
        for v in &self.features {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let checksum = format!("sha256:{:x}", Sha256::digest(&blob));
        fs::write(path, blob)?;
        let manifest = IndexManifest {
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            findings: self.findings.clone(),
            feature_dim: self.dim,
            checksum,
        };
        fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingIndex> {
        let missing = |p: &Path| Error::MissingArtifact {
            path: p.to_path_buf(),
            producer: "build-index".into(),
        };
        let mpath = manifest_path(path);
        let manifest: IndexManifest =
            serde_json::from_slice(&fs::read(&mpath).map_err(|_| missing(&mpath))?)?;
        let blob = fs::read(path).map_err(|_| missing(path))?;
        let checksum = format!("sha256:{:x}", Sha256::digest(&blob));
        if checksum != manifest.checksum {
            return Err(Error::ChecksumMismatch {
                path: path.to_path_buf(),
            });
        }
        let mut features = Vec::with_capacity(blob.len() / 4);
        for chunk in blob.chunks_exact(4) {
            features.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        if features.len() != manifest.ids.len() * manifest.feature_dim {
            return Err(Error::VolumeShape {
                context: format!("index blob holds {} values, manifest implies {}",
                    features.len(), manifest.ids.len() * manifest.feature_dim),
            });
        }
        Ok(EmbeddingIndex {
            ids: manifest.ids,
            features,
            dim: manifest.feature_dim,
            labels: manifest.labels,
            findings: manifest.findings,
            frozen: true,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    ids: Vec<String>,
    labels: Vec<TerritoryLabel>,
    findings: Vec<StructuredFinding>,
    feature_dim: usize,
    checksum: String,
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn blob_checksum(blob: &[u8]) -> String {
    let digest = Sha256::digest(blob);
    let mut out = String::with_capacity(7 + digest.len() * 2);
    out.push_str("sha256:");
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Encodes train-split records with a fine-tuned model and freezes the
/// resulting database. Test-split records are rejected: the database must
/// contain only training data.
pub fn build_index(
    items: &[(ImageRecord, Volume)],
    model: &ClassifierModel,
) -> Result<EmbeddingIndex> {
    let mut rows = Vec::with_capacity(items.len());
    for (record, volume) in items {
        if record.split != Split::Train {
            return Err(Error::InvalidRecord {
                id: record.id.clone(),
                reason: "only train-split records may enter the database".into(),
            });
        }
        let feature = model.feature(volume)?;
        rows.push((record.id.clone(), record.label, record.finding, feature));
    }
    EmbeddingIndex::build(rows)
}

/// Cosine similarity clamped to [-1, 1]; zero vectors are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::VolumeShape {
            context: format!("vector lengths {} vs {}", a.len(), b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Fraction of relevant hits among the first k: (#relevant in top-k) / k.
pub fn precision_at_k(relevance: &[bool], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = relevance.iter().take(k).filter(|r| **r).count();
    hits as f64 / k as f64
}

/// AP@n = (1/N) * sum_{k=1..n} P@k * rel@k with N = min(n, total relevant
/// items in the database); zero when nothing relevant exists.
pub fn ap_at_n(relevance: &[bool], n: usize, total_relevant_in_db: usize) -> f64 {
    let n = n.min(relevance.len());
    let cap = n.min(total_relevant_in_db);
    if cap == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 1..=n {
        if relevance[k - 1] {
            sum += precision_at_k(relevance, k);
        }
    }
    sum / cap as f64
}

/// Mean AP@n over queries; each query carries its own relevance vector and
/// its total-relevant count.
pub fn map_at_n(queries: &[(Vec<bool>, usize)], n: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let sum: f64 = queries
        .iter()
        .map(|(rel, total)| ap_at_n(rel, n, *total))
        .sum();
    sum / queries.len() as f64
}

/// Fraction of queries with at least one relevant hit in the top k
/// (indicator semantics).
pub fn acc_at_k(queries: &[Vec<bool>], k: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .filter(|rel| rel.iter().take(k).any(|r| *r))
        .count();
    hits as f64 / queries.len() as f64
}

/// Mean silhouette (b - a) / max(a, b) over all points with Euclidean
/// distance; singleton-cluster points score 0. Requires at least two
/// distinct labels.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    assert_eq!(points.len(), labels.len(), "parallel arrays");
    let distinct: HashSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::SingleCluster(distinct.len()));
    }
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|l| **l == own).count();
        if own_size == 1 {
            continue; // singleton scores 0
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == own {
                a += dist(i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for &other in &distinct {
            if other == own {
                continue;
            }
            let size = labels.iter().filter(|l| **l == other).count();
            let mean = (0..n)
                .filter(|&j| labels[j] == other)
                .map(|j| dist(i, j))
                .sum::<f64>()
                / size as f64;
            b = b.min(mean);
        }
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}
