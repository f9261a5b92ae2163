use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tensor};

use super::stream::{FeatureStream, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub iters: usize,
    /// Stop once the relative inertia improvement falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 500, iters: 50, tol: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub iters_run: usize,
    pub seed: u64,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

/// `K x D` centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    pub meta: CodebookMeta,
    /// Optional relabeling of cluster ids onto latent unit ids.
    pub readout: Option<UnitReadout>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

impl Codebook {
    pub fn from_centroids(centroids: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} centroid values for dimension {dim}", centroids.len())));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroid".into()));
        }
        let k = centroids.len() / dim;
        let cb = Self {
            centroids,
            k,
            dim,
            meta: CodebookMeta { iters_run: 0, seed: 0, inertia: Vec::new() },
            readout: None,
        };
        if let Some((i, j)) = cb.duplicate_pair() {
            return Err(Error::Invalid(format!("centroids {i} and {j} are identical")));
        }
        Ok(cb)
    }

    fn duplicate_pair(&self) -> Option<(usize, usize)> {
        for i in 0..self.k {
            for j in i + 1..self.k {
                if self.centroid(i) == self.centroid(j) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the closest centroid; ties go to the lowest index.
    pub fn nearest(&self, frame: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k {
            let d = sq_dist(frame, self.centroid(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    /// Size of the id space this codebook emits.
    pub fn n_units(&self) -> usize {
        self.readout.as_ref().map_or(self.k, |r| r.n_units)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "kind": "codebook",
            "k": self.k,
            "dim": self.dim,
            "meta": self.meta,
            "readout": self.readout,
        });
        let t = Tensor::new(vec![self.k, self.dim], self.centroids.clone()).expect("centroid shape");
        Checkpoint { config, tensors: vec![("centroids".into(), t)] }
    }

    pub fn from_checkpoint(ck: &Checkpoint, origin: &Path) -> Result<Self> {
        if ck.config.get("kind").and_then(|v| v.as_str()) != Some("codebook") {
            return Err(Error::format(origin, "checkpoint is not a codebook"));
        }
        let t = ck.tensor("centroids").ok_or_else(|| Error::format(origin, "missing centroids tensor"))?;
        let (_, dim) = t.dims2();
        let mut cb = Self::from_centroids(t.data().to_vec(), dim)?;
        cb.meta = serde_json::from_value(ck.config["meta"].clone())?;
        cb.readout = serde_json::from_value(ck.config["readout"].clone())?;
        Ok(cb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Maps each cluster onto the latent unit it most often covers, so that
/// codebooks trained on different feature spaces share one id space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitReadout {
    pub n_units: usize,
    pub labels: Vec<usize>,
}

impl UnitReadout {
    /// Majority vote of `gold` labels over the frames assigned to each cluster.
    /// Clusters that receive no frames take the label of the nearest labelled
    /// centroid.
    pub fn fit(codebook: &Codebook, streams: &[&FeatureStream], gold: &[&[usize]], n_units: usize) -> Result<Self> {
        let mut votes = vec![vec![0usize; n_units]; codebook.k()];
        for (s, g) in streams.iter().zip(gold) {
            if s.n_frames() != g.len() {
                return Err(Error::Shape("gold labels do not cover every frame".into()));
            }
            for (f, &u) in s.iter_frames().zip(g.iter()) {
                if u >= n_units {
                    return Err(Error::Vocabulary { id: u, vocab_size: n_units });
                }
                votes[codebook.nearest(f).0][u] += 1;
            }
        }
        let majority: Vec<Option<usize>> = votes
            .iter()
            .map(|v| {
                let (best, &count) = v.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
                (count > 0).then_some(best)
            })
            .collect();
        if majority.iter().all(Option::is_none) {
            return Err(Error::Invalid("no frames to fit the unit readout".into()));
        }
        let labels = (0..codebook.k())
            .map(|c| {
                majority[c].unwrap_or_else(|| {
                    (0..codebook.k())
                        .filter(|&o| majority[o].is_some())
                        .min_by(|&a, &b| {
                            let da = sq_dist(codebook.centroid(c), codebook.centroid(a));
                            let db = sq_dist(codebook.centroid(c), codebook.centroid(b));
                            da.total_cmp(&db).then(a.cmp(&b))
                        })
                        .and_then(|o| majority[o])
                        .expect("some cluster is labelled")
                })
            })
            .collect();
        Ok(Self { n_units, labels })
    }
}

/// Nearest-centroid ids for every frame (relabelled when the codebook has a
/// readout).
pub fn quantize(stream: &FeatureStream, codebook: &Codebook) -> Result<TokenSequence> {
    if stream.dim() != codebook.dim() {
        return Err(Error::Shape(format!(
            "stream dimension {} does not match codebook dimension {}",
            stream.dim(),
            codebook.dim()
        )));
    }
    let ids = stream
        .iter_frames()
        .map(|f| {
            let c = codebook.nearest(f).0;
            codebook.readout.as_ref().map_or(c, |r| r.labels[c])
        })
        .collect();
    Ok(TokenSequence(ids))
}

/// Lloyd's k-means with k-means++ seeding over every frame of `features`.
pub fn train_codebook(features: &[FeatureStream], cfg: &KMeansConfig) -> Result<Codebook> {
    let Some(first) = features.first() else {
        return Err(Error::Invalid("no feature streams to train a codebook on".into()));
    };
    let dim = first.dim();
    if let Some(s) = features.iter().find(|s| s.dim() != dim) {
        return Err(Error::Shape(format!("feature dimension {} differs from {dim}", s.dim())));
    }
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let points: Vec<&[f32]> = features.iter().flat_map(|s| s.iter_frames()).collect();
    let n = points.len();
    if n < cfg.k {
        return Err(Error::Invalid(format!("{n} frames cannot support {} clusters", cfg.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // k-means++ seeding
    let mut centroids: Vec<f32> = Vec::with_capacity(cfg.k * dim);
    centroids.extend_from_slice(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[..dim])).collect();
    for c in 1..cfg.k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid(format!("only {c} distinct frames for {} clusters", cfg.k)));
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        while d2[pick] == 0.0 {
            pick -= 1;
        }
        centroids.extend_from_slice(points[pick]);
        let new = &centroids[c * dim..(c + 1) * dim];
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, new));
        }
    }

    let mut cb = Codebook {
        centroids,
        k: cfg.k,
        dim,
        meta: CodebookMeta { iters_run: 0, seed: cfg.seed, inertia: Vec::new() },
        readout: None,
    };
    let mut assign = vec![0usize; n];
    let mut dist = vec![0f64; n];
    for _ in 0..cfg.iters.max(1) {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = cb.nearest(p);
            assign[i] = c;
            dist[i] = d;
            inertia += d;
        }
        let prev = cb.meta.inertia.last().copied();
        cb.meta.inertia.push(inertia);
        cb.meta.iters_run += 1;
        if inertia == 0.0 || prev.is_some_and(|p| (p - inertia) <= cfg.tol * p) {
            break;
        }
        // update step, accumulated in f64 in point order
        let mut sums = vec![0f64; cfg.k * dim];
        let mut counts = vec![0usize; cfg.k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(p.iter()) {
                *s += v as f64;
            }
        }
        for c in 0..cfg.k {
            if counts[c] == 0 {
                // relocate an empty cluster onto the worst-served frame
                let far = (0..n).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).unwrap();
                cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(points[far]);
                dist[far] = 0.0;
                continue;
            }
            for j in 0..dim {
                cb.centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
    if let Some((i, j)) = cb.duplicate_pair() {
        return Err(Error::Invalid(format!("k-means produced identical centroids {i} and {j}")));
    }
    Ok(cb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avtoken::Modality;

    fn stream(points: &[[f32; 2]]) -> FeatureStream {
        FeatureStream::new(points.iter().flatten().copied().collect(), 2, Modality::Audio).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let s = stream(&[[0.0, 1.0], [2.0, 3.0], [4.0, -1.0], [1.0, 1.0]]);
        let cb = train_codebook(&[s], &KMeansConfig { k: 1, ..Default::default() }).unwrap();
        assert!((cb.centroid(0)[0] - 1.75).abs() < 1e-6);
        assert!((cb.centroid(0)[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn too_few_frames() {
        let s = stream(&[[0.0, 1.0]]);
        assert!(train_codebook(&[s], &KMeansConfig { k: 2, ..Default::default() }).is_err());
        assert!(train_codebook(&[], &KMeansConfig::default()).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb =
            Codebook::from_centroids(vec![9.0, 9.0, -9.0, -9.0, 1.0, 0.0, 5.0, 5.0, 7.0, 7.0, -1.0, 0.0], 2).unwrap();
        // equidistant from centroid 2 (1,0) and 5 (-1,0)
        let s = stream(&[[0.0, 0.0]]);
        assert_eq!(quantize(&s, &cb).unwrap().0, vec![2]);
    }

    #[test]
    fn dimension_mismatch() {
        let cb = Codebook::from_centroids(vec![0.0, 0.0, 0.0], 3).unwrap();
        assert!(quantize(&stream(&[[0.0, 0.0]]), &cb).is_err());
    }

    #[test]
    fn identical_centroids_rejected() {
        assert!(Codebook::from_centroids(vec![1.0, 1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cb = Codebook::from_centroids(vec![0.0, 1.0, 2.0, 3.0], 2).unwrap();
        cb.readout = Some(UnitReadout { n_units: 5, labels: vec![4, 1] });
        let back = Codebook::from_checkpoint(&cb.to_checkpoint(), Path::new("x")).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.n_units(), 5);
    }
}
