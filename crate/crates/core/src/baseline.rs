//! PCA + K-means baseline explainer.
//!
//! Per predicted class, the per-location feature vectors are projected onto
//! their top `Q` principal directions and clustered into `C` centroids. At
//! prediction time every location is snapped to its nearest centroid and
//! mapped back to feature space before resuming the black-box.

use rand::Rng;
use rayon::prelude::*;

use crate::blackbox::BlackBox;
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::seeding;
use crate::synthparts::{LabeledDataset, Split};
use crate::tensor::{argmax, squared_distance, Tensor};

pub const MAGIC: &[u8; 8] = b"PACEPCA1";

const JACOBI_SWEEPS: usize = 100;
const KMEANS_ITERATIONS: usize = 100;

/// Eigen-decomposition of a symmetric `n × n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n × n");
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `(Q, D)`; rows beyond `rank` are zero.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
    pub rank: usize,
}

impl PcaModel {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.components.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn explained_variance_ratio(&self, total_variance: f64) -> Vec<f64> {
        self.explained_variance.iter().map(|v| v / total_variance).collect()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        (0..self.output_dim())
            .map(|q| {
                let w = self.components.row(q, d);
                x.iter().zip(&self.mean).zip(w).map(|((x, m), w)| (x - m) * w).sum()
            })
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let mut out = self.mean.clone();
        for (q, &zq) in z.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.components.row(q, d)) {
                *o += zq * w;
            }
        }
        out
    }

    /// Sum of squared residuals after projecting and reconstructing `rows`.
    pub fn reconstruction_error(&self, rows: &[&[f64]]) -> f64 {
        rows.iter().map(|r| squared_distance(r, &self.inverse(&self.project(r)))).sum()
    }
}

/// Top-`q` principal directions of the rows of `data` (`N × D`). Components
/// whose variance is numerically zero are kept as zero rows and lower `rank`.
pub fn fit_pca(data: &[&[f64]], q: usize) -> Result<PcaModel> {
    let n = data.len();
    if n <= q {
        return Err(Error::Shape(format!("PCA needs more than {q} samples, got {n}")));
    }
    let d = data[0].len();
    if q == 0 || q > d {
        return Err(Error::Shape(format!("cannot keep {q} of {d} components")));
    }
    if let Some(bad) = data.iter().find(|r| r.len() != d) {
        return Err(Error::Shape(format!("row of length {} among rows of length {d}", bad.len())));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let partial: Vec<Vec<f64>> = data
        .par_chunks(1024)
        .map(|chunk| {
            let mut cov = vec![0.0; d * d];
            for r in chunk {
                let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
                for i in 0..d {
                    for j in i..d {
                        cov[i * d + j] += c[i] * c[j];
                    }
                }
            }
            cov
        })
        .collect();
    let mut cov = vec![0.0; d * d];
    for p in &partial {
        for (c, v) in cov.iter_mut().zip(p) {
            *c += v;
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, d);
    let floor = 1e-12 * values[0].abs().max(f64::MIN_POSITIVE);
    let mut components = Tensor::zeros(&[q, d]);
    let mut explained = vec![0.0; q];
    let mut rank = 0;
    for k in 0..q {
        if values[k] <= floor {
            break;
        }
        let mut v = vectors[k].clone();
        let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.row_mut(k, d).copy_from_slice(&v);
        explained[k] = values[k];
        rank += 1;
    }
    Ok(PcaModel { mean, components, explained_variance: explained, rank })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `(C, Q)`.
    pub centroids: Tensor,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let q = centroids.shape()[1];
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.shape()[0] {
        let d = squared_distance(point, centroids.row(j, q));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeding, run to an assignment fixpoint or
/// a fixed iteration cap. Empty clusters are reseeded at the point farthest
/// from its centroid.
pub fn fit_kmeans(points: &[&[f64]], c: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if c == 0 || n < c {
        return Err(Error::Shape(format!("k-means needs at least {c} points, got {n}")));
    }
    let q = points[0].len();
    let mut rng = seeding::rng(seed);

    let mut centroids = Tensor::zeros(&[c, q]);
    centroids.row_mut(0, q).copy_from_slice(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.par_iter().map(|p| squared_distance(p, centroids.row(0, q))).collect();
    for j in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            d2.iter()
                .position(|&w| {
                    u -= w;
                    u < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j, q).copy_from_slice(points[pick]);
        d2.par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(d, p)| *d = d.min(squared_distance(p, centroids.row(j, q))));
    }

    let mut assignment: Vec<usize> = Vec::new();
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_ITERATIONS {
        let mut nearest_all: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let mut counts = vec![0usize; c];
        nearest_all.iter().for_each(|&(j, _)| counts[j] += 1);
        // reseed empty clusters at the worst-served points
        while let Some(empty) = counts.iter().position(|&k| k == 0) {
            let far = (0..n)
                .filter(|&i| counts[nearest_all[i].0] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if nearest_all[b].1 >= nearest_all[i].1 => Some(b),
                    _ => Some(i),
                })
                .expect("n >= c leaves a cluster with two members");
            counts[nearest_all[far].0] -= 1;
            counts[empty] += 1;
            centroids.row_mut(empty, q).copy_from_slice(points[far]);
            nearest_all[far] = (empty, 0.0);
        }
        inertia.push(nearest_all.iter().map(|&(_, d)| d).sum());
        let next: Vec<usize> = nearest_all.iter().map(|&(j, _)| j).collect();
        iterations += 1;
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = Tensor::zeros(&[c, q]);
        for (p, &j) in points.iter().zip(&assignment) {
            for (s, x) in sums.row_mut(j, q).iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for j in 0..c {
            let k = counts[j] as f64;
            for (dst, s) in centroids.row_mut(j, q).iter_mut().zip(sums.row(j, q)) {
                *dst = s / k;
            }
        }
    }
    Ok(KMeans { centroids, inertia, iterations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModule {
    pub pca: PcaModel,
    pub kmeans: KMeans,
}

impl BaselineModule {
    /// Snaps every location of `fmap` to its nearest centroid and maps the
    /// result back to feature space.
    pub fn reconstruct(&self, fmap: &Tensor) -> Result<Tensor> {
        let (_, _, d) = fmap.spatial_dims()?;
        if d != self.pca.input_dim() {
            return Err(Error::Shape(format!("feature depth {d}, baseline expects {}", self.pca.input_dim())));
        }
        let q = self.pca.output_dim();
        let mut out = Tensor::zeros(fmap.shape());
        for n in 0..fmap.len() / d {
            let z = self.pca.project(fmap.row(n, d));
            let (j, _) = nearest(&z, &self.kmeans.centroids);
            out.row_mut(n, d).copy_from_slice(&self.pca.inverse(self.kmeans.centroids.row(j, q)));
        }
        Ok(out)
    }
}

/// One optional module per class; `None` when the black-box predicted no
/// training image as that class.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineBank {
    pub modules: Vec<Option<BaselineModule>>,
}

impl BaselineBank {
    pub fn missing_classes(&self) -> Vec<usize> {
        (0..self.modules.len()).filter(|&k| self.modules[k].is_none()).collect()
    }

    /// Per-class probabilities `p_k`; absent modules score 0.
    pub fn predict_probs(&self, model: &BlackBox, fmap: &Tensor) -> Result<Vec<f64>> {
        self.modules
            .iter()
            .enumerate()
            .map(|(k, m)| match m {
                Some(m) => Ok(model.resume_forward(&m.reconstruct(fmap)?)?.data()[k]),
                None => Ok(0.0),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u32(self.modules.len() as u32);
        for m in &self.modules {
            match m {
                None => w.u32(0),
                Some(m) => {
                    w.u32(1);
                    w.tensor(&Tensor::vector(m.pca.mean.clone()));
                    w.tensor(&m.pca.components);
                    w.tensor(&Tensor::vector(m.pca.explained_variance.clone()));
                    w.u32(m.pca.rank as u32);
                    w.tensor(&m.kmeans.centroids);
                    w.tensor(&Tensor::vector(m.kmeans.inertia.clone()));
                    w.u32(m.kmeans.iterations as u32);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC)?;
        let k = r.u32()? as usize;
        let mut modules = Vec::with_capacity(k);
        for _ in 0..k {
            match r.u32()? {
                0 => modules.push(None),
                1 => {
                    let mean = r.tensor()?.into_data();
                    let components = r.tensor()?;
                    let explained_variance = r.tensor()?.into_data();
                    let rank = r.u32()? as usize;
                    let centroids = r.tensor()?;
                    let inertia = r.tensor()?.into_data();
                    let iterations = r.u32()? as usize;
                    let consistent = components.rank() == 2
                        && components.shape()[1] == mean.len()
                        && centroids.rank() == 2
                        && centroids.shape()[1] == components.shape()[0]
                        && explained_variance.len() == components.shape()[0];
                    if !consistent {
                        return Err(Error::Format("inconsistent baseline module shapes".into()));
                    }
                    modules.push(Some(BaselineModule {
                        pca: PcaModel { mean, components, explained_variance, rank },
                        kmeans: KMeans { centroids, inertia, iterations },
                    }));
                }
                other => return Err(Error::Format(format!("bad module flag {other}"))),
            }
        }
        r.finish()?;
        Ok(BaselineBank { modules })
    }
}

/// Fits one module per class on the per-location feature vectors of the
/// training images the black-box assigns to that class.
pub fn fit_baseline(
    model: &BlackBox,
    dataset: &LabeledDataset,
    num_concepts: usize,
    dim: usize,
    seed: u64,
) -> Result<BaselineBank> {
    let train = dataset.indices(Split::Train);
    let fmaps: Vec<Tensor> =
        train.par_iter().map(|&i| model.feature_map(&dataset.images[i])).collect::<Result<Vec<_>>>()?;
    fit_on_features(model, &fmaps, num_concepts, dim, seed)
}

pub fn fit_on_features(
    model: &BlackBox,
    fmaps: &[Tensor],
    num_concepts: usize,
    dim: usize,
    seed: u64,
) -> Result<BaselineBank> {
    let labels: Vec<usize> =
        fmaps.par_iter().map(|f| Ok(model.resume_forward(f)?.argmax())).collect::<Result<Vec<_>>>()?;
    let d = *model.feature_shape().last().expect("rank-3 feature map");
    let kmeans_seed = seeding::derive(seed, "kmeans");
    let modules = (0..model.num_classes)
        .map(|k| {
            let rows: Vec<&[f64]> = fmaps
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == k)
                .flat_map(|(f, _)| f.data().chunks_exact(d))
                .collect();
            if rows.is_empty() {
                return Ok(None);
            }
            let pca = fit_pca(&rows, dim)?;
            let projected: Vec<Vec<f64>> = rows.par_iter().map(|r| pca.project(r)).collect();
            let refs: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
            let kmeans = fit_kmeans(&refs, num_concepts, seeding::derive_index(kmeans_seed, k as u64))?;
            Ok(Some(BaselineModule { pca, kmeans }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineBank { modules })
}

/// Label and per-class probabilities of the baseline for one image.
pub fn baseline_predict(model: &BlackBox, bank: &BaselineBank, image: &Tensor) -> Result<(usize, Vec<f64>)> {
    let probs = bank.predict_probs(model, &model.feature_map(image)?)?;
    Ok((argmax(&probs), probs))
}
