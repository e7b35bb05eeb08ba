//! Problem-incidence features per learner, PCA, and exact t-SNE.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::TaskDataset;
use crate::numcore::{keyed_rng, Tensor};
use crate::seqgen::ProblemRegistry;

/// One row per learner, one binary column per registry problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// `(school_id, user_id)` per row.
    pub labels: Vec<(String, String)>,
    /// Raw problem id per column, in registry order.
    pub columns: Vec<String>,
    pub data: Tensor,
}

impl FeatureMatrix {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn schools(&self) -> Vec<String> {
        self.labels.iter().map(|(s, _)| s.clone()).collect()
    }
}

/// Registry over the union of the datasets' problems, schools in sorted order.
pub fn union_registry(datasets: &[&TaskDataset]) -> Result<ProblemRegistry> {
    let mut sorted: Vec<&&TaskDataset> = datasets.iter().collect();
    sorted.sort_by(|a, b| a.school_id.cmp(&b.school_id));
    let distinct: std::collections::BTreeSet<&str> = sorted
        .iter()
        .flat_map(|ds| ds.records())
        .map(|r| r.problem_id.as_str())
        .collect();
    let v_cap = (distinct.len() + 1).max(crate::seqgen::DEFAULT_V_CAP);
    let mut reg = ProblemRegistry::new(v_cap);
    for ds in sorted {
        reg.extend_with(ds.records().map(|r| r.problem_id.as_str()))?;
    }
    Ok(reg)
}

/// Rows ordered by school id then user id.
pub fn build_features(datasets: &[&TaskDataset], registry: &ProblemRegistry) -> Result<FeatureMatrix> {
    let mut sorted: Vec<&&TaskDataset> = datasets.iter().collect();
    sorted.sort_by(|a, b| a.school_id.cmp(&b.school_id));
    let cols = registry.len();
    let columns = (1..=cols as u32)
        .map(|i| registry.raw_id(i).expect("dense registry").to_string())
        .collect();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for ds in sorted {
        for (user, recs) in &ds.users {
            if recs.is_empty() {
                continue;
            }
            let mut row = vec![0.0; cols];
            for r in recs {
                let idx = registry.get(&r.problem_id).ok_or_else(|| {
                    Error::Parameter(format!("problem `{}` missing from registry", r.problem_id))
                })?;
                row[idx as usize - 1] = 1.0;
            }
            labels.push((ds.school_id.clone(), user.clone()));
            data.extend(row);
        }
    }
    let n = labels.len();
    Ok(FeatureMatrix {
        labels,
        columns,
        data: Tensor::from_vec(&[n, cols], data)?,
    })
}

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric `m x m` matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of a row-major `m x m` matrix.
pub fn symmetric_eigen(a: &[f64], m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != m * m {
        return Err(Error::Shape(format!("{} entries for {m}x{m}", a.len())));
    }
    let mut a = a.to_vec();
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..m {
            for q in p + 1..m {
                off += a[p * m + q] * a[p * m + q];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let (kp, kq) = (a[k * m + p], a[k * m + q]);
                    a[k * m + p] = c * kp - s * kq;
                    a[k * m + q] = s * kp + c * kq;
                }
                for k in 0..m {
                    let (pk, qk) = (a[p * m + k], a[q * m + k]);
                    a[p * m + k] = c * pk - s * qk;
                    a[q * m + k] = s * pk + c * qk;
                }
                for k in 0..m {
                    let (kp, kq) = (v[k * m + p], v[k * m + q]);
                    v[k * m + p] = c * kp - s * kq;
                    v[k * m + q] = s * kp + c * kq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| a[j * m + j].total_cmp(&a[i * m + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * m + i]).collect();
    let mut vectors = vec![0.0; m * m];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..m {
            vectors[k * m + new] = v[k * m + old];
        }
    }
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `n x d` scores.
    pub projected: Tensor,
    /// `d x cols` unit principal directions.
    pub components: Tensor,
    pub mean: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Set when fewer directions than requested carry variance.
    pub warning: Option<String>,
}

impl PcaResult {
    pub fn reconstruct(&self) -> Tensor {
        let n = self.projected.rows();
        let d = self.components.rows();
        let cols = self.mean.len();
        let mut out = Vec::with_capacity(n * cols);
        for i in 0..n {
            for c in 0..cols {
                let mut x = self.mean[c];
                for k in 0..d {
                    x += self.projected.get(i, k) * self.components.get(k, c);
                }
                out.push(x);
            }
        }
        Tensor::from_vec(&[n, cols], out).expect("shape")
    }
}

const RANK_TOL: f64 = 1e-10;

/// Mean-centred projection onto the top `d` principal directions.
///
/// Works on the `n x n` Gram matrix or the `cols x cols` covariance,
/// whichever is smaller. Each direction's sign is fixed so its score with the
/// largest magnitude is positive.
pub fn pca_reduce(x: &Tensor, d: usize) -> Result<PcaResult> {
    let (n, cols) = (x.rows(), x.cols());
    if d == 0 || d > n.min(cols) {
        return Err(Error::Parameter(format!(
            "cannot keep {d} components of a {n}x{cols} matrix"
        )));
    }
    x.check_finite("pca input")?;
    let mut mean = vec![0.0; cols];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut xc = x.data().to_vec();
    for i in 0..n {
        for (c, m) in mean.iter().enumerate() {
            xc[i * cols + c] -= m;
        }
    }
    use crate::numcore::ops::{gemm_nt, gemm_tn};
    let use_gram = n <= cols;
    let (values, vectors, m) = if use_gram {
        let g = gemm_nt(&xc, &xc, n, cols, n);
        let (v, e) = symmetric_eigen(&g, n)?;
        (v, e, n)
    } else {
        let c = gemm_tn(&xc, &xc, n, cols, cols);
        let (v, e) = symmetric_eigen(&c, cols)?;
        (v, e, cols)
    };
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let rank = values
        .iter()
        .filter(|&&v| total > 0.0 && v > RANK_TOL * total)
        .count();
    let keep = d.min(rank);
    let warning = (keep < d).then(|| format!("requested {d} components, data has rank {rank}"));
    if keep == 0 {
        return Err(Error::Parameter("data has no variance".into()));
    }

    let mut projected = vec![0.0; n * keep];
    let mut components = vec![0.0; keep * cols];
    for k in 0..keep {
        let lambda = values[k];
        let e: Vec<f64> = (0..m).map(|r| vectors[r * m + k]).collect();
        let mut comp = vec![0.0; cols];
        if use_gram {
            // component = Xc^T u / sqrt(lambda)
            let s = lambda.sqrt();
            for i in 0..n {
                for c in 0..cols {
                    comp[c] += xc[i * cols + c] * e[i];
                }
            }
            comp.iter_mut().for_each(|v| *v /= s);
        } else {
            comp.copy_from_slice(&e);
        }
        let mut scores: Vec<f64> = (0..n)
            .map(|i| (0..cols).map(|c| xc[i * cols + c] * comp[c]).sum())
            .collect();
        let pivot = scores
            .iter()
            .copied()
            .fold(0.0f64, |best, s| if s.abs() > best.abs() { s } else { best });
        if pivot < 0.0 {
            scores.iter_mut().for_each(|s| *s = -*s);
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..n {
            projected[i * keep + k] = scores[i];
        }
        components[k * cols..(k + 1) * cols].copy_from_slice(&comp);
    }
    Ok(PcaResult {
        projected: Tensor::from_vec(&[n, keep], projected)?,
        components: Tensor::from_vec(&[keep, cols], components)?,
        mean,
        explained_variance_ratio: values[..keep].iter().map(|v| v / total).collect(),
        warning,
    })
}

pub fn pairwise_sq_distances(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Tensor::from_vec(&[n, n], d).expect("square")
}

pub const BANDWIDTH_MAX_ITER: usize = 64;
pub const ENTROPY_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub sigma: Vec<f64>,
    /// Shannon entropy in bits of each point's conditional distribution.
    pub entropy: Vec<f64>,
    pub converged: Vec<bool>,
}

/// `p_{j|i}` for one row at precision `beta`, plus its entropy in bits.
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == i { 0.0 } else { (-(dj - dmin) * beta).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.log2();
        }
    }
    h
}

fn validate_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if n < 4 {
        return Err(Error::Parameter(format!("need at least 4 points, got {n}")));
    }
    if !(perplexity > 1.0 && perplexity < (n as f64 - 1.0) / 3.0) {
        return Err(Error::Parameter(format!(
            "perplexity {perplexity} must lie in (1, {:.3}) for {n} points",
            (n as f64 - 1.0) / 3.0
        )));
    }
    Ok(())
}

/// Per-point Gaussian widths whose conditional entropy equals `log2(perplexity)`.
///
/// Bisects the precision on a log scale, starting from the inverse mean
/// distance of the row so the search is invariant to distance scale.
pub fn calibrate_bandwidths(dist2: &Tensor, perplexity: f64) -> Result<Bandwidths> {
    let n = dist2.rows();
    if dist2.cols() != n {
        return Err(Error::Shape("distance matrix must be square".into()));
    }
    validate_perplexity(n, perplexity)?;
    let target = perplexity.log2();
    let mut out = Bandwidths {
        sigma: vec![0.0; n],
        entropy: vec![0.0; n],
        converged: vec![false; n],
    };
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = dist2.row(i);
        let mean = d.iter().sum::<f64>() / (n - 1) as f64;
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut h = conditional_row(d, i, beta, &mut row);
        for _ in 0..BANDWIDTH_MAX_ITER {
            if (h - target).abs() < ENTROPY_TOL {
                out.converged[i] = true;
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta * hi).sqrt() } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo > 0.0 { (beta * lo).sqrt() } else { beta / 2.0 };
            }
            h = conditional_row(d, i, beta, &mut row);
        }
        if !out.converged[i] && (h - target).abs() < ENTROPY_TOL {
            out.converged[i] = true;
        }
        out.sigma[i] = (1.0 / (2.0 * beta)).sqrt();
        out.entropy[i] = h;
    }
    Ok(out)
}

/// Symmetrised joint affinities `(p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_affinities(dist2: &Tensor, bw: &Bandwidths) -> Tensor {
    let n = dist2.rows();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let beta = 1.0 / (2.0 * bw.sigma[i] * bw.sigma[i]);
        conditional_row(dist2.row(i), i, beta, &mut cond[i * n..(i + 1) * n]);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Tensor::from_vec(&[n, n], p).expect("square")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub pca_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            pca_dim: 50,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        validate_perplexity(n, self.perplexity)?;
        if self.iterations < self.exaggeration_iters {
            return Err(Error::Parameter(format!(
                "iterations {} shorter than the {}-iteration exaggeration phase",
                self.iterations, self.exaggeration_iters
            )));
        }
        if self.learning_rate <= 0.0 || self.pca_dim == 0 {
            return Err(Error::Parameter("learning rate and pca_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    /// `n x 2`.
    pub points: Tensor,
    /// KL(P || Q) after each iteration.
    pub kl_trace: Vec<f64>,
    pub bandwidths: Bandwidths,
}

fn row_seed(row: &[f64]) -> [u64; 4] {
    let mut h = Sha256::new();
    for v in row {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    std::array::from_fn(|k| u64::from_le_bytes(d[k * 8..k * 8 + 8].try_into().expect("8 bytes")))
}

fn kl_divergence(p: &[f64], q_num: &[f64], q_sum: f64) -> f64 {
    p.iter()
        .zip(q_num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &num)| pij * (pij / (num / q_sum).max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Exact O(n^2) t-SNE into two dimensions.
///
/// Rows are processed in order of their content hash and the result mapped
/// back, so permuting the input permutes the output rows and nothing else.
pub fn tsne_embed(x: &Tensor, cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = x.rows();
    cfg.validate(n)?;
    x.check_finite("t-SNE input")?;
    let keys: Vec<[u64; 4]> = (0..n).map(|i| row_seed(x.row(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    let mut canonical = Vec::with_capacity(x.len());
    for &i in &order {
        canonical.extend_from_slice(x.row(i));
    }
    let canonical = Tensor::from_vec(x.shape(), canonical)?;
    let inner = tsne_canonical(&canonical, cfg)?;
    let mut points = vec![0.0; n * 2];
    let mut bandwidths = Bandwidths {
        sigma: vec![0.0; n],
        entropy: vec![0.0; n],
        converged: vec![false; n],
    };
    for (k, &i) in order.iter().enumerate() {
        points[i * 2..i * 2 + 2].copy_from_slice(inner.points.row(k));
        bandwidths.sigma[i] = inner.bandwidths.sigma[k];
        bandwidths.entropy[i] = inner.bandwidths.entropy[k];
        bandwidths.converged[i] = inner.bandwidths.converged[k];
    }
    Ok(Embedding2D {
        points: Tensor::from_vec(&[n, 2], points)?,
        kl_trace: inner.kl_trace,
        bandwidths,
    })
}

fn tsne_canonical(x: &Tensor, cfg: &TsneConfig) -> Result<Embedding2D> {
    let n = x.rows();
    let dist2 = pairwise_sq_distances(x);
    let bandwidths = calibrate_bandwidths(&dist2, cfg.perplexity)?;
    let p = joint_affinities(&dist2, &bandwidths);
    let p = p.data();

    let normal = Normal::new(0.0, cfg.init_std)
        .map_err(|e| Error::Parameter(format!("init_std: {e}")))?;
    let mut y = vec![0.0; n * 2];
    for i in 0..n {
        let key = row_seed(x.row(i));
        let mut rng = keyed_rng(cfg.seed, &[0x75e, key[0], key[1], key[2], key[3]]);
        y[i * 2] = normal.sample(&mut rng);
        y[i * 2 + 1] = normal.sample(&mut rng);
    }
    let mut update = vec![0.0; n * 2];
    let mut gains = vec![1.0f64; n * 2];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; n * 2];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    let student_t = |y: &[f64], num: &mut [f64]| -> f64 {
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let dx = y[i * 2] - y[j * 2];
                    let dy = y[i * 2 + 1] - y[j * 2 + 1];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[i * n + j] = v;
                sum += v;
            }
        }
        sum
    };

    for it in 0..cfg.iterations {
        let early = it < cfg.exaggeration_iters;
        let alpha = if early { cfg.exaggeration } else { 1.0 };
        let momentum = if early { cfg.momentum_initial } else { cfg.momentum_final };
        let q_sum = student_t(&y, &mut num);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                let w = (alpha * p[i * n + j] - num[i * n + j] / q_sum) * num[i * n + j];
                gx += w * (y[i * 2] - y[j * 2]);
                gy += w * (y[i * 2 + 1] - y[j * 2 + 1]);
            }
            grad[i * 2] = 4.0 * gx;
            grad[i * 2 + 1] = 4.0 * gy;
        }
        for k in 0..n * 2 {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[i * 2 + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * 2 + c] -= mean);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                detail: "non-finite embedding coordinate".into(),
            });
        }
        let q_sum = student_t(&y, &mut num);
        let kl = kl_divergence(p, &num, q_sum);
        if !kl.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                detail: format!("KL divergence {kl}"),
            });
        }
        kl_trace.push(kl);
    }
    Ok(Embedding2D {
        points: Tensor::from_vec(&[n, 2], y)?,
        kl_trace,
        bandwidths,
    })
}

/// Indices of the `k` nearest other points (ties by index).
fn knn(points: &Tensor, subset: &[usize], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = subset
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| {
            let v: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (v, j)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Mean fraction of each point's `k` nearest neighbours sharing its label.
pub fn knn_purity(points: &Tensor, labels: &[String], k: usize) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n || n <= k {
        return Err(Error::Parameter(format!("need more than {k} labelled points")));
    }
    let all: Vec<usize> = (0..n).collect();
    let total: f64 = (0..n)
        .map(|i| {
            let nn = knn(points, &all, i, k);
            nn.iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean fraction of `k` nearest neighbours from the other school, over the
/// points of schools `a` and `b` only. Higher means more mixed.
pub fn mixing_score(points: &Tensor, labels: &[String], a: &str, b: &str, k: usize) -> Result<f64> {
    if labels.len() != points.rows() {
        return Err(Error::Shape("one label per point".into()));
    }
    let subset: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == a || labels[i] == b)
        .collect();
    if subset.len() <= k || a == b {
        return Err(Error::Parameter(format!(
            "need two distinct schools with more than {k} points"
        )));
    }
    let total: f64 = subset
        .iter()
        .map(|&i| {
            let nn = knn(points, &subset, i, k);
            nn.iter().filter(|&&j| labels[j] != labels[i]).count() as f64 / k as f64
        })
        .sum();
    Ok(total / subset.len() as f64)
}

/// All pairwise mixing scores, keyed by sorted school pair.
pub fn mixing_table(points: &Tensor, labels: &[String], k: usize) -> Result<BTreeMap<(String, String), f64>> {
    let schools: std::collections::BTreeSet<&String> = labels.iter().collect();
    let schools: Vec<&String> = schools.into_iter().collect();
    let mut out = BTreeMap::new();
    for (i, a) in schools.iter().enumerate() {
        for b in &schools[i + 1..] {
            out.insert(
                ((*a).clone(), (*b).clone()),
                mixing_score(points, labels, a, b, k)?,
            );
        }
    }
    Ok(out)
}

/// Full drift pipeline output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftAnalysis {
    pub labels: Vec<(String, String)>,
    pub embedding: Embedding2D,
    pub explained_variance_ratio: Vec<f64>,
    pub warnings: Vec<String>,
    pub config: TsneConfig,
}

impl DriftAnalysis {
    pub fn schools(&self) -> Vec<String> {
        self.labels.iter().map(|(s, _)| s.clone()).collect()
    }

    /// `school_id,user_id,x,y` rows.
    pub fn points_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["school_id", "user_id", "x", "y"])?;
        for (i, (s, u)) in self.labels.iter().enumerate() {
            let p = self.embedding.points.row(i);
            w.write_record([s.clone(), u.clone(), format!("{:.9}", p[0]), format!("{:.9}", p[1])])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Features, PCA (capped at the matrix's size), then t-SNE.
pub fn analyze(datasets: &[&TaskDataset], cfg: &TsneConfig) -> Result<DriftAnalysis> {
    let registry = union_registry(datasets)?;
    let features = build_features(datasets, &registry)?;
    cfg.validate(features.n())?;
    let mut warnings = Vec::new();
    let dim = cfg.pca_dim.min(features.n()).min(features.columns.len());
    if dim < cfg.pca_dim {
        warnings.push(format!("pca_dim reduced from {} to {dim}", cfg.pca_dim));
    }
    let pca = pca_reduce(&features.data, dim)?;
    warnings.extend(pca.warning.clone());
    let embedding = tsne_embed(&pca.projected, cfg)?;
    Ok(DriftAnalysis {
        labels: features.labels,
        embedding,
        explained_variance_ratio: pca.explained_variance_ratio,
        warnings,
        config: cfg.clone(),
    })
}
