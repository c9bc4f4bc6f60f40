use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::linalg::{self, check_symmetric, matmul};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Row-major `n x d` matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Argument(format!("{n}x{d} features need {} values, got {}", n * d, data.len())));
        }
        Ok(Features { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Argument("feature rows differ in length".into()));
        }
        Features::new(rows.len(), d, rows.concat())
    }

    /// Flattens every sample of a `[N, ...]` tensor into one row.
    pub fn from_tensor(t: &Tensor) -> Self {
        let n = t.shape()[0];
        Features {
            n,
            d: t.row_len(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(features: &Features) -> Result<FeatureStats> {
    let (n, d) = (features.n, features.d);
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 feature rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(features.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(FeatureStats {
        mean,
        covariance: cov,
        count: n,
    })
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`.
///
/// The trace of `(Σa Σb)^½` is taken from the symmetric product
/// `Σa^½ Σb Σa^½`, which has the same eigenvalues.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Argument(format!("feature dims differ: {d} vs {}", b.dim())));
    }
    check_symmetric(&a.covariance, d, 1e-9)?;
    check_symmetric(&b.covariance, d, 1e-9)?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let root_a = linalg::matrix_sqrt_psd(&a.covariance, d)?;
    let mut product = matmul(&matmul(&root_a, &b.covariance, d), &root_a, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (product[i * d + j] + product[j * d + i]);
            product[i * d + j] = s;
            product[j * d + i] = s;
        }
    }
    let cross = linalg::trace_sqrt_psd(&product, d)?;
    let fid = mean_term + trace(&a.covariance) + trace(&b.covariance) - 2.0 * cross;
    Ok(fid.max(0.0))
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split; returns mean and population std
/// over splits. The last split takes the remainder rows.
pub fn inception_style_score(probs: &Features, splits: usize) -> Result<(f64, f64)> {
    let (n, c) = (probs.n, probs.d);
    if splits == 0 || n < splits || c == 0 {
        return Err(Error::Argument(format!("cannot take {splits} splits of {n} rows")));
    }
    for i in 0..n {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    let size = n / splits;
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let start = s * size;
            let end = if s + 1 == splits { n } else { start + size };
            let m = (end - start) as f64;
            let mut marginal = vec![0.0; c];
            for i in start..end {
                for (acc, p) in marginal.iter_mut().zip(probs.row(i)) {
                    *acc += p;
                }
            }
            marginal.iter_mut().for_each(|v| *v /= m);
            let mut kl = 0.0;
            for i in start..end {
                for (p, q) in probs.row(i).iter().zip(&marginal) {
                    if *p > 0.0 {
                        kl += p * (p / q).ln();
                    }
                }
            }
            (kl / m).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its k-th nearest other point.
fn kth_radii(set: &Features, k: usize) -> Vec<f64> {
    (0..set.n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..set.n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(set.row(i), set.row(j)))
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(queries: &Features, manifold: &Features, radii: &[f64]) -> f64 {
    let inside = (0..queries.n)
        .into_par_iter()
        .filter(|&q| {
            let x = queries.row(q);
            (0..manifold.n).any(|m| sq_dist(x, manifold.row(m)) <= radii[m])
        })
        .count();
    inside as f64 / queries.n as f64
}

/// Improved precision and recall with k-th nearest neighbour balls.
pub fn knn_precision_recall(real: &Features, generated: &Features, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if real.d != generated.d {
        return Err(Error::Argument(format!("feature dims differ: {} vs {}", real.d, generated.d)));
    }
    if real.n < k + 1 || generated.n < k + 1 {
        return Err(Error::Argument(format!(
            "k = {k} needs at least {} points per set, got {} real and {} generated",
            k + 1,
            real.n,
            generated.n
        )));
    }
    let real_r = kth_radii(real, k);
    let gen_r = kth_radii(generated, k);
    Ok((coverage(generated, real, &real_r), coverage(real, generated, &gen_r)))
}

/// Total-variation distance between two count histograms after
/// normalising each to sum 1.
pub fn tv_distance(p: &[usize], q: &[usize]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Argument(format!("histogram lengths differ: {} vs {}", p.len(), q.len())));
    }
    let (sp, sq) = (p.iter().sum::<usize>(), q.iter().sum::<usize>());
    if sp == 0 || sq == 0 {
        return Err(Error::Argument("empty histogram".into()));
    }
    Ok(0.5
        * p.iter()
            .zip(q)
            .map(|(&a, &b)| (a as f64 / sp as f64 - b as f64 / sq as f64).abs())
            .sum::<f64>())
}

/// Class counts in descending order, as `(class, count)` pairs. Ties keep
/// the lower class id first.
pub fn sorted_histogram(hist: &[usize]) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = hist.iter().copied().enumerate().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

pub fn sorted_histogram_csv(hist: &[usize]) -> String {
    let mut out = String::from("rank,class,count\n");
    for (rank, (class, count)) in sorted_histogram(hist).into_iter().enumerate() {
        out.push_str(&format!("{rank},{class},{count}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    Classifier,
    Pixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub precision: f64,
    pub recall: f64,
    pub class_histogram: Vec<usize>,
    pub tv_distance: f64,
    pub feature_space: FeatureSpace,
    pub n_generated: usize,
    pub n_reference: usize,
}
