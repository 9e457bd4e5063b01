//! Quality and diversity metrics plus the alleviation and concept-shift diagnostics.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_distance, mean_rows, sub, EncoderBackend};
use crate::error::{AirError, Result};

pub const REPORT_HEADER: [&str; 6] = ["metric", "value", "n_gen", "n_ref", "encoder", "run_id"];
pub const CURVE_HEADER: [&str; 3] = ["t", "metric", "value"];

const EIGEN_FLOOR: f64 = 1e-10;
const PAM_RESTARTS: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub metric: String,
    pub value: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub encoder: String,
}

/// `1 - cos(mean(gen), mean(ref))` over embeddings.
pub fn clip_distance(gen: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    cosine_distance(&mean_rows(gen)?, &mean_rows(reference)?)
}

/// [`clip_distance`] after encoding raw images with `backend`.
pub fn encoder_distance(
    backend: &dyn EncoderBackend,
    gen_images: &[Vec<f64>],
    ref_images: &[Vec<f64>],
) -> Result<DistanceReport> {
    let enc = |imgs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> { imgs.iter().map(|x| backend.encode_image(x)).collect() };
    let value = clip_distance(&enc(gen_images)?, &enc(ref_images)?)?;
    Ok(DistanceReport {
        metric: format!("{}_distance", backend.name()),
        value,
        n_generated: gen_images.len(),
        n_reference: ref_images.len(),
        encoder: backend.name().to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Sorted point indices of the medoids.
    pub medoids: Vec<usize>,
    /// Medoid point index for every point.
    pub assignment: Vec<usize>,
    pub cost: f64,
}

impl ClusterAssignment {
    /// Members of each cluster, in medoid order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        self.medoids
            .iter()
            .map(|m| {
                (0..self.assignment.len())
                    .filter(|&i| self.assignment[i] == *m)
                    .collect()
            })
            .collect()
    }
}

fn check_matrix(d: &[Vec<f64>]) -> Result<()> {
    let n = d.len();
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(AirError::BadMatrix(format!(
                "row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if row[i] != 0.0 {
            return Err(AirError::BadMatrix(format!("diagonal entry {i} is {}", row[i])));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(AirError::BadMatrix(format!("entry ({i}, {j}) = {v}")));
            }
            let t = d[j][i];
            if (v - t).abs() > 1e-12 * v.abs().max(t.abs()).max(1.0) {
                return Err(AirError::BadMatrix(format!("asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Nearest medoid for each point (lowest medoid index on ties) and the total cost.
fn assign(d: &[Vec<f64>], medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut cost = 0.0;
    let assignment = (0..d.len())
        .map(|i| {
            let mut best = medoids[0];
            for &m in &medoids[1..] {
                if d[i][m] < d[i][best] || (d[i][m] == d[i][best] && m < best) {
                    best = m;
                }
            }
            cost += d[i][best];
            best
        })
        .collect();
    (assignment, cost)
}

fn total_cost(d: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..d.len())
        .map(|i| medoids.iter().map(|&m| d[i][m]).fold(f64::INFINITY, f64::min))
        .sum()
}

fn greedy_build(d: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = d.len();
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best = (f64::INFINITY, 0);
        for c in (0..n).filter(|c| !medoids.contains(c)) {
            let mut trial = medoids.clone();
            trial.push(c);
            let cost = total_cost(d, &trial);
            if cost < best.0 {
                best = (cost, c);
            }
        }
        medoids.push(best.1);
    }
    medoids
}

/// Best-improvement swaps until no swap lowers the cost. Returns the cost
/// after each accepted swap, starting with the initial cost.
fn swap_phase(d: &[Vec<f64>], medoids: &mut [usize]) -> Vec<f64> {
    let n = d.len();
    let mut cost = total_cost(d, medoids);
    let mut trace = vec![cost];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..medoids.len() {
            for c in (0..n).filter(|c| !medoids.contains(c)) {
                let mut trial = medoids.to_vec();
                trial[slot] = c;
                let tc = total_cost(d, &trial);
                if tc < best.map_or(cost, |b| b.0) {
                    best = Some((tc, slot, c));
                }
            }
        }
        match best {
            Some((tc, slot, c)) => {
                medoids[slot] = c;
                cost = tc;
                trace.push(cost);
            }
            None => break,
        }
    }
    trace
}

/// PAM k-medoids with per-swap cost trace of the winning restart.
///
/// Restart 0 starts from the greedy build; the others from seeded random
/// medoid sets. The lowest cost wins; ties go to the lexicographically
/// smallest sorted medoid set.
pub fn kmedoids_traced(d: &[Vec<f64>], k: usize, seed: u64) -> Result<(ClusterAssignment, Vec<f64>)> {
    check_matrix(d)?;
    let n = d.len();
    if k == 0 {
        return Err(AirError::config("K", "must be >= 1"));
    }
    if k > n {
        return Err(AirError::KTooLarge { k, n });
    }
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for r in 0..PAM_RESTARTS {
        let mut medoids = if r == 0 {
            greedy_build(d, k)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
            sample(&mut rng, n, k).into_vec()
        };
        let trace = swap_phase(d, &mut medoids);
        medoids.sort_unstable();
        let cost = *trace.last().expect("trace starts with the initial cost");
        let better = match &best {
            None => true,
            Some((bc, bm, _)) => cost < *bc || (cost == *bc && medoids < *bm),
        };
        if better {
            best = Some((cost, medoids, trace));
        }
    }
    let (_, medoids, trace) = best.expect("at least one restart");
    let (assignment, cost) = assign(d, &medoids);
    Ok((
        ClusterAssignment {
            medoids,
            assignment,
            cost,
        },
        trace,
    ))
}

pub fn kmedoids(d: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    kmedoids_traced(d, k, seed).map(|(a, _)| a)
}

/// Pairwise distance matrix, rows computed in parallel.
pub fn distance_matrix<T, F>(items: &[T], dist: F) -> Vec<Vec<f64>>
where
    T: Sync,
    F: Fn(&T, &T) -> f64 + Sync,
{
    let n = items.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { dist(&items[i], &items[j]) })
                .collect()
        })
        .collect()
}

/// Cluster with k-medoids, average the pairwise distances inside each
/// cluster (singletons count as 0) and average uniformly over the K clusters.
///
/// Points are reordered canonically (by their sorted distance rows) before
/// clustering, so the value does not depend on input order.
pub fn intra_lpips<T, F>(images: &[T], k: usize, dist: F, seed: u64) -> Result<f64>
where
    T: Sync,
    F: Fn(&T, &T) -> f64 + Sync,
{
    let raw = distance_matrix(images, dist);
    let n = raw.len();
    let keys: Vec<Vec<f64>> = raw
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let d: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| order.iter().map(|&j| raw[i][j]).collect())
        .collect();
    let clusters = kmedoids(&d, k, seed)?.clusters();
    let total: f64 = clusters
        .iter()
        .map(|members| {
            let m = members.len();
            if m < 2 {
                return 0.0;
            }
            let mut s = 0.0;
            for a in 0..m {
                for b in a + 1..m {
                    s += d[members[a]][members[b]];
                }
            }
            s / (m * (m - 1) / 2) as f64
        })
        .sum();
    Ok(total / clusters.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<Vec<f64>>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(AirError::EmptySet);
        }
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(AirError::DimMismatch {
                expected: d,
                got: cov.len(),
            });
        }
        for (i, row) in cov.iter().enumerate() {
            for (j, &v) in row.iter().enumerate().take(i) {
                if (v - cov[j][i]).abs() > 1e-10 * v.abs().max(1.0) {
                    return Err(AirError::BadMatrix(format!("covariance asymmetric at ({i}, {j})")));
                }
            }
        }
        let s = Self { mean, cov };
        let min = SymmetricEigen::new(s.cov_matrix()).eigenvalues.min();
        if min < -1e-8 * s.cov_matrix().norm().max(1.0) {
            return Err(AirError::NonPsd(min));
        }
        Ok(s)
    }

    /// Mean and unbiased covariance of the rows.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let mean = mean_rows(rows)?;
        let d = mean.len();
        let n = rows.len();
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = vec![vec![0.0; d]; d];
        for r in rows {
            let c = sub(r, &mean);
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += c[i] * c[j];
                }
            }
        }
        cov.iter_mut().flatten().for_each(|v| *v /= denom);
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.cov[i][j])
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of the product root is taken from the symmetric form
/// `S_a^{1/2} S_b S_a^{1/2}`, with eigenvalues below 1e-10 clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(AirError::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_root: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_FLOOR { 0.0 } else { l.sqrt() })
        .sum();
    let dm = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    let value = dm.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_root;
    Ok(value.max(0.0))
}

/// `1 - cos(text_offset, mean(real_target) - mean(gen_source))`.
pub fn misalignment_vs_ground_truth(
    text_offset: &[f64],
    gen_source_images: &[Vec<f64>],
    real_target_images: &[Vec<f64>],
) -> Result<f64> {
    let truth = sub(&mean_rows(real_target_images)?, &mean_rows(gen_source_images)?);
    cosine_distance(text_offset, &truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMetric {
    Clip,
    Frechet,
}

impl ShiftMetric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clip => "clip_distance",
            Self::Frechet => "frechet_distance",
        }
    }
}

/// Metric of each checkpoint's generated embeddings against the reference set.
pub fn concept_shift_curve(
    checkpoints: &[(usize, Vec<Vec<f64>>)],
    reference: &[Vec<f64>],
    metric: ShiftMetric,
) -> Result<Vec<(usize, f64)>> {
    if checkpoints.len() < 2 {
        return Err(AirError::EmptySet);
    }
    let ref_stats = match metric {
        ShiftMetric::Frechet => Some(GaussianStats::from_samples(reference)?),
        ShiftMetric::Clip => None,
    };
    checkpoints
        .iter()
        .map(|(t, gen)| {
            let v = match &ref_stats {
                None => clip_distance(gen, reference)?,
                Some(rs) => frechet_distance(&GaussianStats::from_samples(gen)?, rs)?,
            };
            Ok((*t, v))
        })
        .collect()
}

fn lf_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| AirError::Io(std::io::Error::other(e.to_string())))
}

pub fn reports_csv(reports: &[DistanceReport], run_id: &str) -> Result<Vec<u8>> {
    let mut w = lf_writer();
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record([
            r.metric.clone(),
            r.value.to_string(),
            r.n_generated.to_string(),
            r.n_reference.to_string(),
            r.encoder.clone(),
            run_id.to_string(),
        ])?;
    }
    finish(w)
}

pub fn curve_csv(series: &[(usize, f64)], metric: ShiftMetric) -> Result<Vec<u8>> {
    let mut w = lf_writer();
    w.write_record(CURVE_HEADER)?;
    for (t, v) in series {
        w.write_record([t.to_string(), metric.name().to_string(), v.to_string()])?;
    }
    finish(w)
}

pub fn write_reports(path: &Path, reports: &[DistanceReport], run_id: &str) -> Result<()> {
    fs::write(path, reports_csv(reports, run_id)?)?;
    Ok(())
}
