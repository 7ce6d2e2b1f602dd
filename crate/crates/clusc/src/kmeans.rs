//! Seeded k-means over grouped weight vectors.
//!
//! The E-step compares squared Euclidean distances in f32 and breaks ties
//! toward the lowest centroid index; objective sums and cluster means
//! accumulate in f64. All reductions run in a canonical order (indices
//! sorted by vector content), so permuting the input vectors permutes the
//! assignments but leaves centroids and objective bit-identical.
//!
//! Initialization is k-means++ sampled against the canonical order. A
//! cluster that ends an M-step empty is re-seeded with the member farthest
//! from its centroid inside the largest cluster; moving an empty cluster's
//! centroid leaves the current objective unchanged, so the objective trace
//! stays non-increasing.

use crate::error::{invalid, Result};
use crate::matrix::{GroupedView, Matrix};
use crate::rng::{child_seed, det_rng};
use rand::Rng;

/// The paper-default number of alternations.
pub const DEFAULT_ITERATIONS: usize = 20;

/// Upper bound on cluster count so codes fit in unsigned 16-bit.
pub const MAX_CLUSTERS: usize = 65_535;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub n_clusters: usize,
    pub iterations: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(n_clusters: usize) -> Self {
        Self {
            n_clusters,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            restarts: 1,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(invalid("n_clusters must be >= 1"));
        }
        if self.n_clusters > MAX_CLUSTERS {
            return Err(invalid(format!(
                "n_clusters {} exceeds the 16-bit code limit {MAX_CLUSTERS}",
                self.n_clusters
            )));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be >= 1"));
        }
        if self.restarts == 0 {
            return Err(invalid("restarts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Codebook: `n_effective x g`, only non-empty clusters.
    pub centroids: Matrix,
    /// Code per input vector, each `< n_effective`.
    pub assignments: Vec<u16>,
    /// Sum of squared distances of vectors to their assigned centroids.
    pub objective: f64,
    /// Non-empty cluster count actually produced.
    pub n_effective: usize,
    /// Objective after the initial E-step and after each alternation;
    /// length `iterations + 1`, non-increasing up to f32 noise.
    pub objective_trace: Vec<f64>,
}

/// Squared Euclidean distance in f32, the E-step metric.
#[inline]
fn dist2_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Squared Euclidean distance with f64 arithmetic, used for objectives.
#[inline]
fn dist2_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

/// Indices of `view`'s vectors sorted by content. Equal vectors may appear
/// in any relative order; they contribute identical terms to every
/// reduction, so the order among them does not affect results.
fn canonical_order(view: &GroupedView) -> Vec<usize> {
    let mut order: Vec<usize> = (0..view.len()).collect();
    order.sort_by(|&a, &b| {
        let va = view.vector(a);
        let vb = view.vector(b);
        for (x, y) in va.iter().zip(vb) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    order
}

/// Map each vector to its nearest centroid; ties go to the lowest index.
pub fn assign_step(view: &GroupedView, centroids: &Matrix) -> Result<Vec<u16>> {
    if centroids.rows() == 0 {
        return Err(invalid("assign_step needs at least one centroid"));
    }
    if centroids.rows() > MAX_CLUSTERS {
        return Err(invalid("too many centroids for 16-bit assignments"));
    }
    if centroids.cols() != view.g() {
        return Err(invalid(format!(
            "centroid dimension {} != group dimension {}",
            centroids.cols(),
            view.g()
        )));
    }
    Ok(assign_nearest(view, centroids)
        .into_iter()
        .map(|a| a as u16)
        .collect())
}

fn assign_nearest(view: &GroupedView, centroids: &Matrix) -> Vec<usize> {
    (0..view.len())
        .map(|i| {
            let v = view.vector(i);
            let mut best = 0usize;
            let mut best_d = dist2_f32(v, centroids.row(0));
            for c in 1..centroids.rows() {
                let d = dist2_f32(v, centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Objective of a given (centroids, assignments) pair, f64 accumulation
/// in canonical order.
pub fn objective_of(view: &GroupedView, centroids: &Matrix, assignments: &[u16]) -> Result<f64> {
    if assignments.len() != view.len() {
        return Err(invalid("assignment count != vector count"));
    }
    let order = canonical_order(view);
    let mut acc = 0.0f64;
    for &i in &order {
        let c = assignments[i] as usize;
        if c >= centroids.rows() {
            return Err(invalid(format!("assignment {c} out of range")));
        }
        acc += dist2_f64(view.vector(i), centroids.row(c));
    }
    Ok(acc)
}

/// Recompute centroids as member means and re-seed empty clusters from the
/// largest cluster's farthest member.
pub fn update_step(view: &GroupedView, assignments: &[u16], n_clusters: usize) -> Result<Matrix> {
    if assignments.len() != view.len() {
        return Err(invalid("assignment count != vector count"));
    }
    if n_clusters == 0 || n_clusters > MAX_CLUSTERS {
        return Err(invalid("n_clusters out of range"));
    }
    if let Some(bad) = assignments.iter().find(|&&a| (a as usize) >= n_clusters) {
        return Err(invalid(format!("assignment {bad} >= n_clusters")));
    }
    let order = canonical_order(view);
    let assignments: Vec<usize> = assignments.iter().map(|&a| a as usize).collect();
    Ok(means_with_repair(view, &assignments, n_clusters, &order))
}

fn means_with_repair(
    view: &GroupedView,
    assignments: &[usize],
    n_clusters: usize,
    order: &[usize],
) -> Matrix {
    let g = view.g();
    let mut sums = vec![0.0f64; n_clusters * g];
    let mut counts = vec![0usize; n_clusters];
    for &i in order {
        let c = assignments[i];
        counts[c] += 1;
        let row = &mut sums[c * g..(c + 1) * g];
        for (s, x) in row.iter_mut().zip(view.vector(i)) {
            *s += *x as f64;
        }
    }

    let mut centroids = Matrix::zeros(n_clusters, g);
    for c in 0..n_clusters {
        if counts[c] > 0 {
            for j in 0..g {
                centroids.set(c, j, (sums[c * g + j] / counts[c] as f64) as f32);
            }
        }
    }

    // Re-seed empties by splitting the currently largest cluster. Marking
    // donors as taken spreads repairs when several clusters are empty.
    let empties: Vec<usize> = (0..n_clusters).filter(|&c| counts[c] == 0).collect();
    if !empties.is_empty() {
        let mut taken = vec![false; view.len()];
        let mut virtual_counts = counts.clone();
        for &e in &empties {
            let Some(src) = (0..n_clusters)
                .filter(|&c| virtual_counts[c] >= 2)
                .max_by(|&a, &b| {
                    virtual_counts[a]
                        .cmp(&virtual_counts[b])
                        .then(b.cmp(&a)) // tie -> lowest index
                })
            else {
                break;
            };
            let mut far: Option<(usize, f32)> = None;
            for &i in order {
                if assignments[i] != src || taken[i] {
                    continue;
                }
                let d = dist2_f32(view.vector(i), centroids.row(src));
                match far {
                    Some((_, fd)) if d <= fd => {}
                    _ => far = Some((i, d)),
                }
            }
            let Some((member, _)) = far else { break };
            let v = view.vector(member).to_vec();
            for (j, x) in v.iter().enumerate() {
                centroids.set(e, j, *x);
            }
            taken[member] = true;
            virtual_counts[src] -= 1;
            virtual_counts[e] = 1;
        }
    }
    centroids
}

/// k-means++ seeding, sampled over the canonical order so the chosen
/// centroid sequence is invariant to input permutation.
fn init_plusplus(view: &GroupedView, order: &[usize], n: usize, seed: u64) -> Matrix {
    let g = view.g();
    let k = view.len();
    let mut rng = det_rng(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    chosen.push(order[rng.gen_range(0..k)]);

    // d2[p] tracks, per canonical position, the distance to the nearest
    // chosen centroid so far.
    let mut d2: Vec<f64> = order
        .iter()
        .map(|&i| dist2_f32(view.vector(i), view.vector(chosen[0])) as f64)
        .collect();

    while chosen.len() < n {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // Every vector coincides with a chosen centroid; fill the rest
            // deterministically (duplicates collapse to empty clusters).
            let mut cycle = 0usize;
            while chosen.len() < n {
                chosen.push(order[cycle % k]);
                cycle += 1;
            }
            break;
        }
        let r = rng.gen::<f64>() * total;
        let mut cum = 0.0f64;
        let mut pick = None;
        for (p, &w) in d2.iter().enumerate() {
            cum += w;
            if cum > r && w > 0.0 {
                pick = Some(p);
                break;
            }
        }
        let pick = pick.unwrap_or_else(|| {
            // Float cumsum fell short of total; take the last weighted slot.
            d2.iter().rposition(|&w| w > 0.0).expect("total > 0")
        });
        let idx = order[pick];
        chosen.push(idx);
        for (p, &i) in order.iter().enumerate() {
            let d = dist2_f32(view.vector(i), view.vector(idx)) as f64;
            if d < d2[p] {
                d2[p] = d;
            }
        }
    }

    let mut centroids = Matrix::zeros(n, g);
    for (c, &i) in chosen.iter().enumerate() {
        for (j, x) in view.vector(i).iter().enumerate() {
            centroids.set(c, j, *x);
        }
    }
    centroids
}

struct Run {
    centroids: Matrix,
    assignments: Vec<usize>,
    objective: f64,
    trace: Vec<f64>,
}

fn run_once(view: &GroupedView, order: &[usize], cfg: &KMeansConfig, seed: u64) -> Run {
    let n = cfg.n_clusters;
    let mut centroids = init_plusplus(view, order, n, seed);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for _ in 0..cfg.iterations {
        let assignments = assign_nearest(view, &centroids);
        trace.push(objective_in_order(view, &centroids, &assignments, order));
        centroids = means_with_repair(view, &assignments, n, order);
    }
    let assignments = assign_nearest(view, &centroids);
    let objective = objective_in_order(view, &centroids, &assignments, order);
    trace.push(objective);
    Run {
        centroids,
        assignments,
        objective,
        trace,
    }
}

fn objective_in_order(
    view: &GroupedView,
    centroids: &Matrix,
    assignments: &[usize],
    order: &[usize],
) -> f64 {
    let mut acc = 0.0f64;
    for &i in order {
        acc += dist2_f64(view.vector(i), centroids.row(assignments[i]));
    }
    acc
}

/// Cluster the grouped vectors; with `restarts > 1` the lowest-objective
/// run wins (ties keep the earliest restart). Empty clusters are dropped
/// from the returned codebook and assignments are remapped accordingly.
pub fn kmeans(view: &GroupedView, cfg: &KMeansConfig) -> Result<KMeansResult> {
    cfg.validate()?;
    if view.is_empty() {
        return Err(invalid("kmeans needs at least one vector"));
    }
    let order = canonical_order(view);

    let mut best: Option<Run> = None;
    for r in 0..cfg.restarts {
        let run = run_once(view, &order, cfg, child_seed(cfg.seed, r as u64));
        match &best {
            Some(b) if run.objective >= b.objective => {}
            _ => best = Some(run),
        }
    }
    let run = best.expect("restarts >= 1");

    // Shrink: drop empty clusters, remap assignments onto 0..n_effective.
    let n = cfg.n_clusters;
    let mut counts = vec![0usize; n];
    for &a in &run.assignments {
        counts[a] += 1;
    }
    let mut remap = vec![u16::MAX; n];
    let mut kept = 0u16;
    for c in 0..n {
        if counts[c] > 0 {
            remap[c] = kept;
            kept += 1;
        }
    }
    let n_effective = kept as usize;
    let g = view.g();
    let mut centroids = Matrix::zeros(n_effective, g);
    for c in 0..n {
        if counts[c] > 0 {
            let dst = remap[c] as usize;
            for j in 0..g {
                centroids.set(dst, j, run.centroids.get(c, j));
            }
        }
    }
    let assignments: Vec<u16> = run.assignments.iter().map(|&a| remap[a]).collect();

    Ok(KMeansResult {
        centroids,
        assignments,
        objective: run.objective,
        n_effective,
        objective_trace: run.trace,
    })
}
