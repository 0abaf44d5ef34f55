//! Tumor heterogeneity scenarios from a branching process.
//!
//! A tumor grows from one non-resistant cell. Each generation every cell
//! divides; a non-resistant division yields a resistant daughter of type `q`
//! with probability `alpha_q`. Final populations of many replications are
//! clustered with k-means into a [`ScenarioSet`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::domain::{Scenario, ScenarioSet};
use crate::error::{Error, Result};

const MAX_GENERATIONS: u32 = 63;
const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchingConfig {
    pub generations: u32,
    pub replications: usize,
    /// Mutation probability into each resistant type.
    pub mutation_probs: Vec<f64>,
    pub seed: u64,
}

impl Default for BranchingConfig {
    fn default() -> Self {
        BranchingConfig {
            generations: 30,
            replications: 10_000,
            mutation_probs: vec![0.005; 3],
            seed: 2021,
        }
    }
}

impl BranchingConfig {
    /// Probability that a non-resistant division stays non-resistant.
    pub fn alpha_00(&self) -> f64 {
        1.0 - self.mutation_probs.iter().sum::<f64>()
    }

    /// Number of cell types including the non-resistant one.
    pub fn n_types(&self) -> usize {
        self.mutation_probs.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.generations > MAX_GENERATIONS {
            return Err(Error::invariant(
                "generations",
                format!("{} generations overflow 64-bit counts (max {MAX_GENERATIONS})", self.generations),
            ));
        }
        if self.replications == 0 {
            return Err(Error::invariant("replications", "must be positive"));
        }
        if self.mutation_probs.iter().any(|&a| !(0.0..1.0).contains(&a)) {
            return Err(Error::invariant("mutation_probs", "each must lie in [0, 1)"));
        }
        if self.alpha_00() <= 0.0 {
            return Err(Error::invariant("mutation_probs", "must sum to less than 1"));
        }
        Ok(())
    }
}

/// One replication: counts per type after `generations` divisions.
fn replicate(config: &BranchingConfig, rep: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(rep as u64);
    let mut pop = vec![0u64; config.n_types()];
    pop[0] = 1;
    for _ in 0..config.generations {
        let trials = pop[0];
        let mut remaining = trials;
        let mut mass = 1.0;
        for (q, &a) in config.mutation_probs.iter().enumerate() {
            let x = if remaining == 0 || a == 0.0 {
                0
            } else {
                let p = (a / mass).clamp(0.0, 1.0);
                Binomial::new(remaining, p).expect("valid binomial").sample(&mut rng)
            };
            remaining -= x;
            mass -= a;
            pop[q + 1] = 2 * pop[q + 1] + x;
        }
        pop[0] += remaining;
    }
    pop
}

/// Final populations per replication, `[rep][type]` with type 0 non-resistant.
/// Seed-deterministic regardless of thread count.
pub fn simulate_branching(config: &BranchingConfig) -> Result<Vec<Vec<u64>>> {
    config.validate()?;
    Ok((0..config.replications)
        .into_par_iter()
        .map(|rep| replicate(config, rep))
        .collect())
}

/// Closed-form expected populations after `t` generations.
pub fn expected_populations(config: &BranchingConfig, t: u32) -> Vec<f64> {
    let b = config.alpha_00() + 1.0;
    let mut out = vec![b.powi(t as i32)];
    for &a in &config.mutation_probs {
        // sum_{k<t} 2^k a b^(t-1-k)
        let v = if (2.0 - b).abs() < 1e-15 {
            a * t as f64 * 2f64.powi(t as i32 - 1)
        } else {
            a * (2f64.powi(t as i32) - b.powi(t as i32)) / (2.0 - b)
        };
        out.push(v);
    }
    out
}

/// Writes the replication matrix as CSV with one column per cell type.
pub fn write_populations_csv<W: std::io::Write>(w: W, labels: &[String], pops: &[Vec<u64>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(labels)?;
    for row in pops {
        wr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Studentize log-populations.
    Log,
    /// Studentize raw counts; centroids are mapped back through `ln`.
    #[default]
    Raw,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterOptions {
    pub k: usize,
    pub seed: u64,
    pub normalization: Normalization,
    /// Independent k-means++ starts; the lowest inertia wins.
    pub restarts: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 2021,
            normalization: Normalization::default(),
            restarts: 10,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.gen_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.gen::<f64>() * total;
        let mut pick = data.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        let c = data[pick].clone();
        for (i, p) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd iterations; returns assignments and final inertia.
fn lloyd(data: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let dim = data[0].len();
    let mut prev = f64::INFINITY;
    let mut assign = vec![0; data.len()];
    for iter in 0..KMEANS_MAX_ITER {
        let inertia: f64 = data
            .iter()
            .zip(assign.iter_mut())
            .map(|(p, a)| {
                let (c, d) = nearest(p, &centers);
                *a = c;
                d
            })
            .sum();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in data.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                for (x, s) in center.iter_mut().zip(&sums[c]) {
                    *x = s / counts[c] as f64;
                }
            }
        }
        if prev.is_finite() && (prev - inertia).abs() <= KMEANS_TOL * prev.max(f64::MIN_POSITIVE) {
            log::debug!("k-means converged after {} iterations", iter + 1);
            break;
        }
        if inertia == 0.0 {
            break;
        }
        prev = inertia;
    }
    let mut inertia = 0.0;
    for (p, a) in data.iter().zip(assign.iter_mut()) {
        let (c, d) = nearest(p, &centers);
        *a = c;
        inertia += d;
    }
    (assign, inertia)
}

/// Clusters replications into at most `k` scenarios. Counts below one are
/// clamped to one before taking logs.
pub fn cluster_scenarios(pops: &[Vec<u64>], labels: Vec<String>, opts: ClusterOptions) -> Result<ScenarioSet> {
    let n = pops.len();
    if opts.k == 0 || opts.k > n {
        return Err(Error::invariant("k", format!("must lie in 1..={n}, got {}", opts.k)));
    }
    let dim = labels.len();
    if pops.iter().any(|r| r.len() != dim) {
        return Err(Error::LengthMismatch {
            what: "population row",
            expected: dim,
            actual: pops.iter().map(|r| r.len()).find(|&l| l != dim).unwrap_or(0),
        });
    }
    let logs: Vec<Vec<f64>> = pops
        .iter()
        .map(|r| r.iter().map(|&c| (c.max(1) as f64).ln()).collect())
        .collect();
    let base: Vec<Vec<f64>> = match opts.normalization {
        Normalization::Log => logs.clone(),
        Normalization::Raw => pops.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect(),
    };
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for j in 0..dim {
        mean[j] = base.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        if n > 1 {
            let var = base.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64;
            sd[j] = var.sqrt();
        }
    }
    let z: Vec<Vec<f64>> = base
        .iter()
        .map(|r| {
            (0..dim)
                .map(|j| if sd[j] > 0.0 { (r[j] - mean[j]) / sd[j] } else { r[j] - mean[j] })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..opts.restarts.max(1) {
        let (assign, inertia) = lloyd(&z, kmeans_pp(&z, opts.k, &mut rng));
        if best.as_ref().map_or(true, |b| inertia < b.1) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one start");
    let mut used = vec![usize::MAX; opts.k];
    let mut next = 0;
    let assign: Vec<usize> = assign
        .into_iter()
        .map(|a| {
            if used[a] == usize::MAX {
                used[a] = next;
                next += 1;
            }
            used[a]
        })
        .collect();
    let n_clusters = assign.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_clusters];
    let mut sums = vec![vec![0.0; dim]; n_clusters];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for j in 0..dim {
            sums[a][j] += base[i][j];
        }
    }
    let scenarios = (0..n_clusters)
        .filter(|&c| counts[c] > 0)
        .map(|c| {
            let centroid = sums[c].iter().map(|s| s / counts[c] as f64);
            let log_pops = match opts.normalization {
                Normalization::Log => centroid.collect(),
                Normalization::Raw => centroid.map(|v| v.max(1.0).ln()).collect(),
            };
            Scenario {
                log_pops,
                prob: counts[c] as f64 / n as f64,
            }
        })
        .collect();
    ScenarioSet::new(labels, scenarios)
}

/// Default type labels: non-resistant followed by one per drug.
pub fn default_labels(drugs: &[&str]) -> Vec<String> {
    std::iter::once("non-resistant".to_string())
        .chain(drugs.iter().map(|d| format!("{d}-resistant")))
        .collect()
}
