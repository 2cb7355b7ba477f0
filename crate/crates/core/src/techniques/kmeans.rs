use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::metamodels::Backbone;
use crate::taskgen::{sample_episode, ClassPool, EpisodeSource, EpisodeSpec, MetaExample, PoolClass, PoolMeta, RngStream};

pub const MAX_LLOYD_ITERS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids(points: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    sums
}

/// Moves the point farthest from its own centroid (among clusters of size
/// above one, lowest index on ties) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], assign: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&a| counts[a] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let cents = centroids(points, assign, k);
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &cents[assign[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("n >= k guarantees a donor cluster");
        assign[i] = empty;
    }
}

/// Within-cluster sum of squared distances to the cluster means.
pub fn kmeans_objective(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let cents = centroids(points, assign, k);
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &cents[a])).sum()
}

/// Lloyd's K-means from a random-partition start. Every cluster ends
/// non-empty; the result is a fixed point of the assignment step unless the
/// iteration cap is hit. Cluster ids are renumbered by first appearance.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &RngStream) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("K-means needs K >= 1"));
    }
    if points.len() < k {
        return Err(Error::Insufficient(format!("K-means with K = {k} on {} points", points.len())));
    }
    let mut r = rng.rng();
    let mut assign: Vec<usize> = (0..points.len()).map(|_| r.random_range(0..k)).collect();
    repair_empty(points, &mut assign, k);
    for _ in 0..MAX_LLOYD_ITERS {
        let cents = centroids(points, &assign, k);
        let mut next: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut bd = sq_dist(p, &cents[0]);
                for (j, c) in cents.iter().enumerate().skip(1) {
                    let d = sq_dist(p, c);
                    if d < bd {
                        best = j;
                        bd = d;
                    }
                }
                best
            })
            .collect();
        repair_empty(points, &mut next, k);
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(canonical(&assign, k))
}

fn canonical(assign: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    assign
        .iter()
        .map(|&a| {
            if map[a] == usize::MAX {
                map[a] = next;
                next += 1;
            }
            map[a]
        })
        .collect()
}

/// One augmented pool per K-means trial. Episodes first pick a trial
/// uniformly, then sample from that trial's pool.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPool {
    pub trials: Vec<ClassPool>,
}

impl AugmentedPool {
    /// Drops trials in which some sub-class has fewer than `min_instances`
    /// instances (K-means can leave an outlier alone in a cluster); errors if
    /// no trial survives. Returns the number of trials dropped.
    pub fn retain_trials(&mut self, min_instances: usize) -> Result<usize> {
        let before = self.trials.len();
        self.trials.retain(|t| t.classes().iter().all(|c| c.len() >= min_instances));
        if self.trials.is_empty() {
            return Err(Error::Insufficient(format!(
                "every K-means trial has a sub-class with fewer than {min_instances} instances"
            )));
        }
        Ok(before - self.trials.len())
    }
}

impl EpisodeSource for AugmentedPool {
    fn sample(&self, spec: &EpisodeSpec, rng: &RngStream) -> Result<MetaExample> {
        let t = rng.child("trial").rng().random_range(0..self.trials.len());
        sample_episode(&self.trials[t], spec, rng, None)
    }

    fn dim(&self) -> usize {
        self.trials[0].dim()
    }

    fn num_classes(&self) -> usize {
        self.trials[0].num_classes()
    }
}

type Embed<'a> = &'a dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>;

fn split_class(class: &PoolClass, clusters: &[usize], k: usize, cents: &[Vec<f64>], mapped: Embed, d0: usize) -> Result<Vec<PoolClass>> {
    let mut out = vec![PoolClass { domains: vec![Vec::new(); class.domains.len()] }; k];
    for (d, insts) in class.domains.iter().enumerate() {
        let extra: Vec<Vec<f64>> = if d == d0 || insts.len() <= clusters.len() {
            Vec::new()
        } else {
            mapped(&insts[clusters.len()..])?
        };
        for (i, x) in insts.iter().enumerate() {
            let j = if i < clusters.len() {
                clusters[i]
            } else {
                let e = &extra[i - clusters.len()];
                (0..k).min_by(|&a, &b| sq_dist(e, &cents[a]).total_cmp(&sq_dist(e, &cents[b]))).unwrap_or(0)
            };
            out[j].domains[d].push(x.clone());
        }
    }
    Ok(out)
}

/// Splits every class into `k` sub-classes by K-means on its instances
/// (optionally in the embedding of `feature_map`), once per trial on stream
/// `rng.index(trial)`. Class `c`, cluster `j` becomes class `c * k + j`.
/// Clustering uses the class's first non-empty domain; instances at the same
/// slot in other domains follow it.
pub fn kmeans_augment_pool(
    pool: &ClassPool,
    k: usize,
    trials: usize,
    feature_map: Option<&Backbone>,
    rng: &RngStream,
) -> Result<AugmentedPool> {
    if trials == 0 {
        return Err(invalid("augmentation needs at least one trial"));
    }
    let mapped = |xs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        match feature_map {
            None => Ok(xs.to_vec()),
            Some(b) => Ok(b.forward(&Tensor::from_rows(xs)?)?.to_rows()),
        }
    };
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_rng = rng.index(t as u64);
        let mut classes = Vec::with_capacity(pool.num_classes() * k);
        let mut origin = Vec::with_capacity(pool.num_classes() * k);
        let mut subs = pool.meta().subs.as_ref().map(|_| Vec::new());
        for (c, class) in pool.classes().iter().enumerate() {
            let d0 = class.domains.iter().position(|d| !d.is_empty()).unwrap_or(0);
            let base = class.in_domain(d0);
            if base.len() < k {
                return Err(Error::Insufficient(format!(
                    "class {c} has {} instances, K-means needs K = {k}",
                    base.len()
                )));
            }
            let feats = mapped(base)?;
            let clusters = kmeans(&feats, k, &trial_rng.index(c as u64))?;
            let cents = centroids(&feats, &clusters, k);
            classes.extend(split_class(class, &clusters, k, &cents, &mapped, d0)?);
            origin.extend(std::iter::repeat_n(pool.meta().origin[c], k));
            if let Some(s) = subs.as_mut() {
                s.extend(std::iter::repeat_n(pool.sub_of(c).unwrap_or(0), k));
            }
        }
        let meta = PoolMeta {
            generator: pool.meta().generator.clone(),
            seed: pool.meta().seed,
            subs,
            origin,
        };
        out.push(ClassPool::new(pool.dim(), pool.num_domains(), classes, meta)?);
    }
    Ok(AugmentedPool { trials: out })
}
