use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pool::ClassPool;
use super::rng::RngStream;
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};

/// Shape of an episode: `ways`-way, `shots`-shot, with `val_per_class`
/// validation instances per class. Support instances come from
/// `source_domain` and validation instances from `target_domain`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub val_per_class: usize,
    #[serde(default)]
    pub source_domain: usize,
    #[serde(default)]
    pub target_domain: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, val_per_class: usize) -> Self {
        Self {
            ways,
            shots,
            val_per_class,
            source_domain: 0,
            target_domain: 0,
        }
    }

    pub fn with_domains(mut self, source: usize, target: usize) -> Self {
        self.source_domain = source;
        self.target_domain = target;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.val_per_class < 1 {
            return Err(invalid(format!(
                "episode spec needs ways >= 2, shots >= 1, val_per_class >= 1 (got {}/{}/{})",
                self.ways, self.shots, self.val_per_class
            )));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.shots + self.val_per_class
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInstance {
    pub features: Vec<f64>,
    /// Episode label in `0..ways`.
    pub label: usize,
    pub pool_class: usize,
    pub domain: usize,
    pub slot: usize,
}

impl LabeledInstance {
    /// Identity of the underlying pool instance.
    pub fn key(&self) -> (usize, usize, usize) {
        (self.pool_class, self.domain, self.slot)
    }
}

/// One meta labeled example: a support set and a validation set over `ways`
/// classes. `classes[label]` is the pool class id behind each episode label;
/// labels follow ascending pool class id.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaExample {
    pub ways: usize,
    pub support: Vec<LabeledInstance>,
    pub query: Vec<LabeledInstance>,
    pub classes: Vec<usize>,
}

fn matrix_of(items: &[LabeledInstance]) -> Result<Tensor> {
    let dim = items.first().map_or(0, |i| i.features.len());
    let mut data = Vec::with_capacity(items.len() * dim);
    for it in items {
        if it.features.len() != dim {
            return Err(invalid("ragged episode features"));
        }
        data.extend_from_slice(&it.features);
    }
    Tensor::matrix(items.len(), dim, data)
}

impl MetaExample {
    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, |i| i.features.len())
    }

    pub fn support_matrix(&self) -> Result<Tensor> {
        matrix_of(&self.support)
    }

    pub fn query_matrix(&self) -> Result<Tensor> {
        matrix_of(&self.query)
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }

    /// Checks the structural invariants: labels in range, every label present
    /// in both sets with equal counts per set, and support/validation disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.classes.len() != self.ways {
            return Err(invalid("episode must have at least two classes and one pool class per label"));
        }
        let dim = self.dim();
        let mut support_counts = vec![0usize; self.ways];
        let mut query_counts = vec![0usize; self.ways];
        for (items, counts) in [(&self.support, &mut support_counts), (&self.query, &mut query_counts)] {
            for it in items {
                if it.label >= self.ways {
                    return Err(invalid(format!("label {} out of range for {}-way episode", it.label, self.ways)));
                }
                if it.features.len() != dim || dim == 0 {
                    return Err(invalid("episode features must share a positive dimension"));
                }
                counts[it.label] += 1;
            }
        }
        if support_counts.iter().any(|&c| c == 0 || c != support_counts[0]) {
            return Err(invalid(format!("unbalanced support set {support_counts:?}")));
        }
        if query_counts.iter().any(|&c| c == 0 || c != query_counts[0]) {
            return Err(invalid(format!("unbalanced validation set {query_counts:?}")));
        }
        let support_keys: std::collections::HashSet<_> = self.support.iter().map(LabeledInstance::key).collect();
        if self.query.iter().any(|q| support_keys.contains(&q.key())) {
            return Err(invalid("support and validation sets share an instance"));
        }
        Ok(())
    }
}

/// Anything episodes can be drawn from.
pub trait EpisodeSource: Sync {
    fn sample(&self, spec: &EpisodeSpec, rng: &RngStream) -> Result<MetaExample>;
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
}

impl EpisodeSource for ClassPool {
    fn sample(&self, spec: &EpisodeSpec, rng: &RngStream) -> Result<MetaExample> {
        sample_episode(self, spec, rng, None)
    }

    fn dim(&self) -> usize {
        ClassPool::dim(self)
    }

    fn num_classes(&self) -> usize {
        ClassPool::num_classes(self)
    }
}

/// Samples one episode: `ways` distinct classes uniformly without
/// replacement, then `shots + val_per_class` aligned slots per class without
/// replacement. The first `shots` slots feed the support set from the source
/// domain, the rest feed the validation set from the target domain. With
/// equal domains this is the ordinary same-domain sampler.
pub fn sample_episode(pool: &ClassPool, spec: &EpisodeSpec, rng: &RngStream, restrict_sub: Option<usize>) -> Result<MetaExample> {
    spec.validate()?;
    if spec.source_domain >= pool.num_domains() || spec.target_domain >= pool.num_domains() {
        return Err(invalid(format!(
            "domains ({}, {}) not present in a {}-domain pool",
            spec.source_domain,
            spec.target_domain,
            pool.num_domains()
        )));
    }
    let candidates: Vec<usize> = (0..pool.num_classes())
        .filter(|&c| restrict_sub.is_none_or(|s| pool.sub_of(c).unwrap_or(0) == s))
        .collect();
    if candidates.len() < spec.ways {
        return Err(Error::Insufficient(format!(
            "{}-way episode needs {} classes, {} available{}",
            spec.ways,
            spec.ways,
            candidates.len(),
            restrict_sub.map_or(String::new(), |s| format!(" in sub-distribution {s}"))
        )));
    }
    let available = |c: usize| {
        let class = pool.class(c);
        class.in_domain(spec.source_domain).len().min(class.in_domain(spec.target_domain).len())
    };
    let need = spec.per_class();
    if let Some(&short) = candidates.iter().find(|&&c| available(c) < need) {
        return Err(Error::Insufficient(format!(
            "class {short} has {} instances in domains ({}, {}), episode needs {need} per class",
            available(short),
            spec.source_domain,
            spec.target_domain
        )));
    }

    let mut r = rng.rng();
    let mut chosen: Vec<usize> = index::sample(&mut r, candidates.len(), spec.ways)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();

    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.val_per_class);
    for (label, &c) in chosen.iter().enumerate() {
        let slots = index::sample(&mut r, available(c), need).into_vec();
        let class = pool.class(c);
        for (k, &slot) in slots.iter().enumerate() {
            let (domain, dst) = if k < spec.shots {
                (spec.source_domain, &mut support)
            } else {
                (spec.target_domain, &mut query)
            };
            dst.push(LabeledInstance {
                features: class.in_domain(domain)[slot].clone(),
                label,
                pool_class: c,
                domain,
                slot,
            });
        }
    }
    Ok(MetaExample {
        ways: spec.ways,
        support,
        query,
        classes: chosen,
    })
}

/// Heterogeneous-pool sampler: picks a sub-distribution uniformly, then a
/// task restricted to it.
#[derive(Clone, Copy, Debug)]
pub struct PerSubSampler<'a> {
    pub pool: &'a ClassPool,
}

impl EpisodeSource for PerSubSampler<'_> {
    fn sample(&self, spec: &EpisodeSpec, rng: &RngStream) -> Result<MetaExample> {
        let sub = rng.child("sub").rng().random_range(0..self.pool.num_subs());
        sample_episode(self.pool, spec, rng, Some(sub))
    }

    fn dim(&self) -> usize {
        self.pool.dim()
    }

    fn num_classes(&self) -> usize {
        self.pool.num_classes()
    }
}
