use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use crate::error::{invalid, Error, Result};

pub const POOL_HEADER: &str = "metaepi-pool v1";

/// One feature vector with its class and domain tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub domain_id: usize,
}

/// Instances of one class, partitioned by domain. Within a class, the
/// instance at position `slot` of each domain list descends from the same
/// underlying draw when the pool was built by [`make_two_domain_pool`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolClass {
    pub domains: Vec<Vec<Vec<f64>>>,
}

impl PoolClass {
    pub fn len(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn in_domain(&self, domain: usize) -> &[Vec<f64>] {
        self.domains.get(domain).map_or(&[], |d| d.as_slice())
    }

    /// Number of aligned slots: the size of the smallest non-empty domain.
    pub fn slots(&self) -> usize {
        self.domains
            .iter()
            .map(Vec::len)
            .filter(|&n| n > 0)
            .min()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolMeta {
    pub generator: String,
    pub seed: u64,
    /// Sub-distribution tag per class, for heterogeneous pools.
    pub subs: Option<Vec<usize>>,
    /// Class id in the pool this one was derived from, per class.
    pub origin: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPool {
    dim: usize,
    num_domains: usize,
    classes: Vec<PoolClass>,
    meta: PoolMeta,
}

impl ClassPool {
    /// Builds a pool, checking dimensions, finiteness and non-empty classes.
    pub fn new(dim: usize, num_domains: usize, classes: Vec<PoolClass>, mut meta: PoolMeta) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be at least 1"));
        }
        if num_domains == 0 {
            return Err(invalid("a pool needs at least one domain"));
        }
        for (c, class) in classes.iter().enumerate() {
            if class.is_empty() {
                return Err(invalid(format!("class {c} has no instances")));
            }
            if class.domains.len() != num_domains {
                return Err(invalid(format!(
                    "class {c} has {} domain partitions, pool declares {num_domains}",
                    class.domains.len()
                )));
            }
            for x in class.domains.iter().flatten() {
                if x.len() != dim {
                    return Err(invalid(format!("class {c}: instance of dimension {} in a dim-{dim} pool", x.len())));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("pool class {c}")));
                }
            }
        }
        if meta.origin.is_empty() {
            meta.origin = (0..classes.len()).collect();
        }
        if meta.origin.len() != classes.len() {
            return Err(invalid("origin metadata must have one entry per class"));
        }
        if let Some(subs) = &meta.subs {
            if subs.len() != classes.len() {
                return Err(invalid("sub-distribution tags must have one entry per class"));
            }
        }
        Ok(Self {
            dim,
            num_domains,
            classes,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn classes(&self) -> &[PoolClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> &PoolClass {
        &self.classes[id]
    }

    pub fn meta(&self) -> &PoolMeta {
        &self.meta
    }

    pub fn num_instances(&self) -> usize {
        self.classes.iter().map(PoolClass::len).sum()
    }

    pub fn sub_of(&self, class: usize) -> Option<usize> {
        self.meta.subs.as_ref().map(|s| s[class])
    }

    pub fn num_subs(&self) -> usize {
        self.meta
            .subs
            .as_ref()
            .and_then(|s| s.iter().max().map(|m| m + 1))
            .unwrap_or(1)
    }

    /// Iterates instances in (class, domain, slot) order.
    pub fn instances(&self) -> impl Iterator<Item = Instance> + '_ {
        self.classes.iter().enumerate().flat_map(|(c, class)| {
            class.domains.iter().enumerate().flat_map(move |(d, xs)| {
                xs.iter().map(move |x| Instance {
                    features: x.clone(),
                    class_id: c,
                    domain_id: d,
                })
            })
        })
    }

    /// Splits consecutive class ranges into separate pools (e.g. meta-train,
    /// meta-val and meta-test pools of disjoint classes).
    pub fn split_classes(&self, sizes: &[usize]) -> Result<Vec<ClassPool>> {
        let total: usize = sizes.iter().sum();
        if total > self.num_classes() {
            return Err(Error::Insufficient(format!(
                "split needs {total} classes, pool has {}",
                self.num_classes()
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            let ids: Vec<usize> = (start..start + n).collect();
            out.push(self.select_classes(&ids, None)?);
            start += n;
        }
        Ok(out)
    }

    /// Pool of the given classes (re-densified in the given order), optionally
    /// keeping only the listed slots of each class.
    pub(crate) fn select_classes(&self, ids: &[usize], slots: Option<&[Vec<usize>]>) -> Result<ClassPool> {
        let classes = ids
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let src = &self.classes[c];
                match slots {
                    None => src.clone(),
                    Some(keep) => PoolClass {
                        domains: src
                            .domains
                            .iter()
                            .map(|xs| keep[k].iter().filter_map(|&s| xs.get(s).cloned()).collect())
                            .collect(),
                    },
                }
            })
            .collect();
        let meta = PoolMeta {
            generator: self.meta.generator.clone(),
            seed: self.meta.seed,
            subs: self.meta.subs.as_ref().map(|s| ids.iter().map(|&c| s[c]).collect()),
            origin: ids.iter().map(|&c| self.meta.origin[c]).collect(),
        };
        ClassPool::new(self.dim, self.num_domains, classes, meta)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{POOL_HEADER} dim={} classes={} domains={}\n",
            self.dim,
            self.num_classes(),
            self.num_domains
        );
        let _ = writeln!(out, "# generator={} seed={}", self.meta.generator, self.meta.seed);
        let _ = writeln!(out, "# origin={}", join(&self.meta.origin));
        if let Some(subs) = &self.meta.subs {
            let _ = writeln!(out, "# subs={}", join(subs));
        }
        for inst in self.instances() {
            let _ = write!(out, "{},{}", inst.class_id, inst.domain_id);
            for v in &inst.features {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty pool file".into(),
        })?;
        let fields = parse_header(header, POOL_HEADER, 1)?;
        let get = |key: &str| -> Result<usize> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .ok_or(Error::Parse {
                    line: 1,
                    msg: format!("missing header field {key}"),
                })?
                .1
                .parse()
                .map_err(|e| Error::Parse {
                    line: 1,
                    msg: format!("{key}: {e}"),
                })
        };
        let (dim, num_classes, num_domains) = (get("dim")?, get("classes")?, get("domains")?);
        let mut classes = vec![
            PoolClass {
                domains: vec![Vec::new(); num_domains]
            };
            num_classes
        ];
        let mut meta = PoolMeta::default();
        for (i, line) in lines {
            let lineno = i + 1;
            let perr = |msg: String| Error::Parse { line: lineno, msg };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for (k, v) in comment.split_whitespace().filter_map(|kv| kv.split_once('=')) {
                    match k {
                        "generator" => meta.generator = v.to_string(),
                        "seed" => meta.seed = v.parse().map_err(|e| perr(format!("seed: {e}")))?,
                        "origin" => meta.origin = parse_list(v).map_err(perr)?,
                        "subs" => meta.subs = Some(parse_list(v).map_err(perr)?),
                        _ => {}
                    }
                }
                continue;
            }
            let mut parts = line.split(',');
            let class: usize = parts
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| perr(format!("class id: {e}")))?;
            let domain: usize = parts
                .next()
                .ok_or_else(|| perr("missing domain id".into()))?
                .parse()
                .map_err(|e| perr(format!("domain id: {e}")))?;
            let features = parts
                .map(|p| p.parse::<f64>().map_err(|e| perr(format!("feature: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if features.len() != dim {
                return Err(perr(format!("expected {dim} features, got {}", features.len())));
            }
            if class >= num_classes || domain >= num_domains {
                return Err(perr(format!("class {class} / domain {domain} out of range")));
            }
            classes[class].domains[domain].push(features);
        }
        ClassPool::new(dim, num_domains, classes, meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| x.parse().map_err(|e| format!("{x}: {e}")))
        .collect()
}

/// Checks `<magic> v<version> k=v ...` and returns the key/value pairs.
pub(crate) fn parse_header(line: &str, magic_and_version: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    let (magic, version) = magic_and_version.split_once(' ').expect("magic has a version");
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(magic) {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected `{magic}` header"),
        });
    }
    match tokens.next() {
        Some(v) if v == version => {}
        Some(v) => return Err(Error::Version(v.to_string())),
        None => return Err(Error::Version(String::new())),
    }
    Ok(tokens
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// Parameters of the isotropic Gaussian class generator.
///
/// The last `nuisance_dims` coordinates carry no class signal: their class
/// means are zero and their within-class noise has scale `nuisance_spread`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPoolParams {
    pub num_classes: usize,
    pub dim: usize,
    pub instances_per_class: usize,
    pub class_spread: f64,
    pub within_spread: f64,
    #[serde(default)]
    pub nuisance_dims: usize,
    #[serde(default)]
    pub nuisance_spread: f64,
}

impl GaussianPoolParams {
    pub fn new(num_classes: usize, dim: usize, instances_per_class: usize, class_spread: f64, within_spread: f64) -> Self {
        Self {
            num_classes,
            dim,
            instances_per_class,
            class_spread,
            within_spread,
            nuisance_dims: 0,
            nuisance_spread: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("dim must be at least 1"));
        }
        if self.num_classes == 0 || self.instances_per_class == 0 {
            return Err(invalid("class and instance counts must be at least 1"));
        }
        if !(self.class_spread > 0.0) || !(self.within_spread >= 0.0) {
            return Err(invalid("class_spread must be positive and within_spread non-negative"));
        }
        if self.nuisance_dims >= self.dim {
            return Err(invalid("nuisance_dims must leave at least one informative dimension"));
        }
        if self.nuisance_dims > 0 && !(self.nuisance_spread >= 0.0) {
            return Err(invalid("nuisance_spread must be non-negative"));
        }
        Ok(())
    }

    fn informative(&self) -> usize {
        self.dim - self.nuisance_dims
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Draws class means and instances. `offset` shifts every class mean,
/// `noise_scale` rescales the within-class noise per dimension.
fn gaussian_classes(
    p: &GaussianPoolParams,
    rng: &RngStream,
    offset: Option<&[f64]>,
    noise_scale: Option<&[f64]>,
) -> Vec<PoolClass> {
    let informative = p.informative();
    let mut mean_rng = rng.child("means").rng();
    (0..p.num_classes)
        .map(|c| {
            let mut mean: Vec<f64> = (0..p.dim)
                .map(|d| if d < informative { p.class_spread * normal(&mut mean_rng) } else { 0.0 })
                .collect();
            if let Some(off) = offset {
                mean.iter_mut().zip(off).for_each(|(m, o)| *m += o);
            }
            let mut inst_rng = rng.child("instances").index(c as u64).rng();
            let xs = (0..p.instances_per_class)
                .map(|_| {
                    (0..p.dim)
                        .map(|d| {
                            let spread = if d < informative { p.within_spread } else { p.nuisance_spread };
                            let scale = noise_scale.map_or(1.0, |s| s[d]);
                            mean[d] + spread * scale * normal(&mut inst_rng)
                        })
                        .collect()
                })
                .collect();
            PoolClass { domains: vec![xs] }
        })
        .collect()
}

/// Classes with isotropic Gaussian means (scale `class_spread`) and isotropic
/// within-class noise (scale `within_spread`).
pub fn make_gaussian_pool(params: &GaussianPoolParams, rng: &RngStream) -> Result<ClassPool> {
    params.validate()?;
    let classes = gaussian_classes(params, rng, None, None);
    ClassPool::new(
        params.dim,
        1,
        classes,
        PoolMeta {
            generator: "gaussian".into(),
            seed: rng.seed(),
            ..PoolMeta::default()
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneousPoolParams {
    /// Per sub-distribution class generator; `num_classes` is classes per sub.
    pub base: GaussianPoolParams,
    pub num_subs: usize,
    /// Scale of each sub-distribution's mean offset.
    pub offset_scale: f64,
    /// Log-scale spread of the per-dimension noise scales of each sub.
    pub noise_scale_spread: f64,
}

/// Pool whose classes come from several sub-distributions, each with its own
/// mean offset and per-dimension noise scale. Sub 0 is the unshifted,
/// unit-scale anchor, so a single sub-distribution reproduces
/// [`make_gaussian_pool`] on the stream `rng.index(0)`.
pub fn make_heterogeneous_pool(params: &HeterogeneousPoolParams, rng: &RngStream) -> Result<ClassPool> {
    params.base.validate()?;
    if params.num_subs < 1 {
        return Err(invalid("at least one sub-distribution is required"));
    }
    if !(params.offset_scale >= 0.0) || !(params.noise_scale_spread >= 0.0) {
        return Err(invalid("offset_scale and noise_scale_spread must be non-negative"));
    }
    let d = params.base.dim;
    let mut classes = Vec::new();
    let mut subs = Vec::new();
    for s in 0..params.num_subs {
        let stream = rng.index(s as u64);
        let (offset, scale) = if s == 0 {
            (None, None)
        } else {
            let mut sig = rng.child("signature").index(s as u64).rng();
            let offset: Vec<f64> = (0..d).map(|_| params.offset_scale * normal(&mut sig)).collect();
            let scale: Vec<f64> = (0..d)
                .map(|_| (params.noise_scale_spread * normal(&mut sig)).exp())
                .collect();
            (Some(offset), Some(scale))
        };
        let sub_classes = gaussian_classes(&params.base, &stream, offset.as_deref(), scale.as_deref());
        subs.extend(std::iter::repeat_n(s, sub_classes.len()));
        classes.extend(sub_classes);
    }
    ClassPool::new(
        d,
        1,
        classes,
        PoolMeta {
            generator: "heterogeneous".into(),
            seed: rng.seed(),
            subs: Some(subs),
            origin: Vec::new(),
        },
    )
}

/// Affine domain map `x -> A x + b + noise * N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainTransform {
    /// Row-major `d x d` matrix.
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub noise: f64,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            matrix,
            offset: vec![0.0; dim],
            noise: 0.0,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.matrix.len() != dim || self.matrix.iter().any(|r| r.len() != dim) || self.offset.len() != dim {
            return Err(invalid(format!("domain transform must be {dim}x{dim} with a length-{dim} offset")));
        }
        if !(self.noise >= 0.0) {
            return Err(invalid("domain noise must be non-negative"));
        }
        if self.matrix.iter().flatten().chain(&self.offset).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("domain transform".into()));
        }
        let scale = self.matrix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || determinant(&self.matrix).abs() <= 1e-12 * scale.powi(dim as i32) {
            return Err(invalid("domain transform matrix is singular"));
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| {
                let ax: f64 = row.iter().zip(x).map(|(a, v)| a * v).sum();
                ax + b + self.noise * normal(rng)
            })
            .collect()
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        let pivot = a[col].clone();
        for row in a.iter_mut().skip(col + 1) {
            let f = row[col] / pivot[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
        }
    }
    det
}

/// Gaussian pool (domain 0, drawn on `rng.child("base")`) plus a transformed
/// copy of every instance in domain 1, slot-aligned with its source.
pub fn make_two_domain_pool(base: &GaussianPoolParams, transform: &DomainTransform, rng: &RngStream) -> Result<ClassPool> {
    base.validate()?;
    transform.validate(base.dim)?;
    let source = make_gaussian_pool(base, &rng.child("base"))?;
    let classes = source
        .classes
        .into_iter()
        .enumerate()
        .map(|(c, class)| {
            let mut noise = rng.child("shift").index(c as u64).rng();
            let d0 = class.domains.into_iter().next().expect("one domain");
            let d1 = d0.iter().map(|x| transform.apply(x, &mut noise)).collect();
            PoolClass { domains: vec![d0, d1] }
        })
        .collect();
    ClassPool::new(
        base.dim,
        2,
        classes,
        PoolMeta {
            generator: "two-domain".into(),
            seed: rng.seed(),
            ..PoolMeta::default()
        },
    )
}

/// Uniform subsample without replacement of classes and of instance slots per
/// class. Kept classes and slots stay in ascending order, so keeping
/// everything returns the pool unchanged.
pub fn subsample_pool(
    pool: &ClassPool,
    keep_classes: Option<usize>,
    keep_instances_per_class: Option<usize>,
    rng: &RngStream,
) -> Result<ClassPool> {
    let n_classes = keep_classes.unwrap_or(pool.num_classes());
    if n_classes == 0 || n_classes > pool.num_classes() {
        return Err(Error::Insufficient(format!(
            "requested {n_classes} classes from a pool of {}",
            pool.num_classes()
        )));
    }
    let mut class_rng = rng.child("classes").rng();
    let mut ids = index::sample(&mut class_rng, pool.num_classes(), n_classes).into_vec();
    ids.sort_unstable();

    let slots = match keep_instances_per_class {
        None => None,
        Some(k) => {
            let min_size = ids.iter().map(|&c| pool.classes[c].slots()).min().unwrap_or(0);
            if k == 0 || k > min_size {
                return Err(Error::Insufficient(format!(
                    "requested {k} instances per class, smallest kept class has {min_size}"
                )));
            }
            Some(
                ids.iter()
                    .map(|&c| {
                        let mut r = rng.child("slots").index(pool.meta.origin[c] as u64).rng();
                        let mut s = index::sample(&mut r, pool.classes[c].slots(), k).into_vec();
                        s.sort_unstable();
                        s
                    })
                    .collect::<Vec<_>>(),
            )
        }
    };
    pool.select_classes(&ids, slots.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ClassPool {
        make_gaussian_pool(&GaussianPoolParams::new(5, 2, 10, 1.0, 0.3), &RngStream::new(seed)).unwrap()
    }

    #[test]
    fn gaussian_size_contract() {
        let p = small(7);
        assert_eq!(p.num_classes(), 5);
        assert_eq!(p.dim(), 2);
        assert_eq!(p.num_instances(), 50);
        assert!(p.instances().all(|i| i.features.len() == 2 && i.domain_id == 0));
    }

    #[test]
    fn zero_within_spread_collapses_to_means() {
        let p = make_gaussian_pool(&GaussianPoolParams::new(4, 3, 6, 2.0, 0.0), &RngStream::new(1)).unwrap();
        for class in p.classes() {
            let first = &class.domains[0][0];
            assert!(class.domains[0].iter().all(|x| x == first));
        }
    }

    #[test]
    fn generator_errors() {
        let r = RngStream::new(0);
        assert!(make_gaussian_pool(&GaussianPoolParams::new(3, 0, 2, 1.0, 1.0), &r).is_err());
        assert!(make_gaussian_pool(&GaussianPoolParams::new(0, 2, 2, 1.0, 1.0), &r).is_err());
        assert!(make_gaussian_pool(&GaussianPoolParams::new(3, 2, 2, 0.0, 1.0), &r).is_err());
    }

    #[test]
    fn nuisance_dims_have_zero_class_means() {
        let mut params = GaussianPoolParams::new(6, 4, 5, 3.0, 0.0);
        params.nuisance_dims = 2;
        params.nuisance_spread = 0.0;
        let p = make_gaussian_pool(&params, &RngStream::new(3)).unwrap();
        assert!(p.instances().all(|i| i.features[2] == 0.0 && i.features[3] == 0.0));
        assert!(p.instances().any(|i| i.features[0] != 0.0));
    }

    #[test]
    fn heterogeneous_tags_and_single_sub_degenerate() {
        let base = GaussianPoolParams::new(20, 3, 4, 1.0, 0.5);
        let hp = HeterogeneousPoolParams {
            base: base.clone(),
            num_subs: 5,
            offset_scale: 10.0,
            noise_scale_spread: 0.5,
        };
        let p = make_heterogeneous_pool(&hp, &RngStream::new(2)).unwrap();
        assert_eq!(p.num_classes(), 100);
        let subs = p.meta().subs.as_ref().unwrap();
        for s in 0..5 {
            assert_eq!(subs.iter().filter(|&&t| t == s).count(), 20);
        }

        let one = HeterogeneousPoolParams { num_subs: 1, ..hp };
        let rng = RngStream::new(11);
        let h = make_heterogeneous_pool(&one, &rng).unwrap();
        let g = make_gaussian_pool(&base, &rng.index(0)).unwrap();
        assert_eq!(h.classes(), g.classes());
    }

    #[test]
    fn identity_transform_is_bitwise_copy() {
        let base = GaussianPoolParams::new(4, 3, 5, 1.0, 0.4);
        let p = make_two_domain_pool(&base, &DomainTransform::identity(3), &RngStream::new(5)).unwrap();
        for class in p.classes() {
            assert_eq!(class.domains[0].len(), class.domains[1].len());
            for (a, b) in class.domains[0].iter().zip(&class.domains[1]) {
                let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
                assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn singular_transform_rejected() {
        let base = GaussianPoolParams::new(4, 2, 5, 1.0, 0.4);
        let mut t = DomainTransform::identity(2);
        t.matrix = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert!(make_two_domain_pool(&base, &t, &RngStream::new(0)).is_err());
        t.matrix = vec![vec![1.0, 0.0]];
        assert!(make_two_domain_pool(&base, &t, &RngStream::new(0)).is_err());
    }

    #[test]
    fn transformed_counts_match() {
        let base = GaussianPoolParams::new(4, 2, 7, 1.0, 0.4);
        let t = DomainTransform {
            matrix: vec![vec![0.5, 0.1], vec![-0.2, 0.7]],
            offset: vec![3.0, -1.0],
            noise: 0.2,
        };
        let p = make_two_domain_pool(&base, &t, &RngStream::new(0)).unwrap();
        assert!(p.classes().iter().all(|c| c.domains[0].len() == 7 && c.domains[1].len() == 7));
    }

    #[test]
    fn subsample_identity_and_boundaries() {
        let p = small(4);
        let same = subsample_pool(&p, None, None, &RngStream::new(1)).unwrap();
        assert_eq!(same, p);
        let all = subsample_pool(&p, Some(5), Some(10), &RngStream::new(1)).unwrap();
        assert_eq!(all.classes(), p.classes());

        let singles = subsample_pool(&p, Some(3), Some(1), &RngStream::new(2)).unwrap();
        assert_eq!(singles.num_classes(), 3);
        assert!(singles.classes().iter().all(|c| c.len() == 1));

        assert!(subsample_pool(&p, Some(6), None, &RngStream::new(0)).is_err());
        assert!(subsample_pool(&p, None, Some(11), &RngStream::new(0)).is_err());
    }

    #[test]
    fn bag_subpools() {
        let p = make_gaussian_pool(&GaussianPoolParams::new(64, 2, 3, 1.0, 0.1), &RngStream::new(0)).unwrap();
        let root = RngStream::new(42);
        let bags: Vec<_> = (0..10)
            .map(|b| subsample_pool(&p, Some(48), None, &root.index(b)).unwrap())
            .collect();
        assert!(bags.iter().all(|b| b.num_classes() == 48));
        assert_ne!(bags[0].meta().origin, bags[1].meta().origin);
    }

    #[test]
    fn text_round_trip_and_version_check() {
        let hp = HeterogeneousPoolParams {
            base: GaussianPoolParams::new(3, 2, 2, 1.0, 0.5),
            num_subs: 2,
            offset_scale: 4.0,
            noise_scale_spread: 0.3,
        };
        let p = make_heterogeneous_pool(&hp, &RngStream::new(8)).unwrap();
        let text = p.to_text();
        assert!(text.starts_with("metaepi-pool v1 dim=2 classes=6 domains=1\n"));
        let q = ClassPool::from_text(&text).unwrap();
        assert_eq!(p, q);
        let bad = text.replacen("v1", "v2", 1);
        assert!(matches!(ClassPool::from_text(&bad), Err(Error::Version(v)) if v == "v2"));
    }
}
