#![allow(dead_code)]

use metaepi::autodiff::{NodeId, Primitive, Tape, Tensor};
use metaepi::metamodels::{
    episode_loss, fomaml_adapt, matchnet_probs_from_embeddings, protonet_logits_from_embeddings, Backbone, MetaModel, ModelConfig,
    Variant,
};
use metaepi::taskgen::{
    make_gaussian_pool, make_two_domain_pool, sample_episode, ClassPool, DomainTransform, EpisodeSpec, GaussianPoolParams,
    MetaExample, PoolClass, PoolMeta, RngStream,
};
use metaepi::techniques::{
    ensemble_predict, kmeans, kmeans_augment_pool, kmeans_objective, meta_knn_adapt, train_bag, Aggregation, MetaKnnConfig,
    TaskIndex, build_task_index,
};
use metaepi::metatrain::{meta_train, TrainConfig};
use rand::Rng;

/// Outcome of one named check within a suite.
pub struct Check {
    pub name: String,
    pub result: Result<(), String>,
}

impl Check {
    fn new(name: impl Into<String>, result: Result<(), String>) -> Self {
        Self { name: name.into(), result }
    }
}

pub fn failures(checks: &[Check]) -> Vec<String> {
    checks
        .iter()
        .filter_map(|c| c.result.as_ref().err().map(|e| format!("{}: {e}", c.name)))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 20;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` (zero when both vanish).
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_grad(x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform(r: &mut impl Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform entries with magnitude in `[gap, hi)` and random sign.
fn away_from_zero(r: &mut impl Rng, shape: Vec<usize>, gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..hi);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks `primitive` applied to `inputs` by contracting its output with a
/// fixed random weight tensor into a scalar.
fn check_primitive(primitive: &Primitive, inputs: &[Tensor], r: &mut impl Rng) -> Result<f64, String> {
    let mut probe = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = probe.apply(primitive.clone(), &ids).map_err(e2s)?;
    let out_shape = probe.value(out).map_err(e2s)?.shape().to_vec();
    let weights = uniform(r, out_shape, -1.0, 1.0);

    let eval = |vals: &[Tensor], record: bool| -> Result<(f64, Vec<Vec<f64>>), String> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| tape.leaf(t.detached().requiring_grad())).collect();
        let y = tape.apply(primitive.clone(), &ids).map_err(e2s)?;
        let w = tape.constant(weights.clone());
        let yw = tape.mul(y, w).map_err(e2s)?;
        let s = tape.sum(yw).map_err(e2s)?;
        let v = tape.value(s).map_err(e2s)?.item();
        if !record {
            return Ok((v, Vec::new()));
        }
        tape.backward(s).map_err(e2s)?;
        let grads = ids
            .iter()
            .zip(vals)
            .map(|(id, t)| tape.grad(*id).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((v, grads))
    };

    let (_, grads) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut f = |x: &[f64]| {
            let mut vals = inputs.to_vec();
            vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            eval(&vals, false).map(|(v, _)| v).unwrap_or(f64::NAN)
        };
        let numeric = numeric_grad(input.data(), &mut f);
        worst = worst.max(rel_error(&grads[k], &numeric));
    }
    Ok(worst)
}

/// Random inputs valid for `name`, instance `i`.
fn primitive_instance(name: &str, r: &mut impl Rng) -> (Primitive, Vec<Tensor>) {
    let n = r.random_range(1..5);
    let m = r.random_range(1..5);
    let k = r.random_range(1..5);
    let mat = |r: &mut _, a, b| uniform(r, vec![a, b], -1.5, 1.5);
    match name {
        "matmul" => (Primitive::MatMul, vec![mat(r, n, k), mat(r, k, m)]),
        "add" => (Primitive::Add, vec![mat(r, n, m), mat(r, n, m)]),
        "sub" => (Primitive::Sub, vec![mat(r, n, m), mat(r, n, m)]),
        "mul" => (Primitive::Mul, vec![mat(r, n, m), mat(r, n, m)]),
        "scalar-mul" => (Primitive::ScalarMul(r.random_range(-3.0..3.0)), vec![mat(r, n, m)]),
        "relu" => (Primitive::Relu, vec![away_from_zero(r, vec![n, m], 0.05, 2.0)]),
        "mean" => (Primitive::Mean, vec![mat(r, n, m)]),
        "sum" => (Primitive::Sum, vec![mat(r, n, m)]),
        "squared-euclidean-pairwise" => (Primitive::SquaredEuclideanPairwise, vec![mat(r, n, k), mat(r, m, k)]),
        "softmax-cross-entropy" => {
            let c = r.random_range(2..6);
            let labels = (0..n).map(|_| r.random_range(0..c)).collect();
            (Primitive::SoftmaxCrossEntropy(labels), vec![uniform(r, vec![n, c], -3.0, 3.0)])
        }
        "log" => (Primitive::Log, vec![uniform(r, vec![n, m], 0.3, 3.0)]),
        "exp" => (Primitive::Exp, vec![uniform(r, vec![n, m], -2.0, 2.0)]),
        "concat-rows" => (Primitive::ConcatRows, vec![mat(r, n, k), mat(r, m, k)]),
        "transpose" => (Primitive::Transpose, vec![mat(r, n, m)]),
        "softmax-rows" => (Primitive::SoftmaxRows, vec![uniform(r, vec![n, m + 1], -3.0, 3.0)]),
        other => panic!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: [&str; 15] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar-mul",
    "relu",
    "mean",
    "sum",
    "squared-euclidean-pairwise",
    "softmax-cross-entropy",
    "log",
    "exp",
    "concat-rows",
    "transpose",
    "softmax-rows",
];

pub fn primitive_gradient_checks() -> Vec<Check> {
    PRIMITIVES
        .iter()
        .map(|&name| {
            let mut r = RngStream::new(11).child("fd").child(name).rng();
            let mut worst = 0.0f64;
            let result = (0..GRAD_INSTANCES).try_for_each(|_| {
                let (p, inputs) = primitive_instance(name, &mut r);
                assert_eq!(p.name(), name);
                worst = worst.max(check_primitive(&p, &inputs, &mut r)?);
                Ok::<(), String>(())
            });
            let result = result.and_then(|()| ensure(worst <= GRAD_REL_TOL, || format!("max relative error {worst:.3e}")));
            Check::new(format!("primitive {name} (max rel err {worst:.1e})"), result)
        })
        .collect()
}

fn set_flat(model: &mut MetaModel, flat: &[f64]) {
    let mut off = 0;
    for p in model.params_mut() {
        let n = p.len();
        p.assign(&flat[off..off + n]).unwrap();
        off += n;
    }
}

fn analytic_grad(model: &MetaModel, episode: &MetaExample) -> Result<Vec<f64>, String> {
    let mut m = model.clone();
    m.zero_grads();
    m.accumulate_episode_grad(episode, 1.0).map_err(e2s)?;
    Ok(m.params()
        .iter()
        .flat_map(|p| p.grad().map_or(vec![0.0; p.len()], <[f64]>::to_vec))
        .collect())
}

/// Small random model and episode for end-to-end gradient checks.
pub fn small_setup(variant: Variant, seed: u64) -> (MetaModel, MetaExample) {
    let s = RngStream::new(seed).child("e2e");
    let pool = make_gaussian_pool(&GaussianPoolParams::new(6, 4, 8, 1.0, 0.7), &s.child("pool")).unwrap();
    let spec = EpisodeSpec::new(3, 2, 2);
    let episode = sample_episode(&pool, &spec, &s.child("episode"), None).unwrap();
    let mut cfg = ModelConfig::new(variant);
    cfg.hidden = vec![8];
    cfg.embedding_dim = 3;
    cfg.temperature = 0.5;
    cfg.inner_lr = 0.3;
    cfg.inner_steps = 2;
    let model = cfg.build(4, 3, &s.child("init")).unwrap();
    (model, episode)
}

/// First-order surrogate of the FoMaml loss: the adapted parameters move
/// rigidly with the meta parameters, `L(theta + (theta' - theta))`.
fn fomaml_surrogate(model: &MetaModel, episode: &MetaExample) -> impl Fn(&[f64]) -> f64 {
    let MetaModel::FoMaml(m) = model else { panic!("not fomaml") };
    let support = episode.support_matrix().unwrap();
    let (bb, head) = fomaml_adapt(&m.backbone, &m.head, &support, &episode.support_labels(), m.inner_lr, m.inner_steps).unwrap();
    let adapted = MetaModel::fomaml(bb, head, 0.0, 1).unwrap();
    let shift: Vec<f64> = adapted.flat_params().iter().zip(model.flat_params()).map(|(a, t)| a - t).collect();
    let episode = episode.clone();
    move |x: &[f64]| {
        let mut probe = adapted.clone();
        let moved: Vec<f64> = x.iter().zip(&shift).map(|(v, d)| v + d).collect();
        set_flat(&mut probe, &moved);
        episode_loss(&probe, &episode).unwrap_or(f64::NAN)
    }
}

pub fn episode_gradient_checks() -> Vec<Check> {
    [Variant::ProtoNet, Variant::MatchNet, Variant::FoMaml]
        .into_iter()
        .map(|variant| {
            let mut worst = 0.0f64;
            // instances whose loss is undefined (zero-norm MatchNet embedding)
            // are not differentiable points and are skipped
            let usable = (100u64..)
                .map(|seed| small_setup(variant, seed))
                .filter(|(m, e)| episode_loss(m, e).is_ok())
                .take(GRAD_INSTANCES);
            let result = usable.into_iter().try_for_each(|(model, episode)| {
                let analytic = analytic_grad(&model, &episode)?;
                let theta = model.flat_params();
                let numeric = if variant == Variant::FoMaml {
                    let f = fomaml_surrogate(&model, &episode);
                    numeric_grad(&theta, &mut |x| f(x))
                } else {
                    numeric_grad(&theta, &mut |x| {
                        let mut probe = model.clone();
                        set_flat(&mut probe, x);
                        episode_loss(&probe, &episode).unwrap_or(f64::NAN)
                    })
                };
                worst = worst.max(rel_error(&analytic, &numeric));
                Ok::<(), String>(())
            });
            let result = result.and_then(|()| ensure(worst <= GRAD_REL_TOL, || format!("max relative error {worst:.3e}")));
            Check::new(format!("episode_loss {variant} (max rel err {worst:.1e})"), result)
        })
        .collect()
}

// --------------------------------------------------------------- identities

/// Matrix whose entries are multiples of 2^-12 in (-8, 8): sums and
/// differences of such values are exact in f64.
fn dyadic(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-32768i64..32768) as f64 / 4096.0).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn add_row(t: &Tensor, v: &[f64]) -> Tensor {
    let rows: Vec<Vec<f64>> = t.to_rows().into_iter().map(|r| r.iter().zip(v).map(|(a, b)| a + b).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).unwrap()
}

fn labels_for(ways: usize, shots: usize) -> Vec<usize> {
    (0..ways).flat_map(|c| std::iter::repeat_n(c, shots)).collect()
}

fn fomaml_zero_step() -> Result<(), String> {
    for seed in 0..10 {
        let (model, episode) = small_setup(Variant::FoMaml, seed);
        let MetaModel::FoMaml(m) = &model else { unreachable!() };
        let support = episode.support_matrix().map_err(e2s)?;
        let (bb, head) = fomaml_adapt(&m.backbone, &m.head, &support, &episode.support_labels(), 0.0, 3).map_err(e2s)?;
        ensure(bb == m.backbone && head == m.head, || format!("seed {seed}: alpha=0 changed parameters"))?;
        let frozen = MetaModel::fomaml(m.backbone.clone(), m.head.clone(), 0.0, 3).map_err(e2s)?;
        let direct = MetaModel::fomaml(m.backbone.clone(), m.head.clone(), 0.0, 1).map_err(e2s)?;
        ensure(
            episode_loss(&frozen, &episode).map_err(e2s)?.to_bits() == episode_loss(&direct, &episode).map_err(e2s)?.to_bits(),
            || format!("seed {seed}: alpha=0 loss differs"),
        )?;
    }
    Ok(())
}

fn protonet_translation() -> Result<(), String> {
    let mut r = RngStream::new(21).rng();
    for _ in 0..50 {
        let ways = r.random_range(2..6);
        let shots = [1, 2, 4][r.random_range(0..3)];
        let nq = r.random_range(1..8);
        let e = r.random_range(1..6);
        let s = dyadic(&mut r, ways * shots, e);
        let q = dyadic(&mut r, nq, e);
        let v = dyadic(&mut r, 1, e).data().to_vec();
        let labels = labels_for(ways, shots);
        let a = protonet_logits_from_embeddings(&s, &labels, ways, &q).map_err(e2s)?;
        let b = protonet_logits_from_embeddings(&add_row(&s, &v), &labels, ways, &add_row(&q, &v)).map_err(e2s)?;
        ensure(a == b, || "translated logits differ".into())?;
    }
    // arbitrary reals: equal up to rounding
    for _ in 0..50 {
        let (ways, shots, e) = (r.random_range(2..6), r.random_range(1..4), r.random_range(1..6));
        let s = uniform(&mut r, vec![ways * shots, e], -2.0, 2.0);
        let q = uniform(&mut r, vec![4, e], -2.0, 2.0);
        let v: Vec<f64> = (0..e).map(|_| r.random_range(-5.0..5.0)).collect();
        let labels = labels_for(ways, shots);
        let a = protonet_logits_from_embeddings(&s, &labels, ways, &q).map_err(e2s)?;
        let b = protonet_logits_from_embeddings(&add_row(&s, &v), &labels, ways, &add_row(&q, &v)).map_err(e2s)?;
        let worst = a.rows.iter().flatten().zip(b.rows.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(worst <= 1e-10, || format!("translation drift {worst:e}"))?;
    }
    Ok(())
}

fn matchnet_scale() -> Result<(), String> {
    let mut r = RngStream::new(22).rng();
    for _ in 0..100 {
        let (ways, shots, e) = (r.random_range(2..6), r.random_range(1..4), r.random_range(1..6));
        let s = away_from_zero(&mut r, vec![ways * shots, e], 0.1, 2.0);
        let q = away_from_zero(&mut r, vec![5, e], 0.1, 2.0);
        let lambda = r.random_range(0.05..20.0);
        let t = r.random_range(0.05..2.0);
        let labels = labels_for(ways, shots);
        let a = matchnet_probs_from_embeddings(&s, &labels, ways, &q, t).map_err(e2s)?;
        let b = matchnet_probs_from_embeddings(&scaled(&s, lambda), &labels, ways, &scaled(&q, lambda), t).map_err(e2s)?;
        let worst = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(worst <= 1e-12, || format!("lambda {lambda}: scale drift {worst:e}"))?;
    }
    Ok(())
}

fn bag_of_one() -> Result<(), String> {
    let rng = RngStream::new(31);
    let pool = make_gaussian_pool(&GaussianPoolParams::new(8, 5, 10, 1.0, 0.6), &rng.child("pool")).map_err(e2s)?;
    let spec = EpisodeSpec::new(3, 1, 3);
    for variant in [Variant::ProtoNet, Variant::MatchNet, Variant::FoMaml] {
        let mut cfg = ModelConfig::new(variant);
        cfg.hidden = vec![8];
        cfg.embedding_dim = 4;
        let init = cfg.build(5, 3, &rng.child("init")).map_err(e2s)?;
        let tc = TrainConfig::new(spec, 2, 10, 5);
        let (single, _) = meta_train(init.clone(), &pool, None, &tc).map_err(e2s)?;
        for mode in [Aggregation::Logits, Aggregation::Probabilities] {
            let bag = train_bag(&pool, 1, pool.num_classes(), &init, &tc, mode, &rng.child("bag")).map_err(e2s)?;
            ensure(bag.members[0] == single, || format!("{variant}: bag member differs from single"))?;
            for t in 0..5 {
                let ep = sample_episode(&pool, &spec, &rng.child("ep").index(t), None).map_err(e2s)?;
                let got = ensemble_predict(&bag, &ep).map_err(e2s)?;
                let scores = single.scores(&ep).map_err(e2s)?;
                let want = match (mode, &scores) {
                    (Aggregation::Logits, metaepi::metamodels::EpisodeScores::Logits(l)) => l.rows.clone(),
                    _ => scores.probabilities(),
                };
                ensure(got.scores == want, || format!("{variant} {mode:?}: scores differ"))?;
                ensure(got.labels == single.predict(&ep).map_err(e2s)?, || format!("{variant} {mode:?}: labels differ"))?;
            }
        }
    }
    Ok(())
}

fn knn_zero_epochs() -> Result<(), String> {
    let rng = RngStream::new(41);
    let pool = make_gaussian_pool(&GaussianPoolParams::new(10, 4, 12, 1.5, 0.6), &rng.child("pool")).map_err(e2s)?;
    let spec = EpisodeSpec::new(3, 2, 3);
    for variant in [Variant::ProtoNet, Variant::MatchNet, Variant::FoMaml] {
        let model = ModelConfig::new(variant).build(4, 3, &rng.child("init")).map_err(e2s)?;
        let index = build_task_index(&pool, &spec, 30, model.backbone(), &rng.child("index")).map_err(e2s)?;
        let cfg = MetaKnnConfig {
            k: 10,
            epochs: 0,
            ..MetaKnnConfig::default()
        };
        for t in 0..5 {
            let ep = sample_episode(&pool, &spec, &rng.child("ep").index(t), None).map_err(e2s)?;
            let out = meta_knn_adapt(&model, &index, &ep, &cfg).map_err(e2s)?;
            ensure(out.adapted == model, || format!("{variant}: adapted model changed"))?;
            ensure(out.scores == model.scores(&ep).map_err(e2s)?, || format!("{variant}: scores differ"))?;
        }
    }
    Ok(())
}

fn kmeans_k1() -> Result<(), String> {
    let rng = RngStream::new(51);
    let pool = make_gaussian_pool(&GaussianPoolParams::new(6, 3, 9, 1.0, 0.5), &rng.child("pool")).map_err(e2s)?;
    let aug = kmeans_augment_pool(&pool, 1, 5, None, &rng.child("aug")).map_err(e2s)?;
    ensure(aug.trials.len() == 5, || "trial count".into())?;
    for t in &aug.trials {
        ensure(t.classes() == pool.classes() && t.dim() == pool.dim(), || "K=1 trial differs from input".into())?;
    }
    Ok(())
}

fn equal_domain_sampler() -> Result<(), String> {
    let rng = RngStream::new(61);
    let base = GaussianPoolParams::new(8, 4, 10, 1.0, 0.5);
    let mut t = DomainTransform::identity(4);
    t.matrix[0][1] = 0.5;
    t.offset = vec![0.3; 4];
    t.noise = 0.05;
    let two = make_two_domain_pool(&base, &t, &rng.child("pool")).map_err(e2s)?;
    for d in 0..2 {
        let classes: Vec<PoolClass> = two
            .classes()
            .iter()
            .map(|c| PoolClass {
                domains: vec![c.in_domain(d).to_vec()],
            })
            .collect();
        let single = ClassPool::new(two.dim(), 1, classes, PoolMeta::default()).map_err(e2s)?;
        for i in 0..20 {
            let s = rng.child("ep").index(i);
            let a = sample_episode(&two, &EpisodeSpec::new(4, 2, 3).with_domains(d, d), &s, None).map_err(e2s)?;
            let b = sample_episode(&single, &EpisodeSpec::new(4, 2, 3), &s, None).map_err(e2s)?;
            let strip = |e: &MetaExample| {
                let items = |v: &[metaepi::taskgen::LabeledInstance]| {
                    v.iter().map(|x| (x.features.clone(), x.label, x.pool_class, x.slot)).collect::<Vec<_>>()
                };
                (items(&e.support), items(&e.query), e.classes.clone())
            };
            ensure(strip(&a) == strip(&b), || format!("domain {d} episode {i} differs"))?;
            ensure(a.support.iter().chain(&a.query).all(|x| x.domain == d), || "domain tag".into())?;
        }
    }
    Ok(())
}

pub fn identity_checks() -> Vec<Check> {
    vec![
        Check::new("FoMaml alpha=0 identity", fomaml_zero_step()),
        Check::new("ProtoNet translation invariance", protonet_translation()),
        Check::new("MatchNet positive-scale invariance", matchnet_scale()),
        Check::new("Bag(B=1) equals single model", bag_of_one()),
        Check::new("meta-KNN zero epochs equals base model", knn_zero_epochs()),
        Check::new("K-means K=1 equals input pool", kmeans_k1()),
        Check::new("equal-domain sampler equals same-domain sampler", equal_domain_sampler()),
    ]
}

// ------------------------------------------------------------------ oracles

/// Stable brute-force K nearest: full scan, sorted by (distance, index).
pub fn brute_force_knn(embeddings: &[Vec<f64>], query: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (e.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

fn knn_oracle() -> Result<(), String> {
    let rng = RngStream::new(71);
    let pool = make_gaussian_pool(&GaussianPoolParams::new(12, 4, 12, 1.5, 0.6), &rng.child("pool")).map_err(e2s)?;
    let spec = EpisodeSpec::new(3, 2, 2);
    let model = ModelConfig::new(Variant::ProtoNet).build(4, 3, &rng.child("init")).map_err(e2s)?;
    let mut index = build_task_index(&pool, &spec, 200, model.backbone(), &rng.child("index")).map_err(e2s)?;
    // duplicated tasks force distance ties
    for i in 0..40 {
        index.tasks.push(index.tasks[i * 3].clone());
        index.embeddings.push(index.embeddings[i * 3].clone());
    }
    let mut r = rng.child("k").rng();
    for q in 0..100u64 {
        let ep = sample_episode(&pool, &spec, &rng.child("query").index(q), None).map_err(e2s)?;
        let k = r.random_range(1..=index.len());
        let cfg = MetaKnnConfig {
            k,
            epochs: 0,
            ..MetaKnnConfig::default()
        };
        let out = meta_knn_adapt(&model, &index, &ep, &cfg).map_err(e2s)?;
        let query = metaepi::techniques::task_embedding(model.backbone(), &ep).map_err(e2s)?;
        ensure(out.neighbours == brute_force_knn(&index.embeddings, &query, k), || format!("query {q} (k={k}) differs"))?;
    }
    // synthetic embeddings on a coarse grid: many exact ties
    let embeddings: Vec<Vec<f64>> = (0..150).map(|_| (0..3).map(|_| r.random_range(0..4) as f64).collect()).collect();
    let grid = TaskIndex {
        tasks: Vec::new(),
        embeddings,
        method: metaepi::techniques::SUPPORT_MEAN.into(),
    };
    for q in 0..100 {
        let query: Vec<f64> = (0..3).map(|_| r.random_range(0..4) as f64 + 0.5 * r.random_range(0..2) as f64).collect();
        let k = r.random_range(1..=grid.len());
        let got = grid.nearest(&query, k).map_err(e2s)?;
        ensure(got == brute_force_knn(&grid.embeddings, &query, k), || format!("grid query {q} (k={k}) differs"))?;
    }
    Ok(())
}

/// Exhaustive best 2-partition (both parts non-empty) by objective.
pub fn best_two_partition(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut best = (f64::INFINITY, Vec::new());
    // point 0 fixed in cluster 0 to skip mirrored labellings
    for mask in 0u32..(1 << (n - 1)) {
        let assign: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        if !assign.contains(&1) {
            continue;
        }
        let obj = kmeans_objective(points, &assign, 2);
        if obj < best.0 {
            best = (obj, assign);
        }
    }
    best
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.iter().zip(b).all(|(x, y)| x == y) || a.iter().zip(b).all(|(x, y)| x != y)
}

/// Lloyd fixed point: every point is at least as close to its own centroid
/// as to the other one.
fn is_fixed_point(points: &[Vec<f64>], assign: &[usize]) -> bool {
    let cents: Vec<Vec<f64>> = (0..2)
        .map(|c| {
            let members: Vec<&Vec<f64>> = points.iter().zip(assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            let mut m = vec![0.0; points[0].len()];
            members.iter().for_each(|p| m.iter_mut().zip(*p).for_each(|(s, x)| *s += x / members.len() as f64));
            m
        })
        .collect();
    let d = |p: &[f64], c: &[f64]| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    points.iter().zip(assign).all(|(p, &a)| d(p, &cents[a]) <= d(p, &cents[1 - a]) + 1e-12)
}

pub const KMEANS_RESTARTS: u64 = 30;

/// Two-cluster class of at most 8 points: two Gaussian blobs of unit scale
/// whose centres are `sep` apart along a random direction.
fn two_blob_class(r: &mut impl Rng, sep: f64) -> Vec<Vec<f64>> {
    let n = r.random_range(2..=8);
    let dim = r.random_range(1..4);
    let dir: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    let first = r.random_range(1..n);
    (0..n)
        .map(|i| {
            let c = if i < first { 0.0 } else { sep };
            dir.iter().map(|d| c * d / norm + r.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

/// On two-cluster classes the best of the restarts recovers the exhaustive
/// optimum. Returns how many single trials did, out of the trial count.
pub fn kmeans_two_cluster_oracle() -> Result<(u64, u64), String> {
    let rng = RngStream::new(81);
    let mut r = rng.child("points").rng();
    let (mut trial_hits, mut trials) = (0, 0);
    for case in 0..100u64 {
        let points = two_blob_class(&mut r, 6.0);
        let (opt, opt_assign) = best_two_partition(&points);
        let mut best = (f64::INFINITY, Vec::new());
        for t in 0..KMEANS_RESTARTS {
            let a = kmeans(&points, 2, &rng.child("trial").index(case).index(t)).map_err(e2s)?;
            let obj = kmeans_objective(&points, &a, 2);
            trials += 1;
            if same_partition(&a, &opt_assign) {
                trial_hits += 1;
            }
            if obj < best.0 {
                best = (obj, a);
            }
        }
        ensure(same_partition(&best.1, &opt_assign), || format!("case {case}: best {} vs optimum {opt}", best.0))?;
    }
    Ok((trial_hits, trials))
}

/// Arbitrary points: each trial is a Lloyd fixed point with non-empty
/// clusters and never beats the optimum. Returns how many cases the best of
/// the restarts reaches the optimum, out of the case count.
pub fn kmeans_local_optima(cases: u64) -> Result<(u64, u64), String> {
    let rng = RngStream::new(82);
    let mut r = rng.child("points").rng();
    let mut hits = 0;
    for case in 0..cases {
        let n = r.random_range(2..=8);
        let dim = r.random_range(1..4);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let (opt, opt_assign) = best_two_partition(&points);
        let mut best = (f64::INFINITY, Vec::new());
        for t in 0..KMEANS_RESTARTS {
            let a = kmeans(&points, 2, &rng.child("trial").index(case).index(t)).map_err(e2s)?;
            ensure(a.contains(&0) && a.contains(&1), || format!("case {case}: empty cluster"))?;
            ensure(is_fixed_point(&points, &a), || format!("case {case} trial {t}: not a Lloyd fixed point"))?;
            let obj = kmeans_objective(&points, &a, 2);
            ensure(obj >= opt - 1e-12 * opt.max(1.0), || format!("case {case}: {obj} below optimum {opt}"))?;
            if obj < best.0 {
                best = (obj, a);
            }
        }
        if same_partition(&best.1, &opt_assign) {
            hits += 1;
        }
    }
    Ok((hits, cases))
}

fn prototype_oracle() -> Result<(), String> {
    let mut r = RngStream::new(91).rng();
    for _ in 0..100 {
        let (ways, shots, e, nq) = (r.random_range(2..6), r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let s = uniform(&mut r, vec![ways * shots, e], -2.0, 2.0);
        let q = uniform(&mut r, vec![nq, e], -2.0, 2.0);
        // interleaved label order exercises the grouping
        let labels: Vec<usize> = (0..ways * shots).map(|i| i % ways).collect();
        let logits = protonet_logits_from_embeddings(&s, &labels, ways, &q).map_err(e2s)?;
        for (qi, row) in logits.rows.iter().enumerate() {
            for (c, &logit) in row.iter().enumerate().take(ways) {
                let members: Vec<&[f64]> = (0..ways * shots).filter(|&i| labels[i] == c).map(|i| s.row(i)).collect();
                let proto: Vec<f64> = (0..e).map(|j| members.iter().map(|m| m[j]).sum::<f64>() / shots as f64).collect();
                let want = -q.row(qi).iter().zip(&proto).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                ensure((logit - want).abs() <= 1e-12, || format!("logit {logit} vs direct {want}"))?;
            }
        }
    }
    Ok(())
}

pub fn oracle_checks() -> Vec<Check> {
    vec![
        Check::new("meta-KNN retrieval equals brute force (100+100 queries)", knn_oracle()),
        Check::new("K-means 2-split matches exhaustive optimum on two-cluster classes", kmeans_two_cluster_oracle().map(|_| ())),
        Check::new("K-means trials are Lloyd fixed points", kmeans_local_optima(200).map(|_| ())),
        Check::new("prototypes match direct averaging", prototype_oracle()),
    ]
}

/// Identity backbone: a single linear layer with identity weight, zero bias.
pub fn identity_backbone(d: usize) -> Backbone {
    let layer = metaepi::metamodels::Linear::new(Tensor::identity(d), Tensor::zeros(vec![1, d])).unwrap();
    Backbone::from_layers(vec![layer]).unwrap()
}
