use std::path::Path;

use super::config::{ExperimentConfig, ExperimentId, TrainSection};
use super::records::{emit_csv, sort_records, ResultRecord};
use crate::error::{invalid, Result};
use crate::metamodels::{accuracy_of, MetaModel};
use crate::metatrain::{evaluate_episodes, evaluate_source, eval_stream, meta_train, meta_train_with, worker_threads, EvalReport, TrainingCurve};
use crate::taskgen::{
    make_gaussian_pool, make_heterogeneous_pool, make_two_domain_pool, subsample_pool, ClassPool, EpisodeSource, EpisodeSpec,
    GaussianPoolParams, PerSubSampler, PoolClass, PoolMeta, RngStream,
};
use crate::techniques::{
    aggregate, build_task_index, kmeans_augment_pool, meta_knn_adapt, pretrain_backbone, train_bag_with, Aggregation,
    AuxObjective, BagEnsemble,
};

/// Meta-train / meta-val / meta-test pools of disjoint classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: ClassPool,
    pub val: Option<ClassPool>,
    pub test: ClassPool,
}

fn split(pool: &ClassPool, cfg: &ExperimentConfig) -> Result<Splits> {
    let s = &cfg.split;
    let mut parts = pool.split_classes(&[s.train, s.val, s.test])?.into_iter();
    let (train, val, test) = (parts.next(), parts.next(), parts.next());
    let (Some(train), Some(val), Some(test)) = (train, val, test) else {
        unreachable!("three sizes give three pools");
    };
    Ok(Splits {
        train,
        val: (s.val > 0).then_some(val),
        test,
    })
}

fn pool_stream(seed: u64) -> RngStream {
    RngStream::new(seed).child("pool")
}

fn init_stream(seed: u64) -> RngStream {
    RngStream::new(seed).child("init")
}

/// Gaussian pool of the `pool` section, split per the `split` section.
pub fn gaussian_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    split(&make_gaussian_pool(&cfg.pool, &pool_stream(seed))?, cfg)
}

/// Two-domain pool (domain 1 is the rotated copy) split per `split`.
pub fn two_domain_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let informative = cfg.pool.dim - cfg.pool.nuisance_dims;
    let t = cfg.domainshift.transform(cfg.pool.dim, informative)?;
    split(&make_two_domain_pool(&cfg.pool, &t, &pool_stream(seed))?, cfg)
}

/// Heterogeneous pool with, inside every sub-distribution, the first
/// `train_classes_per_sub` classes for meta-training and the rest for
/// meta-testing.
pub fn heterogeneous_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let params = cfg.heterogeneous_params();
    let pool = make_heterogeneous_pool(&params, &pool_stream(seed))?;
    let per_sub = params.base.num_classes;
    let n_train = cfg.metaknn.train_classes_per_sub;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..pool.num_classes() {
        if c % per_sub < n_train {
            train.push(c);
        } else {
            test.push(c);
        }
    }
    Ok(Splits {
        train: pool.select_classes(&train, None)?,
        val: None,
        test: pool.select_classes(&test, None)?,
    })
}

/// Challenging-split pools: coarse classes, each the union of
/// `clusters_per_class` fine Gaussian clusters. The meta-train pool has
/// exactly `train_classes` classes, so `train_classes`-way episodes always
/// draw the same class set.
pub fn challenging_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let a = &cfg.augment;
    if a.clusters_per_class == 0 {
        return Err(invalid("clusters_per_class must be at least 1"));
    }
    let coarse = a.train_classes + a.test_classes;
    let params = GaussianPoolParams {
        num_classes: coarse * a.clusters_per_class,
        instances_per_class: a.instances_per_cluster,
        within_spread: a.cluster_spread,
        ..cfg.pool.clone()
    };
    let fine = make_gaussian_pool(&params, &pool_stream(seed))?;
    let classes: Vec<PoolClass> = fine
        .classes()
        .chunks(a.clusters_per_class)
        .map(|group| PoolClass {
            domains: vec![group.iter().flat_map(|c| c.domains[0].iter().cloned()).collect()],
        })
        .collect();
    let meta = PoolMeta {
        generator: "challenging".into(),
        seed,
        ..PoolMeta::default()
    };
    let pool = ClassPool::new(fine.dim(), 1, classes, meta)?;
    let mut parts = pool.split_classes(&[a.train_classes, a.test_classes])?.into_iter();
    Ok(Splits {
        train: parts.next().expect("two parts"),
        val: None,
        test: parts.next().expect("two parts"),
    })
}

/// Support/target domains of the (meta-train, meta-test) episodes of a
/// domain-shift case. Domain 0 plays the source ("C") role, domain 1 the
/// shifted ("P") one.
pub fn case_domains(case: &str) -> Result<((usize, usize), (usize, usize))> {
    match case {
        "I-1" => Ok(((0, 0), (0, 0))),
        "I-2" => Ok(((1, 0), (1, 0))),
        "I-3" => Ok(((0, 0), (1, 0))),
        "I-4" => Ok(((1, 1), (1, 0))),
        other => Err(invalid(format!("unknown domain-shift case `{other}`"))),
    }
}

/// Training and test episode specs of a domain-shift case.
pub fn domainshift_specs(cfg: &ExperimentConfig, case: &str) -> Result<(EpisodeSpec, EpisodeSpec)> {
    let ((ts, tt), (es, et)) = case_domains(case)?;
    Ok((
        cfg.episode.train_spec().with_domains(ts, tt),
        cfg.episode.test_spec().with_domains(es, et),
    ))
}

struct Cell<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    threads: Option<usize>,
    records: Vec<ResultRecord>,
}

impl Cell<'_> {
    fn push(&mut self, setting: &str, metric: &str, value: f64) -> Result<()> {
        let exp = self.cfg.experiment.map_or("unnamed", ExperimentId::tag);
        self.records.push(ResultRecord::new(exp, self.seed, setting, metric, value)?);
        Ok(())
    }

    fn eval(&self, model: &MetaModel, source: &dyn EpisodeSource, spec: &EpisodeSpec) -> Result<EvalReport> {
        evaluate_source(model, source, spec, self.cfg.eval_episodes, eval_stream(self.seed), self.threads)
    }

    fn eval_train(&self, model: &MetaModel, source: &dyn EpisodeSource, spec: &EpisodeSpec) -> Result<EvalReport> {
        let stream = RngStream::new(self.seed).child("eval-train");
        evaluate_source(model, source, spec, self.cfg.eval_episodes, stream, self.threads)
    }

    fn push_test(&mut self, setting: &str, r: &EvalReport) -> Result<()> {
        self.push(setting, "meta_test_acc", r.mean)?;
        self.push(setting, "ci_halfwidth", r.ci_half_width)
    }

    fn push_curve(&mut self, setting: &str, curve: &TrainingCurve) -> Result<()> {
        if let Some(last) = curve.last() {
            self.push(setting, "meta_train_loss", last.meta_train_loss)?;
            if let Some(v) = last.meta_val_acc {
                self.push(setting, "meta_val_acc", v)?;
            }
        }
        Ok(())
    }

    /// Trains from `init` on `train` and records train/test accuracy.
    fn train_and_score(
        &mut self,
        setting: &str,
        init: MetaModel,
        train: &dyn EpisodeSource,
        val: Option<&dyn EpisodeSource>,
        test: &dyn EpisodeSource,
        specs: (EpisodeSpec, EpisodeSpec),
    ) -> Result<MetaModel> {
        let section = self.cfg.train.clone();
        self.train_and_score_with(&section, setting, init, train, val, test, specs)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_and_score_with(
        &mut self,
        section: &TrainSection,
        setting: &str,
        init: MetaModel,
        train: &dyn EpisodeSource,
        val: Option<&dyn EpisodeSource>,
        test: &dyn EpisodeSource,
        specs: (EpisodeSpec, EpisodeSpec),
    ) -> Result<MetaModel> {
        let tc = section.to_train_config(specs.0, self.seed);
        let (model, curve) = meta_train(init, train, val, &tc)?;
        self.push_curve(setting, &curve)?;
        let tr = self.eval_train(&model, train, &specs.0)?;
        self.push(setting, "meta_train_acc", tr.mean)?;
        let te = self.eval(&model, test, &specs.1)?;
        self.push_test(setting, &te)?;
        Ok(model)
    }
}

fn single_run(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let s = gaussian_splits(cfg, cell.seed)?;
    let init = cfg.model.build(s.train.dim(), cfg.episode.ways, &init_stream(cell.seed))?;
    let setting = format!("variant={}", cfg.model.variant);
    let val = s.val.as_ref().map(|v| v as &dyn EpisodeSource);
    cell.train_and_score(&setting, init, &s.train, val, &s.test, (cfg.episode.train_spec(), cfg.episode.test_spec()))?;
    Ok(())
}

fn gen_curve(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let s = gaussian_splits(cfg, cell.seed)?;
    let init = cfg.model.build(s.train.dim(), cfg.episode.ways, &init_stream(cell.seed))?;
    let g = &cfg.gen_curve;
    let train_spec = EpisodeSpec::new(cfg.episode.ways, cfg.episode.shots, g.val_per_class);
    let specs = (train_spec, cfg.episode.test_spec());
    let section = TrainSection {
        epochs: g.epochs,
        ..cfg.train.clone()
    };
    let sub_rng = RngStream::new(cell.seed).child("gen-curve");
    for &n in &g.instances {
        let sub = subsample_pool(&s.train, None, Some(n), &sub_rng.child("instances"))?;
        cell.train_and_score_with(&section, &format!("axis=instances;value={n}"), init.clone(), &sub, None, &s.test, specs)?;
    }
    for &c in &g.classes {
        let sub = subsample_pool(&s.train, Some(c), None, &sub_rng.child("classes"))?;
        cell.train_and_score_with(&section, &format!("axis=classes;value={c}"), init.clone(), &sub, None, &s.test, specs)?;
    }
    Ok(())
}

fn techniques(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let seed = cell.seed;
    let s = gaussian_splits(cfg, seed)?;
    let ways = cfg.episode.ways;
    let init = cfg.model.build(s.train.dim(), ways, &init_stream(seed))?;
    let specs = (cfg.episode.train_spec(), cfg.episode.test_spec());

    cell.train_and_score("method=scratch", init.clone(), &s.train, None, &s.test, specs)?;

    let pre = pretrain_backbone(&s.train, init.backbone().clone(), &cfg.techniques.pretrain, &RngStream::new(seed).child("pretrain"))?;
    cell.push("method=pretrain", "pretrain_acc", pre.accuracy)?;
    let pre_model = cfg.model.with_backbone(pre.backbone, ways, &init_stream(seed))?;
    cell.train_and_score("method=pretrain", pre_model, &s.train, None, &s.test, specs)?;

    let setting = "method=multiobjective";
    let mut aux = AuxObjective::new(
        &s.train,
        init.backbone().embedding_dim(),
        cfg.techniques.lambda,
        cfg.techniques.aux_batch,
        &RngStream::new(seed).child("aux-head"),
    )?;
    let tc = cfg.train.to_train_config(specs.0, seed);
    let (model, curve) = meta_train_with(init, &s.train, None, &tc, Some(&mut aux))?;
    cell.push_curve(setting, &curve)?;
    let tr = cell.eval_train(&model, &s.train, &specs.0)?;
    cell.push(setting, "meta_train_acc", tr.mean)?;
    let te = cell.eval(&model, &s.test, &specs.1)?;
    cell.push_test(setting, &te)
}

fn ensemble_report(cell: &Cell, ensemble: &BagEnsemble, test: &ClassPool, spec: &EpisodeSpec, mode: Aggregation) -> Result<EvalReport> {
    evaluate_episodes(test, spec, cell.cfg.eval_episodes, eval_stream(cell.seed), cell.threads, |ep| {
        let scores = ensemble.members.iter().map(|m| m.scores(ep)).collect::<Result<Vec<_>>>()?;
        Ok(accuracy_of(&aggregate(&scores, mode)?.labels, &ep.query_labels()))
    })
}

fn bagging(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let seed = cell.seed;
    let s = gaussian_splits(cfg, seed)?;
    let ways = cfg.episode.ways;
    let (train_spec, test_spec) = (cfg.episode.train_spec(), cfg.episode.test_spec());
    let scratch = cfg.model.build(s.train.dim(), ways, &init_stream(seed))?;
    let pre_rng = RngStream::new(seed).child("pretrain");
    let tc = cfg.train.to_train_config(train_spec, seed);
    let bag = &cfg.bagging;

    for pretrain in [false, true] {
        let arm = format!("pretrain={}", u8::from(pretrain));
        let init = if pretrain {
            let pre = pretrain_backbone(&s.train, scratch.backbone().clone(), &cfg.techniques.pretrain, &pre_rng)?;
            cfg.model.with_backbone(pre.backbone, ways, &init_stream(seed))?
        } else {
            scratch.clone()
        };
        let (single, _) = meta_train(init.clone(), &s.train, None, &tc)?;
        let r = cell.eval(&single, &s.test, &test_spec)?;
        cell.push_test(&format!("{arm};method=single"), &r)?;

        let shared = !pretrain || bag.shared_pretrain;
        let ensemble = train_bag_with(
            &s.train,
            bag.bags,
            bag.classes_per_bag,
            &tc,
            Aggregation::Probabilities,
            &RngStream::new(seed).child("bags"),
            |b, sub| {
                if shared {
                    Ok(init.clone())
                } else {
                    let pre = pretrain_backbone(sub, scratch.backbone().clone(), &cfg.techniques.pretrain, &pre_rng.index(b as u64))?;
                    cfg.model.with_backbone(pre.backbone, ways, &init_stream(seed))
                }
            },
        )?;
        let mut member_sum = 0.0;
        for m in &ensemble.members {
            member_sum += cell.eval(m, &s.test, &test_spec)?.mean;
        }
        cell.push(&format!("{arm};method=average"), "meta_test_acc", member_sum / ensemble.members.len() as f64)?;
        for (name, mode) in [("bag1", Aggregation::Logits), ("bag2", Aggregation::Probabilities)] {
            let r = ensemble_report(cell, &ensemble, &s.test, &test_spec, mode)?;
            cell.push_test(&format!("{arm};method={name}"), &r)?;
        }
    }
    Ok(())
}

fn augment(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let seed = cell.seed;
    let a = &cfg.augment;
    let s = challenging_splits(cfg, seed)?;
    let ways = a.train_classes;
    let spec = EpisodeSpec::new(ways, cfg.episode.shots, a.val_per_class);
    let test_spec = EpisodeSpec::new(ways, cfg.episode.shots, cfg.episode.test_val_per_class.unwrap_or(cfg.episode.val_per_class));
    let init = cfg.model.build(s.train.dim(), ways, &init_stream(seed))?;
    let features = if a.pretrained_features {
        Some(pretrain_backbone(&s.train, init.backbone().clone(), &cfg.techniques.pretrain, &RngStream::new(seed).child("pretrain"))?.backbone)
    } else {
        None
    };
    for &k in &a.ks {
        let mut aug = kmeans_augment_pool(&s.train, k, a.trials, features.as_ref(), &RngStream::new(seed).child("kmeans").index(k as u64))?;
        aug.retain_trials(spec.per_class())?;
        let tc = cfg.train.to_train_config(spec, seed);
        let setting = format!("k={k}");
        let (model, curve) = meta_train(init.clone(), &aug, None, &tc)?;
        cell.push_curve(&setting, &curve)?;
        let tr = cell.eval_train(&model, &s.train, &spec)?;
        cell.push(&setting, "meta_train_acc", tr.mean)?;
        let te = cell.eval(&model, &s.test, &test_spec)?;
        cell.push_test(&setting, &te)?;
    }
    Ok(())
}

fn metaknn(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let seed = cell.seed;
    let s = heterogeneous_splits(cfg, seed)?;
    let (train, test) = (PerSubSampler { pool: &s.train }, PerSubSampler { pool: &s.test });
    let (train_spec, test_spec) = (cfg.episode.train_spec(), cfg.episode.test_spec());
    let init = cfg.model.build(s.train.dim(), cfg.episode.ways, &init_stream(seed))?;
    let model = cell.train_and_score("method=protonet", init, &train, None, &test, (train_spec, test_spec))?;

    let index = build_task_index(&train, &train_spec, cfg.metaknn.index_tasks, model.backbone(), &RngStream::new(seed).child("index"))?;
    let knn = &cfg.metaknn.knn;
    let r = evaluate_episodes(&test, &test_spec, cfg.eval_episodes, eval_stream(seed), cell.threads, |ep| {
        let out = meta_knn_adapt(&model, &index, ep, knn)?;
        Ok(accuracy_of(&out.scores.predictions(), &ep.query_labels()))
    })?;
    cell.push_test("method=protonet-knn", &r)
}

fn domainshift(cell: &mut Cell) -> Result<()> {
    let cfg = cell.cfg;
    let seed = cell.seed;
    let s = two_domain_splits(cfg, seed)?;
    let init = cfg.model.build(s.train.dim(), cfg.episode.ways, &init_stream(seed))?;
    for case in &cfg.domainshift.cases {
        let specs = domainshift_specs(cfg, case)?;
        cell.train_and_score(&format!("case={case}"), init.clone(), &s.train, None, &s.test, specs)?;
    }
    Ok(())
}

/// Runs the configured experiment over every seed. Seeds run concurrently on
/// up to `METAEPI_THREADS` workers; records are sorted before returning, so
/// the output does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let id = cfg
        .experiment
        .ok_or_else(|| invalid("config names no experiment"))?;
    let recipe: fn(&mut Cell) -> Result<()> = match id {
        ExperimentId::GenCurve => gen_curve,
        ExperimentId::Techniques => techniques,
        ExperimentId::Bagging => bagging,
        ExperimentId::Augment => augment,
        ExperimentId::Metaknn => metaknn,
        ExperimentId::Domainshift => domainshift,
        ExperimentId::SingleRun => single_run,
    };
    let total = worker_threads();
    let workers = total.min(cfg.seeds.len()).max(1);
    let threads = Some((total / workers).max(1));
    let run_seed = |seed: u64| -> Result<Vec<ResultRecord>> {
        let mut cell = Cell {
            cfg,
            seed,
            threads,
            records: Vec::new(),
        };
        recipe(&mut cell).map_err(|e| e.context(format!("{id} seed {seed}")))?;
        Ok(cell.records)
    };
    let per_seed: Vec<Result<Vec<ResultRecord>>> = if workers == 1 {
        cfg.seeds.iter().map(|&s| run_seed(s)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<ResultRecord>>>> = vec![None; cfg.seeds.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_seed = &run_seed;
                    scope.spawn(move || {
                        (w..cfg.seeds.len())
                            .step_by(workers)
                            .map(|i| (i, run_seed(cfg.seeds[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("experiment worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every seed ran")).collect()
    };
    let mut records = Vec::new();
    for r in per_seed {
        records.extend(r?);
    }
    sort_records(&mut records);
    Ok(records)
}

/// [`run_experiment`] followed by [`emit_csv`].
pub fn run_experiment_to(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let records = run_experiment(cfg)?;
    emit_csv(&records, out)?;
    Ok(records)
}

