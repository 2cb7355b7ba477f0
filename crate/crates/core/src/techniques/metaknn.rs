use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{optimizer_step, OptimizerState};
use crate::error::{invalid, Error, Result};
use crate::metamodels::{Backbone, EpisodeScores, MetaModel};
use crate::taskgen::{parse_header, EpisodeSource, EpisodeSpec, LabeledInstance, MetaExample, RngStream};

pub const INDEX_HEADER: &str = "metaepi-index v1";
pub const SUPPORT_MEAN: &str = "support-mean";

/// Task embedding: the mean backbone embedding of the support set.
pub fn task_embedding(backbone: &Backbone, episode: &MetaExample) -> Result<Vec<f64>> {
    let e = backbone.forward(&episode.support_matrix()?)?;
    let n = e.rows() as f64;
    let mut mean = vec![0.0; e.cols()];
    for r in e.to_rows() {
        mean.iter_mut().zip(&r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Pre-sampled training tasks with their embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskIndex {
    pub tasks: Vec<MetaExample>,
    pub embeddings: Vec<Vec<f64>>,
    pub method: String,
}

pub fn build_task_index(
    source: &dyn EpisodeSource,
    spec: &EpisodeSpec,
    num_tasks: usize,
    backbone: &Backbone,
    rng: &RngStream,
) -> Result<TaskIndex> {
    let tasks = (0..num_tasks)
        .map(|i| source.sample(spec, &rng.index(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = tasks
        .iter()
        .map(|t| task_embedding(backbone, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskIndex {
        tasks,
        embeddings,
        method: SUPPORT_MEAN.into(),
    })
}

fn write_items(out: &mut String, tag: char, items: &[LabeledInstance]) {
    for it in items {
        let _ = write!(out, "{tag} {},{},{},{}", it.label, it.pool_class, it.domain, it.slot);
        for v in &it.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
}

fn floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.parse::<f64>().map_err(|e| format!("{x}: {e}"))).collect()
}

impl TaskIndex {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Indices of the `k` tasks with smallest squared Euclidean embedding
    /// distance to `query`, nearest first, ties to the lowest index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.len() {
            return Err(Error::Insufficient(format!("{k} neighbours requested from an index of {}", self.len())));
        }
        let mut d: Vec<(f64, usize)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.len() != query.len() {
                    return Err(invalid(format!("embedding width {} vs query {}", e.len(), query.len())));
                }
                Ok((e.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            })
            .collect::<Result<_>>()?;
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.into_iter().take(k).map(|(_, i)| i).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{INDEX_HEADER} tasks={} method={}\n", self.len(), self.method);
        for (t, e) in self.tasks.iter().zip(&self.embeddings) {
            let classes: Vec<String> = t.classes.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "task ways={} classes={}", t.ways, classes.join(","));
            let emb: Vec<String> = e.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "emb {}", emb.join(","));
            write_items(&mut out, 's', &t.support);
            write_items(&mut out, 'q', &t.query);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty index file".into(),
        })?;
        let fields = parse_header(header, INDEX_HEADER, 1)?;
        let expected: usize = fields
            .iter()
            .find(|(k, _)| k == "tasks")
            .and_then(|(_, v)| v.parse().ok())
            .ok_or(Error::Parse {
                line: 1,
                msg: "missing tasks= field".into(),
            })?;
        let method = fields
            .iter()
            .find(|(k, _)| k == "method")
            .map_or(SUPPORT_MEAN.to_string(), |(_, v)| v.clone());
        let mut index = TaskIndex {
            tasks: Vec::new(),
            embeddings: Vec::new(),
            method,
        };
        for (i, line) in lines {
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let Some((tag, rest)) = line.split_once(' ') else {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(perr(format!("unrecognised line `{line}`")));
            };
            match tag {
                "task" => {
                    let mut ways = None;
                    let mut classes = Vec::new();
                    for (k, v) in rest.split_whitespace().filter_map(|kv| kv.split_once('=')) {
                        match k {
                            "ways" => ways = Some(v.parse::<usize>().map_err(|e| perr(format!("ways: {e}")))?),
                            "classes" => {
                                classes = v
                                    .split(',')
                                    .filter(|s| !s.is_empty())
                                    .map(|s| s.parse::<usize>().map_err(|e| perr(format!("classes: {e}"))))
                                    .collect::<Result<_>>()?
                            }
                            _ => {}
                        }
                    }
                    index.tasks.push(MetaExample {
                        ways: ways.ok_or_else(|| perr("missing ways=".into()))?,
                        support: Vec::new(),
                        query: Vec::new(),
                        classes,
                    });
                }
                "emb" => index.embeddings.push(floats(rest).map_err(perr)?),
                "s" | "q" => {
                    let task = index.tasks.last_mut().ok_or_else(|| perr("instance before any task".into()))?;
                    let v = floats(rest).map_err(perr)?;
                    if v.len() < 4 {
                        return Err(perr("instance line needs label,class,domain,slot".into()));
                    }
                    let as_id = |x: f64| -> Result<usize> {
                        if x >= 0.0 && x.fract() == 0.0 {
                            Ok(x as usize)
                        } else {
                            Err(perr(format!("bad id {x}")))
                        }
                    };
                    let item = LabeledInstance {
                        label: as_id(v[0])?,
                        pool_class: as_id(v[1])?,
                        domain: as_id(v[2])?,
                        slot: as_id(v[3])?,
                        features: v[4..].to_vec(),
                    };
                    if tag == "s" {
                        task.support.push(item);
                    } else {
                        task.query.push(item);
                    }
                }
                other => return Err(perr(format!("unknown record `{other}`"))),
            }
        }
        if index.tasks.len() != expected || index.embeddings.len() != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header announces {expected} tasks, file holds {}", index.tasks.len()),
            });
        }
        for t in &index.tasks {
            t.validate()?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaKnnConfig {
    /// Neighbour count.
    pub k: usize,
    /// Fine-tuning epochs over the neighbours.
    pub epochs: usize,
    /// SGD step size for fine-tuning.
    pub step_size: f64,
    #[serde(default = "default_batch")]
    pub meta_batch: usize,
}

fn default_batch() -> usize {
    4
}

impl Default for MetaKnnConfig {
    fn default() -> Self {
        Self {
            k: 100,
            epochs: 1,
            step_size: 2e-4,
            meta_batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnOutcome {
    pub neighbours: Vec<usize>,
    pub adapted: MetaModel,
    pub scores: EpisodeScores,
}

/// Fine-tunes a copy of `model` for `epochs` passes of plain SGD over the
/// `k` nearest pre-sampled tasks (in neighbour order, `meta_batch` tasks per
/// step) and scores `episode` with the result. `model` is left untouched.
pub fn meta_knn_adapt(model: &MetaModel, index: &TaskIndex, episode: &MetaExample, config: &MetaKnnConfig) -> Result<KnnOutcome> {
    if config.k == 0 || config.meta_batch == 0 {
        return Err(invalid("meta-KNN needs k >= 1 and a positive meta batch"));
    }
    if !(config.step_size > 0.0) {
        return Err(Error::InvalidLearningRate(config.step_size));
    }
    let query = task_embedding(model.backbone(), episode)?;
    let neighbours = index.nearest(&query, config.k)?;
    let mut adapted = model.clone();
    let mut opt = OptimizerState::sgd(config.step_size);
    for _ in 0..config.epochs {
        for batch in neighbours.chunks(config.meta_batch) {
            adapted.zero_grads();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                adapted.accumulate_episode_grad(&index.tasks[i], w)?;
            }
            optimizer_step(&mut adapted.params_mut(), &mut opt)?;
        }
    }
    let scores = adapted.scores(episode)?;
    Ok(KnnOutcome {
        neighbours,
        adapted,
        scores,
    })
}
