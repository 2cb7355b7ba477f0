use super::train::TrainConfig;
use crate::error::{invalid, Result};
use crate::metamodels::{episode_accuracy, MetaModel};
use crate::taskgen::{EpisodeSource, EpisodeSpec, MetaExample, RngStream};

/// Mean accuracy over evaluation episodes with a normal-approximation 95%
/// interval. The standard deviation is the population one (divide by `T`),
/// so a single episode has zero spread.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
    pub ci_half_width: f64,
    pub episodes: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<Self> {
        if per_episode.is_empty() {
            return Err(invalid("evaluation needs at least one episode"));
        }
        let t = per_episode.len() as f64;
        // shifted by the first value so a constant sequence has an exact mean
        let shift = per_episode[0];
        let mean = shift + per_episode.iter().map(|a| a - shift).sum::<f64>() / t;
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / t;
        let std = var.sqrt();
        let std_error = std / t.sqrt();
        Ok(Self {
            mean,
            std,
            std_error,
            ci_half_width: 1.96 * std_error,
            episodes: per_episode.len(),
            per_episode,
        })
    }
}

/// Worker count from `METAEPI_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("METAEPI_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Scores `episodes` episodes drawn on `stream.index(t)`. Work is spread over
/// worker threads but results are merged in episode order, so the report does
/// not depend on the thread count.
pub fn evaluate_episodes<F>(
    source: &dyn EpisodeSource,
    spec: &EpisodeSpec,
    episodes: usize,
    stream: RngStream,
    threads: Option<usize>,
    score: F,
) -> Result<EvalReport>
where
    F: Fn(&MetaExample) -> Result<f64> + Sync,
{
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let workers = threads.unwrap_or_else(worker_threads).clamp(1, episodes);
    let run = |t: usize| -> Result<f64> {
        let ep = source.sample(spec, &stream.index(t as u64))?;
        score(&ep)
    };
    let mut results: Vec<Option<Result<f64>>> = vec![None; episodes];
    if workers == 1 {
        for (t, slot) in results.iter_mut().enumerate() {
            *slot = Some(run(t));
        }
    } else {
        let chunks: Vec<Vec<(usize, Result<f64>)>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    s.spawn(move || (w..episodes).step_by(workers).map(|t| (t, run(t))).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        for (t, r) in chunks.into_iter().flatten() {
            results[t] = Some(r);
        }
    }
    let accs = results
        .into_iter()
        .map(|r| r.expect("every episode scored"))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accs)
}

pub(crate) fn evaluate_source(
    model: &MetaModel,
    source: &dyn EpisodeSource,
    spec: &EpisodeSpec,
    episodes: usize,
    stream: RngStream,
    threads: Option<usize>,
) -> Result<EvalReport> {
    evaluate_episodes(source, spec, episodes, stream, threads, |ep| episode_accuracy(model, ep))
}

/// Evaluation stream used by [`evaluate_meta_model`] for a given seed.
pub fn eval_stream(seed: u64) -> RngStream {
    RngStream::new(seed).child("eval")
}

/// Mean meta-test accuracy of `model` over `episodes` freshly sampled episodes.
pub fn evaluate_meta_model(
    model: &MetaModel,
    test: &dyn EpisodeSource,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_source(model, test, spec, episodes, eval_stream(seed), None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub best: usize,
    pub scores: Vec<f64>,
}

/// Meta model selection: every candidate is scored on the same validation
/// episodes (one shared stream); the best mean accuracy wins, ties to the
/// lowest index.
pub fn meta_validate_select(
    candidates: &[(MetaModel, TrainConfig)],
    val: &dyn EpisodeSource,
    episodes: usize,
    seed: u64,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(invalid("meta-validation needs at least one candidate"));
    }
    let stream = RngStream::new(seed).child("meta-val");
    let scores = candidates
        .iter()
        .map(|(m, cfg)| evaluate_source(m, val, &cfg.spec, episodes, stream, None).map(|r| r.mean))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(Selection { best, scores })
}
