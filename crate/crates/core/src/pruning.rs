//! Iterative pruning search over a trained console.
//!
//! A run trains the full console, takes its whole-song loss as the threshold
//! `L_min`, then alternates pruning stages and fine-tuning. A stage proposes
//! candidate sets, scores each with the candidates masked out and accepts it
//! when the loss stays within `tolerance` of `L_min`. Accepted nodes are
//! removed from the graph once the stage ends.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{apply_prune, Graph, GraphError, NodeId, ProcessorKind, PruneMask};
use crate::losses::{LossBreakdown, Phase};
use crate::params::ParamStore;
use crate::training::{evaluate, train, SongSession, TraceRecord, TrainConfig, TrainError, TrainRun};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid pruning configuration: {0}")]
    Config(String),
    /// Training diverged; `checkpoint` holds the graph and parameters from the
    /// end of the last completed phase.
    #[error("search aborted in {phase}: {source}")]
    Diverged {
        phase: String,
        source: TrainError,
        checkpoint: Box<(Graph, ParamStore)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    BruteForce,
    DryWet,
    Hybrid,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "brute_force" | "brute-force" | "bruteforce" => Some(Self::BruteForce),
            "dry_wet" | "dry-wet" | "drywet" => Some(Self::DryWet),
            "hybrid" => Some(Self::Hybrid),
            _ => None,
        }
    }
}

/// The sampler a single stage actually runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSampler {
    BruteForce,
    DryWet,
}

/// Serializes a tolerance, writing `+∞` as the string `"inf"`.
mod tolerance_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text("inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad tolerance {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    #[serde(with = "tolerance_serde")]
    pub tolerance: f64,
    pub sampler: SamplerKind,
    pub rounds: usize,
    /// Initial candidate ratio `r_t` of the dry/wet sampler.
    pub r_init: f64,
    /// Hybrid runs brute force on every round divisible by this.
    pub hybrid_period: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.01,
            sampler: SamplerKind::Hybrid,
            rounds: 12,
            r_init: 0.1,
            hybrid_period: 4,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.tolerance >= 0.0) {
            return Err(PruneError::Config("tolerance must be non-negative".into()));
        }
        if !(self.r_init > 0.0 && self.r_init <= 1.0) {
            return Err(PruneError::Config("r_init must lie in (0, 1]".into()));
        }
        if self.hybrid_period == 0 {
            return Err(PruneError::Config("hybrid period must be at least 1".into()));
        }
        Ok(())
    }

    /// Sampler for round `round` (1-based).
    pub fn stage_sampler(&self, round: usize) -> StageSampler {
        match self.sampler {
            SamplerKind::BruteForce => StageSampler::BruteForce,
            SamplerKind::DryWet => StageSampler::DryWet,
            SamplerKind::Hybrid if round % self.hybrid_period == 0 => StageSampler::BruteForce,
            SamplerKind::Hybrid => StageSampler::DryWet,
        }
    }
}

/// One line of the trial log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub round: usize,
    pub sampler: StageSampler,
    pub candidates: Vec<NodeId>,
    pub l_a: f64,
    /// `L_min` when the trial was scored.
    pub threshold: f64,
    pub accepted: bool,
}

/// Mutable state of one search: the stage mask over the current graph, the
/// running threshold and the trial log.
#[derive(Clone, Debug)]
pub struct PruneState {
    pub mask: PruneMask,
    pub l_min: f64,
    pub tolerance: f64,
    pub round: usize,
    pub trials: Vec<TrialRecord>,
}

impl PruneState {
    pub fn new(l_min: f64, tolerance: f64) -> Self {
        Self {
            mask: PruneMask::new(),
            l_min,
            tolerance,
            round: 0,
            trials: Vec::new(),
        }
    }

    /// Acceptance test. `l_a ≤ L_min` also passes so that zero-effect
    /// candidates are accepted at zero tolerance.
    pub fn accepts(&self, l_a: f64) -> bool {
        l_a < self.l_min + self.tolerance || l_a <= self.l_min
    }

    /// Scores the mask with `candidates` removed; on acceptance folds them into
    /// the mask and lowers the threshold when beaten.
    pub fn trial<E>(
        &mut self,
        sampler: StageSampler,
        candidates: &[NodeId],
        eval: &mut impl FnMut(&PruneMask) -> Result<f64, E>,
    ) -> Result<bool, E> {
        let proposal = self.mask.compose(&PruneMask::removing(candidates.iter().copied()));
        let l_a = eval(&proposal)?;
        let accepted = self.accepts(l_a);
        self.trials.push(TrialRecord {
            round: self.round,
            sampler,
            candidates: candidates.to_vec(),
            l_a,
            threshold: self.l_min,
            accepted,
        });
        if accepted {
            self.mask = proposal;
            self.l_min = self.l_min.min(l_a);
        }
        Ok(accepted)
    }
}

/// Tries every node of `pool` once, one at a time, in a uniformly random order.
pub fn brute_force_stage<E>(
    state: &mut PruneState,
    mut pool: Vec<NodeId>,
    rng: &mut impl Rng,
    eval: &mut impl FnMut(&PruneMask) -> Result<f64, E>,
) -> Result<(), E> {
    pool.sort();
    while !pool.is_empty() {
        let v = pool.swap_remove(rng.random_range(0..pool.len()));
        state.trial(StageSampler::BruteForce, &[v], eval)?;
    }
    Ok(())
}

struct TypePool {
    /// Remaining nodes, ascending by (weight, id).
    nodes: Vec<NodeId>,
    count: usize,
    ratio: f64,
}

impl TypePool {
    fn batch(&self) -> usize {
        (self.ratio * self.count as f64).floor() as usize
    }
}

/// Per-type smallest-weight search. `nodes` pairs every prunable node with its
/// type and current dry/wet weight; ties are broken by ascending id.
pub fn dry_wet_stage<E>(
    state: &mut PruneState,
    nodes: &[(NodeId, ProcessorKind, f64)],
    r_init: f64,
    rng: &mut impl Rng,
    eval: &mut impl FnMut(&PruneMask) -> Result<f64, E>,
) -> Result<(), E> {
    let mut pools: BTreeMap<ProcessorKind, TypePool> = BTreeMap::new();
    for &(id, kind, _) in nodes {
        pools
            .entry(kind)
            .or_insert_with(|| TypePool {
                nodes: Vec::new(),
                count: 0,
                ratio: r_init,
            })
            .nodes
            .push(id);
    }
    let weight: BTreeMap<NodeId, f64> = nodes.iter().map(|&(id, _, w)| (id, w)).collect();
    for pool in pools.values_mut() {
        pool.nodes.sort_by(|a, b| weight[a].total_cmp(&weight[b]).then(a.cmp(b)));
        pool.count = pool.nodes.len();
    }
    let mut types: Vec<ProcessorKind> = pools.keys().copied().collect();
    while !types.is_empty() {
        let ti = rng.random_range(0..types.len());
        let pool = pools.get_mut(&types[ti]).expect("pool per type");
        let batch = pool.batch();
        let take = batch.max(1).min(pool.nodes.len());
        let cands: Vec<NodeId> = pool.nodes[..take].to_vec();
        if state.trial(StageSampler::DryWet, &cands, eval)? {
            pool.nodes.drain(..take);
            if pool.nodes.is_empty() {
                types.remove(ti);
            }
        } else if batch > 1 {
            pool.ratio /= 2.0;
        } else {
            types.remove(ti);
        }
    }
    Ok(())
}

/// Summary of one pruning round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub sampler: StageSampler,
    pub trials: usize,
    pub accepted_trials: usize,
    pub removed: Vec<NodeId>,
    pub processors_left: usize,
    pub l_min: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub graph: Graph,
    pub params: ParamStore,
    /// Threshold after the last stage.
    pub l_min: f64,
    /// Whole-song loss of the console right after pre-prune training.
    pub console_loss: LossBreakdown,
    /// Whole-song loss of the final graph.
    pub final_loss: LossBreakdown,
    pub trace: Vec<TraceRecord>,
    pub trials: Vec<TrialRecord>,
    pub rounds: Vec<RoundSummary>,
    /// Wall-clock seconds per phase, in run order.
    pub timings: Vec<(String, f64)>,
}

/// Progress notifications from [`search_with`].
#[derive(Debug)]
pub enum SearchEvent<'a> {
    PhaseDone { name: &'a str, seconds: f64 },
    Trial(&'a TrialRecord),
}

pub fn search(
    console: &Graph,
    params: ParamStore,
    session: &SongSession,
    train_cfg: &TrainConfig,
    prune_cfg: &PruneConfig,
) -> Result<SearchOutcome, PruneError> {
    search_with(console, params, session, train_cfg, prune_cfg, &mut |_| {})
}

/// Full run: pre-prune training, `L_min` = evaluate, then `rounds` of
/// {pruning stage, graph surgery, fine-tuning}, then a terminal evaluate.
pub fn search_with(
    console: &Graph,
    mut params: ParamStore,
    session: &SongSession,
    train_cfg: &TrainConfig,
    prune_cfg: &PruneConfig,
    on_event: &mut dyn FnMut(SearchEvent<'_>),
) -> Result<SearchOutcome, PruneError> {
    prune_cfg.validate()?;
    train_cfg.validate()?;
    let mut timings = Vec::new();
    let mut timed = |name: String, start: Instant, on_event: &mut dyn FnMut(SearchEvent<'_>)| {
        let seconds = start.elapsed().as_secs_f64();
        on_event(SearchEvent::PhaseDone { name: &name, seconds });
        timings.push((name, seconds));
    };

    let t = Instant::now();
    let checkpoint = (console.clone(), params.clone());
    let mut trace = train(console, &mut params, session, TrainRun::console(train_cfg.preprune_steps), train_cfg)
        .map_err(|e| diverged("pre-prune training", e, &checkpoint))?;
    timed("preprune".into(), t, on_event);

    let t = Instant::now();
    let console_loss = evaluate(console, &params, &PruneMask::new(), session, train_cfg)?;
    timed("threshold".into(), t, on_event);

    let mut graph = console.clone();
    let mut state = PruneState::new(console_loss.audio, prune_cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(prune_cfg.seed);
    let mut rounds = Vec::with_capacity(prune_cfg.rounds);
    for round in 1..=prune_cfg.rounds {
        let t = Instant::now();
        state.round = round;
        state.mask = PruneMask::new();
        let first_trial = state.trials.len();
        let sampler = prune_cfg.stage_sampler(round);
        {
            let (graph, params) = (&graph, &params);
            let mut eval = |m: &PruneMask| -> Result<f64, TrainError> {
                evaluate(graph, params, m, session, train_cfg).map(|b| b.audio)
            };
            match sampler {
                StageSampler::BruteForce => {
                    let pool = graph.processors().map(|(id, _)| id).collect();
                    brute_force_stage(&mut state, pool, &mut rng, &mut eval)?;
                }
                StageSampler::DryWet => {
                    let nodes: Vec<_> = graph
                        .processors()
                        .map(|(id, k)| (id, k, params.weight(id).unwrap_or(1.0)))
                        .collect();
                    dry_wet_stage(&mut state, &nodes, prune_cfg.r_init, &mut rng, &mut eval)?;
                }
            }
        }
        for rec in &state.trials[first_trial..] {
            on_event(SearchEvent::Trial(rec));
        }
        timed(format!("round {round} trials"), t, on_event);

        let removed: Vec<NodeId> = state.mask.removed().collect();
        graph = apply_prune(&graph, &state.mask)?;
        params.retain_graph(&graph);
        let t = Instant::now();
        let checkpoint = (graph.clone(), params.clone());
        let run = TrainRun {
            phase: Phase::Prune,
            steps: train_cfg.finetune_steps,
            first_step: train_cfg.preprune_steps + (round - 1) * train_cfg.finetune_steps,
            prune_steps_before: (round - 1) * train_cfg.finetune_steps,
            stream: round as u64,
        };
        let ft = train(&graph, &mut params, session, run, train_cfg)
            .map_err(|e| diverged(&format!("round {round} fine-tuning"), e, &checkpoint))?;
        trace.extend(ft);
        timed(format!("round {round} finetune"), t, on_event);

        let trials = &state.trials[first_trial..];
        rounds.push(RoundSummary {
            round,
            sampler,
            trials: trials.len(),
            accepted_trials: trials.iter().filter(|r| r.accepted).count(),
            removed,
            processors_left: graph.processor_count(),
            l_min: state.l_min,
        });
    }

    let t = Instant::now();
    let final_loss = evaluate(&graph, &params, &PruneMask::new(), session, train_cfg)?;
    timed("final evaluate".into(), t, on_event);
    Ok(SearchOutcome {
        graph,
        params,
        l_min: state.l_min,
        console_loss,
        final_loss,
        trace,
        trials: state.trials,
        rounds,
        timings,
    })
}

fn diverged(phase: &str, source: TrainError, checkpoint: &(Graph, ParamStore)) -> PruneError {
    PruneError::Diverged {
        phase: phase.to_string(),
        source,
        checkpoint: Box::new(checkpoint.clone()),
    }
}

/// Loss increase from removing a single processor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub node: NodeId,
    pub kind: ProcessorKind,
    pub weight: f64,
    pub delta: f64,
}

/// `Δ_i = L_a(G without v_i) − L_a(G)` for every processor, by masking.
pub fn importance_scan(
    graph: &Graph,
    params: &ParamStore,
    session: &SongSession,
    cfg: &TrainConfig,
) -> Result<Vec<ImportanceRecord>, TrainError> {
    let base = evaluate(graph, params, &PruneMask::new(), session, cfg)?.audio;
    graph
        .processors()
        .map(|(id, kind)| {
            let l = evaluate(graph, params, &PruneMask::removing([id]), session, cfg)?.audio;
            Ok(ImportanceRecord {
                node: id,
                kind,
                weight: params.weight(id).unwrap_or(1.0),
                delta: l - base,
            })
        })
        .collect()
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). `None` for fewer
/// than two points or when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between weight and Δ within each processor type.
pub fn per_type_spearman(records: &[ImportanceRecord]) -> BTreeMap<ProcessorKind, Option<f64>> {
    let mut by: BTreeMap<ProcessorKind, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = by.entry(r.kind).or_default();
        e.0.push(r.weight);
        e.1.push(r.delta);
    }
    by.into_iter().map(|(k, (w, d))| (k, spearman(&w, &d))).collect()
}
