//! Fine-tuning: mixed imitation and policy-gradient training, plus the
//! greedy evaluation loop shared by validation, ablations and the CLI.
//!
//! Each iteration runs two rollouts of the same episode on one graph: a
//! teacher-forced pass for the imitation term and a sampled pass for the
//! policy-gradient term. Rewards shape progress toward the goal (geodesic
//! distance deltas) with a terminal bonus of +2 for stopping inside the
//! success radius and -2 otherwise. A learned scalar baseline, fed the
//! detached recurrent state, reduces variance; its squared-error loss is
//! added to the optimizer objective but cannot reach the encoder because
//! of the detach.

use crate::agent::{Agent, Mode, Rollout};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, episode_metrics, EpisodeMetrics, MetricSummary, TrajectoryPair, SUCCESS_RADIUS,
};
use crate::model::{tokenize, Model};
use crate::rng::stream;
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor};
use crate::world::dataset::Dataset;
use crate::world::vocab::Vocabulary;
use crate::world::{candidate_set, Geodesics, House, VISION_NOISE_SIGMA};
use rand::Rng;

/// Terminal reward magnitude for stopping inside / outside the success radius.
pub const TERMINAL_REWARD: f64 = 2.0;

/// Dense geodesic tables for every house of a dataset, indexed by house id.
pub struct GeoTable {
    tables: Vec<Geodesics>,
}

impl GeoTable {
    pub fn new(houses: &[House]) -> Self {
        GeoTable {
            tables: houses.iter().map(Geodesics::new).collect(),
        }
    }

    pub fn get(&self, house_id: usize) -> &Geodesics {
        &self.tables[house_id]
    }
}

/// Sum of per-step cross-entropies against the rollout's own actions. On a
/// teacher-forced rollout the actions are the ground-truth ones, which makes
/// this the imitation loss.
pub fn imitation_loss(g: &Graph, run: &Rollout) -> Tensor {
    let mut total = g.scalar(0.0);
    for step in &run.steps {
        total = total.add(&step.logits.cross_entropy(step.action));
    }
    total
}

/// Shaped per-step rewards for an executed rollout: each step earns the
/// geodesic distance it gained toward the goal, and the final step adds the
/// terminal bonus. Summing the shaping terms telescopes to
/// `d(start, goal) - d(end, goal)`.
pub fn compute_rewards(geo: &Geodesics, goal: usize, run: &Rollout) -> Vec<f64> {
    let last = run.steps.len() - 1;
    run.steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let prev = step.viewpoint_before;
            let cur = if step.action == 0 {
                prev
            } else {
                step.candidates[step.action].to
            };
            let mut r = geo.distance(prev, goal) - geo.distance(cur, goal);
            if t == last {
                r += if geo.distance(cur, goal) <= SUCCESS_RADIUS {
                    TERMINAL_REWARD
                } else {
                    -TERMINAL_REWARD
                };
            }
            r
        })
        .collect()
}

/// Discounted returns `R_t = r_t + gamma * R_{t+1}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Baseline predictions for every step of a rollout: the scalar head applied
/// to the detached recurrent state that scored the step. Detaching means the
/// baseline loss trains only the head, never the policy.
pub fn baseline_values(g: &Graph, model: &Model, text_cls: &Tensor, run: &Rollout) -> Vec<Tensor> {
    let mut state = text_cls.clone();
    let mut out = Vec::with_capacity(run.steps.len());
    for step in &run.steps {
        out.push(model.head(g, "head_baseline", &state.detach()));
        state = step.state_after.clone();
    }
    out
}

/// Policy-gradient loss `-sum_t adv_t * log p_t[a_t]` with the advantages
/// supplied as plain numbers, already detached from the graph.
pub fn policy_gradient_loss(g: &Graph, run: &Rollout, advantages: &[f64]) -> Tensor {
    assert_eq!(run.steps.len(), advantages.len());
    let mut total = g.scalar(0.0);
    for (step, &adv) in run.steps.iter().zip(advantages) {
        total = total.add(&step.logits.cross_entropy(step.action).scale(adv));
    }
    total
}

/// Mean squared error between baseline predictions and returns.
pub fn baseline_loss(g: &Graph, baselines: &[Tensor], returns: &[f64]) -> Tensor {
    let mut total = g.scalar(0.0);
    for (b, &r) in baselines.iter().zip(returns) {
        let diff = b.add_const(-r);
        total = total.add(&diff.mul(&diff).sum());
    }
    total.scale(1.0 / baselines.len() as f64)
}

/// How actions are chosen during an evaluation pass.
pub enum Policy<'a> {
    /// Greedy decoding with the model. The standard evaluation protocol.
    Greedy { model: &'a Model },
    /// Follow the ground-truth path. Every metric should come out perfect
    /// on single-goal data; used as an end-to-end oracle.
    Teacher { model: &'a Model },
    /// Uniform over STOP and all neighbors, no model involved. The floor
    /// any trained agent has to clear.
    Random { seed: u64 },
}

/// One evaluated episode with its trajectory, kept so callers can write
/// trajectory files or debug failures.
pub struct EvalEpisode {
    pub house_id: usize,
    pub predicted: Vec<usize>,
    pub reference: Vec<usize>,
    pub metrics: EpisodeMetrics,
}

/// Run a policy over every episode of a split and aggregate the metrics.
pub fn evaluate_split(
    policy: &Policy,
    modules: crate::config::ModuleSet,
    data: &Dataset,
    split: &str,
    max_steps: usize,
    geo: &GeoTable,
) -> Result<(MetricSummary, Vec<EvalEpisode>)> {
    let episodes = data.split(split)?;
    if episodes.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no episodes")));
    }
    let vocab = Vocabulary::new();
    let mut records = Vec::with_capacity(episodes.len());
    for (ordinal, episode) in episodes.iter().enumerate() {
        let house = data.house(episode.house_id);
        let predicted = match policy {
            Policy::Greedy { model } | Policy::Teacher { model } => {
                let g = Graph::new();
                let tok = tokenize(&episode.instruction, &vocab)?;
                let text = model.encode_text(&g, &tok);
                let agent = Agent::new(model, modules);
                let mode = match policy {
                    Policy::Greedy { .. } => Mode::Greedy,
                    _ => Mode::Teacher,
                };
                agent
                    .rollout(&g, house, episode, &text, mode, max_steps)?
                    .trajectory
            }
            Policy::Random { seed } => {
                random_walk_trajectory(house, episode.path[0], *seed, ordinal, max_steps)
            }
        };
        let pair = TrajectoryPair::new(house, geo.get(episode.house_id), &predicted, &episode.path)?;
        records.push(EvalEpisode {
            house_id: episode.house_id,
            predicted: predicted.clone(),
            reference: episode.path.clone(),
            metrics: episode_metrics(&pair),
        });
    }
    let summary = aggregate(&records.iter().map(|r| r.metrics).collect::<Vec<_>>())?;
    Ok((summary, records))
}

/// Uniform random walk over STOP plus the neighbors of the current
/// viewpoint, seeded per episode so split subsets stay reproducible.
fn random_walk_trajectory(
    house: &House,
    start: usize,
    seed: u64,
    ordinal: usize,
    max_steps: usize,
) -> Vec<usize> {
    let mut rng = stream(seed, "random-walk", ordinal as u64);
    let mut vp = start;
    let mut heading = crate::world::instruction::INITIAL_HEADING;
    let mut trajectory = vec![vp];
    for _ in 0..max_steps {
        let cands = candidate_set(house, vp, heading, VISION_NOISE_SIGMA);
        let a = rng.gen_range(0..cands.len());
        if a == 0 {
            break;
        }
        heading = house.bearing(vp, cands[a].to);
        vp = cands[a].to;
        trajectory.push(vp);
    }
    trajectory
}

/// One evaluation row of the training history.
pub struct HistoryRow {
    pub iteration: usize,
    pub split: &'static str,
    pub summary: MetricSummary,
}

pub struct FinetuneReport {
    pub history: Vec<HistoryRow>,
    /// Iteration whose val_unseen SPL was best; the model is left holding
    /// that iteration's parameters.
    pub best_iteration: usize,
    pub best_val_unseen_spl: f64,
}

/// Mixed imitation + policy-gradient fine-tuning.
///
/// Evaluates on both validation splits before training and every
/// `eval_every` iterations, tracks the best val_unseen SPL, and restores the
/// best parameters into the model before returning. With `iterations = 0`
/// the model is left exactly as it came in.
pub fn train_finetune(model: &Model, cfg: &Config, data: &Dataset) -> Result<FinetuneReport> {
    let max_steps = cfg.max_steps_for(data.style);
    let geo = GeoTable::new(&data.houses);
    let vocab = Vocabulary::new();
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), model.params());
    let mut episode_rng = stream(cfg.seed, "finetune-episodes", 0);
    let mut action_rng = stream(cfg.seed, "finetune-actions", 0);

    let mut history = Vec::new();
    let best_iteration = 0;
    let best_spl = f64::NEG_INFINITY;
    let mut best_params = model.params().to_flat();

    let evaluate = |model: &Model,
                        iteration: usize,
                        history: &mut Vec<HistoryRow>,
                        best: &mut (usize, f64, Vec<f64>)|
     -> Result<()> {
        for split in ["val_seen", "val_unseen"] {
            let (summary, _) = evaluate_split(
                &Policy::Greedy { model },
                cfg.modules,
                data,
                split,
                max_steps,
                &geo,
            )?;
            if split == "val_unseen" && summary.spl > best.1 {
                *best = (iteration, summary.spl, model.params().to_flat());
            }
            history.push(HistoryRow {
                iteration,
                split,
                summary,
            });
        }
        Ok(())
    };

    let mut best = (best_iteration, best_spl, std::mem::take(&mut best_params));
    evaluate(model, 0, &mut history, &mut best)?;

    for iteration in 1..=cfg.iterations {
        // One optimizer step per iteration; gradients accumulate over
        // `batch` episodes, each on its own graph so tape memory stays at
        // a single episode.
        for _ in 0..cfg.batch {
            let episode = &data.train[episode_rng.gen_range(0..data.train.len())];
            let house = data.house(episode.house_id);
            let g = Graph::new();
            let tok = tokenize(&episode.instruction, &vocab)?;
            let text = model.encode_text(&g, &tok);
            let agent = Agent::new(model, cfg.modules);

            let teacher = agent.rollout(&g, house, episode, &text, Mode::Teacher, max_steps)?;
            let il = imitation_loss(&g, &teacher);

            let sampled = agent.rollout(
                &g,
                house,
                episode,
                &text,
                Mode::Sample(&mut action_rng),
                max_steps,
            )?;
            let rewards = compute_rewards(geo.get(episode.house_id), episode.goal, &sampled);
            let returns = discounted_returns(&rewards, cfg.gamma);
            let cls = text.x.rows(0, 1);
            let baselines = baseline_values(&g, model, &cls, &sampled);
            let advantages: Vec<f64> = returns
                .iter()
                .zip(&baselines)
                .map(|(&r, b)| r - b.item())
                .collect();
            let rl = policy_gradient_loss(&g, &sampled, &advantages);
            let value = baseline_loss(&g, &baselines, &returns);

            let total = rl
                .add(&il.scale(cfg.lambda))
                .add(&value)
                .scale(1.0 / cfg.batch as f64);
            let loss = total.item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "fine-tuning loss became {loss} at iteration {iteration}"
                )));
            }
            total.backward();
        }
        opt.step(model.params());

        if iteration % cfg.eval_every == 0 || iteration == cfg.iterations {
            evaluate(model, iteration, &mut history, &mut best)?;
        }
    }

    let (best_iteration, best_spl, best_params) = best;
    model.params().load_flat(&best_params);
    Ok(FinetuneReport {
        history,
        best_iteration,
        best_val_unseen_spl: best_spl,
    })
}
