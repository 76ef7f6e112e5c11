//! The navigation policy: steps an episode through a house by scoring each
//! step's candidates with the history, orientation and vision modules and
//! fusing the three score vectors into one action distribution.
//!
//! A whole rollout lives on one [`Graph`], so the recurrent state carries
//! gradients across steps and a single backward pass covers every step's
//! loss. The instruction is encoded once per rollout and shared.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModuleSet;
use crate::error::{Error, Result};
use crate::model::{Model, Module, TextEncoding};
use crate::tensor::{Graph, Tensor};
use crate::world::dataset::Episode;
use crate::world::instruction::INITIAL_HEADING;
use crate::world::{candidate_set, Candidate, House, ORIENTATION_DIM, VISION_NOISE_SIGMA};

/// How actions are chosen during a rollout.
pub enum Mode<'a> {
    /// Highest probability; ties go to the lowest candidate index.
    Greedy,
    /// Draw from the action distribution.
    Sample(&'a mut ChaCha8Rng),
    /// Follow the episode's ground-truth path, then STOP.
    Teacher,
}

/// One executed navigation step, with the tensors a trainer needs.
pub struct RolloutStep {
    pub viewpoint_before: usize,
    pub candidates: Vec<Candidate>,
    /// Fused pre-softmax action logits, one per candidate.
    pub logits: Tensor,
    /// Softmax of `logits`.
    pub probs: Tensor,
    /// Chosen candidate index (0 is STOP).
    pub action: usize,
    /// Updated recurrent state, 1 x d_model.
    pub state_after: Tensor,
    /// Heading after executing the action.
    pub heading_after: f64,
}

/// A completed episode run.
pub struct Rollout {
    /// Viewpoints visited, starting at the episode start.
    pub trajectory: Vec<usize>,
    pub steps: Vec<RolloutStep>,
    /// True when the agent chose STOP, false when max_steps cut it off.
    pub stopped: bool,
}

pub struct Agent<'m> {
    pub model: &'m Model,
    pub modules: ModuleSet,
}

/// Candidate features stacked into constant tensors: vision rows and
/// orientation rows, one per candidate.
pub fn candidate_tensors(g: &Graph, cands: &[Candidate]) -> (Tensor, Tensor) {
    let k = cands.len();
    let d_v = cands[0].vision.len();
    let mut v = Vec::with_capacity(k * d_v);
    let mut o = Vec::with_capacity(k * ORIENTATION_DIM);
    for c in cands {
        v.extend_from_slice(&c.vision);
        o.extend_from_slice(&c.orientation);
    }
    (
        g.constant(&[k, d_v], v),
        g.constant(&[k, ORIENTATION_DIM], o),
    )
}

impl Agent<'_> {
    pub fn new(model: &Model, modules: ModuleSet) -> Agent<'_> {
        Agent { model, modules }
    }

    /// Score one step's candidates and update the recurrent state.
    /// Returns the fused logits and the next state row.
    pub fn step_scores(
        &self,
        g: &Graph,
        text: &TextEncoding,
        state: &Tensor,
        cands: &[Candidate],
    ) -> (Tensor, Tensor) {
        assert!(!cands.is_empty(), "candidate set always contains STOP");
        let m = self.model;
        let (v, o) = candidate_tensors(g, cands);

        let vo = m.encode_vision_orientation(g, &v, &o);
        let (_, f_h, _) = m.cross_stack(g, Module::History, &text.x, &state.concat_rows(&vo));
        let p_h = m.score(g, Module::History, &f_h);
        let next_state = m.encoder_block(g, "self_h", &f_h, None).rows(0, 1);

        let p_o = self.modules.orientation.then(|| {
            let enc = m.encode_orientation(g, &o);
            let (_, f, _) = m.cross_stack(g, Module::Orientation, &text.x, &state.concat_rows(&enc));
            m.score(g, Module::Orientation, &f)
        });
        let p_v = self.modules.vision.then(|| {
            let enc = m.encode_vision(g, &v);
            let (_, f, _) = m.cross_stack(g, Module::Vision, &text.x, &state.concat_rows(&enc));
            m.score(g, Module::Vision, &f)
        });

        let logits = m.fuse_logits(g, &p_h, p_o.as_ref(), p_v.as_ref());
        (logits, next_state)
    }

    /// Run an episode until STOP or `max_steps` actions.
    pub fn rollout(
        &self,
        g: &Graph,
        house: &House,
        episode: &Episode,
        text: &TextEncoding,
        mut mode: Mode,
        max_steps: usize,
    ) -> Result<Rollout> {
        assert!(max_steps >= 1, "rollout needs at least one step");
        let start = episode.path[0];
        let mut viewpoint = start;
        let mut heading = INITIAL_HEADING;
        // The recurrent state starts as the [CLS] row of the encoded text.
        let mut state = text.x.rows(0, 1);
        let mut trajectory = vec![start];
        let mut steps = Vec::new();
        let mut stopped = false;

        for step_index in 0..max_steps {
            let viewpoint_before = viewpoint;
            let cands = candidate_set(house, viewpoint, heading, VISION_NOISE_SIGMA);
            let (logits, next_state) = self.step_scores(g, text, &state, &cands);
            let probs = logits.softmax(0);

            let action = match &mut mode {
                Mode::Greedy => argmax_lowest(&probs.data()),
                Mode::Sample(rng) => sample_index(&probs.data(), rng),
                Mode::Teacher => teacher_action(&cands, &episode.path, step_index, viewpoint)?,
            };

            if action != 0 {
                let moved_to = cands[action].to;
                heading = house.bearing(viewpoint, moved_to);
                viewpoint = moved_to;
                trajectory.push(viewpoint);
            }
            state = next_state.clone();
            steps.push(RolloutStep {
                viewpoint_before,
                candidates: cands,
                logits,
                probs,
                action,
                state_after: next_state,
                heading_after: heading,
            });
            if action == 0 {
                stopped = true;
                break;
            }
        }
        Ok(Rollout {
            trajectory,
            steps,
            stopped,
        })
    }
}

/// Argmax with ties broken toward the lowest index, for determinism.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The next ground-truth viewpoint's candidate index; STOP once the path is
/// exhausted. In teacher mode the agent is at `path[step_index]` by
/// construction, so the next hop is always an adjacent candidate unless the
/// episode data is corrupt.
fn teacher_action(
    cands: &[Candidate],
    path: &[usize],
    step_index: usize,
    viewpoint: usize,
) -> Result<usize> {
    if path.get(step_index).copied() != Some(viewpoint) {
        return Err(Error::Data(format!(
            "teacher rollout expected viewpoint {:?} at step {step_index}, agent is at {viewpoint}",
            path.get(step_index)
        )));
    }
    match path.get(step_index + 1) {
        None => Ok(0),
        Some(&next) => cands
            .iter()
            .position(|c| c.to == next)
            .filter(|&i| i != 0)
            .ok_or_else(|| {
                Error::Data(format!(
                    "ground-truth hop {viewpoint} -> {next} is not among the candidates"
                ))
            }),
    }
}
