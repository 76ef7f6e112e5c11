//! Template instruction generation and its inverse parser.
//!
//! Every hop of a path becomes the clause `turn <dir> and walk to the
//! <landmark> .` and the instruction ends with `stop at the <landmark> .`
//! naming the goal again. Direction words come from fixed 30-degree buckets
//! of the relative pose; elevation overrides heading.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

use super::vocab::Vocabulary;
use super::{relative_pose, House, BUCKET_RAD};

/// Heading the agent faces when an episode starts. Episodes do not record a
/// starting orientation, so generator and policy share this constant.
pub const INITIAL_HEADING: f64 = 0.0;

/// Hard cap on generated instruction length in tokens.
pub const MAX_INSTRUCTION_TOKENS: usize = 60;

/// Bucket a relative pose into a direction word. Elevation wins over
/// heading; headings within 30 degrees of straight ahead are "straight",
/// otherwise the sign of alpha picks left (positive) or right.
pub fn direction_word(alpha: f64, beta: f64) -> &'static str {
    if beta > 0.0 {
        "up"
    } else if beta < 0.0 {
        "down"
    } else if alpha.abs() < BUCKET_RAD {
        "straight"
    } else if alpha > 0.0 {
        "left"
    } else {
        "right"
    }
}

/// Direction word and goal landmark of one hop, as told by the instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopClause {
    pub dir: String,
    pub landmark: String,
}

/// Generate the token sequence describing `path` through `house`. The agent
/// is assumed to start facing [`INITIAL_HEADING`] and to face its direction
/// of travel after every hop; landmark words are drawn from the target
/// viewpoint's assignment.
pub fn generate_instruction(house: &House, path: &[usize], seed: u64) -> Vec<String> {
    assert!(path.len() >= 2, "an instruction needs at least one hop");
    let vocab = Vocabulary::new();
    let mut rng = stream(seed, "instruction", 0);
    let mut heading = INITIAL_HEADING;
    let mut tokens: Vec<String> = Vec::new();
    let mut last_landmark = String::new();
    for hop in path.windows(2) {
        let (from, to) = (hop[0], hop[1]);
        let (alpha, beta, _) =
            relative_pose(house, from, to, heading).expect("path traverses a missing edge");
        let choices = &house.landmarks[to];
        let lm = choices[rng.gen_range(0..choices.len())];
        last_landmark = vocab.landmark_word(lm).to_string();
        for w in ["turn", direction_word(alpha, beta), "and", "walk", "to", "the"] {
            tokens.push(w.to_string());
        }
        tokens.push(last_landmark.clone());
        tokens.push(".".to_string());
        heading = house.bearing(from, to);
    }
    for w in ["stop", "at", "the"] {
        tokens.push(w.to_string());
    }
    tokens.push(last_landmark);
    tokens.push(".".to_string());
    assert!(
        tokens.len() <= MAX_INSTRUCTION_TOKENS,
        "instruction of {} tokens exceeds the {MAX_INSTRUCTION_TOKENS}-token cap",
        tokens.len()
    );
    tokens
}

/// Heading an agent faces at `path[t]` after walking the path from its
/// start: the initial heading at t = 0, afterwards the bearing of the hop
/// that led there. Matches instruction generation and teacher rollouts.
pub fn heading_along(house: &House, path: &[usize], t: usize) -> f64 {
    assert!(t < path.len(), "position {t} beyond a {}-viewpoint path", path.len());
    if t == 0 {
        INITIAL_HEADING
    } else {
        house.bearing(path[t - 1], path[t])
    }
}

/// Split an instruction back into hop clauses and the stop landmark.
/// Inverse of [`generate_instruction`] for all generated data.
pub fn parse_instruction(tokens: &[String]) -> Result<(Vec<HopClause>, String)> {
    let mut hops = Vec::new();
    let mut stop_landmark: Option<String> = None;
    let mut clause: Vec<&str> = Vec::new();
    for tok in tokens {
        if tok == "." {
            match clause.as_slice() {
                ["turn", dir, "and", "walk", "to", "the", lm] => hops.push(HopClause {
                    dir: dir.to_string(),
                    landmark: lm.to_string(),
                }),
                ["stop", "at", "the", lm] => stop_landmark = Some(lm.to_string()),
                other => {
                    return Err(Error::Data(format!(
                        "unrecognized instruction clause {other:?}"
                    )))
                }
            }
            clause.clear();
        } else {
            clause.push(tok);
        }
    }
    if !clause.is_empty() {
        return Err(Error::Data("instruction ends mid-clause".into()));
    }
    let stop =
        stop_landmark.ok_or_else(|| Error::Data("instruction has no stop clause".into()))?;
    Ok((hops, stop))
}

/// Check that an instruction's clauses describe `path` hop by hop: matching
/// direction buckets and a landmark actually present at each hop's target.
pub fn instruction_matches_path(house: &House, tokens: &[String], path: &[usize]) -> bool {
    let vocab = Vocabulary::new();
    let (hops, _) = match parse_instruction(tokens) {
        Ok(x) => x,
        Err(_) => return false,
    };
    if hops.len() != path.len() - 1 {
        return false;
    }
    let mut heading = INITIAL_HEADING;
    for (clause, hop) in hops.iter().zip(path.windows(2)) {
        let (from, to) = (hop[0], hop[1]);
        let (alpha, beta, _) = match relative_pose(house, from, to, heading) {
            Ok(p) => p,
            Err(_) => return false,
        };
        if clause.dir != direction_word(alpha, beta) {
            return false;
        }
        let lm = match vocab.id(&clause.landmark).ok().and_then(|id| vocab.landmark_of_token(id)) {
            Some(lm) => lm,
            None => return false,
        };
        if !house.landmarks[to].contains(&lm) {
            return false;
        }
        // raw bearing, exactly as the generator tracks it: wrapping here can
        // flip the word on perfect-backtrack hops where alpha sits at pi
        heading = house.bearing(from, to);
    }
    true
}
