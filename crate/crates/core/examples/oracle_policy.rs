//! Hand-coded reference policy to measure how identifiable the navigation
//! task is from the observations the model actually receives: instruction
//! tokens plus per-candidate (vision, alpha, beta). Upper-bounds what any
//! learned policy can reach on this world.

use lovis_core::metrics::{episode_metrics, TrajectoryPair};
use lovis_core::world::dataset::{make_dataset, Style};
use lovis_core::world::vocab::Vocabulary;
use lovis_core::world::instruction::INITIAL_HEADING;
use lovis_core::world::{candidate_set, Candidate, Geodesics, House, VISION_NOISE_SIGMA};

struct Parsed {
    hops: Vec<(usize, usize)>, // (direction index, landmark id)
    stop_landmark: usize,
}

fn parse(instruction: &str, vocab: &Vocabulary) -> Parsed {
    let words: Vec<&str> = instruction.split_whitespace().collect();
    let mut hops = Vec::new();
    let mut stop_landmark = 0;
    let mut i = 0;
    while i < words.len() {
        if words[i] == "turn" {
            let dir = ["left", "right", "straight", "up", "down"]
                .iter()
                .position(|d| *d == words[i + 1])
                .unwrap();
            let lm = vocab
                .landmark_of_token(vocab.id(words[i + 6]).unwrap())
                .unwrap();
            hops.push((dir, lm));
            i += 8;
        } else {
            // "stop at the <landmark> ."
            stop_landmark = vocab
                .landmark_of_token(vocab.id(words[i + 3]).unwrap())
                .unwrap();
            i += 5;
        }
    }
    Parsed { hops, stop_landmark }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

/// Pick the candidate whose vision feature best matches the named landmark.
/// The direction word is a hard filter first (the generator always derives
/// it from the true hop), falling back to all candidates if nothing matches.
fn pick(house: &House, cands: &[Candidate], dir: usize, lm: usize) -> usize {
    let basis = house.basis.vector(lm);
    let matches_dir = |c: &Candidate| match dir {
        0 => c.beta == 0.0 && c.alpha > 30f64.to_radians(),
        1 => c.beta == 0.0 && c.alpha < -30f64.to_radians(),
        2 => c.beta == 0.0 && c.alpha.abs() <= 30f64.to_radians(),
        3 => c.beta > 0.0,
        _ => c.beta < 0.0,
    };
    let filtered: Vec<usize> = (1..cands.len()).filter(|&i| matches_dir(&cands[i])).collect();
    let pool = if filtered.is_empty() {
        (1..cands.len()).collect()
    } else {
        filtered
    };
    *pool
        .iter()
        .max_by(|&&a, &&b| {
            cosine(&cands[a].vision, basis)
                .partial_cmp(&cosine(&cands[b].vision, basis))
                .unwrap()
        })
        .unwrap()
}

fn main() {
    let data = make_dataset(10, 200, 7, Style::R2r).unwrap();
    let vocab = Vocabulary::new();

    // landmark collision statistics inside each house
    for split in [true, false] {
        let mut slots = 0usize;
        let mut dup_houses = 0usize;
        let mut houses = 0usize;
        for h in &data.houses {
            let seen_split = data.train.iter().any(|e| e.house_id == h.id);
            if seen_split != split {
                continue;
            }
            houses += 1;
            let all: Vec<usize> = h.landmarks.iter().flatten().copied().collect();
            slots += all.len();
            let mut sorted = all.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != all.len() {
                dup_houses += 1;
            }
        }
        println!(
            "{} houses: {houses}, landmark slots total {slots}, houses with duplicate landmarks {dup_houses}",
            if split { "train" } else { "unseen" }
        );
    }

    // teacher-forced accuracy and greedy rollout success
    for (name, episodes) in [
        ("train", &data.train),
        ("val_seen", &data.val_seen),
        ("val_unseen", &data.val_unseen),
    ] {
        let mut move_ok = 0usize;
        let mut move_total = 0usize;
        let mut stop_ok = 0usize;
        let mut stop_total = 0usize;
        let mut sr_sum = 0.0;
        let mut ndtw_sum = 0.0;
        for episode in episodes.iter() {
            let house = data.house(episode.house_id);
            let geo = Geodesics::new(house);
            let parsed = parse(&episode.instruction, &vocab);
            assert_eq!(parsed.hops.len(), episode.path.len() - 1);

            // teacher forcing along the ground-truth path
            let mut heading = INITIAL_HEADING;
            for t in 0..episode.path.len() {
                let at = episode.path[t];
                let cands = candidate_set(house, at, heading, VISION_NOISE_SIGMA);
                if t == parsed.hops.len() {
                    stop_total += 1;
                    // oracle stop rule: hop counter exhausted
                    let _ = parsed.stop_landmark;
                    stop_ok += 1;
                } else {
                    let (dir, lm) = parsed.hops[t];
                    let choice = pick(house, &cands, dir, lm);
                    move_total += 1;
                    if cands[choice].to == episode.path[t + 1] {
                        move_ok += 1;
                    }
                    let next = episode.path[t + 1];
                    heading = house.bearing(at, next);
                }
            }

            // greedy rollout with the same rule
            let mut at = episode.path[0];
            let mut heading = INITIAL_HEADING;
            let mut traj = vec![at];
            for t in 0..parsed.hops.len() {
                let cands = candidate_set(house, at, heading, VISION_NOISE_SIGMA);
                let (dir, lm) = parsed.hops[t];
                let choice = pick(house, &cands, dir, lm);
                let next = cands[choice].to;
                heading = house.bearing(at, next);
                at = next;
                traj.push(at);
            }
            let pair = TrajectoryPair::new(house, &geo, &traj, &episode.path).unwrap();
            let m = episode_metrics(&pair);
            sr_sum += m.sr;
            ndtw_sum += m.ndtw;
        }
        println!(
            "{name}: move acc {:.3} ({move_total}), stop acc {:.3} ({stop_total}), greedy SR {:.3} nDTW {:.3} over {}",
            move_ok as f64 / move_total as f64,
            stop_ok as f64 / stop_total as f64,
            sr_sum / episodes.len() as f64,
            ndtw_sum / episodes.len() as f64,
            episodes.len()
        );
    }
}
