//! Navigation metrics: error, success, efficiency, and path fidelity.
//!
//! All distances are geodesic (graph shortest-path) lengths, never straight
//! lines, so a predicted stop across a wall from the goal is scored as far
//! away as the walk around it. Callers supply a dense [`Geodesics`] table for
//! the house, which every metric here shares.

use crate::error::{Error, Result};
use crate::world::{path_length, Geodesics, House};

/// Success radius in meters. An episode counts as solved when the agent
/// stops within this geodesic distance of the goal, boundary included.
pub const SUCCESS_RADIUS: f64 = 3.0;

/// One predicted trajectory scored against its reference.
pub struct TrajectoryPair<'a> {
    pub house: &'a House,
    pub geo: &'a Geodesics,
    /// Viewpoints visited by the agent, starting at the episode start.
    pub predicted: &'a [usize],
    /// Ground-truth viewpoint sequence; the last entry is the goal.
    pub reference: &'a [usize],
}

impl<'a> TrajectoryPair<'a> {
    pub fn new(
        house: &'a House,
        geo: &'a Geodesics,
        predicted: &'a [usize],
        reference: &'a [usize],
    ) -> Result<Self> {
        if predicted.is_empty() || reference.is_empty() {
            return Err(Error::Data("cannot score an empty trajectory".into()));
        }
        let n = house.n_viewpoints();
        if let Some(&vp) = predicted.iter().chain(reference).find(|&&vp| vp >= n) {
            return Err(Error::Data(format!(
                "trajectory visits viewpoint {vp} but house {} has only {n}",
                house.id
            )));
        }
        Ok(TrajectoryPair {
            house,
            geo,
            predicted,
            reference,
        })
    }

    fn goal(&self) -> usize {
        *self.reference.last().unwrap()
    }
}

/// Geodesic distance from the agent's final position to the goal.
pub fn nav_error(pair: &TrajectoryPair) -> f64 {
    pair.geo.distance(*pair.predicted.last().unwrap(), pair.goal())
}

/// 1.0 when the final position lies within [`SUCCESS_RADIUS`] of the goal.
pub fn success(pair: &TrajectoryPair) -> f64 {
    if nav_error(pair) <= SUCCESS_RADIUS {
        1.0
    } else {
        0.0
    }
}

/// Success weighted by path efficiency: `S * l / max(p, l)` with `l` the
/// shortest geodesic length from start to goal and `p` the length actually
/// walked. A zero-length optimum (start equals goal) scores the bare success
/// value, since no walk can be more efficient than not moving.
pub fn spl(pair: &TrajectoryPair) -> f64 {
    let s = success(pair);
    let l = pair.geo.distance(pair.predicted[0], pair.goal());
    if l == 0.0 {
        return s;
    }
    let p = path_length(pair.house, pair.predicted);
    s * l / p.max(l)
}

/// Dynamic-time-warping distance between the two viewpoint sequences under
/// the geodesic node metric: minimal total cost of a monotone alignment that
/// matches both pairs of endpoints.
pub fn dtw(pair: &TrajectoryPair) -> f64 {
    let p = pair.predicted;
    let r = pair.reference;
    let (n, m) = (p.len(), r.len());
    let d = |i: usize, j: usize| pair.geo.distance(p[i], r[j]);
    // one rolling row keeps the table linear in |R|
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    prev[0] = d(0, 0);
    for j in 1..m {
        prev[j] = prev[j - 1] + d(0, j);
    }
    for i in 1..n {
        cur[0] = prev[0] + d(i, 0);
        for j in 1..m {
            cur[j] = d(i, j) + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// DTW squashed to `(0, 1]`: `exp(-dtw / (|R| * SUCCESS_RADIUS))`. Equals 1
/// exactly when the paths coincide.
pub fn ndtw(pair: &TrajectoryPair) -> f64 {
    (-dtw(pair) / (pair.reference.len() as f64 * SUCCESS_RADIUS)).exp()
}

/// nDTW gated by success, so fidelity only counts when the goal was reached.
pub fn sdtw(pair: &TrajectoryPair) -> f64 {
    success(pair) * ndtw(pair)
}

/// Coverage weighted by length score. Coverage `PC` is the mean over
/// reference nodes of `exp(-d(r, P) / SUCCESS_RADIUS)` with `d(r, P)` the
/// geodesic distance from `r` to the nearest predicted node; the expected
/// path length `EPL = PC * len(R)` then penalizes walking much more or less
/// than the covered length: `LS = EPL / (EPL + |EPL - len(P)|)`.
pub fn cls(pair: &TrajectoryPair) -> f64 {
    let pc = pair
        .reference
        .iter()
        .map(|&r| (-pair.geo.to_path(r, pair.predicted) / SUCCESS_RADIUS).exp())
        .sum::<f64>()
        / pair.reference.len() as f64;
    let epl = pc * path_length(pair.house, pair.reference);
    let lp = path_length(pair.house, pair.predicted);
    let denom = epl + (epl - lp).abs();
    // both paths are single nodes: nothing to cover, nothing walked
    let ls = if denom == 0.0 { 1.0 } else { epl / denom };
    pc * ls
}

/// All per-episode scores in one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub cls: f64,
}

pub fn episode_metrics(pair: &TrajectoryPair) -> EpisodeMetrics {
    EpisodeMetrics {
        ne: nav_error(pair),
        sr: success(pair),
        spl: spl(pair),
        ndtw: ndtw(pair),
        sdtw: sdtw(pair),
        cls: cls(pair),
    }
}

/// Per-metric means over a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub n: usize,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub ndtw: f64,
    pub sdtw: f64,
    pub cls: f64,
}

pub fn aggregate(episodes: &[EpisodeMetrics]) -> Result<MetricSummary> {
    if episodes.is_empty() {
        return Err(Error::Data("cannot aggregate an empty split".into()));
    }
    let n = episodes.len() as f64;
    let mean = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
    Ok(MetricSummary {
        n: episodes.len(),
        ne: mean(|e| e.ne),
        sr: mean(|e| e.sr),
        spl: mean(|e| e.spl),
        ndtw: mean(|e| e.ndtw),
        sdtw: mean(|e| e.sdtw),
        cls: mean(|e| e.cls),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::rng::stream;
    use crate::world::{generate_house_with, shortest_path, Basis, DEFAULT_DV};

    /// Straight-line house with the given edge lengths along the x axis.
    fn line_house(spacings: &[f64]) -> House {
        let mut positions = vec![(0.0, 0.0)];
        let mut x = 0.0;
        for &s in spacings {
            x += s;
            positions.push((x, 0.0));
        }
        let edges = (0..spacings.len()).map(|i| (i, i + 1, 0i8)).collect();
        let landmarks = vec![vec![0]; positions.len()];
        House::assemble(0, 0, positions, edges, landmarks, test_basis())
    }

    fn test_basis() -> Arc<Basis> {
        Arc::new(Basis::new(11, DEFAULT_DV))
    }

    fn random_house(seed: u64) -> House {
        generate_house_with(seed, 25, test_basis())
    }

    /// Random connected walk used to fabricate trajectories.
    fn random_walk(house: &House, rng: &mut ChaCha8Rng, max_extra: usize) -> Vec<usize> {
        let mut vp = rng.gen_range(0..house.n_viewpoints());
        let mut path = vec![vp];
        for _ in 0..rng.gen_range(0..=max_extra) {
            let nbs = house.neighbors(vp);
            vp = nbs[rng.gen_range(0..nbs.len())].0;
            path.push(vp);
        }
        path
    }

    /// Independent DTW oracle: memoized recursion over the full table,
    /// written without the rolling-row trick of the implementation under
    /// test. Cell arithmetic is identical, so agreement is exact.
    fn dtw_oracle(geo: &Geodesics, p: &[usize], r: &[usize]) -> f64 {
        fn cell(
            geo: &Geodesics,
            p: &[usize],
            r: &[usize],
            i: usize,
            j: usize,
            memo: &mut Vec<Option<f64>>,
        ) -> f64 {
            if let Some(v) = memo[i * r.len() + j] {
                return v;
            }
            let cost = geo.distance(p[i], r[j]);
            let v = match (i, j) {
                (0, 0) => cost,
                (0, _) => cell(geo, p, r, 0, j - 1, memo) + cost,
                (_, 0) => cell(geo, p, r, i - 1, 0, memo) + cost,
                _ => {
                    let a = cell(geo, p, r, i - 1, j, memo);
                    let b = cell(geo, p, r, i, j - 1, memo);
                    let c = cell(geo, p, r, i - 1, j - 1, memo);
                    cost + a.min(b).min(c)
                }
            };
            memo[i * r.len() + j] = Some(v);
            v
        }
        let mut memo = vec![None; p.len() * r.len()];
        cell(geo, p, r, p.len() - 1, r.len() - 1, &mut memo)
    }

    /// Independent CLS oracle: the published closed form evaluated directly
    /// with brute-force point-to-path distances.
    fn cls_oracle(house: &House, geo: &Geodesics, p: &[usize], r: &[usize]) -> f64 {
        let mut pc = 0.0;
        for &node in r {
            let nearest = p
                .iter()
                .map(|&q| geo.distance(node, q))
                .fold(f64::INFINITY, f64::min);
            pc += (-nearest / 3.0).exp();
        }
        pc /= r.len() as f64;
        let len_r: f64 = r.windows(2).map(|w| house.euclid(w[0], w[1])).sum();
        let len_p: f64 = p.windows(2).map(|w| house.euclid(w[0], w[1])).sum();
        let epl = pc * len_r;
        if epl == 0.0 && len_p == 0.0 {
            return pc;
        }
        pc * epl / (epl + (epl - len_p).abs())
    }

    #[test]
    fn nav_error_hand_cases() {
        let house = line_house(&[5.0]);
        let geo = Geodesics::new(&house);
        // agent already on the goal
        let on_goal = TrajectoryPair::new(&house, &geo, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(nav_error(&on_goal), 0.0);
        // agent never left the start, 5 m short
        let stayed = TrajectoryPair::new(&house, &geo, &[0], &[0, 1]).unwrap();
        assert_eq!(nav_error(&stayed), 5.0);
    }

    #[test]
    fn success_boundary_is_inclusive() {
        for (gap, expect) in [(2.0, 1.0), (3.0, 1.0), (3.01, 0.0)] {
            let house = line_house(&[gap]);
            let geo = Geodesics::new(&house);
            let pair = TrajectoryPair::new(&house, &geo, &[0], &[0, 1]).unwrap();
            assert_eq!(success(&pair), expect, "gap {gap}");
        }
    }

    #[test]
    fn spl_hand_cases() {
        // walking the exact shortest path scores 1
        let house = line_house(&[5.0, 5.0]);
        let geo = Geodesics::new(&house);
        let exact = TrajectoryPair::new(&house, &geo, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(spl(&exact), 1.0);
        // success after doubling the distance scores 1/2
        let detour = TrajectoryPair::new(&house, &geo, &[0, 1, 0, 1, 2], &[0, 1, 2]).unwrap();
        assert!((spl(&detour) - 0.5).abs() < 1e-12);
        // failure scores 0 regardless of efficiency
        let house2 = line_house(&[5.0, 5.0]);
        let geo2 = Geodesics::new(&house2);
        let lost = TrajectoryPair::new(&house2, &geo2, &[0], &[0, 1, 2]).unwrap();
        assert_eq!(spl(&lost), 0.0);
        // start == goal: any motion still scores the success value
        let loop_pair = TrajectoryPair::new(&house, &geo, &[0, 1, 0], &[0]).unwrap();
        assert_eq!(spl(&loop_pair), 1.0);
    }

    #[test]
    fn spl_never_exceeds_success() {
        let house = random_house(3);
        let geo = Geodesics::new(&house);
        let mut rng = stream(5, "metric-pairs", 0);
        for _ in 0..200 {
            let p = random_walk(&house, &mut rng, 8);
            let r = random_walk(&house, &mut rng, 8);
            let pair = TrajectoryPair::new(&house, &geo, &p, &r).unwrap();
            let m = episode_metrics(&pair);
            assert!(m.spl >= 0.0 && m.spl <= m.sr && m.sr <= 1.0);
            assert!(m.sdtw <= m.ndtw + 1e-15 && m.sdtw <= m.sr);
            assert!(m.ndtw > 0.0 && m.ndtw <= 1.0);
            assert!((0.0..=1.0).contains(&m.cls));
        }
    }

    #[test]
    fn dtw_identical_paths_cost_nothing() {
        let house = random_house(4);
        let geo = Geodesics::new(&house);
        let mut rng = stream(6, "metric-pairs", 0);
        let p = random_walk(&house, &mut rng, 6);
        let pair = TrajectoryPair::new(&house, &geo, &p, &p).unwrap();
        assert_eq!(dtw(&pair), 0.0);
        assert_eq!(ndtw(&pair), 1.0);
        assert_eq!(cls(&pair), 1.0);
    }

    #[test]
    fn dtw_single_point_sums_all_reference_distances() {
        let house = line_house(&[2.0, 2.0, 2.0]);
        let geo = Geodesics::new(&house);
        let pair = TrajectoryPair::new(&house, &geo, &[0], &[0, 1, 2, 3]).unwrap();
        assert!((dtw(&pair) - (0.0 + 2.0 + 4.0 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn dtw_matches_recursive_oracle_exactly() {
        let mut rng = stream(7, "metric-pairs", 0);
        for seed in 0..5 {
            let house = random_house(100 + seed);
            let geo = Geodesics::new(&house);
            for _ in 0..60 {
                let p = random_walk(&house, &mut rng, 10);
                let r = random_walk(&house, &mut rng, 10);
                let pair = TrajectoryPair::new(&house, &geo, &p, &r).unwrap();
                assert_eq!(dtw(&pair), dtw_oracle(&geo, &p, &r));
            }
        }
    }

    #[test]
    fn geodesic_table_matches_dijkstra_paths() {
        let house = random_house(8);
        let geo = Geodesics::new(&house);
        let mut rng = stream(9, "metric-pairs", 0);
        for _ in 0..100 {
            let a = rng.gen_range(0..house.n_viewpoints());
            let b = rng.gen_range(0..house.n_viewpoints());
            let path = shortest_path(&house, a, b).unwrap();
            assert!((geo.distance(a, b) - path_length(&house, &path)).abs() < 1e-9);
        }
    }

    #[test]
    fn ndtw_strictly_drops_on_a_detour() {
        let house = random_house(10);
        let geo = Geodesics::new(&house);
        let r = shortest_path(&house, 0, 12).unwrap();
        assert!(r.len() >= 3, "want a multi-hop reference");
        // faithful walk, then the same walk with a bounce off the path
        let mut detour = r.clone();
        let mid = r[r.len() / 2];
        let &(off, _) = house
            .neighbors(mid)
            .iter()
            .find(|&&(nb, _)| !r.contains(&nb))
            .expect("a node off the reference path");
        let at = r.len() / 2 + 1;
        detour.splice(at..at, [off, mid]);
        let clean = TrajectoryPair::new(&house, &geo, &r, &r).unwrap();
        let bounced = TrajectoryPair::new(&house, &geo, &detour, &r).unwrap();
        assert!(ndtw(&bounced) < ndtw(&clean));
        assert_eq!(ndtw(&clean), 1.0);
    }

    #[test]
    fn cls_far_single_point_scores_near_zero() {
        let house = line_house(&[30.0, 30.0]);
        let geo = Geodesics::new(&house);
        let pair = TrajectoryPair::new(&house, &geo, &[2], &[0, 1]).unwrap();
        assert!(cls(&pair) < 0.05, "got {}", cls(&pair));
    }

    #[test]
    fn cls_and_sdtw_match_direct_oracles() {
        let mut rng = stream(12, "metric-pairs", 0);
        let house = random_house(13);
        let geo = Geodesics::new(&house);
        for _ in 0..200 {
            let p = random_walk(&house, &mut rng, 10);
            let r = random_walk(&house, &mut rng, 10);
            let pair = TrajectoryPair::new(&house, &geo, &p, &r).unwrap();
            let want = cls_oracle(&house, &geo, &p, &r);
            assert!((cls(&pair) - want).abs() < 1e-12);
            assert_eq!(sdtw(&pair), success(&pair) * ndtw(&pair));
        }
    }

    #[test]
    fn aggregate_means_and_empty_split() {
        assert!(aggregate(&[]).is_err());
        let one = EpisodeMetrics {
            ne: 2.0,
            sr: 1.0,
            spl: 0.5,
            ndtw: 0.9,
            sdtw: 0.9,
            cls: 0.8,
        };
        let single = aggregate(&[one]).unwrap();
        assert_eq!((single.ne, single.spl, single.n), (2.0, 0.5, 1));
        let two = EpisodeMetrics {
            ne: 4.0,
            sr: 0.0,
            spl: 0.0,
            ndtw: 0.3,
            sdtw: 0.0,
            cls: 0.2,
        };
        let both = aggregate(&[one, two]).unwrap();
        assert!((both.ne - 3.0).abs() < 1e-15);
        assert!((both.sr - 0.5).abs() < 1e-15);
        assert!((both.ndtw - 0.6).abs() < 1e-15);
    }

    #[test]
    fn metrics_survive_viewpoint_relabeling() {
        let house = random_house(14);
        let n = house.n_viewpoints();
        // reverse the ids: new id of old vp i is n-1-i
        let relabel = |vp: usize| n - 1 - vp;
        let mut positions = vec![(0.0, 0.0); n];
        for (i, &p) in house.positions.iter().enumerate() {
            positions[relabel(i)] = p;
        }
        let edges = house
            .edges
            .iter()
            .map(|&(a, b, tag)| {
                let (na, nb) = (relabel(a), relabel(b));
                if na < nb {
                    (na, nb, tag)
                } else {
                    (nb, na, -tag)
                }
            })
            .collect();
        let mut landmarks = vec![Vec::new(); n];
        for (i, l) in house.landmarks.iter().enumerate() {
            landmarks[relabel(i)] = l.clone();
        }
        let twin = House::assemble(0, 0, positions, edges, landmarks, test_basis());
        let geo = Geodesics::new(&house);
        let geo_twin = Geodesics::new(&twin);
        let mut rng = stream(15, "metric-pairs", 0);
        for _ in 0..50 {
            let p = random_walk(&house, &mut rng, 8);
            let r = random_walk(&house, &mut rng, 8);
            let p2: Vec<usize> = p.iter().map(|&v| relabel(v)).collect();
            let r2: Vec<usize> = r.iter().map(|&v| relabel(v)).collect();
            let a = episode_metrics(&TrajectoryPair::new(&house, &geo, &p, &r).unwrap());
            let b = episode_metrics(&TrajectoryPair::new(&twin, &geo_twin, &p2, &r2).unwrap());
            assert!((a.ne - b.ne).abs() < 1e-9);
            assert!((a.spl - b.spl).abs() < 1e-9);
            assert!((a.ndtw - b.ndtw).abs() < 1e-9);
            assert!((a.cls - b.cls).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_empty_and_out_of_range_trajectories() {
        let house = line_house(&[2.0]);
        let geo = Geodesics::new(&house);
        assert!(TrajectoryPair::new(&house, &geo, &[], &[0]).is_err());
        assert!(TrajectoryPair::new(&house, &geo, &[0], &[]).is_err());
        assert!(TrajectoryPair::new(&house, &geo, &[0, 7], &[0]).is_err());
    }
}
