//! Synthetic navigation environments.
//!
//! A house is a connected geometric graph in the plane. Every viewpoint
//! offers a panorama of 36 sector features (12 headings times 3 elevations,
//! 30 degrees each) derived from the landmarks placed at neighboring
//! viewpoints, and every edge carries an elevation tag so that "up"/"down"
//! instructions exist without modelling real 3-d geometry.
//!
//! Angle conventions, fixed here once and used everywhere: positions are
//! meters in the plane, a heading is the standard counterclockwise angle
//! from the +x axis, and the relative heading of a neighbor is
//! `wrap(bearing - heading)` in `(-pi, pi]`, so positive values are to the
//! agent's left.

pub mod dataset;
pub mod instruction;
pub mod vocab;

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{sample_normal, stream};

/// Number of distinct landmark nouns; also the row count of the basis.
pub const LANDMARK_COUNT: usize = vocab::LANDMARKS.len();
/// Default width of vision features.
pub const DEFAULT_DV: usize = 64;
/// Standard deviation of the per-sector feature noise.
pub const VISION_NOISE_SIGMA: f64 = 0.1;
/// Panorama sectors: 12 heading buckets times 3 elevation buckets.
pub const SECTOR_COUNT: usize = 36;
pub const HEADING_BUCKETS: usize = 12;
/// One heading/elevation bucket, 30 degrees.
pub const BUCKET_RAD: f64 = PI / 6.0;
/// Width of an orientation feature: 32 repeats of [sin a, cos a, sin b, cos b].
pub const ORIENTATION_DIM: usize = 128;

const MIN_SPACING: f64 = 1.5;
const ATTACH_MIN: f64 = 1.8;
const ATTACH_MAX: f64 = 3.5;
const EXTRA_EDGE_MAX: f64 = 4.0;
/// Distance tolerance when comparing path lengths for tie-breaking.
pub const DIST_EPS: f64 = 1e-9;

/// Map an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

fn wrap_to_tau(a: f64) -> f64 {
    a.rem_euclid(TAU)
}

/// Fixed orthonormal unit vector per landmark id, shared by every house of
/// a dataset so that unseen houses reuse the same grounding.
pub struct Basis {
    pub seed: u64,
    pub d_v: usize,
    vectors: Vec<Vec<f64>>,
}

impl Basis {
    /// Gram-Schmidt over seeded Gaussian draws. Requires `d_v >= LANDMARK_COUNT`.
    pub fn new(seed: u64, d_v: usize) -> Self {
        assert!(
            d_v >= LANDMARK_COUNT,
            "vision width {d_v} cannot hold {LANDMARK_COUNT} orthonormal landmark vectors"
        );
        let mut rng = stream(seed, "landmark-basis", 0);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(LANDMARK_COUNT);
        while vectors.len() < LANDMARK_COUNT {
            let mut v: Vec<f64> = (0..d_v).map(|_| sample_normal(&mut rng)).collect();
            for prev in &vectors {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // a fresh Gaussian draw is almost surely independent; retry if not
            if norm < 1e-6 {
                continue;
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            vectors.push(v);
        }
        Basis { seed, d_v, vectors }
    }

    pub fn vector(&self, landmark: usize) -> &[f64] {
        &self.vectors[landmark]
    }
}

/// One synthetic environment.
pub struct House {
    pub id: usize,
    pub seed: u64,
    pub positions: Vec<(f64, f64)>,
    /// Undirected edges as (a, b, elevation tag) with a < b; the tag is the
    /// elevation sign when traversing a -> b and is negated in reverse.
    pub edges: Vec<(usize, usize, i8)>,
    /// 1 to 3 landmark ids per viewpoint.
    pub landmarks: Vec<Vec<usize>>,
    pub basis: Arc<Basis>,
    adj: Vec<Vec<(usize, i8)>>,
}

impl House {
    /// Build the adjacency index; called by every constructor/loader.
    pub fn assemble(
        id: usize,
        seed: u64,
        positions: Vec<(f64, f64)>,
        edges: Vec<(usize, usize, i8)>,
        landmarks: Vec<Vec<usize>>,
        basis: Arc<Basis>,
    ) -> Self {
        let mut adj = vec![Vec::new(); positions.len()];
        for &(a, b, tag) in &edges {
            assert!(a < b && b < positions.len(), "malformed edge ({a}, {b})");
            adj[a].push((b, tag));
            adj[b].push((a, -tag));
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
        }
        assert_eq!(landmarks.len(), positions.len());
        House {
            id,
            seed,
            positions,
            edges,
            landmarks,
            basis,
            adj,
        }
    }

    pub fn n_viewpoints(&self) -> usize {
        self.positions.len()
    }

    /// Neighbors of `vp` in ascending id order with the outgoing elevation tag.
    pub fn neighbors(&self, vp: usize) -> &[(usize, i8)] {
        &self.adj[vp]
    }

    pub fn degree(&self, vp: usize) -> usize {
        self.adj[vp].len()
    }

    pub fn euclid(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.positions[a];
        let (bx, by) = self.positions[b];
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Absolute bearing of the line of sight from `a` to `b`.
    pub fn bearing(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = self.positions[a];
        let (bx, by) = self.positions[b];
        (by - ay).atan2(bx - ax)
    }

    fn edge_tag(&self, from: usize, to: usize) -> Option<i8> {
        self.adj[from]
            .iter()
            .find(|&&(nb, _)| nb == to)
            .map(|&(_, tag)| tag)
    }
}

/// Attach-and-densify construction of a connected geometric graph.
///
/// Viewpoint 0 sits at the origin; each later viewpoint attaches to a random
/// earlier one at distance in `[1.8, 3.5]` m while keeping at least 1.5 m of
/// clearance from everything already placed. Afterwards every non-tree pair
/// closer than 4 m becomes an extra edge, so all edge lengths land in
/// `[1.5, 4.0]` m.
pub fn generate_house_with(seed: u64, n_viewpoints: usize, basis: Arc<Basis>) -> House {
    assert!(n_viewpoints >= 4, "a house needs at least 4 viewpoints");
    let mut rng = stream(seed, "house-geometry", 0);
    let mut positions: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut edges: Vec<(usize, usize, i8)> = Vec::new();
    for i in 1..n_viewpoints {
        let mut attempts = 0;
        loop {
            attempts += 1;
            assert!(attempts < 100_000, "viewpoint placement did not converge");
            let anchor = rng.gen_range(0..i);
            let r = rng.gen_range(ATTACH_MIN..ATTACH_MAX);
            let theta = rng.gen_range(0.0..TAU);
            let (ax, ay) = positions[anchor];
            let p = (ax + r * theta.cos(), ay + r * theta.sin());
            let clear = positions
                .iter()
                .all(|&(x, y)| ((x - p.0).powi(2) + (y - p.1).powi(2)).sqrt() >= MIN_SPACING);
            if clear {
                positions.push(p);
                edges.push((anchor, i, 0));
                break;
            }
        }
    }
    let tree: BTreeSet<(usize, usize)> = edges.iter().map(|&(a, b, _)| (a, b)).collect();
    for a in 0..n_viewpoints {
        for b in a + 1..n_viewpoints {
            if tree.contains(&(a, b)) {
                continue;
            }
            let (ax, ay) = positions[a];
            let (bx, by) = positions[b];
            let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
            if (MIN_SPACING..=EXTRA_EDGE_MAX).contains(&d) {
                edges.push((a, b, 0));
            }
        }
    }
    edges.sort_unstable();

    // elevation tags: mostly flat, occasionally a step up or down
    let mut erng = stream(seed, "house-elevation", 0);
    for e in edges.iter_mut() {
        let u: f64 = erng.gen();
        e.2 = if u < 0.15 {
            -1
        } else if u < 0.30 {
            1
        } else {
            0
        };
    }

    // Landmarks are dealt from a per-house shuffle of the vocabulary, so a
    // word repeats within a house only once all words are in use. Instructions
    // name landmarks; a repeated word would make them ambiguous about which
    // viewpoint is meant, capping how well any policy can follow them.
    let mut lrng = stream(seed, "house-landmarks", 0);
    let mut deck: Vec<usize> = (0..LANDMARK_COUNT).collect();
    deck.shuffle(&mut lrng);
    let landmarks: Vec<Vec<usize>> = (0..n_viewpoints)
        .map(|vp| vec![deck[vp % LANDMARK_COUNT]])
        .collect();

    House::assemble(0, seed, positions, edges, landmarks, basis)
}

/// Convenience constructor that gives the house its own basis.
pub fn generate_house(seed: u64, n_viewpoints: usize) -> House {
    generate_house_with(seed, n_viewpoints, Arc::new(Basis::new(seed, DEFAULT_DV)))
}

/// Relative heading (left-positive), elevation angle and metric distance of
/// the edge `from -> to` as seen under `agent_heading`.
pub fn relative_pose(
    house: &House,
    from: usize,
    to: usize,
    agent_heading: f64,
) -> Result<(f64, f64, f64)> {
    let tag = house.edge_tag(from, to).ok_or_else(|| {
        Error::Graph(format!(
            "no edge {from} -> {to} in house {}",
            house.id
        ))
    })?;
    let alpha = wrap_angle(house.bearing(from, to) - agent_heading);
    let beta = f64::from(tag) * BUCKET_RAD;
    Ok((alpha, beta, house.euclid(from, to)))
}

/// Panorama sector holding a direction: 12 absolute heading buckets of 30
/// degrees crossed with elevation buckets down/level/up.
pub fn sector_of(bearing: f64, elevation_tag: i8) -> usize {
    let hb = (wrap_to_tau(bearing) / BUCKET_RAD) as usize % HEADING_BUCKETS;
    let eb = (elevation_tag + 1) as usize;
    eb * HEADING_BUCKETS + hb
}

/// 32 repeats of `[sin a, cos a, sin b, cos b]`.
pub fn orientation_feature(alpha: f64, beta: f64) -> Vec<f64> {
    let block = [alpha.sin(), alpha.cos(), beta.sin(), beta.cos()];
    let mut out = Vec::with_capacity(ORIENTATION_DIM);
    for _ in 0..ORIENTATION_DIM / 4 {
        out.extend_from_slice(&block);
    }
    out
}

/// Landmark ids visible from `vp` in `sector`: the landmarks of every
/// neighbor whose direction falls in that sector, deduplicated.
pub fn sector_landmarks(house: &House, vp: usize, sector: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = Vec::new();
    for &(nb, tag) in house.neighbors(vp) {
        if sector_of(house.bearing(vp, nb), tag) == sector {
            ids.extend_from_slice(&house.landmarks[nb]);
        }
    }
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Sector feature: the normalized sum of visible landmark basis vectors plus
/// seeded Gaussian noise. The noise is a property of (house, viewpoint,
/// sector), not of the query, so repeated calls agree exactly.
pub fn vision_feature(house: &House, vp: usize, sector: usize, sigma: f64) -> Vec<f64> {
    assert!(sector < SECTOR_COUNT, "sector {sector} out of range");
    let d_v = house.basis.d_v;
    let mut out = vec![0.0; d_v];
    let ids = sector_landmarks(house, vp, sector);
    if !ids.is_empty() {
        for &lm in &ids {
            for (o, b) in out.iter_mut().zip(house.basis.vector(lm)) {
                *o += b;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        for o in out.iter_mut() {
            *o /= norm;
        }
    }
    if sigma > 0.0 {
        let mut rng = stream(house.seed, "sector-noise", (vp * SECTOR_COUNT + sector) as u64);
        for o in out.iter_mut() {
            *o += sigma * sample_normal(&mut rng);
        }
    }
    out
}

/// One navigable action: STOP at index 0, then neighbors in id order.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub to: usize,
    pub alpha: f64,
    pub beta: f64,
    pub distance: f64,
    pub vision: Vec<f64>,
    pub orientation: Vec<f64>,
}

/// Build the candidate set at `vp` under `heading`. STOP carries alpha =
/// beta = 0 and the feature of the sector the agent currently faces.
pub fn candidate_set(house: &House, vp: usize, heading: f64, sigma: f64) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(house.degree(vp) + 1);
    out.push(Candidate {
        to: vp,
        alpha: 0.0,
        beta: 0.0,
        distance: 0.0,
        vision: vision_feature(house, vp, sector_of(heading, 0), sigma),
        orientation: orientation_feature(0.0, 0.0),
    });
    for &(nb, tag) in house.neighbors(vp) {
        let (alpha, beta, distance) =
            relative_pose(house, vp, nb, heading).expect("adjacency lists a missing edge");
        out.push(Candidate {
            to: nb,
            alpha,
            beta,
            distance,
            vision: vision_feature(house, vp, sector_of(house.bearing(vp, nb), tag), sigma),
            orientation: orientation_feature(alpha, beta),
        });
    }
    out
}

/// Dijkstra with deterministic tie-breaking: equal-length alternatives keep
/// the predecessor with the smaller viewpoint id.
pub fn shortest_path(house: &House, s: usize, g: usize) -> Result<Vec<usize>> {
    let n = house.n_viewpoints();
    assert!(s < n && g < n, "viewpoint out of range");
    if s == g {
        return Ok(vec![s]);
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut done = vec![false; n];
    dist[s] = 0.0;
    loop {
        // linear scan keeps ordering rules obvious; houses are tiny
        let mut u = usize::MAX;
        let mut best = f64::INFINITY;
        for v in 0..n {
            if !done[v] && dist[v] < best {
                best = dist[v];
                u = v;
            }
        }
        if u == usize::MAX {
            break;
        }
        done[u] = true;
        if u == g {
            break;
        }
        for &(nb, _) in house.neighbors(u) {
            let nd = dist[u] + house.euclid(u, nb);
            if nd < dist[nb] - DIST_EPS {
                dist[nb] = nd;
                parent[nb] = u;
            } else if (nd - dist[nb]).abs() <= DIST_EPS && u < parent[nb] {
                parent[nb] = u;
            }
        }
    }
    if !dist[g].is_finite() {
        return Err(Error::Graph(format!(
            "viewpoint {g} unreachable from {s} in house {}",
            house.id
        )));
    }
    let mut path = vec![g];
    let mut cur = g;
    while cur != s {
        cur = parent[cur];
        path.push(cur);
    }
    path.reverse();
    Ok(path)
}

/// Metric length of a node path along its edges.
pub fn path_length(house: &House, path: &[usize]) -> f64 {
    path.windows(2).map(|w| house.euclid(w[0], w[1])).sum()
}

/// Dense all-pairs geodesic distances for one house.
pub struct Geodesics {
    n: usize,
    dist: Vec<f64>,
}

impl Geodesics {
    pub fn new(house: &House) -> Self {
        let n = house.n_viewpoints();
        let mut dist = vec![f64::INFINITY; n * n];
        for s in 0..n {
            let row = &mut dist[s * n..(s + 1) * n];
            let mut done = vec![false; n];
            row[s] = 0.0;
            loop {
                let mut u = usize::MAX;
                let mut best = f64::INFINITY;
                for v in 0..n {
                    if !done[v] && row[v] < best {
                        best = row[v];
                        u = v;
                    }
                }
                if u == usize::MAX {
                    break;
                }
                done[u] = true;
                for &(nb, _) in house.neighbors(u) {
                    let nd = row[u] + house.euclid(u, nb);
                    if nd < row[nb] {
                        row[nb] = nd;
                    }
                }
            }
        }
        Geodesics { n, dist }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.dist[a * self.n + b]
    }

    /// Smallest geodesic distance from `vp` to any node of `path`.
    pub fn to_path(&self, vp: usize, path: &[usize]) -> f64 {
        path.iter()
            .map(|&p| self.distance(vp, p))
            .fold(f64::INFINITY, f64::min)
    }
}
