//! Episode sampling, dataset splits and their on-disk form.
//!
//! A dataset is a set of houses plus three episode splits. `val_seen` reuses
//! the training houses with freshly sampled episodes; `val_unseen` draws
//! from held-out houses that never appear in training. All houses share one
//! landmark basis so grounding transfers to unseen environments.
//!
//! On disk: `houses.json` (geometry, landmarks, basis seed) and one
//! JSON-lines file per split with records
//! `{house_id, instruction, path, goal}`. Serialization is byte-stable for
//! fixed inputs.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a_bytes, stream};

use super::instruction::generate_instruction;
use super::{
    generate_house_with, path_length, shortest_path, Basis, House, DEFAULT_DV, DIST_EPS,
};

/// Viewpoints per generated house.
pub const HOUSE_VIEWPOINTS: usize = 25;
/// Bounds on ground-truth path size (viewpoint count) for single-goal data.
pub const R2R_MIN_VIEWPOINTS: usize = 4;
pub const R2R_MAX_VIEWPOINTS: usize = 7;
/// Each joined-trajectory leg uses exactly this many viewpoints.
const R4R_LEG_VIEWPOINTS: usize = 4;

/// Dataset flavor: single shortest-path goals, or joined two-leg
/// trajectories whose full path is deliberately not shortest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    R2r,
    R4r,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::R2r => "r2r",
            Style::R4r => "r4r",
        }
    }

    pub fn parse(s: &str) -> Result<Style> {
        match s {
            "r2r" => Ok(Style::R2r),
            "r4r" => Ok(Style::R4r),
            other => Err(Error::Config(format!(
                "unknown dataset style {other:?}, expected r2r or r4r"
            ))),
        }
    }

    /// Step budget appropriate for the trajectory lengths of the style.
    pub fn default_max_steps(self) -> usize {
        match self {
            Style::R2r => 15,
            Style::R4r => 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub house_id: usize,
    /// Space-joined tokens.
    pub instruction: String,
    pub path: Vec<usize>,
    pub goal: usize,
}

impl Episode {
    pub fn tokens(&self) -> Vec<String> {
        self.instruction
            .split_whitespace()
            .map(|s| s.to_string())
            .collect()
    }
}

pub struct Dataset {
    pub seed: u64,
    pub style: Style,
    pub basis_seed: u64,
    pub d_v: usize,
    pub n_train_houses: usize,
    pub houses: Vec<House>,
    pub train: Vec<Episode>,
    pub val_seen: Vec<Episode>,
    pub val_unseen: Vec<Episode>,
}

impl Dataset {
    pub fn house(&self, id: usize) -> &House {
        &self.houses[id]
    }

    pub fn split(&self, name: &str) -> Result<&[Episode]> {
        match name {
            "train" => Ok(&self.train),
            "val_seen" => Ok(&self.val_seen),
            "val_unseen" => Ok(&self.val_unseen),
            other => Err(Error::Config(format!(
                "unknown split {other:?}, expected train, val_seen or val_unseen"
            ))),
        }
    }
}

fn sample_r2r_path(house: &House, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = house.n_viewpoints();
    let mut attempts = 0;
    loop {
        attempts += 1;
        assert!(
            attempts < 100_000,
            "house {} offers no goal at the required path size",
            house.id
        );
        let s = rng.gen_range(0..n);
        let g = rng.gen_range(0..n);
        if s == g {
            continue;
        }
        let path = shortest_path(house, s, g).expect("generated houses are connected");
        if (R2R_MIN_VIEWPOINTS..=R2R_MAX_VIEWPOINTS).contains(&path.len()) {
            return path;
        }
    }
}

fn sample_leg(house: &House, from: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let n = house.n_viewpoints();
    for _ in 0..200 {
        let g = rng.gen_range(0..n);
        if g == from {
            continue;
        }
        let path = shortest_path(house, from, g).expect("generated houses are connected");
        if path.len() == R4R_LEG_VIEWPOINTS {
            return Some(path);
        }
    }
    None
}

/// Two shortest legs joined tail to head such that the joined path is
/// strictly longer than the direct shortest path between its endpoints.
fn sample_r4r_path(house: &House, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        assert!(
            attempts < 100_000,
            "house {} offers no joinable trajectory pair",
            house.id
        );
        let n = house.n_viewpoints();
        let s = rng.gen_range(0..n);
        let Some(leg1) = sample_leg(house, s, rng) else {
            continue;
        };
        let Some(leg2) = sample_leg(house, *leg1.last().unwrap(), rng) else {
            continue;
        };
        let mut joined = leg1;
        joined.extend_from_slice(&leg2[1..]);
        let direct = shortest_path(house, joined[0], *joined.last().unwrap())
            .expect("generated houses are connected");
        if path_length(house, &joined) > path_length(house, &direct) + DIST_EPS {
            return joined;
        }
    }
}

fn sample_episode(house: &House, style: Style, episode_seed: u64) -> Episode {
    let mut rng = stream(episode_seed, "episode-path", 0);
    let path = match style {
        Style::R2r => sample_r2r_path(house, &mut rng),
        Style::R4r => sample_r4r_path(house, &mut rng),
    };
    let tokens = generate_instruction(house, &path, derive_seed(episode_seed, "wording", 0));
    Episode {
        house_id: house.id,
        instruction: tokens.join(" "),
        path: path.clone(),
        goal: *path.last().unwrap(),
    }
}

/// Generate houses and all three splits. `n_houses` counts training houses;
/// 30 percent more (rounded up) are generated and held out for `val_unseen`.
/// Validation splits get a tenth of the training episode budget per house
/// (at least 10).
pub fn make_dataset(
    n_houses: usize,
    episodes_per_house: usize,
    seed: u64,
    style: Style,
) -> Result<Dataset> {
    if n_houses < 3 {
        return Err(Error::Config(format!(
            "need at least 3 training houses, got {n_houses}"
        )));
    }
    if episodes_per_house == 0 {
        return Err(Error::Config("episodes per house must be positive".into()));
    }
    let n_unseen = (n_houses * 3).div_ceil(10);
    let basis_seed = derive_seed(seed, "landmark-basis-seed", 0);
    let basis = Arc::new(Basis::new(basis_seed, DEFAULT_DV));
    let houses: Vec<House> = (0..n_houses + n_unseen)
        .map(|i| {
            let mut h = generate_house_with(
                derive_seed(seed, "house", i as u64),
                HOUSE_VIEWPOINTS,
                Arc::clone(&basis),
            );
            h.id = i;
            h
        })
        .collect();

    let val_per_house = (episodes_per_house / 10).max(10);
    let mut train = Vec::new();
    let mut val_seen = Vec::new();
    let mut val_unseen = Vec::new();
    for (i, house) in houses.iter().enumerate().take(n_houses) {
        for e in 0..episodes_per_house {
            let es = derive_seed(seed, "train-episode", (i * 1_000_000 + e) as u64);
            train.push(sample_episode(house, style, es));
        }
        for e in 0..val_per_house {
            let es = derive_seed(seed, "val-seen-episode", (i * 1_000_000 + e) as u64);
            val_seen.push(sample_episode(house, style, es));
        }
    }
    for (i, house) in houses.iter().enumerate().skip(n_houses) {
        for e in 0..val_per_house {
            let es = derive_seed(seed, "val-unseen-episode", (i * 1_000_000 + e) as u64);
            val_unseen.push(sample_episode(house, style, es));
        }
    }
    Ok(Dataset {
        seed,
        style,
        basis_seed,
        d_v: DEFAULT_DV,
        n_train_houses: n_houses,
        houses,
        train,
        val_seen,
        val_unseen,
    })
}

#[derive(Serialize, Deserialize)]
struct HouseRecord {
    id: usize,
    seed: u64,
    viewpoints: Vec<(f64, f64)>,
    edges: Vec<(usize, usize, i8)>,
    landmarks: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct HousesFile {
    style: String,
    seed: u64,
    basis_seed: u64,
    d_v: usize,
    train_houses: usize,
    houses: Vec<HouseRecord>,
}

const SPLIT_FILES: [(&str, &str); 3] = [
    ("train", "train.jsonl"),
    ("val_seen", "val_seen.jsonl"),
    ("val_unseen", "val_unseen.jsonl"),
];

fn write_split(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<Episode>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: bad episode record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = HousesFile {
        style: ds.style.as_str().to_string(),
        seed: ds.seed,
        basis_seed: ds.basis_seed,
        d_v: ds.d_v,
        train_houses: ds.n_train_houses,
        houses: ds
            .houses
            .iter()
            .map(|h| HouseRecord {
                id: h.id,
                seed: h.seed,
                viewpoints: h.positions.clone(),
                edges: h.edges.clone(),
                landmarks: h.landmarks.clone(),
            })
            .collect(),
    };
    fs::write(dir.join("houses.json"), serde_json::to_string_pretty(&file)?)?;
    for (split, name) in SPLIT_FILES {
        write_split(&dir.join(name), ds.split(split).unwrap())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let houses_path = dir.join("houses.json");
    let text = fs::read_to_string(&houses_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", houses_path.display())))?;
    let file: HousesFile = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", houses_path.display())))?;
    let style = Style::parse(&file.style)?;
    let basis = Arc::new(Basis::new(file.basis_seed, file.d_v));
    let mut houses = Vec::with_capacity(file.houses.len());
    for (i, rec) in file.houses.into_iter().enumerate() {
        if rec.id != i {
            return Err(Error::Data(format!(
                "house record {i} carries id {}, expected records in id order",
                rec.id
            )));
        }
        houses.push(House::assemble(
            rec.id,
            rec.seed,
            rec.viewpoints,
            rec.edges,
            rec.landmarks,
            Arc::clone(&basis),
        ));
    }
    if file.train_houses > houses.len() {
        return Err(Error::Data(format!(
            "train house count {} exceeds {} houses on disk",
            file.train_houses,
            houses.len()
        )));
    }
    let mut splits = Vec::new();
    for (_, name) in SPLIT_FILES {
        let eps = read_split(&dir.join(name))?;
        for ep in &eps {
            if ep.house_id >= houses.len() {
                return Err(Error::Data(format!(
                    "{name}: episode references house {} of {}",
                    ep.house_id,
                    houses.len()
                )));
            }
            if ep.path.is_empty() || ep.goal != *ep.path.last().unwrap() {
                return Err(Error::Data(format!(
                    "{name}: episode goal disagrees with its path"
                )));
            }
        }
        splits.push(eps);
    }
    let val_unseen = splits.pop().unwrap();
    let val_seen = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        seed: file.seed,
        style,
        basis_seed: file.basis_seed,
        d_v: file.d_v,
        n_train_houses: file.train_houses,
        houses,
        train,
        val_seen,
        val_unseen,
    })
}

/// Content hash over the four dataset files, for run manifests.
pub fn dataset_fingerprint(dir: &Path) -> Result<u64> {
    let mut h: u64 = 0;
    for name in ["houses.json", "train.jsonl", "val_seen.jsonl", "val_unseen.jsonl"] {
        let bytes = fs::read(dir.join(name))?;
        h = h.rotate_left(17) ^ fnv1a_bytes(&bytes);
    }
    Ok(h)
}
