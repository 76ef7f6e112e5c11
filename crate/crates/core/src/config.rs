//! Line-oriented `key = value` run configuration.
//!
//! One flat format covers model dimensions, training hyperparameters, data
//! generation and the two ablation axes, so sweep configs stay diffable.
//! Unknown keys and out-of-range values are rejected with the offending
//! line; absent keys fall back to desk-scale defaults.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::world::dataset::Style;
use crate::world::LANDMARK_COUNT;

/// Which scoring modules feed the fused action distribution. The history
/// module is always on; orientation and vision are the ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleSet {
    pub orientation: bool,
    pub vision: bool,
}

impl ModuleSet {
    pub fn full() -> Self {
        ModuleSet {
            orientation: true,
            vision: true,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut set = ModuleSet {
            orientation: false,
            vision: false,
        };
        let mut saw_h = false;
        for part in s.split('+') {
            match part.trim() {
                "h" => saw_h = true,
                "o" => set.orientation = true,
                "v" => set.vision = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown module {other:?}; valid set is {{h, o, v}} joined by '+'"
                    )))
                }
            }
        }
        if !saw_h {
            return Err(Error::Config(
                "the history module 'h' is mandatory in every module combination".into(),
            ));
        }
        Ok(set)
    }
}

impl fmt::Display for ModuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h")?;
        if self.orientation {
            write!(f, "+o")?;
        }
        if self.vision {
            write!(f, "+v")?;
        }
        Ok(())
    }
}

/// Which pretraining objectives contribute to the summed loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSet {
    pub mlm: bool,
    pub ssap: bool,
    pub vm: bool,
    pub om: bool,
}

impl TaskSet {
    pub fn full() -> Self {
        TaskSet {
            mlm: true,
            ssap: true,
            vm: true,
            om: true,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut set = TaskSet {
            mlm: false,
            ssap: false,
            vm: false,
            om: false,
        };
        for part in s.split('+') {
            match part.trim() {
                "mlm" => set.mlm = true,
                "ssap" => set.ssap = true,
                "vm" => set.vm = true,
                "om" => set.om = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown pretraining task {other:?}; valid set is {{mlm, ssap, vm, om}}"
                    )))
                }
            }
        }
        if !(set.mlm || set.ssap || set.vm || set.om) {
            return Err(Error::Config("pretrain_tasks must name at least one task".into()));
        }
        Ok(set)
    }

    pub fn count(&self) -> usize {
        [self.mlm, self.ssap, self.vm, self.om]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (on, name) in [
            (self.mlm, "mlm"),
            (self.ssap, "ssap"),
            (self.vm, "vm"),
            (self.om, "om"),
        ] {
            if on {
                if !first {
                    write!(f, "+")?;
                }
                write!(f, "{name}")?;
                first = false;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    // model dimensions
    pub d_model: usize,
    pub heads: usize,
    pub n_text: usize,
    pub n_cross: usize,
    pub d_v: usize,
    // fine-tuning
    pub lr: f64,
    pub lambda: f64,
    pub iterations: usize,
    /// Episodes whose gradients are accumulated into one optimizer step.
    pub batch: usize,
    pub seed: u64,
    /// None means "pick from the dataset style" (15 single-goal, 30 joined).
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub gamma: f64,
    pub eval_every: usize,
    // pretraining
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    // data generation
    pub houses: usize,
    pub episodes: usize,
    pub style: Style,
    // ablation axes
    pub modules: ModuleSet,
    pub pretrain_tasks: TaskSet,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d_model: 64,
            heads: 4,
            n_text: 2,
            n_cross: 1,
            d_v: 64,
            lr: 1e-4,
            lambda: 0.2,
            iterations: 2000,
            batch: 1,
            seed: 7,
            max_steps: None,
            weight_decay: 0.01,
            gamma: 0.9,
            eval_every: 200,
            pretrain_steps: 500,
            pretrain_lr: 1e-3,
            houses: 10,
            episodes: 200,
            style: Style::R2r,
            modules: ModuleSet::full(),
            pretrain_tasks: TaskSet::full(),
        }
    }
}

impl Config {
    pub fn max_steps_for(&self, style: Style) -> usize {
        self.max_steps.unwrap_or_else(|| style.default_max_steps())
    }

    /// Every setting in the parser's own `key = value` syntax, one per
    /// line, so run manifests and ablation sweeps stay diffable and a dump
    /// can be parsed back verbatim.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("d_model", self.d_model.to_string());
        push("heads", self.heads.to_string());
        push("n_text", self.n_text.to_string());
        push("n_cross", self.n_cross.to_string());
        push("d_v", self.d_v.to_string());
        push("lr", self.lr.to_string());
        push("lambda", self.lambda.to_string());
        push("iterations", self.iterations.to_string());
        push("batch", self.batch.to_string());
        push("seed", self.seed.to_string());
        if let Some(m) = self.max_steps {
            push("max_steps", m.to_string());
        }
        push("weight_decay", self.weight_decay.to_string());
        push("gamma", self.gamma.to_string());
        push("eval_every", self.eval_every.to_string());
        push("pretrain_steps", self.pretrain_steps.to_string());
        push("pretrain_lr", self.pretrain_lr.to_string());
        push("houses", self.houses.to_string());
        push("episodes", self.episodes.to_string());
        push("style", self.style.as_str().to_string());
        push("modules", self.modules.to_string());
        push("pretrain_tasks", self.pretrain_tasks.to_string());
        out
    }

    fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(
            (8..=1024).contains(&self.d_model),
            "d_model must be in 8..=1024",
        )?;
        check(self.heads >= 1, "heads must be at least 1")?;
        check(
            self.d_model % self.heads == 0,
            "d_model must be divisible by heads",
        )?;
        check((1..=9).contains(&self.n_text), "n_text must be in 1..=9")?;
        check((1..=4).contains(&self.n_cross), "n_cross must be in 1..=4")?;
        check(
            (LANDMARK_COUNT..=2048).contains(&self.d_v),
            "d_v must be in 40..=2048",
        )?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be positive")?;
        check(
            self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite(),
            "pretrain_lr must be positive",
        )?;
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda must be nonnegative",
        )?;
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            "weight_decay must be nonnegative",
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            "gamma must be in 0..=1",
        )?;
        check(self.eval_every >= 1, "eval_every must be at least 1")?;
        check(
            (1..=64).contains(&self.batch),
            "batch must be in 1..=64",
        )?;
        check(
            self.max_steps.map_or(true, |m| (1..=1000).contains(&m)),
            "max_steps must be in 1..=1000",
        )?;
        check(self.houses >= 3, "houses must be at least 3")?;
        check(self.episodes >= 1, "episodes must be at least 1")?;
        Ok(())
    }
}

/// Parse configuration text. Later lines override earlier ones.
pub fn parse_config_str(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |e: String| Error::Config(format!("line {}: {e}", lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected 'key = value', got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = || -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| at(format!("{key} wants an unsigned integer, got {value:?}")))
        };
        let parse_f64 = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| at(format!("{key} wants a number, got {value:?}")))
        };
        match key {
            "d_model" => cfg.d_model = parse_usize()?,
            "heads" => cfg.heads = parse_usize()?,
            "n_text" => cfg.n_text = parse_usize()?,
            "n_cross" => cfg.n_cross = parse_usize()?,
            "d_v" => cfg.d_v = parse_usize()?,
            "lr" => cfg.lr = parse_f64()?,
            "lambda" => cfg.lambda = parse_f64()?,
            "iterations" => cfg.iterations = parse_usize()?,
            "batch" => cfg.batch = parse_usize()?,
            "seed" => {
                cfg.seed = value
                    .parse::<u64>()
                    .map_err(|_| at(format!("seed wants a u64, got {value:?}")))?
            }
            "max_steps" => cfg.max_steps = Some(parse_usize()?),
            "weight_decay" => cfg.weight_decay = parse_f64()?,
            "gamma" => cfg.gamma = parse_f64()?,
            "eval_every" => cfg.eval_every = parse_usize()?,
            "pretrain_steps" => cfg.pretrain_steps = parse_usize()?,
            "pretrain_lr" => cfg.pretrain_lr = parse_f64()?,
            "houses" => cfg.houses = parse_usize()?,
            "episodes" => cfg.episodes = parse_usize()?,
            "style" => cfg.style = Style::parse(value).map_err(|e| at(e.to_string()))?,
            "modules" => cfg.modules = ModuleSet::parse(value).map_err(|e| at(e.to_string()))?,
            "pretrain_tasks" => {
                cfg.pretrain_tasks = TaskSet::parse(value).map_err(|e| at(e.to_string()))?
            }
            other => return Err(at(format!("unknown key {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_dump_round_trips_through_the_parser() {
        let cfg = Config {
            lambda: 0.35,
            max_steps: Some(12),
            style: Style::R4r,
            modules: ModuleSet {
                orientation: true,
                vision: false,
            },
            pretrain_tasks: TaskSet {
                mlm: true,
                ssap: false,
                vm: true,
                om: false,
            },
            ..Config::default()
        };
        let dump = cfg.canonical();
        let reparsed = parse_config_str(&dump).unwrap();
        assert_eq!(reparsed.canonical(), dump);
        assert_eq!(reparsed.lambda, 0.35);
        assert_eq!(reparsed.max_steps, Some(12));
    }

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.lambda, 0.2);
        assert_eq!(cfg.max_steps, None);
        assert_eq!(cfg.modules, ModuleSet::full());
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = parse_config_str(
            "lambda = 0.5\n# comment\nheads = 8 # trailing\nmodules = h+o\nstyle=r4r\n",
        )
        .unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.heads, 8);
        assert!(cfg.modules.orientation && !cfg.modules.vision);
        assert_eq!(cfg.style, Style::R4r);
        assert_eq!(cfg.max_steps_for(cfg.style), 30);
    }

    #[test]
    fn unknown_key_and_bad_module_are_rejected() {
        let err = parse_config_str("warp = 9").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
        let err = parse_config_str("modules = h+q").unwrap_err().to_string();
        assert!(err.contains("{h, o, v}"), "{err}");
        assert!(parse_config_str("modules = o+v").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(parse_config_str("d_model = 65").is_err()); // not divisible by 4 heads
        assert!(parse_config_str("n_text = 10").is_err());
        assert!(parse_config_str("gamma = 1.5").is_err());
        assert!(parse_config_str("houses = 2").is_err());
        assert!(parse_config_str("d_v = 16").is_err());
    }

    #[test]
    fn later_lines_override() {
        let cfg = parse_config_str("lr = 0.1\nlr = 0.2\n").unwrap();
        assert_eq!(cfg.lr, 0.2);
    }

    #[test]
    fn display_roundtrips_sets() {
        for s in ["h", "h+o", "h+v", "h+o+v"] {
            assert_eq!(ModuleSet::parse(s).unwrap().to_string(), s);
        }
        for s in ["mlm", "mlm+ssap", "mlm+ssap+vm+om"] {
            assert_eq!(TaskSet::parse(s).unwrap().to_string(), s);
        }
    }
}
