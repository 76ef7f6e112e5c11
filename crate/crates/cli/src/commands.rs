//! The six subcommands. Every command validates inputs up front, writes a
//! run manifest into its output directory before real work starts, sends
//! progress to stderr and machine output to files.

use std::path::Path;

use lovis_core::checkpoint::{load_checkpoint, save_checkpoint};
use lovis_core::config::{parse_config, Config, ModuleSet, TaskSet};
use lovis_core::error::{Error, Result};
use lovis_core::metrics::{aggregate, episode_metrics, TrajectoryPair};
use lovis_core::model::Model;
use lovis_core::pretrain::run_pretraining;
use lovis_core::trainer::{evaluate_split, train_finetune, GeoTable, Policy};
use lovis_core::world::dataset::{
    dataset_fingerprint, load_dataset, make_dataset, save_dataset, Dataset, Style,
};
use lovis_core::world::Geodesics;

use crate::manifest::RunManifest;
use crate::output;

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(Config::default()),
    }
}

fn load_data(dir: &Path, cfg: &Config) -> Result<Dataset> {
    let data = load_dataset(dir)?;
    if cfg.d_v != data.d_v {
        return Err(Error::Config(format!(
            "config d_v {} does not match the dataset's feature width {}",
            cfg.d_v, data.d_v
        )));
    }
    Ok(data)
}

pub fn gen_data(
    houses: usize,
    episodes: usize,
    seed: u64,
    style: &str,
    out: &Path,
) -> Result<()> {
    let style = Style::parse(style)?;
    let cfg = Config {
        houses,
        episodes,
        seed,
        style,
        ..Config::default()
    };
    eprintln!("generating {houses} train houses, {episodes} episodes each, seed {seed}");
    let data = make_dataset(houses, episodes, seed, style)?;
    save_dataset(&data, out)?;
    let fingerprint = dataset_fingerprint(out)?;
    eprintln!(
        "wrote {} train / {} val_seen / {} val_unseen episodes to {}",
        data.train.len(),
        data.val_seen.len(),
        data.val_unseen.len(),
        out.display()
    );
    RunManifest::new("gen-data", &cfg, out)
        .dataset(out, fingerprint)
        .output(&out.join("houses.json"))
        .output(&out.join("train.jsonl"))
        .output(&out.join("val_seen.jsonl"))
        .output(&out.join("val_unseen.jsonl"))
        .begin()?
        .finish()
}

pub fn pretrain(
    data_dir: &Path,
    config: Option<&Path>,
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.pretrain_steps = s;
    }
    let data = load_data(data_dir, &cfg)?;
    let out_dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    std::fs::create_dir_all(&out_dir)?;
    let losses_path = out_dir.join("pretrain_losses.csv");
    let manifest = RunManifest::new("pretrain", &cfg, &out_dir)
        .dataset(data_dir, dataset_fingerprint(data_dir)?)
        .output(out)
        .output(&losses_path)
        .begin()?;

    eprintln!(
        "pretraining {} steps on {} houses (tasks: {})",
        cfg.pretrain_steps, data.n_train_houses, cfg.pretrain_tasks
    );
    let model = Model::new(&cfg, cfg.seed);
    let rows = run_pretraining(&model, &data, &cfg)?;

    let mut csv = String::from("step,mlm,ssap,vm,om\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.step, r.mlm, r.ssap, r.vm, r.om));
    }
    std::fs::write(&losses_path, csv)?;
    save_checkpoint(model.params(), out)?;
    eprintln!("wrote {}", out.display());
    manifest.finish()
}

pub fn finetune(
    data_dir: &Path,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let data = load_data(data_dir, &cfg)?;
    std::fs::create_dir_all(out)?;
    let history_path = out.join("history.csv");
    let best_path = out.join("best.ckpt");
    let manifest = RunManifest::new("finetune", &cfg, out)
        .dataset(data_dir, dataset_fingerprint(data_dir)?)
        .output(&history_path)
        .output(&best_path)
        .begin()?;

    let model = Model::new(&cfg, cfg.seed);
    match ckpt {
        Some(p) => {
            load_checkpoint(model.params(), p)?;
            eprintln!("initialized from {}", p.display());
        }
        None => eprintln!("initialized from scratch (seed {})", cfg.seed),
    }
    eprintln!(
        "fine-tuning {} iterations on {} episodes (modules: {})",
        cfg.iterations,
        data.train.len(),
        cfg.modules
    );
    let report = train_finetune(&model, &cfg, &data)?;
    output::write_history_csv(&history_path, &report.history)?;
    save_checkpoint(model.params(), &best_path)?;
    eprintln!(
        "best val_unseen SPL {:.4} at iteration {}; wrote {}",
        report.best_val_unseen_spl,
        report.best_iteration,
        best_path.display()
    );
    manifest.finish()
}

pub fn eval(
    data_dir: &Path,
    ckpt: &Path,
    split: &str,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let data = load_data(data_dir, &cfg)?;
    let model = Model::new(&cfg, cfg.seed);
    load_checkpoint(model.params(), ckpt)?;
    let geo = GeoTable::new(&data.houses);
    let max_steps = cfg.max_steps_for(data.style);
    eprintln!("evaluating {} on {split}", ckpt.display());
    let (summary, records) = evaluate_split(
        &Policy::Greedy { model: &model },
        cfg.modules,
        &data,
        split,
        max_steps,
        &geo,
    )?;
    let rows = vec![(split.to_string(), summary)];
    print!("{}", output::summary_text(&rows, true));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join("metrics.csv");
        let traj_path = dir.join("trajectories.jsonl");
        let manifest = RunManifest::new("eval", &cfg, dir)
            .dataset(data_dir, dataset_fingerprint(data_dir)?)
            .output(&csv_path)
            .output(&traj_path)
            .begin()?;
        std::fs::write(&csv_path, output::summary_csv(&rows, true))?;
        output::write_trajectories(&traj_path, &records)?;
        eprintln!("wrote {} and {}", csv_path.display(), traj_path.display());
        manifest.finish()?;
    }
    Ok(())
}

pub fn metrics(
    pred: &Path,
    reference: &Path,
    houses: &Path,
    style: &str,
    out: Option<&Path>,
) -> Result<()> {
    let style = Style::parse(style)?;
    let data = load_dataset(houses)?;
    let preds = output::read_trajectories(pred)?;
    let refs = output::read_trajectories(reference)?;
    if preds.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} references",
            preds.len(),
            refs.len()
        )));
    }
    // geodesics once per house actually used
    let mut tables: Vec<Option<Geodesics>> = (0..data.houses.len()).map(|_| None).collect();
    let mut per_episode = Vec::with_capacity(preds.len());
    for (i, (p, r)) in preds.iter().zip(&refs).enumerate() {
        if p.house_id != r.house_id {
            return Err(Error::Data(format!(
                "line {}: prediction is in house {} but reference in house {}",
                i + 1,
                p.house_id,
                r.house_id
            )));
        }
        if p.house_id >= data.houses.len() {
            return Err(Error::Data(format!(
                "line {}: house {} not present in {}",
                i + 1,
                p.house_id,
                houses.display()
            )));
        }
        let house = data.house(p.house_id);
        let geo =
            tables[p.house_id].get_or_insert_with(|| Geodesics::new(house));
        let pair = TrajectoryPair::new(house, geo, &p.path, &r.path)?;
        per_episode.push(episode_metrics(&pair));
    }
    let summary = aggregate(&per_episode)?;
    let fidelity = style == Style::R4r;
    let rows = vec![("all".to_string(), summary)];
    let csv = output::summary_csv(&rows, fidelity);
    eprint!("{}", output::summary_text(&rows, fidelity));
    match out {
        Some(path) => {
            std::fs::write(path, csv)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Worker-count cap from the environment; the default is 1 so runs stay
/// deterministic-by-construction unless parallelism is asked for.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("LOVIS_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Config(format!(
                    "LOVIS_THREADS must be a positive integer, got {v:?}"
                ))
            }),
    }
}

/// One ablation variant: a label plus the config overrides it stands for.
struct Variant {
    label: String,
    cfg: Config,
}

fn module_variants(base: &Config) -> Result<Vec<Variant>> {
    ["h", "h+o", "h+v", "h+o+v"]
        .iter()
        .map(|label| {
            Ok(Variant {
                label: label.to_string(),
                cfg: Config {
                    modules: ModuleSet::parse(label)?,
                    ..base.clone()
                },
            })
        })
        .collect()
}

fn task_variants(base: &Config) -> Result<Vec<Variant>> {
    ["mlm", "mlm+ssap", "mlm+ssap+vm", "mlm+ssap+om", "mlm+ssap+vm+om"]
        .iter()
        .map(|label| {
            Ok(Variant {
                label: label.to_string(),
                cfg: Config {
                    pretrain_tasks: TaskSet::parse(label)?,
                    ..base.clone()
                },
            })
        })
        .collect()
}

/// Pretrain + fine-tune + evaluate one variant, writing its artifacts into
/// `dir`. Returns the two validation summaries of the best checkpoint.
fn run_variant(
    variant: &Variant,
    data: &Dataset,
    shared_pretrained: Option<&[f64]>,
    dir: &Path,
) -> Result<Vec<(String, lovis_core::metrics::MetricSummary)>> {
    let cfg = &variant.cfg;
    std::fs::create_dir_all(dir)?;
    let model = Model::new(cfg, cfg.seed);
    match shared_pretrained {
        Some(flat) => model.params().load_flat(flat),
        None => {
            run_pretraining(&model, data, cfg)?;
        }
    }
    let report = train_finetune(&model, cfg, data)?;
    output::write_history_csv(&dir.join("history.csv"), &report.history)?;
    save_checkpoint(model.params(), &dir.join("best.ckpt"))?;

    let geo = GeoTable::new(&data.houses);
    let max_steps = cfg.max_steps_for(data.style);
    let mut rows = Vec::new();
    for split in ["val_seen", "val_unseen"] {
        let (summary, _) = evaluate_split(
            &Policy::Greedy { model: &model },
            cfg.modules,
            data,
            split,
            max_steps,
            &geo,
        )?;
        rows.push((split.to_string(), summary));
    }
    Ok(rows)
}

pub fn ablate(data_dir: &Path, config: Option<&Path>, axis: &str, out: &Path) -> Result<()> {
    let base = load_config(config)?;
    let data = load_data(data_dir, &base)?;
    let variants = match axis {
        "modules" => module_variants(&base)?,
        "tasks" => task_variants(&base)?,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation axis {other:?}, expected modules or tasks"
            )))
        }
    };
    std::fs::create_dir_all(out)?;
    let summary_path = out.join("ablation.csv");
    let manifest = RunManifest::new("ablate", &base, out)
        .dataset(data_dir, dataset_fingerprint(data_dir)?)
        .output(&summary_path)
        .begin()?;

    // On the module axis pretraining is identical across variants (the
    // module selector only exists in the fine-tuned agent), so one
    // pretrained checkpoint is shared.
    let shared = if axis == "modules" {
        eprintln!("pretraining once for all module variants");
        let model = Model::new(&base, base.seed);
        run_pretraining(&model, &data, &base)?;
        Some(model.params().to_flat())
    } else {
        None
    };

    let workers = worker_threads()?;
    eprintln!(
        "running {} variants on axis {axis} with {workers} worker(s)",
        variants.len()
    );
    let mut results: Vec<Option<Vec<(String, lovis_core::metrics::MetricSummary)>>> =
        (0..variants.len()).map(|_| None).collect();
    let mut chunks: Vec<Vec<usize>> = vec![Vec::new(); workers];
    for i in 0..variants.len() {
        chunks[i % workers].push(i);
    }
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for chunk in &chunks {
            let data = &data;
            let variants = &variants;
            let shared = shared.as_deref();
            handles.push(scope.spawn(move || -> Result<Vec<_>> {
                let mut out_rows = Vec::new();
                for &i in chunk {
                    let v = &variants[i];
                    eprintln!("variant {} starting", v.label);
                    let dir = out.join(v.label.replace('+', "_"));
                    let rows = run_variant(v, data, shared, &dir)?;
                    eprintln!("variant {} done", v.label);
                    out_rows.push((i, rows));
                }
                Ok(out_rows)
            }));
        }
        for handle in handles {
            for (i, rows) in handle.join().expect("worker panicked")? {
                results[i] = Some(rows);
            }
        }
        Ok(())
    })?;

    let mut csv = String::from("variant,split,NE,SR,SPL,CLS,nDTW,sDTW\n");
    for (variant, rows) in variants.iter().zip(&results) {
        for (split, s) in rows.as_ref().expect("all variants ran") {
            csv.push_str(&format!(
                "{},{split},{},{},{},{},{},{}\n",
                variant.label, s.ne, s.sr, s.spl, s.cls, s.ndtw, s.sdtw
            ));
        }
    }
    std::fs::write(&summary_path, &csv)?;
    eprintln!("wrote {}", summary_path.display());
    manifest.finish()
}
