//! Temporary calibration probe for the fine-tuning efficacy targets.
//! Not part of the deliverable; run with
//!   cargo run --example calibrate_finetune -- [lr] [lambda] [iters] [pretrain_steps] [batch] [d_model] [il_only]

use std::time::Instant;

use lovis_core::agent::{Agent, Mode};
use lovis_core::config::Config;
use lovis_core::model::{tokenize, Model};
use lovis_core::pretrain::run_pretraining;
use lovis_core::rng::stream;
use lovis_core::tensor::{AdamW, AdamWConfig, Graph};
use lovis_core::trainer::{
    baseline_loss, baseline_values, compute_rewards, discounted_returns, evaluate_split,
    imitation_loss, policy_gradient_loss, GeoTable, Policy,
};
use lovis_core::world::dataset::{make_dataset, Style};
use lovis_core::world::vocab::Vocabulary;
use rand::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = Config::default();
    if let Some(v) = args.get(1) {
        cfg.lr = v.parse().unwrap();
    }
    if let Some(v) = args.get(2) {
        cfg.lambda = v.parse().unwrap();
    }
    if let Some(v) = args.get(3) {
        cfg.iterations = v.parse().unwrap();
    }
    if let Some(v) = args.get(4) {
        cfg.pretrain_steps = v.parse().unwrap();
    }
    if let Some(v) = args.get(5) {
        cfg.batch = v.parse().unwrap();
    }
    if let Some(v) = args.get(6) {
        cfg.d_model = v.parse().unwrap();
    }
    let il_only = args.get(7).map(|s| s == "il_only").unwrap_or(false);
    eprintln!(
        "lr {} lambda {} iters {} pretrain_steps {} batch {} d_model {} il_only {}",
        cfg.lr, cfg.lambda, cfg.iterations, cfg.pretrain_steps, cfg.batch, cfg.d_model, il_only
    );

    let t0 = Instant::now();
    let data = make_dataset(10, 200, 7, Style::R2r).unwrap();
    let geo = GeoTable::new(&data.houses);
    let max_steps = cfg.max_steps_for(data.style);

    let t1 = Instant::now();
    let model = Model::new(&cfg, cfg.seed);
    run_pretraining(&model, &data, &cfg).unwrap();
    eprintln!("pretraining: {:.1}s", t1.elapsed().as_secs_f64());
    let probe = lovis_core::pretrain::probe_losses(&model, &data, 99, 300).unwrap();
    let kbar = lovis_core::pretrain::mean_candidates(&data, 99, 300).unwrap();
    eprintln!(
        "post-pretrain probe: mlm {:.3} (chance {:.3}) ssap {:.3} (chance {:.3}) vm {:.3} om {:.3}",
        probe.mlm,
        (lovis_core::world::vocab::Vocabulary::new().len() as f64).ln(),
        probe.ssap,
        kbar.ln(),
        probe.vm,
        probe.om
    );

    // instrumented copy of the fine-tuning loop
    let vocab = Vocabulary::new();
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay), model.params());
    let mut episode_rng = stream(cfg.seed, "finetune-episodes", 0);
    let mut action_rng = stream(cfg.seed, "finetune-actions", 0);
    let (mut w_il, mut w_rl, mut w_val, mut w_ent, mut w_len, mut w_n) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for iteration in 1..=cfg.iterations {
        for _ in 0..cfg.batch {
            let episode = &data.train[episode_rng.gen_range(0..data.train.len())];
            let house = data.house(episode.house_id);
            let g = Graph::new();
            let tok = tokenize(&episode.instruction, &vocab).unwrap();
            let text = model.encode_text(&g, &tok);
            let agent = Agent::new(&model, cfg.modules);

            let teacher = agent
                .rollout(&g, house, episode, &text, Mode::Teacher, max_steps)
                .unwrap();
            let il = imitation_loss(&g, &teacher);

            let total = if il_only {
                il.scale(cfg.lambda)
            } else {
                let sampled = agent
                    .rollout(
                        &g,
                        house,
                        episode,
                        &text,
                        Mode::Sample(&mut action_rng),
                        max_steps,
                    )
                    .unwrap();
                let rewards = compute_rewards(geo.get(episode.house_id), episode.goal, &sampled);
                let returns = discounted_returns(&rewards, cfg.gamma);
                let cls = text.x.rows(0, 1);
                let baselines = baseline_values(&g, &model, &cls, &sampled);
                let advantages: Vec<f64> = returns
                    .iter()
                    .zip(&baselines)
                    .map(|(&r, b)| r - b.item())
                    .collect();
                let rl = policy_gradient_loss(&g, &sampled, &advantages);
                let value = baseline_loss(&g, &baselines, &returns);
                w_rl += rl.item();
                w_val += value.item();
                w_len += sampled.steps.len() as f64;
                for s in &sampled.steps {
                    let p = s.probs.data();
                    w_ent -= p
                        .iter()
                        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
                        .sum::<f64>();
                }
                rl.add(&il.scale(cfg.lambda)).add(&value)
            };
            w_il += il.item() / teacher.steps.len() as f64;
            w_n += 1;
            total.scale(1.0 / cfg.batch as f64).backward();
        }
        opt.step(model.params());

        if iteration % 100 == 0 {
            eprintln!(
                "iter {iteration:5}: il/step {:.3} rl {:.3} val {:.3} ent {:.3} len {:.1}",
                w_il / w_n as f64,
                w_rl / w_n as f64,
                w_val / w_n as f64,
                w_ent / w_len.max(1.0),
                w_len / w_n as f64
            );
            (w_il, w_rl, w_val, w_ent, w_len, w_n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0);
        }
        if iteration % 200 == 0 {
            for split in ["val_seen", "val_unseen"] {
                let (s, _) = evaluate_split(
                    &Policy::Greedy { model: &model },
                    cfg.modules,
                    &data,
                    split,
                    max_steps,
                    &geo,
                )
                .unwrap();
                eprintln!("    {split}: SR {:.3} SPL {:.3} NE {:.2}", s.sr, s.spl, s.ne);
            }
        }
    }
    // Post-training diagnostics: where do the remaining errors live?
    let mut move_ok = 0usize;
    let mut move_n = 0usize;
    let mut stop_ok = 0usize;
    let mut stop_n = 0usize;
    for episode in data.train.iter().take(150) {
        let g = Graph::new();
        let tok = tokenize(&episode.instruction, &vocab).unwrap();
        let text = model.encode_text(&g, &tok);
        let agent = Agent::new(&model, cfg.modules);
        let run = agent
            .rollout(&g, data.house(episode.house_id), episode, &text, Mode::Teacher, max_steps)
            .unwrap();
        for s in &run.steps {
            let probs = s.probs.data();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if s.action == 0 {
                stop_n += 1;
                stop_ok += usize::from(pred == s.action);
            } else {
                move_n += 1;
                move_ok += usize::from(pred == s.action);
            }
        }
    }
    eprintln!(
        "teacher-forced argmax accuracy: moves {}/{} = {:.3}, stops {}/{} = {:.3}",
        move_ok,
        move_n,
        move_ok as f64 / move_n as f64,
        stop_ok,
        stop_n,
        stop_ok as f64 / stop_n as f64
    );

    let mut early = 0usize;
    let mut ran_out = 0usize;
    let mut wrong = 0usize;
    let mut fails = 0usize;
    for episode in data.split("val_seen").unwrap() {
        let g = Graph::new();
        let tok = tokenize(&episode.instruction, &vocab).unwrap();
        let text = model.encode_text(&g, &tok);
        let agent = Agent::new(&model, cfg.modules);
        let run = agent
            .rollout(&g, data.house(episode.house_id), episode, &text, Mode::Greedy, max_steps)
            .unwrap();
        let geo_h = geo.get(episode.house_id);
        let ne = geo_h.distance(*run.trajectory.last().unwrap(), episode.goal);
        if ne <= 3.0 {
            continue;
        }
        fails += 1;
        if !run.stopped {
            ran_out += 1;
        } else if run.trajectory.len() < episode.path.len() {
            early += 1;
        } else {
            wrong += 1;
        }
    }
    eprintln!(
        "val_seen failures {fails}: stopped-early {early}, never-stopped {ran_out}, wandered {wrong}"
    );
    eprintln!("total {:.1}s", t0.elapsed().as_secs_f64());
}
