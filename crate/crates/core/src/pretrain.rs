//! Pre-training objectives over instruction + single-step panorama pairs:
//! masked language modeling, single-step action prediction, visual
//! matching, and orientation matching. All four share the model's encoders
//! and cross-modal stacks; each optimizer step trains one task, cycling
//! round-robin through the enabled set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agent::candidate_tensors;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{tokenize, Model, Module, Tokenized};
use crate::rng::{derive_seed, stream};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor};
use crate::world::dataset::Dataset;
use crate::world::instruction::heading_along;
use crate::world::vocab::{self, Vocabulary};
use crate::world::{
    candidate_set, vision_feature, Candidate, SECTOR_COUNT, VISION_NOISE_SIGMA,
};

/// Per-token masking probability for eligible tokens.
pub const MASK_RATE: f64 = 0.08;

/// Instances averaged per optimizer step.
pub const PRETRAIN_BATCH: usize = 8;

/// Which positions were masked and what stood there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub original: Vec<usize>,
}

/// Independently mask each direction or landmark token with probability
/// [`MASK_RATE`]; special and filler tokens are never touched.
/// Deterministic for a given seed.
pub fn mask_instruction(tok: &Tokenized, vocab: &Vocabulary, seed: u64) -> (Tokenized, MaskPlan) {
    let mut rng = stream(seed, "mask-plan", 0);
    let mut masked = tok.clone();
    let mut plan = MaskPlan {
        positions: Vec::new(),
        original: Vec::new(),
    };
    for p in 0..tok.real_len {
        let id = tok.ids[p];
        if vocab.is_maskable(id) && rng.gen::<f64>() < MASK_RATE {
            plan.positions.push(p);
            plan.original.push(id);
            masked.ids[p] = vocab::MASK;
        }
    }
    (masked, plan)
}

/// One pre-training instance: an instruction plus the panorama at a single
/// step along its path, with the teacher's next action.
pub struct StepSample {
    pub house_id: usize,
    pub tok: Tokenized,
    pub cands: Vec<Candidate>,
    /// Teacher candidate index at this step (0 = STOP at the goal).
    pub teacher: usize,
}

/// Draw a random (episode, step) pair from the training split.
pub fn sample_step(data: &Dataset, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Result<StepSample> {
    let episode = &data.train[rng.gen_range(0..data.train.len())];
    let house = data.house(episode.house_id);
    let t = rng.gen_range(0..episode.path.len());
    let heading = heading_along(house, &episode.path, t);
    let cands = candidate_set(house, episode.path[t], heading, VISION_NOISE_SIGMA);
    let teacher = match episode.path.get(t + 1) {
        None => 0,
        Some(&next) => cands
            .iter()
            .position(|c| c.to == next)
            .ok_or_else(|| Error::Data(format!("path hop {} -> {next} has no edge", episode.path[t])))?,
    };
    Ok(StepSample {
        house_id: episode.house_id,
        tok: tokenize(&episode.instruction, vocab)?,
        cands,
        teacher,
    })
}

/// Mean cross-entropy of the vocabulary head over masked positions, with
/// the panorama's joint features cross-attended against the masked text.
/// No masked positions means a zero loss with no gradient.
pub fn loss_mlm(
    model: &Model,
    g: &Graph,
    masked: &Tokenized,
    plan: &MaskPlan,
    cands: &[Candidate],
) -> Tensor {
    if plan.positions.is_empty() {
        return g.scalar(0.0);
    }
    let text = model.encode_text(g, masked);
    let (v, o) = candidate_tensors(g, cands);
    let vo = model.encode_vision_orientation(g, &v, &o);
    let (t2, _, _) = model.cross_stack(g, Module::History, &text.x, &vo);
    let mut acc: Option<Tensor> = None;
    for (&pos, &label) in plan.positions.iter().zip(&plan.original) {
        let logits = model
            .head(g, "head_mlm", &t2.rows(pos, 1))
            .reshape(&[model.dims().vocab]);
        let ce = logits.cross_entropy(label);
        acc = Some(match acc {
            Some(a) => a.add(&ce),
            None => ce,
        });
    }
    acc.expect("nonempty plan")
        .scale(1.0 / plan.positions.len() as f64)
}

/// Single-step action prediction: negative log of the head-averaged
/// [CLS]-to-candidate cross-attention weight at the teacher index.
pub fn loss_ssap(
    model: &Model,
    g: &Graph,
    tok: &Tokenized,
    cands: &[Candidate],
    teacher: usize,
) -> Tensor {
    assert!(
        teacher < cands.len(),
        "teacher index {teacher} out of range for {} candidates",
        cands.len()
    );
    let text = model.encode_text(g, tok);
    let (v, o) = candidate_tensors(g, cands);
    let vo = model.encode_vision_orientation(g, &v, &o);
    let (_, _, attn) = model.cross_stack(g, Module::History, &text.x, &vo);
    // Row 0 of the text-to-feature attention is the [CLS] distribution.
    let k = cands.len();
    attn.rows(0, 1)
        .reshape(&[k, 1])
        .rows(teacher, 1)
        .log_clamped()
        .neg()
        .reshape(&[1])
}

/// Binary cross-entropy of the sigmoid matching head on the [CLS] row of
/// the vision-only cross encoding. Orientation features never enter.
pub fn loss_vm(model: &Model, g: &Graph, tok: &Tokenized, v: &Tensor, label: bool) -> Tensor {
    let text = model.encode_text(g, tok);
    let venc = model.encode_vision(g, v);
    let (t2, _, _) = model.cross_stack(g, Module::Vision, &text.x, &venc);
    let p = model.head(g, "head_vm", &t2.rows(0, 1)).sigmoid();
    let picked = if label {
        p
    } else {
        p.neg().add_const(1.0)
    };
    picked.log_clamped().neg().reshape(&[1])
}

/// Visual-matching features: with probability one half the step's true
/// candidate visions (label true), otherwise every view replaced by a
/// sector feature from a different training house (label false).
pub fn sample_vm_features(
    data: &Dataset,
    sample: &StepSample,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, bool)> {
    if data.n_train_houses < 2 {
        return Err(Error::Data(
            "visual matching needs at least two training houses to draw negatives from".into(),
        ));
    }
    let positive = rng.gen_bool(0.5);
    if positive {
        let mut v = Vec::with_capacity(sample.cands.len() * data.d_v);
        for c in &sample.cands {
            v.extend_from_slice(&c.vision);
        }
        return Ok((v, true));
    }
    let mut other = rng.gen_range(0..data.n_train_houses - 1);
    if other >= sample.house_id {
        other += 1;
    }
    let house = data.house(other);
    let mut v = Vec::with_capacity(sample.cands.len() * data.d_v);
    for _ in 0..sample.cands.len() {
        let vp = rng.gen_range(0..house.positions.len());
        let sector = rng.gen_range(0..SECTOR_COUNT);
        v.extend_from_slice(&vision_feature(house, vp, sector, VISION_NOISE_SIGMA));
    }
    Ok((v, false))
}

/// The teacher action's orientation regression target.
pub fn om_target(cand: &Candidate) -> [f64; 4] {
    [
        cand.alpha.sin(),
        cand.alpha.cos(),
        cand.beta.sin(),
        cand.beta.cos(),
    ]
}

/// Mean squared error of the 4-output orientation head on the [CLS] row of
/// the orientation-only cross encoding.
pub fn loss_om(
    model: &Model,
    g: &Graph,
    tok: &Tokenized,
    cands: &[Candidate],
    teacher: usize,
) -> Tensor {
    let text = model.encode_text(g, tok);
    let (_, o) = candidate_tensors(g, cands);
    let oenc = model.encode_orientation(g, &o);
    let (t2, _, _) = model.cross_stack(g, Module::Orientation, &text.x, &oenc);
    let pred = model.head(g, "head_om", &t2.rows(0, 1));
    let target = g.constant(&[1, 4], om_target(&cands[teacher]).to_vec());
    let diff = pred.sub(&target);
    diff.mul(&diff).mean()
}

/// Per-task loss values from one combined evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskLosses {
    pub mlm: f64,
    pub ssap: f64,
    pub vm: f64,
    pub om: f64,
}

impl TaskLosses {
    pub fn total(&self) -> f64 {
        self.mlm + self.ssap + self.vm + self.om
    }
}

/// All four objectives on one instance, summed without weights.
/// `mask_seed` fixes the mask plan, `rng` drives the matching draw.
pub fn loss_pretrain(
    model: &Model,
    g: &Graph,
    data: &Dataset,
    sample: &StepSample,
    vocab: &Vocabulary,
    mask_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, TaskLosses)> {
    let (masked, plan) = mask_instruction(&sample.tok, vocab, mask_seed);
    let mlm = loss_mlm(model, g, &masked, &plan, &sample.cands);
    let ssap = loss_ssap(model, g, &sample.tok, &sample.cands, sample.teacher);
    let (v_data, label) = sample_vm_features(data, sample, rng)?;
    let v = g.constant(&[sample.cands.len(), data.d_v], v_data);
    let vm = loss_vm(model, g, &sample.tok, &v, label);
    let om = loss_om(model, g, &sample.tok, &sample.cands, sample.teacher);
    let values = TaskLosses {
        mlm: mlm.item(),
        ssap: ssap.item(),
        vm: vm.item(),
        om: om.item(),
    };
    let total = mlm.add(&ssap).add(&vm).add(&om);
    Ok((total, values))
}

/// One CSV row of the pre-training curve. Tasks not yet scheduled carry NaN
/// until their first optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct PretrainRow {
    pub step: usize,
    pub mlm: f64,
    pub ssap: f64,
    pub vm: f64,
    pub om: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Mlm,
    Ssap,
    Vm,
    Om,
}

/// Run the round-robin pre-training loop, mutating the model in place.
/// Returns the per-step loss curve (last computed value per task).
pub fn run_pretraining(model: &Model, data: &Dataset, cfg: &Config) -> Result<Vec<PretrainRow>> {
    assert_eq!(cfg.d_v, data.d_v, "model and dataset feature widths differ");
    let vocab = Vocabulary::new();
    let mut tasks = Vec::new();
    if cfg.pretrain_tasks.mlm {
        tasks.push(Task::Mlm);
    }
    if cfg.pretrain_tasks.ssap {
        tasks.push(Task::Ssap);
    }
    if cfg.pretrain_tasks.vm {
        tasks.push(Task::Vm);
    }
    if cfg.pretrain_tasks.om {
        tasks.push(Task::Om);
    }
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.pretrain_lr, cfg.weight_decay),
        model.params(),
    );
    let mut rng = stream(cfg.seed, "pretrain", 0);
    let mut last = [f64::NAN; 4];
    let mut rows = Vec::with_capacity(cfg.pretrain_steps);

    for step in 0..cfg.pretrain_steps {
        let task = tasks[step % tasks.len()];
        let g = Graph::new();
        let mut acc: Option<Tensor> = None;
        for b in 0..PRETRAIN_BATCH {
            let sample = sample_step(data, &vocab, &mut rng)?;
            let loss = match task {
                Task::Mlm => {
                    let seed = derive_seed(cfg.seed, "mask-plan", (step * PRETRAIN_BATCH + b) as u64);
                    let (masked, plan) = mask_instruction(&sample.tok, &vocab, seed);
                    loss_mlm(model, &g, &masked, &plan, &sample.cands)
                }
                Task::Ssap => loss_ssap(model, &g, &sample.tok, &sample.cands, sample.teacher),
                Task::Vm => {
                    let (v_data, label) = sample_vm_features(data, &sample, &mut rng)?;
                    let v = g.constant(&[sample.cands.len(), data.d_v], v_data);
                    loss_vm(model, &g, &sample.tok, &v, label)
                }
                Task::Om => loss_om(model, &g, &sample.tok, &sample.cands, sample.teacher),
            };
            acc = Some(match acc {
                Some(a) => a.add(&loss),
                None => loss,
            });
        }
        let loss = acc.expect("batch nonempty").scale(1.0 / PRETRAIN_BATCH as f64);
        loss.backward();
        opt.step(model.params());
        last[task as usize] = loss.item();
        rows.push(PretrainRow {
            step,
            mlm: last[Task::Mlm as usize],
            ssap: last[Task::Ssap as usize],
            vm: last[Task::Vm as usize],
            om: last[Task::Om as usize],
        });
    }
    Ok(rows)
}

/// Mean per-task losses over `n` freshly sampled instances, without
/// training. MLM is aggregated per masked token (instances that draw no
/// masks contribute nothing), the other tasks per instance; this keeps
/// every value comparable to its chance level.
pub fn probe_losses(model: &Model, data: &Dataset, seed: u64, n: usize) -> Result<TaskLosses> {
    let vocab = Vocabulary::new();
    let mut rng = stream(seed, "pretrain-probe", 0);
    let mut mlm_sum = 0.0;
    let mut mlm_tokens = 0usize;
    let mut sum = TaskLosses::default();
    for i in 0..n {
        let sample = sample_step(data, &vocab, &mut rng)?;
        let g = Graph::new();
        let mask_seed = derive_seed(seed, "probe-mask", i as u64);
        let (masked, plan) = mask_instruction(&sample.tok, &vocab, mask_seed);
        if !plan.positions.is_empty() {
            let per_token = loss_mlm(model, &g, &masked, &plan, &sample.cands).item();
            mlm_sum += per_token * plan.positions.len() as f64;
            mlm_tokens += plan.positions.len();
        }
        sum.ssap += loss_ssap(model, &g, &sample.tok, &sample.cands, sample.teacher).item();
        let (v_data, label) = sample_vm_features(data, &sample, &mut rng)?;
        let v = g.constant(&[sample.cands.len(), data.d_v], v_data);
        sum.vm += loss_vm(model, &g, &sample.tok, &v, label).item();
        sum.om += loss_om(model, &g, &sample.tok, &sample.cands, sample.teacher).item();
    }
    let n = n as f64;
    Ok(TaskLosses {
        mlm: if mlm_tokens == 0 {
            0.0
        } else {
            mlm_sum / mlm_tokens as f64
        },
        ssap: sum.ssap / n,
        vm: sum.vm / n,
        om: sum.om / n,
    })
}

/// Mean candidate-set size over probe samples; ln of this is the SSAP
/// chance level.
pub fn mean_candidates(data: &Dataset, seed: u64, n: usize) -> Result<f64> {
    let vocab = Vocabulary::new();
    let mut rng = stream(seed, "pretrain-probe", 0);
    let mut total = 0usize;
    for _ in 0..n {
        total += sample_step(data, &vocab, &mut rng)?.cands.len();
    }
    Ok(total as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::dataset::{make_dataset, Style};
    use crate::world::orientation_feature;

    fn setup() -> (Dataset, Model, Vocabulary) {
        let cfg = tiny_config();
        let data = make_dataset(3, 6, 41, Style::R2r).unwrap();
        (data, Model::new(&cfg, 23), Vocabulary::new())
    }

    fn tiny_config() -> Config {
        Config {
            d_model: 8,
            heads: 2,
            n_text: 1,
            n_cross: 1,
            ..Config::default()
        }
    }

    /// A synthetic STOP-like candidate carrying the given pose.
    fn fake_candidate(alpha: f64, beta: f64, d_v: usize, fill: f64) -> Candidate {
        Candidate {
            to: 0,
            alpha,
            beta,
            distance: 0.0,
            vision: vec![fill; d_v],
            orientation: orientation_feature(alpha, beta),
        }
    }

    #[test]
    fn masking_hits_only_eligible_tokens_at_the_configured_rate() {
        let (data, _, vocab) = setup();
        let mut eligible = 0usize;
        let mut masked_count = 0usize;
        let mut seed = 0u64;
        for episode in data.train.iter().cycle() {
            let tok = tokenize(&episode.instruction, &vocab).unwrap();
            let (masked, plan) = mask_instruction(&tok, &vocab, seed);
            seed += 1;
            for p in 0..tok.real_len {
                if vocab.is_maskable(tok.ids[p]) {
                    eligible += 1;
                }
            }
            masked_count += plan.positions.len();
            for (&p, &orig) in plan.positions.iter().zip(&plan.original) {
                assert!(vocab.is_maskable(orig), "masked an ineligible token");
                assert_eq!(masked.ids[p], vocab::MASK);
                assert_eq!(tok.ids[p], orig);
            }
            // Unmasked positions are untouched, pads included.
            for p in 0..tok.ids.len() {
                if !plan.positions.contains(&p) {
                    assert_eq!(masked.ids[p], tok.ids[p]);
                }
            }
            if eligible >= 100_000 {
                break;
            }
        }
        let rate = masked_count as f64 / eligible as f64;
        assert!(
            (0.07..=0.09).contains(&rate),
            "empirical mask rate {rate} outside [0.07, 0.09]"
        );

        let tok = tokenize(&data.train[0].instruction, &vocab).unwrap();
        let (a, pa) = mask_instruction(&tok, &vocab, 7);
        let (b, pb) = mask_instruction(&tok, &vocab, 7);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn instruction_without_eligible_tokens_gets_no_masks_and_zero_loss() {
        let (data, model, vocab) = setup();
        let tok = tokenize("turn and walk to the .", &vocab).unwrap();
        for seed in 0..50 {
            let (_, plan) = mask_instruction(&tok, &vocab, seed);
            assert!(plan.positions.is_empty());
        }
        let (_, plan) = mask_instruction(&tok, &vocab, 0);
        let mut rng = stream(1, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();
        model.params().zero_grads();
        let g = Graph::new();
        let loss = loss_mlm(&model, &g, &tok, &plan, &sample.cands);
        assert_eq!(loss.item(), 0.0);
        loss.backward();
        assert!(model.params().grad_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn untrained_mlm_loss_sits_near_uniform_chance() {
        let (data, model, vocab) = setup();
        let mut rng = stream(2, "pretrain-test", 0);
        let ln_v = (vocab.len() as f64).ln();
        let mut total = 0.0;
        let mut count = 0;
        let mut seed = 100;
        while count < 20 {
            let sample = sample_step(&data, &vocab, &mut rng).unwrap();
            let (masked, plan) = mask_instruction(&sample.tok, &vocab, seed);
            seed += 1;
            if plan.positions.is_empty() {
                continue;
            }
            let g = Graph::new();
            total += loss_mlm(&model, &g, &masked, &plan, &sample.cands).item();
            count += 1;
        }
        let mean = total / count as f64;
        assert!(
            (mean - ln_v).abs() < 0.5,
            "untrained MLM loss {mean} should be near ln|V| = {ln_v}"
        );
    }

    #[test]
    fn peaked_vocabulary_head_drives_mlm_below_ln_two() {
        let (data, model, vocab) = setup();
        let sofa = vocab.id("sofa").unwrap();
        let head_w = model.params().get("head_mlm.w").unwrap();
        head_w.set_data(&vec![0.0; head_w.numel()]);
        let head_b = model.params().get("head_mlm.b").unwrap();
        let mut bias = vec![0.0; vocab.len()];
        bias[sofa] = 10.0;
        head_b.set_data(&bias);

        let mut rng = stream(3, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();
        let tok = sample.tok.clone();
        let mut masked = tok.clone();
        masked.ids[2] = vocab::MASK;
        let plan = MaskPlan {
            positions: vec![2],
            original: vec![sofa], // label forced to the head's argmax
        };
        let g = Graph::new();
        let loss = loss_mlm(&model, &g, &masked, &plan, &sample.cands).item();
        assert!(loss < 2f64.ln(), "forced-argmax loss {loss} >= ln 2");
    }

    #[test]
    fn ssap_is_exact_on_point_mass_and_uniform_attention() {
        let (_, model, vocab) = setup();
        let cfg = tiny_config();
        let tok = tokenize("turn left and walk to the sofa .", &vocab).unwrap();
        let g = Graph::new();

        let solo = vec![fake_candidate(0.0, 0.0, cfg.d_v, 0.3)];
        let loss = loss_ssap(&model, &g, &tok, &solo, 0);
        assert_eq!(loss.item(), 0.0, "one candidate is a point mass");

        let same = vec![
            fake_candidate(0.0, 0.0, cfg.d_v, 0.3),
            fake_candidate(0.0, 0.0, cfg.d_v, 0.3),
            fake_candidate(0.0, 0.0, cfg.d_v, 0.3),
            fake_candidate(0.0, 0.0, cfg.d_v, 0.3),
        ];
        let loss = loss_ssap(&model, &g, &tok, &same, 2);
        assert!(
            (loss.item() - 4f64.ln()).abs() < 1e-9,
            "identical candidates must give the uniform loss ln 4, got {}",
            loss.item()
        );
    }

    #[test]
    fn vm_sampling_balances_labels_and_swaps_sources() {
        let (data, _, vocab) = setup();
        let mut rng = stream(4, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();
        let true_v: Vec<f64> = sample.cands.iter().flat_map(|c| c.vision.clone()).collect();

        let mut positives = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let (v, y) = sample_vm_features(&data, &sample, &mut rng).unwrap();
            assert_eq!(v.len(), true_v.len());
            if y {
                positives += 1;
                assert_eq!(v, true_v, "positive samples keep the true features");
            } else {
                assert_ne!(v, true_v, "negative samples come from elsewhere");
            }
        }
        let rate = positives as f64 / n as f64;
        assert!(
            (0.48..=0.52).contains(&rate),
            "label balance {rate} outside [0.48, 0.52]"
        );

        let mut lone = make_dataset(3, 2, 5, Style::R2r).unwrap();
        lone.n_train_houses = 1;
        assert!(sample_vm_features(&lone, &sample, &mut rng).is_err());
    }

    #[test]
    fn vm_loss_matches_the_closed_form_and_ignores_orientation() {
        let (data, model, vocab) = setup();
        let head_w = model.params().get("head_vm.w").unwrap();
        head_w.set_data(&vec![0.0; head_w.numel()]);
        // Bias picked so the sigmoid outputs exactly P = 0.999.
        model
            .params()
            .get("head_vm.b")
            .unwrap()
            .set_data(&[(0.999f64 / 0.001).ln()]);

        let mut rng = stream(5, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();
        let g = Graph::new();
        let (v_data, _) = sample_vm_features(&data, &sample, &mut rng).unwrap();
        let v = g.constant(&[sample.cands.len(), data.d_v], v_data);
        let pos = loss_vm(&model, &g, &sample.tok, &v, true).item();
        assert!((pos - (-0.999f64.ln())).abs() < 1e-9, "got {pos}");
        let neg = loss_vm(&model, &g, &sample.tok, &v, false).item();
        assert!((neg - (-0.001f64.ln())).abs() < 1e-6, "got {neg}");

        // Separation check on a fresh model (the closed-form part above
        // zeroed the matching head, which blocks upstream gradient).
        let fresh = Model::new(&tiny_config(), 77);
        fresh.params().zero_grads();
        let g = Graph::new();
        let (v_data, label) = sample_vm_features(&data, &sample, &mut rng).unwrap();
        let v = g.constant(&[sample.cands.len(), data.d_v], v_data);
        loss_vm(&fresh, &g, &sample.tok, &v, label).backward();
        for name in ["enc_o.w", "enc_vo.w", "head_om.w", "score_h.wq"] {
            let grad = fresh.params().get(name).unwrap().grad();
            assert!(grad.iter().all(|&x| x == 0.0), "{name} gradient must stay zero");
        }
        assert!(fresh
            .params()
            .get("enc_v.w")
            .unwrap()
            .grad()
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn om_loss_hits_its_closed_form_cases() {
        let (data, model, vocab) = setup();
        let head_w = model.params().get("head_om.w").unwrap();
        head_w.set_data(&vec![0.0; head_w.numel()]);
        let head_b = model.params().get("head_om.b").unwrap();
        head_b.set_data(&[0.0; 4]);

        let mut rng = stream(6, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();
        let cfg = tiny_config();
        // A STOP teacher has target [0, 1, 0, 1]; a zero head gives MSE 0.5.
        let stop = vec![fake_candidate(0.0, 0.0, cfg.d_v, 0.1)];
        let g = Graph::new();
        let loss = loss_om(&model, &g, &sample.tok, &stop, 0);
        assert_eq!(loss.item(), 0.5);

        head_b.set_data(&om_target(&stop[0]));
        let g = Graph::new();
        let loss = loss_om(&model, &g, &sample.tok, &stop, 0);
        assert_eq!(loss.item(), 0.0, "head equal to the target is a perfect fit");
    }

    #[test]
    fn combined_loss_is_exactly_the_sum_of_its_parts() {
        let (data, model, vocab) = setup();
        let mut rng = stream(7, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();
        let g = Graph::new();
        let mut vm_rng = stream(7, "pretrain-test", 1);
        let (total, parts) =
            loss_pretrain(&model, &g, &data, &sample, &vocab, 99, &mut vm_rng).unwrap();
        assert!(
            (total.item() - parts.total()).abs() < 1e-12,
            "additivity violated: {} vs {}",
            total.item(),
            parts.total()
        );
    }

    #[test]
    fn combined_gradients_match_finite_differences() {
        let (data, model, vocab) = setup();
        let mut rng = stream(8, "pretrain-test", 0);
        let sample = sample_step(&data, &vocab, &mut rng).unwrap();

        let run = |do_backward: bool| {
            let g = Graph::new();
            let mut vm_rng = stream(8, "pretrain-test", 1);
            let (total, _) =
                loss_pretrain(&model, &g, &data, &sample, &vocab, 42, &mut vm_rng).unwrap();
            if do_backward {
                total.backward();
            }
            total.item()
        };
        model.params().zero_grads();
        run(true);
        let analytic = model.params().grad_flat();
        let theta = model.params().to_flat();

        let h = 1e-3;
        let mut coords: Vec<usize> = (0..theta.len()).step_by(131).collect();
        let mut pick = stream(8, "pretrain-test", 2);
        for _ in 0..30 {
            coords.push(pick.gen_range(0..theta.len()));
        }
        let mut worst = 0.0f64;
        for &c in &coords {
            let eval = |delta: f64| {
                let mut shifted = theta.clone();
                shifted[c] += delta;
                model.params().load_flat(&shifted);
                run(false)
            };
            let fd =
                (eval(-2.0 * h) - 8.0 * eval(-h) + 8.0 * eval(h) - eval(2.0 * h)) / (12.0 * h);
            if analytic[c] == 0.0 {
                assert!(fd.abs() < 1e-6, "coordinate {c}: zero analytic, fd {fd}");
            } else {
                worst = worst.max((analytic[c] - fd).abs() / (analytic[c].abs() + 1e-8));
            }
        }
        model.params().load_flat(&theta);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn short_pretraining_runs_are_deterministic() {
        let (data, _, _) = setup();
        let cfg = Config {
            pretrain_steps: 8,
            ..tiny_config()
        };
        let run = || {
            let model = Model::new(&cfg, 23);
            let rows = run_pretraining(&model, &data, &cfg).unwrap();
            (rows, model.params().to_flat())
        };
        let (rows_a, flat_a) = run();
        let (rows_b, flat_b) = run();
        assert_eq!(flat_a, flat_b, "training must be bit-reproducible");
        assert_eq!(rows_a.len(), 8);
        for (a, b) in rows_a.iter().zip(&rows_b) {
            assert_eq!(a.step, b.step);
            for (x, y) in [(a.mlm, b.mlm), (a.ssap, b.ssap), (a.vm, b.vm), (a.om, b.om)] {
                assert!(x.is_nan() && y.is_nan() || x == y);
            }
        }
        // Round-robin order: step 0 computes MLM, step 1 SSAP, and so on.
        assert!(!rows_a[0].mlm.is_nan() && rows_a[0].ssap.is_nan());
        assert!(!rows_a[1].ssap.is_nan() && rows_a[1].vm.is_nan());
        assert!(rows_a[3].om.is_finite());
    }
}
