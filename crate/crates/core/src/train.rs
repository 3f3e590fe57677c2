//! SGD training loop: momentum, weight decay, deterministic batching,
//! TSV loss logging, periodic checkpointing, and a NaN tripwire.
//!
//! Gradients are reduced over the batch in the binder's first-bound order,
//! which is identical for every sample under a fixed config, so the update
//! (and therefore the whole run) is bit-reproducible from the seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coattn::AttentionVariant;
use crate::data::LoadedSample;
use crate::decoder::LossTerms;
use crate::encoder::FusionMode;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{forward_loss, init_model_params, predict_probs, save_checkpoint, ModelConfig};
use crate::params::{Binder, ParamSet};
use crate::tensor::{invalid_arg, RawTensor, Result, Tape};
use crate::text::{tokenize, Vocabulary};

/// Knobs of one training run, serializable as flat key=value text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// side length of the (square) training images; informational for the
    /// training loop itself, which takes sizes from the dataset, but part
    /// of the run description and used by dataset generation
    pub image_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// checkpoint every this many steps (0 = only at the end)
    pub ckpt_every: usize,
    pub mode: FusionMode,
    pub variant: Option<AttentionVariant>,
    pub bem: bool,
}

impl Default for RunConfig {
    /// Desk-scale defaults: small batches, a couple thousand steps.
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 64,
            steps: 2000,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            ckpt_every: 500,
            mode: FusionMode::Efn,
            variant: Some(AttentionVariant::Acm),
            bem: true,
        }
    }
}

impl RunConfig {
    /// Full-scale reference schedule (kept selectable for completeness;
    /// far beyond what a single desk run should attempt).
    pub fn paper() -> Self {
        Self {
            image_size: 320,
            steps: 200_000,
            batch_size: 12,
            lr: 0.00075,
            weight_decay: 0.0005,
            ckpt_every: 10_000,
            ..Self::default()
        }
    }

    pub fn to_kv(&self) -> String {
        format!(
            "seed={}\nimage_size={}\nsteps={}\nbatch_size={}\nlr={}\nmomentum={}\nweight_decay={}\n\
             ckpt_every={}\nmode={}\nvariant={}\nbem={}\n",
            self.seed,
            self.image_size,
            self.steps,
            self.batch_size,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.ckpt_every,
            self.mode,
            self.variant.map_or("none".into(), |v| v.to_string()),
            if self.bem { "on" } else { "off" },
        )
    }

    /// Parse flat key=value text; unspecified keys keep their defaults,
    /// unknown keys are an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                invalid_arg("run_config", format!("line {}: expected key=value", ln + 1))
            })?;
            let bad = |what: &str| invalid_arg("run_config", format!("bad {what}: {v}"));
            match k.trim() {
                "seed" => cfg.seed = v.parse().map_err(|_| bad("seed"))?,
                "image_size" => cfg.image_size = v.parse().map_err(|_| bad("image_size"))?,
                "steps" => cfg.steps = v.parse().map_err(|_| bad("steps"))?,
                "batch_size" => cfg.batch_size = v.parse().map_err(|_| bad("batch_size"))?,
                "lr" => cfg.lr = v.parse().map_err(|_| bad("lr"))?,
                "momentum" => cfg.momentum = v.parse().map_err(|_| bad("momentum"))?,
                "weight_decay" => cfg.weight_decay = v.parse().map_err(|_| bad("weight_decay"))?,
                "ckpt_every" => cfg.ckpt_every = v.parse().map_err(|_| bad("ckpt_every"))?,
                "mode" => {
                    cfg.mode = match v {
                        "efn" => FusionMode::Efn,
                        "dfn" => FusionMode::Dfn,
                        _ => return Err(bad("mode")),
                    }
                }
                "variant" => {
                    cfg.variant = match v {
                        "vcm" => Some(AttentionVariant::Vcm),
                        "acm" => Some(AttentionVariant::Acm),
                        "none" => None,
                        _ => return Err(bad("variant")),
                    }
                }
                "bem" => {
                    cfg.bem = match v {
                        "on" => true,
                        "off" => false,
                        _ => return Err(bad("bem")),
                    }
                }
                other => {
                    return Err(invalid_arg("run_config", format!("unknown key {other}")))
                }
            }
        }
        if cfg.batch_size == 0 {
            return Err(invalid_arg("run_config", "batch_size must be positive"));
        }
        Ok(cfg)
    }
}

pub struct TrainOutcome {
    pub model_cfg: ModelConfig,
    pub params: ParamSet,
    /// batch-mean total loss of the first and last step (NaN when steps=0)
    pub first_loss: f64,
    pub final_loss: f64,
}

fn mask_bits(t: &RawTensor) -> Vec<bool> {
    t.data.iter().map(|&v| v >= 0.5).collect()
}

/// Deterministic SGD with momentum and decoupled-from-nothing classic weight
/// decay (decay enters the gradient). Writes `loss_log.tsv` and `model.ckpt`
/// under `out_dir`; aborts with a batch diagnostic if a loss goes non-finite.
pub fn train(
    run: &RunConfig,
    samples: &[LoadedSample],
    vocab: &Vocabulary,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let train_set: Vec<&LoadedSample> = samples
        .iter()
        .filter(|s| s.split == crate::data::Split::Train)
        .collect();
    if train_set.is_empty() {
        return Err(invalid_arg("train", "no training samples"));
    }
    fs::create_dir_all(out_dir)?;
    let model_cfg = ModelConfig::new(run.mode, run.variant, run.bem, vocab.len());
    let mut params = init_model_params(&model_cfg, run.seed);
    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("loss_log.tsv");

    let mut log = String::from("step\ttotal\tmask\tboundary\tstn\n");
    if run.steps == 0 {
        save_checkpoint(&ckpt_path, &model_cfg, vocab, &params)?;
        fs::write(&log_path, &log)?;
        return Ok(TrainOutcome {
            model_cfg,
            params,
            first_loss: f64::NAN,
            final_loss: f64::NAN,
        });
    }

    let mut batch_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x0b5e_55ed_ba7c_4e5a);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: HashMap<String, Vec<f64>> = HashMap::new();
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for step in 1..=run.steps {
        // epoch-wise reshuffle, batches drawn in order
        let mut batch: Vec<&LoadedSample> = Vec::with_capacity(run.batch_size);
        for _ in 0..run.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            batch.push(train_set[order.pop().expect("refilled above")]);
        }

        let mut grad_sum: Vec<(String, Vec<f64>)> = Vec::new();
        let mut terms = LossTerms::default();
        for sample in &batch {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &params, true);
            let tokens = tokenize(&sample.expression, vocab, model_cfg.text.max_len)?;
            let (loss, t, _) = forward_loss(
                &binder,
                &model_cfg,
                &sample.image,
                &tokens,
                &sample.gt_mask,
                &sample.boundary,
            )?;
            let value = loss.scalar();
            if !value.is_finite() {
                let mut dump = format!("non-finite loss {value} at step {step}\n");
                for s in &batch {
                    let _ = writeln!(dump, "sample {}\t{}", s.id, s.expression);
                }
                fs::write(out_dir.join("nan_dump.txt"), &dump)?;
                fs::write(&log_path, &log)?;
                return Err(invalid_arg("train", dump));
            }
            terms.mask += t.mask;
            terms.boundary += t.boundary;
            terms.stn += t.stn;
            tape.backward(loss)?;
            let grads = binder.grads();
            if grad_sum.is_empty() {
                grad_sum = grads;
            } else {
                debug_assert_eq!(grad_sum.len(), grads.len());
                for ((an, acc), (bn, g)) in grad_sum.iter_mut().zip(grads) {
                    debug_assert_eq!(*an, bn);
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }

        let inv_b = 1.0 / run.batch_size as f64;
        for (name, g) in &grad_sum {
            let p = params
                .get_mut(name)
                .expect("bound parameters come from this set");
            let v = velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let step_g = g[i] * inv_b + run.weight_decay * p.data[i];
                v[i] = run.momentum * v[i] + step_g;
                p.data[i] -= run.lr * v[i];
            }
        }

        let total = terms.total() * inv_b;
        if step == 1 {
            first_loss = total;
        }
        final_loss = total;
        let _ = writeln!(
            log,
            "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            total,
            terms.mask * inv_b,
            terms.boundary * inv_b,
            terms.stn * inv_b
        );
        if run.ckpt_every > 0 && step % run.ckpt_every == 0 {
            save_checkpoint(&ckpt_path, &model_cfg, vocab, &params)?;
            fs::write(&log_path, &log)?;
        }
    }

    save_checkpoint(&ckpt_path, &model_cfg, vocab, &params)?;
    fs::write(&log_path, &log)?;
    Ok(TrainOutcome {
        model_cfg,
        params,
        first_loss,
        final_loss,
    })
}

/// Threshold predictions at 0.5 and score them against ground truth.
pub fn evaluate_model(
    cfg: &ModelConfig,
    params: &ParamSet,
    vocab: &Vocabulary,
    samples: &[&LoadedSample],
    length_edges: &[usize],
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut lengths = Vec::with_capacity(samples.len());
    for s in samples {
        let tokens = tokenize(&s.expression, vocab, cfg.text.max_len)?;
        let probs = predict_probs(cfg, params, &s.image, &tokens)?;
        pairs.push((mask_bits(&probs), mask_bits(&s.gt_mask)));
        lengths.push(s.expression.split_whitespace().count());
    }
    evaluate(&pairs, &lengths, length_edges)
}

/// IoU of always predicting the full frame as foreground — the floor any
/// trained model must beat.
pub fn all_foreground_iou(samples: &[&LoadedSample]) -> f64 {
    let (mut inter, mut union) = (0.0f64, 0.0f64);
    for s in samples {
        let fg = s.gt_mask.data.iter().filter(|&&v| v >= 0.5).count();
        inter += fg as f64;
        union += s.gt_mask.numel() as f64;
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_splits, generate_dataset, write_dataset, Split};

    fn tiny_dataset(dir: &Path, n: usize, hw: usize) -> (Vec<LoadedSample>, Vocabulary) {
        let (samples, vocab) = generate_dataset(n, hw, hw, 11);
        let splits = assign_splits(n, n / 3, 11);
        write_dataset(dir, &samples, &vocab, &splits).unwrap();
        crate::data::load_dataset(dir).unwrap()
    }

    #[test]
    fn run_config_kv_roundtrip() {
        let cfg = RunConfig {
            seed: 99,
            lr: 0.125,
            variant: None,
            mode: FusionMode::Dfn,
            bem: false,
            ..RunConfig::default()
        };
        let parsed = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(parsed, cfg);
        // partial configs override defaults only where given
        let partial = RunConfig::from_kv("steps=5\nlr=0.5\n").unwrap();
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.lr, 0.5);
        assert_eq!(partial.batch_size, RunConfig::default().batch_size);
        assert!(RunConfig::from_kv("nonsense\n").is_err());
        assert!(RunConfig::from_kv("warp_speed=9\n").is_err());
        assert!(RunConfig::from_kv("batch_size=0\n").is_err());
    }

    #[test]
    fn paper_preset_differs_in_schedule_only() {
        let p = RunConfig::paper();
        assert_eq!(p.steps, 200_000);
        assert_eq!(p.batch_size, 12);
        assert!(p.lr < RunConfig::default().lr);
        assert_eq!(p.mode, RunConfig::default().mode);
    }

    #[test]
    fn zero_steps_emits_initial_checkpoint_and_log_header() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (samples, vocab) = tiny_dataset(&data_dir, 6, 32);
        let run = RunConfig {
            steps: 0,
            batch_size: 2,
            ..RunConfig::default()
        };
        let out = dir.path().join("run");
        let outcome = train(&run, &samples, &vocab, &out).unwrap();
        assert!(outcome.first_loss.is_nan());
        let log = fs::read_to_string(out.join("loss_log.tsv")).unwrap();
        assert_eq!(log, "step\ttotal\tmask\tboundary\tstn\n");
        let (cfg, _, params) = crate::model::load_checkpoint(&out.join("model.ckpt")).unwrap();
        assert_eq!(cfg.text.vocab_size, vocab.len());
        assert_eq!(params.len(), outcome.params.len());
    }

    #[test]
    fn short_run_is_deterministic_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let (samples, vocab) = tiny_dataset(&data_dir, 6, 32);
        let run = RunConfig {
            steps: 2,
            batch_size: 2,
            ckpt_every: 0,
            variant: None, // fastest wiring for a smoke test
            ..RunConfig::default()
        };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let a = train(&run, &samples, &vocab, &out_a).unwrap();
        let b = train(&run, &samples, &vocab, &out_b).unwrap();
        assert!(a.first_loss.is_finite() && a.final_loss.is_finite());
        assert_eq!(a.first_loss.to_bits(), b.first_loss.to_bits());
        assert_eq!(
            fs::read(out_a.join("model.ckpt")).unwrap(),
            fs::read(out_b.join("model.ckpt")).unwrap()
        );
        let log = fs::read_to_string(out_a.join("loss_log.tsv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t"));
        // per-term columns sum to the total column
        let cols: Vec<f64> = lines[1].split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((cols[0] - (cols[1] + cols[2] + cols[3])).abs() < 1e-4);
        assert_eq!(log, fs::read_to_string(out_b.join("loss_log.tsv")).unwrap());
    }

    #[test]
    fn evaluate_model_scores_untrained_net() {
        let dir = tempfile::tempdir().unwrap();
        let (samples, vocab) = tiny_dataset(&dir.path().join("data"), 6, 32);
        let cfg = ModelConfig::new(FusionMode::Efn, None, true, vocab.len());
        let params = init_model_params(&cfg, 3);
        let val: Vec<&LoadedSample> = samples.iter().filter(|s| s.split == Split::Val).collect();
        assert!(!val.is_empty());
        let report = evaluate_model(&cfg, &params, &vocab, &val, &[4, 8]).unwrap();
        assert!((0.0..=1.0).contains(&report.overall_iou));
        let floor = all_foreground_iou(&val);
        assert!(floor > 0.0 && floor < 0.5);
    }
}
