use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{clip_global_norm, AdamConfig, AdamState};
use super::checkpoint::{save_checkpoint, Checkpoint};
use super::loss::{loss_two_pass, nll_sum};
use crate::data::{make_examples, merge_consecutive, Conversation, TrainingExample, Vocab};
use crate::decode::perplexity;
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig, Parameters};
use crate::tensor::Tensor;

/// Knobs for one training run. All defaults are desk-scale choices: runs
/// that finish in minutes on a CPU and reproduce bitwise from the seed.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(out_dir: PathBuf) -> Self {
        Self {
            batch_size: 8,
            max_steps: 200,
            lr: 1e-3,
            clip_norm: 1.0,
            eval_interval: 25,
            seed: 1,
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "batch size, max steps and eval interval must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics row, written at every evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Per-token training losses for the batch at this step.
    pub l_mle: f64,
    pub l_mle1: f64,
    pub l_mle2: f64,
    pub val_ppl_pass1: f64,
    pub val_ppl_pass2: f64,
    pub wall_ms: u128,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub best_val_ppl: f64,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,
}

/// Merges same-speaker turns and expands every conversation into training
/// examples under the model's window and caps.
pub fn prepare_examples(
    corpus: &[Conversation],
    vocab: &Vocab,
    cfg: &ModelConfig,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for conv in corpus {
        let merged = merge_consecutive(conv);
        out.extend(make_examples(&merged, vocab, cfg.window, cfg.utt_cap, cfg.doc_cap)?);
    }
    Ok(out)
}

/// Holds out every tenth example for validation. Corpora too small to spare
/// one validate on the training examples themselves: at desk scale the run
/// usually is the overfit probe.
pub fn split_train_val(
    examples: Vec<TrainingExample>,
) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, ex) in examples.into_iter().enumerate() {
        if i % 10 == 9 {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    if val.is_empty() {
        val = train.clone();
    }
    (train, val)
}

/// Shuffled epoch order with target lengths grouped inside pools of eight
/// batches, so nearby steps see similar lengths without fixing the order.
fn epoch_order(
    rng: &mut ChaCha8Rng,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    let pool = (batch_size * 8).max(1);
    for chunk in idx.chunks_mut(pool) {
        chunk.sort_by_key(|&i| examples[i].target.len());
    }
    idx
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (path, g) in grads {
        match acc.get_mut(&path) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                acc.insert(path, g);
            }
        }
    }
}

fn csv_row(file: &mut File, r: &StepRecord) -> Result<()> {
    writeln!(
        file,
        "{},{},{},{},{},{},{}",
        r.step, r.l_mle, r.l_mle1, r.l_mle2, r.val_ppl_pass1, r.val_ppl_pass2, r.wall_ms
    )?;
    Ok(())
}

/// Runs the optimization loop: seeded shuffling, per-example forward and
/// backward passes accumulated over the batch, global-norm clipping, Adam,
/// periodic validation, and best-checkpoint retention. Aborts on a
/// non-finite loss; the best checkpoint written so far stays on disk.
pub fn train(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    vocab: &Vocab,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }

    let mut params = Parameters::init(mcfg, tcfg.seed)?;
    let mut adam = AdamState::new(AdamConfig { alpha: tcfg.lr, ..AdamConfig::default() });
    // A stream of its own, so parameter draws stay frozen per seed.
    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));

    fs::create_dir_all(&tcfg.out_dir)?;
    let checkpoint_dir = tcfg.out_dir.join("checkpoint");
    let metrics_path = tcfg.out_dir.join("metrics.csv");
    let mut csv = File::create(&metrics_path)?;
    writeln!(csv, "step,L_mle,L_mle1,L_mle2,val_ppl_pass1,val_ppl_pass2,wall_ms")?;

    let started = Instant::now();
    let mut queue: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    let mut best = f64::INFINITY;

    for step in 1..=tcfg.max_steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        while batch.len() < tcfg.batch_size {
            if queue.is_empty() {
                queue = epoch_order(&mut order_rng, train_set, tcfg.batch_size);
                queue.reverse();
            }
            batch.push(queue.pop().expect("refilled above"));
        }

        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut sum1 = 0.0;
        let mut sum2 = 0.0;
        let mut tokens = 0usize;
        let mut two_pass = false;
        for &i in &batch {
            let ex = &train_set[i];
            let mut f = Forward::new(mcfg, &params, true)?;
            let out = f.forward_example(ex)?;
            let (total, l1, l2, n) = match out.logits2 {
                Some(logits2) => {
                    let parts = loss_two_pass(&mut f.g, out.logits1, logits2, ex.gold())?;
                    two_pass = true;
                    (
                        parts.total,
                        f.g.value(parts.pass1).data()[0],
                        f.g.value(parts.pass2).data()[0],
                        parts.tokens,
                    )
                }
                None => {
                    let (l, n) = nll_sum(&mut f.g, out.logits1, ex.gold())?;
                    (l, f.g.value(l).data()[0], 0.0, n)
                }
            };
            let loss_value = f.g.value(total).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at step {step}; the best checkpoint so far remains at {}",
                    checkpoint_dir.display()
                )));
            }
            sum1 += l1;
            sum2 += l2;
            tokens += n;
            f.backward(total)?;
            accumulate(&mut grads, f.grads());
        }

        let scale = 1.0 / tcfg.batch_size as f64;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        clip_global_norm(&mut grads, tcfg.clip_norm);
        adam.step(&mut params, &grads)?;

        if step % tcfg.eval_interval == 0 || step == tcfg.max_steps {
            let val = perplexity(mcfg, &params, val_set)?;
            let l1_mean = sum1 / tokens as f64;
            let l2_mean = sum2 / tokens as f64;
            let record = StepRecord {
                step,
                l_mle: l1_mean + l2_mean,
                l_mle1: l1_mean,
                l_mle2: if two_pass { l2_mean } else { 0.0 },
                val_ppl_pass1: val.pass1,
                val_ppl_pass2: val.pass2,
                wall_ms: started.elapsed().as_millis(),
            };
            csv_row(&mut csv, &record)?;
            records.push(record);
            if val.final_pass() < best {
                best = val.final_pass();
                let ck = Checkpoint {
                    model: mcfg.clone(),
                    vocab: vocab.clone(),
                    params: params.clone(),
                    optimizer: Some(adam.clone()),
                };
                save_checkpoint(&checkpoint_dir, &ck)?;
            }
        }
    }

    Ok(TrainOutcome { records, best_val_ppl: best, checkpoint_dir, metrics_path })
}
