use std::fmt;

use super::respond::evaluate;
use crate::data::{TrainingExample, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::{load_checkpoint, train, TrainConfig};

/// One trained variant's evaluation numbers.
#[derive(Debug, Clone)]
pub struct VariantRow {
    pub variant: Variant,
    pub ppl_pass1: f64,
    pub ppl_final: f64,
    pub bleu: f64,
}

/// Side-by-side results for several variants trained on the same split.
#[derive(Debug)]
pub struct CompareReport {
    pub rows: Vec<VariantRow>,
    /// First-pass minus final-pass validation perplexity for the two-pass
    /// variant, when it took part: how much the second pass buys.
    pub deliberation_gap: Option<f64>,
}

fn dir_slug(variant: Variant) -> String {
    variant.as_str().to_lowercase().replace('+', "-")
}

/// Trains each variant from scratch with the same data, seed, and budget,
/// then evaluates the best checkpoint of each on the validation split.
pub fn compare_variants(
    base: &ModelConfig,
    tcfg: &TrainConfig,
    vocab: &Vocab,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    variants: &[Variant],
    beam: usize,
    max_len: usize,
) -> Result<CompareReport> {
    if variants.len() < 2 {
        return Err(Error::Config("a comparison needs at least two variants".into()));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let mut mcfg = base.clone();
        mcfg.variant = variant;
        let mut cfg = tcfg.clone();
        cfg.out_dir = tcfg.out_dir.join(dir_slug(variant));
        let outcome = train(&mcfg, &cfg, vocab, train_set, val_set)?;
        let ck = load_checkpoint(&outcome.checkpoint_dir)?;
        let report = evaluate(&ck.model, &ck.params, &ck.vocab, val_set, beam, max_len)?;
        rows.push(VariantRow {
            variant,
            ppl_pass1: report.ppl.pass1,
            ppl_final: report.ppl.final_pass(),
            bleu: report.bleu,
        });
    }
    let deliberation_gap = rows
        .iter()
        .find(|r| r.variant == Variant::IteDd)
        .map(|r| r.ppl_pass1 - r.ppl_final);
    Ok(CompareReport { rows, deliberation_gap })
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12} {:>12} {:>8}", "variant", "ppl(pass1)", "ppl(final)", "bleu")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>12.4} {:>12.4} {:>8.2}",
                r.variant.as_str(),
                r.ppl_pass1,
                r.ppl_final,
                r.bleu
            )?;
        }
        if let Some(gap) = self.deliberation_gap {
            writeln!(f, "second pass improves validation perplexity by {gap:.4}")?;
        }
        Ok(())
    }
}
