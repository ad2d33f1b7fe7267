//! Finite-difference verification suites over every graph op and every
//! model variant end to end. The CLI diagnostic and the acceptance tests
//! both run these.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EncTurn, TrainingExample, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig, Parameters, SaStack, Variant};
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::train::{loss_two_pass, nll_sum};

/// Acceptance tolerance for every check in this module.
pub const SUITE_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::rand_uniform(rng, shape, -1.0, 1.0)
}

/// Inputs kept away from zero so no check lands on the relu kink.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand(rng, shape);
    for x in t.data_mut() {
        if x.abs() < 0.05 {
            *x += if *x < 0.0 { -0.05 } else { 0.05 };
        }
    }
    t
}

/// Checks one op: `y = op(leaves)`, loss = Σ y ⊙ w for a fixed random mix
/// w, so every output element influences the scalar differently.
fn op_entry<F>(
    name: &str,
    rng: &mut ChaCha8Rng,
    leaves: &[(&str, Tensor)],
    out_shape: &[usize],
    op: F,
) -> Result<SuiteEntry>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let w = rand(rng, out_shape);
    let report = grad_check(leaves, |g, vars| {
        let y = op(g, vars)?;
        let mix = g.constant(w.clone());
        let prod = g.mul(y, mix)?;
        Ok(g.reduce_sum(prod))
    })?;
    Ok(SuiteEntry { name: name.to_string(), report })
}

/// One finite-difference check per graph op (softmax-family and concat are
/// checked on both axes).
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = rand(rng, &[3, 4]);
    let b = rand(rng, &[4, 2]);
    out.push(op_entry("matmul", rng, &[("a", a), ("b", b)], &[3, 2], |g, v| {
        g.matmul(v[0], v[1])
    })?);

    let x = rand(rng, &[3, 4]);
    out.push(op_entry("transpose", rng, &[("x", x)], &[4, 3], |g, v| g.transpose(v[0]))?);

    let a = rand(rng, &[3, 4]);
    let b = rand(rng, &[3, 4]);
    out.push(op_entry("add", rng, &[("a", a), ("b", b)], &[3, 4], |g, v| g.add(v[0], v[1]))?);

    let x = rand(rng, &[3, 4]);
    let b = rand(rng, &[4]);
    out.push(op_entry("add_bias", rng, &[("x", x), ("b", b)], &[3, 4], |g, v| {
        g.add_bias(v[0], v[1])
    })?);

    let a = rand(rng, &[3, 4]);
    let b = rand(rng, &[3, 4]);
    out.push(op_entry("mul", rng, &[("a", a), ("b", b)], &[3, 4], |g, v| g.mul(v[0], v[1]))?);

    let x = rand(rng, &[3, 4]);
    out.push(op_entry("scale", rng, &[("x", x)], &[3, 4], |g, v| Ok(g.scale(v[0], 1.7)))?);

    let x = rand_off_zero(rng, &[3, 4]);
    out.push(op_entry("relu", rng, &[("x", x)], &[3, 4], |g, v| Ok(g.relu(v[0])))?);

    let mut x = rand(rng, &[3, 4]);
    for v in x.data_mut() {
        *v = v.abs() + 0.5;
    }
    out.push(op_entry("log", rng, &[("x", x)], &[3, 4], |g, v| Ok(g.log(v[0])))?);

    for axis in [0usize, 1] {
        let x = rand(rng, &[3, 4]);
        out.push(op_entry(
            &format!("softmax axis {axis}"),
            rng,
            &[("x", x)],
            &[3, 4],
            move |g, v| g.softmax(v[0], axis),
        )?);
        let x = rand(rng, &[3, 4]);
        out.push(op_entry(
            &format!("log_softmax axis {axis}"),
            rng,
            &[("x", x)],
            &[3, 4],
            move |g, v| g.log_softmax(v[0], axis),
        )?);
    }

    let x = rand(rng, &[3, 8]);
    let gain = rand(rng, &[8]);
    let bias = rand(rng, &[8]);
    out.push(op_entry(
        "layer_norm",
        rng,
        &[("x", x), ("gain", gain), ("bias", bias)],
        &[3, 8],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    )?);

    let a = rand(rng, &[2, 3]);
    let b = rand(rng, &[1, 3]);
    out.push(op_entry("concat axis 0", rng, &[("a", a), ("b", b)], &[3, 3], |g, v| {
        g.concat(&[v[0], v[1]], 0)
    })?);
    let a = rand(rng, &[2, 3]);
    let b = rand(rng, &[2, 2]);
    out.push(op_entry("concat axis 1", rng, &[("a", a), ("b", b)], &[2, 5], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    })?);

    let x = rand(rng, &[4, 5]);
    out.push(op_entry("slice", rng, &[("x", x)], &[4, 3], |g, v| g.slice(v[0], 1, 1, 4))?);

    let table = rand(rng, &[7, 4]);
    out.push(op_entry("embedding_gather", rng, &[("table", table)], &[4, 4], |g, v| {
        g.embedding_gather(v[0], &[0, 3, 3, 6])
    })?);

    let x = rand(rng, &[3, 4]);
    out.push(op_entry("reduce_sum", rng, &[("x", x)], &[1], |g, v| Ok(g.reduce_sum(v[0])))?);

    let x = rand(rng, &[4, 6]);
    out.push(op_entry("pick_per_row", rng, &[("x", x)], &[4], |g, v| {
        g.pick_per_row(v[0], &[1, 0, 5, 2])
    })?);

    Ok(out)
}

fn tiny_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        sa_layers: 1,
        ite_layers: 1,
        dec_layers: 1,
        vocab_size: 11,
        window: 2,
        utt_cap: 6,
        doc_cap: 8,
        dropout: 0.0,
    }
}

/// Two turns of context and a short target, all ids inside the tiny
/// 11-entry vocabulary and none of them PAD.
fn probe_example() -> TrainingExample {
    TrainingExample {
        context: vec![
            EncTurn { tokens: vec![4, 5, 6], doc: vec![7, 8, 4] },
            EncTurn { tokens: vec![9, 5], doc: vec![8, 10] },
        ],
        response_doc: vec![6, 10, 7],
        target: vec![BOS, 9, 4, 10, EOS],
    }
}

/// Training loss with the first-pass draft pinned to the given tokens. The
/// draft enters training as plain ids (no gradient flows through it), so
/// the differentiable function being checked holds those ids fixed.
fn pinned_loss(
    cfg: &ModelConfig,
    params: &Parameters,
    ex: &TrainingExample,
    draft: Option<&[u32]>,
) -> Result<f64> {
    let mut f = Forward::new(cfg, params, false)?;
    let loss = match draft {
        Some(draft) => {
            let input = ex.decoder_input().to_vec();
            let ctx = f.encode_dialogue(&ex.context)?;
            let last = ex.context.last().expect("probe has context");
            let utt = f.sa_encode(SaStack::Utterance, &last.tokens)?;
            let logits1 = f.decode_first_pass(&input, &ctx, &utt)?;
            let draft_enc = f.sa_encode(SaStack::Utterance, draft)?;
            let doc_next = f.sa_encode(SaStack::Document, &ex.response_doc)?;
            let logits2 = f.decode_second_pass(&input, &draft_enc, &doc_next)?;
            loss_two_pass(&mut f.g, logits1, logits2, ex.gold())?.total
        }
        None => {
            let out = f.forward_example(ex)?;
            nll_sum(&mut f.g, out.logits1, ex.gold())?.0
        }
    };
    Ok(f.g.value(loss).data()[0])
}

/// End-to-end check of one variant: analytic gradients from the training
/// forward against central differences, every parameter element.
///
/// Gradient magnitudes span several decades here, unlike the O(1) op
/// checks, so the relative-error denominator is floored at 1e-3: below
/// that the comparison is absolute at 1e-7, above the finite-difference
/// noise (~1e-9 at this loss scale) and far below any structural backward
/// bug, which scales with the gradient itself.
fn variant_entry(variant: Variant, seed: u64) -> Result<SuiteEntry> {
    const DENOM_FLOOR: f64 = 1e-3;
    let cfg = tiny_cfg(variant);
    let ex = probe_example();
    let params = Parameters::init(&cfg, seed)?;

    let mut f = Forward::new(&cfg, &params, true)?;
    let out = f.forward_example(&ex)?;
    let (loss, draft) = match out.logits2 {
        Some(l2) => {
            (loss_two_pass(&mut f.g, out.logits1, l2, ex.gold())?.total, out.draft)
        }
        None => (nll_sum(&mut f.g, out.logits1, ex.gold())?.0, None),
    };
    let base = f.g.value(loss).data()[0];
    f.backward(loss)?;
    let analytic = f.grads();
    drop(f);

    // The pinned-draft replay must reproduce the training loss exactly,
    // otherwise the function under test is not the one that was
    // differentiated.
    let replay = pinned_loss(&cfg, &params, &ex, draft.as_deref())?;
    if replay.to_bits() != base.to_bits() {
        return Err(Error::Numeric(format!(
            "{variant}: pinned-draft replay gives {replay}, training forward gave {base}"
        )));
    }

    let mut probe = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("-");
    let mut n_checked = 0usize;
    for (path, grad) in &analytic {
        for ei in 0..grad.len() {
            let x = probe.get(path)?.data()[ei];
            let h = 1e-5 * x.abs().max(1.0);
            probe.get_mut(path)?.data_mut()[ei] = x + h;
            let up = pinned_loss(&cfg, &probe, &ex, draft.as_deref())?;
            probe.get_mut(path)?.data_mut()[ei] = x - h;
            let down = pinned_loss(&cfg, &probe, &ex, draft.as_deref())?;
            probe.get_mut(path)?.data_mut()[ei] = x;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "{variant}: perturbed loss not finite at {path}[{ei}]"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{path}[{ei}]");
            }
            n_checked += 1;
        }
    }
    Ok(SuiteEntry {
        name: format!("model {variant}"),
        report: GradCheckReport { max_rel_err, worst, n_checked },
    })
}

/// Every variant's full training gradient, checked end to end.
pub fn variant_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    [Variant::IteDd, Variant::IteCkad, Variant::Kat]
        .into_iter()
        .map(|v| variant_entry(v, seed))
        .collect()
}
