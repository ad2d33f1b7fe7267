use crate::data::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Summed negative log-likelihood of `gold` under `logits`, with PAD
/// positions excluded. Returns the loss node and the number of counted
/// tokens.
pub fn nll_sum(g: &mut Graph, logits: Var, gold: &[u32]) -> Result<(Var, usize)> {
    let t = g.value(logits);
    if t.rank() != 2 || t.rows() != gold.len() {
        return Err(Error::Contract(format!(
            "nll_sum: {} gold tokens against logits {:?}",
            gold.len(),
            t.shape()
        )));
    }
    let lp = g.log_softmax(logits, 1)?;
    let cols: Vec<usize> = gold.iter().map(|&tok| tok as usize).collect();
    let picked = g.pick_per_row(lp, &cols)?;
    let tokens = gold.iter().filter(|&&tok| tok != PAD).count();
    let kept = if tokens == gold.len() {
        picked
    } else {
        let mask: Vec<f64> = gold
            .iter()
            .map(|&tok| if tok == PAD { 0.0 } else { 1.0 })
            .collect();
        let m = g.constant(Tensor::from_vec(mask));
        g.mul(picked, m)?
    };
    let total = g.reduce_sum(kept);
    Ok((g.scale(total, -1.0), tokens))
}

/// The two losses of the deliberation objective and their sum. The sum is
/// built as a graph-level addition of the two loss nodes, so the identity
/// L = L1 + L2 holds exactly.
#[derive(Debug, Clone, Copy)]
pub struct TwoPassLoss {
    pub total: Var,
    pub pass1: Var,
    pub pass2: Var,
    pub tokens: usize,
}

pub fn loss_two_pass(
    g: &mut Graph,
    logits1: Var,
    logits2: Var,
    gold: &[u32],
) -> Result<TwoPassLoss> {
    let (pass1, tokens) = nll_sum(g, logits1, gold)?;
    let (pass2, _) = nll_sum(g, logits2, gold)?;
    let total = g.add(pass1, pass2)?;
    Ok(TwoPassLoss { total, pass1, pass2, tokens })
}

/// Scalar loss value divided by its token count.
pub fn per_token(g: &Graph, loss: Var, tokens: usize) -> f64 {
    g.value(loss).data()[0] / tokens as f64
}
