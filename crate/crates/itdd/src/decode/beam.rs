use crate::data::EOS;
use crate::error::{Error, Result};

/// One partially or fully decoded sequence. Tokens exclude BOS; a finished
/// hypothesis ends with EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative log-probability, unnormalized by length.
    pub score: f64,
    pub finished: bool,
}

/// Length-unnormalized beam search. `step` maps the tokens generated so far
/// to next-token log-probabilities; the caller supplies any BOS framing
/// inside the closure. Candidates tie-break by lower token id, then earlier
/// parent index. Hypotheses reaching EOS retire to a pool; the pool's best
/// wins, and only if the pool is empty does the best live hypothesis at
/// `max_len` win.
pub fn beam_search<F>(mut step: F, beam: usize, max_len: usize) -> Result<BeamHypothesis>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max decode length must be at least 1".into()));
    }
    let mut live = vec![BeamHypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let lp = step(&hyp.tokens)?;
            if lp.is_empty() {
                return Err(Error::Contract("step returned no log-probabilities".into()));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_nan() {
                    return Err(Error::Numeric(format!(
                        "NaN log-probability for token {tok}"
                    )));
                }
                candidates.push((hyp.score + l, tok as u32, parent));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("scores are not NaN")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(beam);

        let mut next_live = Vec::with_capacity(beam);
        for (score, tok, parent) in candidates {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            let finished = tok == EOS;
            let hyp = BeamHypothesis { tokens, score, finished };
            if finished {
                pool.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let best = |hyps: Vec<BeamHypothesis>| -> Option<BeamHypothesis> {
        hyps.into_iter().min_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are not NaN")
                .then(a.tokens.cmp(&b.tokens))
        })
    };
    if let Some(h) = best(pool) {
        return Ok(h);
    }
    best(live).ok_or_else(|| Error::Contract("beam emptied without any hypothesis".into()))
}
