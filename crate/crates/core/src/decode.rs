//! Adjacency-constrained beam search and an exhaustive reference decoder.

use std::cmp::Ordering;

use crate::corpus::{Vocabulary, EOT, PAD};
use crate::error::{Error, Result};
use crate::hexgrid::neighbors;
use crate::model::NextBlockModel;

/// Legal successors of a token. Implementations return a sorted id list that
/// always contains EOT.
pub trait Adjacency {
    fn successors(&self, token: u32) -> Result<Vec<u32>>;
}

/// Hex neighbours present in a single-resolution vocabulary.
#[derive(Clone, Debug)]
pub struct GridAdjacency {
    table: Vec<Vec<u32>>,
}

impl GridAdjacency {
    pub fn new(vocab: &Vocabulary) -> Self {
        let mut table = vec![Vec::new(); vocab.len()];
        for (i, cell) in vocab.cells().iter().enumerate() {
            let id = i + 2;
            let mut s: Vec<u32> = neighbors(*cell).iter().filter_map(|n| vocab.id(n)).collect();
            s.push(EOT);
            s.sort_unstable();
            table[id] = s;
        }
        GridAdjacency { table }
    }
}

impl Adjacency for GridAdjacency {
    fn successors(&self, token: u32) -> Result<Vec<u32>> {
        match self.table.get(token as usize) {
            Some(s) if !s.is_empty() => Ok(s.clone()),
            _ => Err(Error::UnknownToken(format!("id {token} is not a cell"))),
        }
    }
}

/// Every token except PAD: the ablation without the spatial constraint.
#[derive(Clone, Copy, Debug)]
pub struct Unconstrained {
    pub vocab_size: usize,
}

impl Adjacency for Unconstrained {
    fn successors(&self, token: u32) -> Result<Vec<u32>> {
        if token == PAD || token as usize >= self.vocab_size {
            return Err(Error::UnknownToken(format!("id {token}")));
        }
        Ok((1..self.vocab_size as u32).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub horizon: usize,
    /// Renormalize next-block probabilities over the allowed set.
    pub renormalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            horizon: 5,
            renormalize: true,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.horizon == 0 {
            return Err(Error::Config("beam width and horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Prefix followed by the generated tokens.
    pub tokens: Vec<u32>,
    pub prefix_len: usize,
    /// Sum of per-step log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prefix_len..]
    }

    /// Generated tokens with a trailing EOT removed.
    pub fn path(&self) -> &[u32] {
        let g = self.generated();
        match g.last() {
            Some(&EOT) => &g[..g.len() - 1],
            _ => g,
        }
    }
}

/// Score descending, then token sequence ascending.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// `(token, log-probability)` for each allowed successor.
fn step_scores(dist: &[f64], allowed: &[u32], renormalize: bool) -> Result<Vec<(u32, f64)>> {
    if allowed.is_empty() {
        return Err(Error::Invariant("empty successor set".into()));
    }
    if let Some(t) = allowed.iter().find(|&&t| t as usize >= dist.len()) {
        return Err(Error::UnknownToken(format!("successor id {t} outside model vocabulary")));
    }
    let z: f64 = if renormalize {
        allowed.iter().map(|&t| dist[t as usize]).sum()
    } else {
        1.0
    };
    Ok(allowed
        .iter()
        .map(|&t| {
            let p = dist[t as usize];
            let lp = if z > 0.0 { (p / z).ln() } else { f64::NEG_INFINITY };
            (t, lp)
        })
        .collect())
}

fn context<'t>(tokens: &'t [u32], model: &dyn NextBlockModel) -> &'t [u32] {
    &tokens[tokens.len().saturating_sub(model.context_len())..]
}

/// Largest number of prefixes sent to the model in one call.
const MAX_CALL: usize = 1024;

/// Beam search for one prefix. Results are ranked, at most `width` long.
pub fn beam_search(
    model: &dyn NextBlockModel,
    prefix: &[u32],
    cfg: &BeamConfig,
    adjacency: &dyn Adjacency,
) -> Result<Vec<Hypothesis>> {
    Ok(beam_search_many(model, &[prefix], cfg, adjacency)?.remove(0))
}

/// Independent beam searches advanced in lockstep so that model calls are
/// shared. Each result equals what [`beam_search`] returns for that prefix.
pub fn beam_search_many(
    model: &dyn NextBlockModel,
    prefixes: &[&[u32]],
    cfg: &BeamConfig,
    adjacency: &dyn Adjacency,
) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    let mut beams: Vec<Vec<Hypothesis>> = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        if p.is_empty() {
            return Err(Error::Empty("decode prefix"));
        }
        beams.push(vec![Hypothesis {
            tokens: p.to_vec(),
            prefix_len: p.len(),
            log_prob: 0.0,
            finished: p.last() == Some(&EOT),
        }]);
    }

    for _ in 0..cfg.horizon {
        let open: Vec<(usize, usize)> = beams
            .iter()
            .enumerate()
            .flat_map(|(b, beam)| beam.iter().enumerate().filter(|h| !h.1.finished).map(move |(i, _)| (b, i)))
            .collect();
        if open.is_empty() {
            break;
        }
        let mut dists = Vec::with_capacity(open.len());
        for chunk in open.chunks(MAX_CALL) {
            let ctx: Vec<&[u32]> = chunk.iter().map(|&(b, i)| context(&beams[b][i].tokens, model)).collect();
            dists.extend(model.next_distributions(&ctx)?);
        }
        let mut next: Vec<Vec<Hypothesis>> = beams
            .iter()
            .map(|beam| beam.iter().filter(|h| h.finished).cloned().collect())
            .collect();
        for (&(b, i), dist) in open.iter().zip(&dists) {
            let h = &beams[b][i];
            let last = *h.tokens.last().expect("nonempty");
            for (t, lp) in step_scores(dist, &adjacency.successors(last)?, cfg.renormalize)? {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                next[b].push(Hypothesis {
                    tokens,
                    prefix_len: h.prefix_len,
                    log_prob: h.log_prob + lp,
                    finished: t == EOT,
                });
            }
        }
        for beam in &mut next {
            beam.sort_by(rank_order);
            beam.truncate(cfg.width);
        }
        beams = next;
    }
    for beam in &mut beams {
        beam.sort_by(rank_order);
    }
    Ok(beams)
}

pub const EXHAUSTIVE_MAX_HORIZON: usize = 5;
pub const EXHAUSTIVE_MAX_BRANCHING: usize = 7;

/// Best path of at most `horizon` generated tokens (stopping early at EOT)
/// by enumeration, scored exactly as [`beam_search`] scores it.
pub fn exhaustive_search(
    model: &dyn NextBlockModel,
    prefix: &[u32],
    horizon: usize,
    renormalize: bool,
    adjacency: &dyn Adjacency,
) -> Result<Hypothesis> {
    if horizon == 0 || horizon > EXHAUSTIVE_MAX_HORIZON {
        return Err(Error::SearchSpace(format!(
            "horizon {horizon} outside 1..={EXHAUSTIVE_MAX_HORIZON}"
        )));
    }
    if prefix.is_empty() {
        return Err(Error::Empty("decode prefix"));
    }
    let root = Hypothesis {
        tokens: prefix.to_vec(),
        prefix_len: prefix.len(),
        log_prob: 0.0,
        finished: prefix.last() == Some(&EOT),
    };
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![root];
    while let Some(h) = stack.pop() {
        if h.finished || h.generated().len() == horizon {
            if best.as_ref().is_none_or(|b| rank_order(&h, b) == Ordering::Less) {
                best = Some(h);
            }
            continue;
        }
        let last = *h.tokens.last().expect("nonempty");
        let allowed = adjacency.successors(last)?;
        if allowed.len() > EXHAUSTIVE_MAX_BRANCHING {
            return Err(Error::SearchSpace(format!(
                "{} successors of token {last} exceed {EXHAUSTIVE_MAX_BRANCHING}",
                allowed.len()
            )));
        }
        let dist = model.next_distributions(&[context(&h.tokens, model)])?.remove(0);
        for (t, lp) in step_scores(&dist, &allowed, renormalize)? {
            let mut tokens = h.tokens.clone();
            tokens.push(t);
            stack.push(Hypothesis {
                tokens,
                prefix_len: h.prefix_len,
                log_prob: h.log_prob + lp,
                finished: t == EOT,
            });
        }
    }
    best.ok_or_else(|| Error::Invariant("no path enumerated".into()))
}

/// True when every generated step follows the adjacency relation and EOT,
/// if present, is last.
pub fn is_valid_path(h: &Hypothesis, adjacency: &dyn Adjacency) -> bool {
    let g = h.generated();
    if let Some(pos) = g.iter().position(|&t| t == EOT) {
        if pos + 1 != g.len() {
            return false;
        }
    }
    let start = h.prefix_len.saturating_sub(1);
    h.tokens[start..]
        .windows(2)
        .all(|w| adjacency.successors(w[0]).is_ok_and(|s| s.binary_search(&w[1]).is_ok()))
}
