//! First-order Markov chain over tokens.

use std::collections::BTreeMap;

use super::NextBlockModel;
use crate::corpus::EOT;
use crate::decode::Adjacency;
use crate::error::{Error, Result};

/// Transition counts with an optional add-one prior over each state's legal
/// successors (its neighbours plus EOT).
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovModel {
    vocab_size: usize,
    context_len: usize,
    smoothing: bool,
    counts: BTreeMap<u32, BTreeMap<u32, u64>>,
    support: Vec<Vec<u32>>,
}

impl MarkovModel {
    /// Counts every consecutive pair in `sequences`. The support of each
    /// token is taken from `adjacency`, widened by any observed successor.
    pub fn fit(sequences: &[Vec<u32>], adjacency: &dyn Adjacency, vocab_size: usize, smoothing: bool) -> Result<Self> {
        if sequences.iter().all(|s| s.len() < 2) {
            return Err(Error::Empty("markov training sequences"));
        }
        let mut counts: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
        for s in sequences {
            for w in s.windows(2) {
                if w.iter().any(|&t| t as usize >= vocab_size) {
                    return Err(Error::UnknownToken(format!("id {:?} >= vocab size {vocab_size}", w)));
                }
                *counts.entry(w[0]).or_default().entry(w[1]).or_insert(0) += 1;
            }
        }
        let mut support = Vec::with_capacity(vocab_size);
        for t in 0..vocab_size as u32 {
            let mut s = adjacency.successors(t).unwrap_or_else(|_| vec![EOT]);
            if let Some(row) = counts.get(&t) {
                s.extend(row.keys().copied());
            }
            s.sort_unstable();
            s.dedup();
            support.push(s);
        }
        let context_len = sequences.iter().map(Vec::len).max().unwrap_or(1);
        Ok(MarkovModel {
            vocab_size,
            context_len,
            smoothing,
            counts,
            support,
        })
    }

    pub fn count(&self, from: u32, to: u32) -> u64 {
        self.counts.get(&from).and_then(|r| r.get(&to)).copied().unwrap_or(0)
    }

    /// `P(· | last)` over the full vocabulary.
    pub fn distribution(&self, last: u32) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab_size];
        let Some(support) = self.support.get(last as usize) else {
            return p;
        };
        let row = self.counts.get(&last);
        let total: u64 = row.map_or(0, |r| r.values().sum());
        let prior = if self.smoothing { 1.0 } else { 0.0 };
        let denom = total as f64 + prior * support.len() as f64;
        if denom == 0.0 {
            for &t in support {
                p[t as usize] = 1.0 / support.len() as f64;
            }
            return p;
        }
        for &t in support {
            let c = row.and_then(|r| r.get(&t)).copied().unwrap_or(0) as f64;
            p[t as usize] = (c + prior) / denom;
        }
        p
    }
}

impl NextBlockModel for MarkovModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn next_distributions(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        prefixes
            .iter()
            .map(|p| {
                let last = *p.last().ok_or(Error::Empty("prefix"))?;
                Ok(self.distribution(last))
            })
            .collect()
    }
}
