//! Sequence-level accuracy, corpus BLEU, evaluation reports and a Kendall
//! trend test.

use std::collections::HashMap;
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{Vocabulary, EOT};
use crate::decode::{beam_search_many, Adjacency, BeamConfig};
use crate::error::{Error, Result};
use crate::hexgrid::{cell_centroid, GridSpec};
use crate::model::NextBlockModel;

/// One evaluation prefix with its ground truth and ranked predictions. Truth
/// and predictions are stored without EOT.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub prefix: Vec<u32>,
    pub truth: Vec<u32>,
    pub predictions: Vec<Vec<u32>>,
}

/// Cuts a token sequence at its first EOT.
pub fn truncate_eot(tokens: &[u32]) -> &[u32] {
    match tokens.iter().position(|&t| t == EOT) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Fraction of cases whose truth equals one of the first `n` predictions.
/// Missing predictions count as misses.
pub fn accuracy_at_n(cases: &[EvalCase], n: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation cases"));
    }
    let hits = cases
        .iter()
        .filter(|c| c.predictions.iter().take(n).any(|p| truncate_eot(p) == truncate_eot(&c.truth)))
        .count();
    Ok(hits as f64 / cases.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuParams {
    pub max_order: usize,
}

impl Default for BleuParams {
    fn default() -> Self {
        BleuParams { max_order: 4 }
    }
}

/// Corpus BLEU with clipped n-gram counts, uniform weights and no smoothing.
pub fn corpus_bleu(pairs: &[(&[u32], &[u32])], params: &BleuParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("bleu corpus"));
    }
    if params.max_order == 0 {
        return Err(Error::Config("bleu max_order must be positive".into()));
    }
    let (mut c, mut r) = (0usize, 0usize);
    let mut matched = vec![0usize; params.max_order];
    let mut total = vec![0usize; params.max_order];
    for (cand, reference) in pairs {
        c += cand.len();
        r += reference.len();
        for n in 1..=params.max_order {
            let ref_counts = ngram_counts(reference, n);
            let mut cand_counts = ngram_counts(cand, n);
            for (g, cnt) in cand_counts.drain() {
                matched[n - 1] += cnt.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let w = 1.0 / params.max_order as f64;
    for n in 0..params.max_order {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += w * (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

fn ngram_counts(s: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for g in s.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU of each case's top prediction against its truth.
pub fn bleu(cases: &[EvalCase], params: &BleuParams) -> Result<f64> {
    let pairs: Vec<(&[u32], &[u32])> = cases
        .iter()
        .map(|c| {
            let cand = c.predictions.first().map_or(&[][..], |p| truncate_eot(p));
            (cand, truncate_eot(&c.truth))
        })
        .collect();
    corpus_bleu(&pairs, params)
}

/// `(prefix, continuation)` for every window of length `l + k` with stride 1.
pub fn windows(sequences: &[Vec<u32>], l: usize, k: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut out = Vec::new();
    for s in sequences {
        if s.len() < l + k {
            continue;
        }
        for w in s.windows(l + k) {
            out.push((w[..l].to_vec(), w[l..].to_vec()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub l: usize,
    pub k: usize,
    pub beam: BeamConfig,
    /// Equal-count distance bins for the binned Acc@1.
    pub distance_bins: usize,
    /// Cases decoded per lockstep batch.
    pub chunk: usize,
}

impl EvalConfig {
    pub fn new(l: usize, k: usize, width: usize) -> Self {
        EvalConfig {
            l,
            k,
            beam: BeamConfig {
                width,
                horizon: k,
                renormalize: true,
            },
            distance_bins: 4,
            chunk: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceBin {
    pub lo_m: f64,
    pub hi_m: f64,
    pub cases: usize,
    pub acc1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cases: usize,
    /// `(N, Acc@N)` for N in {1, 3, 5} up to the beam width.
    pub accuracy: Vec<(usize, f64)>,
    pub bleu: f64,
    /// `(k', Acc@1)` for k' = 1..=k.
    pub per_horizon: Vec<(usize, f64)>,
    pub distance: Vec<DistanceBin>,
}

impl EvalReport {
    pub fn acc(&self, n: usize) -> Option<f64> {
        self.accuracy.iter().find(|(m, _)| *m == n).map(|p| p.1)
    }

    /// `(metric, value)` rows in report order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("cases".to_string(), self.cases as f64)];
        for (n, a) in &self.accuracy {
            rows.push((format!("acc@{n}"), *a));
        }
        rows.push(("bleu".into(), self.bleu));
        for (k, a) in &self.per_horizon {
            rows.push((format!("acc@1_horizon{k}"), *a));
        }
        for (i, b) in self.distance.iter().enumerate() {
            rows.push((format!("acc@1_dist{i}[{:.0}-{:.0}m]", b.lo_m, b.hi_m), b.acc1));
        }
        rows
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  {:>10}\n", "metric", "value");
        for (m, v) in rows {
            if m == "cases" {
                let _ = writeln!(s, "{m:<width$}  {v:>10.0}");
            } else {
                let _ = writeln!(s, "{m:<width$}  {v:>10.4}");
            }
        }
        s
    }

    pub fn to_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut s = String::from("metric,value,config_hash,seed\n");
        for (m, v) in self.rows() {
            let _ = writeln!(s, "{m},{v:.6},{config_hash},{seed}");
        }
        s
    }
}

/// Decodes every prefix with beam search and collects the ranked paths.
pub fn predict_cases(
    model: &dyn NextBlockModel,
    pairs: &[(Vec<u32>, Vec<u32>)],
    beam: &BeamConfig,
    adjacency: &dyn Adjacency,
    chunk: usize,
) -> Result<Vec<EvalCase>> {
    let mut out = Vec::with_capacity(pairs.len());
    for group in pairs.chunks(chunk.max(1)) {
        let prefixes: Vec<&[u32]> = group.iter().map(|p| p.0.as_slice()).collect();
        let beams = beam_search_many(model, &prefixes, beam, adjacency)?;
        for ((prefix, truth), hyps) in group.iter().zip(beams) {
            out.push(EvalCase {
                prefix: prefix.clone(),
                truth: truncate_eot(&truth[..truth.len().min(beam.horizon)]).to_vec(),
                predictions: hyps.iter().map(|h| h.path().to_vec()).collect(),
            });
        }
    }
    Ok(out)
}

/// Metres travelled along the truth, starting from the last prefix cell.
fn truth_distance(case: &EvalCase, vocab: &Vocabulary, spec: &GridSpec) -> f64 {
    let pts: Vec<_> = case
        .prefix
        .last()
        .into_iter()
        .chain(&case.truth)
        .filter_map(|&t| vocab.cell(t))
        .map(|c| cell_centroid(c, spec))
        .collect();
    pts.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

/// Full evaluation over encoded test sequences.
pub fn evaluate(
    model: &dyn NextBlockModel,
    test: &[Vec<u32>],
    vocab: &Vocabulary,
    spec: &GridSpec,
    adjacency: &dyn Adjacency,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.beam.horizon != cfg.k {
        return Err(Error::Config(format!("beam horizon {} != k {}", cfg.beam.horizon, cfg.k)));
    }
    let pairs = windows(test, cfg.l, cfg.k);
    if pairs.is_empty() {
        return Err(Error::Empty("test windows of length l + k"));
    }
    let cases = predict_cases(model, &pairs, &cfg.beam, adjacency, cfg.chunk)?;
    let accuracy = [1, 3, 5]
        .into_iter()
        .filter(|&n| n == 1 || n <= cfg.beam.width)
        .map(|n| Ok((n, accuracy_at_n(&cases, n)?)))
        .collect::<Result<Vec<_>>>()?;
    let bleu = bleu(&cases, &BleuParams::default())?;

    let mut per_horizon = Vec::with_capacity(cfg.k);
    for kp in 1..=cfg.k {
        let acc = if kp == cfg.k {
            accuracy_at_n(&cases, 1)?
        } else {
            let beam = BeamConfig {
                horizon: kp,
                ..cfg.beam.clone()
            };
            accuracy_at_n(&predict_cases(model, &pairs, &beam, adjacency, cfg.chunk)?, 1)?
        };
        per_horizon.push((kp, acc));
    }

    let mut by_dist: Vec<(f64, bool)> = cases
        .iter()
        .map(|c| {
            let hit = c.predictions.first().is_some_and(|p| p == &c.truth);
            (truth_distance(c, vocab, spec), hit)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let bins = cfg.distance_bins.clamp(1, by_dist.len());
    let distance = (0..bins)
        .map(|i| {
            let part = &by_dist[i * by_dist.len() / bins..(i + 1) * by_dist.len() / bins];
            DistanceBin {
                lo_m: part.first().map_or(0.0, |p| p.0),
                hi_m: part.last().map_or(0.0, |p| p.0),
                cases: part.len(),
                acc1: part.iter().filter(|p| p.1).count() as f64 / part.len().max(1) as f64,
            }
        })
        .collect();

    Ok(EvalReport {
        cases: cases.len(),
        accuracy,
        bleu,
        per_horizon,
        distance,
    })
}

/// Kendall's τ-b with the tie-corrected normal approximation. Returns
/// `(tau, z, one-sided p-value for a positive trend)`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::shape("kendall_tau", format!("{} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Empty("kendall_tau needs at least 3 pairs"));
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[j] - x[i]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[j] - y[i]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
        }
    }
    let ties = |v: &[f64]| -> Vec<f64> {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        let mut out = Vec::new();
        let mut i = 0;
        while i < v.len() {
            let j = (i..v.len()).find(|&j| v[j] != v[i]).unwrap_or(v.len());
            if j - i > 1 {
                out.push((j - i) as f64);
            }
            i = j;
        }
        out
    };
    let (tx, ty) = (ties(x), ties(y));
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let n1: f64 = tx.iter().map(|t| t * (t - 1.0) / 2.0).sum();
    let n2: f64 = ty.iter().map(|t| t * (t - 1.0) / 2.0).sum();
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    if denom == 0.0 {
        return Ok((0.0, 0.0, 1.0));
    }
    let tau = s as f64 / denom;
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let vt: f64 = tx.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let vu: f64 = ty.iter().map(|t| t * (t - 1.0) * (2.0 * t + 5.0)).sum();
    let v1 = tx.iter().map(|t| t * (t - 1.0)).sum::<f64>() * ty.iter().map(|t| t * (t - 1.0)).sum::<f64>();
    let v2 = tx.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum::<f64>()
        * ty.iter().map(|t| t * (t - 1.0) * (t - 2.0)).sum::<f64>();
    let var = (v0 - vt - vu) / 18.0 + v1 / (2.0 * nf * (nf - 1.0)) + v2 / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    let z = s as f64 / var.sqrt();
    let p = 1.0 - Normal::standard().cdf(z);
    Ok((tau, z, p))
}
