//! Acceptance suite. Runs every criterion, prints one `[PASS]`/`[FAIL]` line
//! each and exits nonzero if any fails.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hextraj_core::corpus::{make_windows, split_by_start_time, RawPoint, RawTrajectory, TrainingWindow, Vocabulary, EOT};
use hextraj_core::decode::{
    beam_search, exhaustive_search, is_valid_path, Adjacency, BeamConfig, GridAdjacency, Unconstrained,
};
use hextraj_core::eval::{
    accuracy_at_n, corpus_bleu, evaluate, kendall_tau, predict_cases, windows, BleuParams, EvalCase, EvalConfig,
    EvalReport,
};
use hextraj_core::hexgrid::{
    cell_centroid, cell_polygon, children, descendants, disk, grid_line, hex_distance, neighbors, parent, unproject,
    GridSpec, HexCell, PlanarPoint,
};
use hextraj_core::hiermap::{self, MixedResolutionMap, SplitParams};
use hextraj_core::model::{train, MarkovModel, ModelConfig, NextBlockModel, TrainConfig, TransformerModel};
use hextraj_core::synthetic::{self, SyntheticConfig, SyntheticCorpus};
use hextraj_core::tensor::{Graph, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let mut outcome = f();
        let elapsed = t0.elapsed();
        if let (Ok(detail), Some(b)) = (&outcome, budget) {
            if elapsed > b {
                outcome = Err(format!("{detail}; took {:.1} s, budget {:.0} s", elapsed.as_secs_f64(), b.as_secs_f64()));
            }
        }
        match outcome {
            Ok(detail) => println!("[PASS] {id} {name} ({:.1} s): {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                println!("[FAIL] {id} {name} ({:.1} s): {why}", elapsed.as_secs_f64());
                self.failed.push(id.to_string());
            }
        }
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// ---------------------------------------------------------------- C1

fn geometry() -> Outcome {
    let spec = GridSpec::new(41.15, -8.61);
    let patch: Vec<HexCell> = (-25..25).flat_map(|q| (-25..25).map(move |r| HexCell::new(9, q, r))).collect();
    for &c in &patch {
        let ns = neighbors(c);
        ensure!(ns.iter().collect::<HashSet<_>>().len() == 6, "{c} has repeated neighbours");
        for n in ns {
            ensure!(neighbors(n).contains(&c), "{n} does not list {c} back");
            ensure!(ok(hex_distance(c, n))? == 1, "neighbour {n} of {c} not at distance 1");
        }
        let kids = ok(children(c, &spec))?;
        ensure!(kids.iter().collect::<HashSet<_>>().len() == 7, "{c} lacks 7 distinct children");
        for k in kids {
            ensure!(ok(parent(k, &spec))? == c, "parent of child {k} is not {c}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let a = *patch.choose(&mut rng).unwrap();
        let b = *patch.choose(&mut rng).unwrap();
        let line = ok(grid_line(a, b))?;
        let d = ok(hex_distance(a, b))? as usize;
        ensure!(line.first() == Some(&a) && line.last() == Some(&b), "line {a}->{b} has wrong endpoints");
        ensure!(line.len() == d + 1, "line {a}->{b} has {} cells for distance {d}", line.len());
        for w in line.windows(2) {
            ensure!(ok(hex_distance(w[0], w[1]))? == 1, "line {a}->{b} jumps {} -> {}", w[0], w[1]);
        }
    }

    let mut worst_edge = 0f64;
    for r in spec.res_min..spec.res_max {
        let area = spec.cell_area(r) / spec.cell_area(r + 1);
        ensure!(area == 7.0, "area ratio at res {r} is {area:?}");
        worst_edge = worst_edge.max((spec.edge(r) / spec.edge(r + 1) - 7f64.sqrt()).abs());
    }
    ensure!(worst_edge <= 1e-12, "edge ratio off by {worst_edge:e}");
    Ok(format!("{} cells, 2000 lines, edge ratio error {worst_edge:.1e}", patch.len()))
}

// ---------------------------------------------------------------- C2

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Largest relative max-norm error between analytic and central-difference
/// gradients of `probe · f(inputs)` with respect to every input.
fn fd_error(
    shapes: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> hextraj_core::Result<Var>,
) -> Result<f64, String> {
    let mut inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|&(r, c)| Tensor::from_fn(&[r, c], |_| rng.random_range(-1.5..1.5)))
        .collect();
    let probe_seed: u64 = rng.random();
    let eval = |inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>), String> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(t, i)).collect();
        let y = ok(f(&mut g, &vars))?;
        let n = g.value(y).len();
        let mut pr = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe: Vec<f64> = (0..n).map(|_| pr.random_range(-1.0..1.0)).collect();
        let loss = ok(g.dot(y, probe))?;
        let value = g.value(loss)[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut gr = ok(g.backward(loss))?;
        let out = inputs.iter().enumerate().map(|(i, t)| gr.take(i).unwrap_or_else(|| vec![0.0; t.numel()])).collect();
        Ok((value, out))
    };
    let (_, analytic) = eval(&inputs, true)?;
    let mut worst = 0f64;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..numeric.len() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&inputs, false)?.0;
            inputs[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&inputs, false)?.0;
            inputs[i].data_mut()[j] = x;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    Ok(worst)
}

/// Max-norm relative error. A gradient that is zero on both sides (unused
/// embedding rows, the attention key bias, which softmax cancels) has no
/// relative error; it passes only if both sides agree to 1e-8 absolutely.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-8 {
        return if diff < 1e-8 { 0.0 } else { f64::INFINITY };
    }
    diff / scale
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for trial in 0..4 {
        let m = rng.random_range(1..=8);
        let k = rng.random_range(1..=16);
        let n = rng.random_range(1..=16);
        let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name, e)),
        };

        record("matmul", fd_error(&[(m, k), (k, n)], &mut rng, &|g, v| g.matmul(v[0], v[1]))?);
        record("add", fd_error(&[(m, k), (m, k)], &mut rng, &|g, v| g.add(v[0], v[1]))?);
        record("add_row", fd_error(&[(m, k), (1, k)], &mut rng, &|g, v| g.add_row(v[0], v[1]))?);
        record("linear", fd_error(&[(m, k), (k, n), (1, n)], &mut rng, &|g, v| g.linear(v[0], v[1], Some(v[2])))?);
        record("scale", fd_error(&[(m, k)], &mut rng, &|g, v| Ok(g.scale(v[0], -0.7)))?);
        record("concat_cols", fd_error(&[(m, k), (m, n)], &mut rng, &|g, v| g.concat_cols(v[0], v[1]))?);
        let start = rng.random_range(0..k);
        let len = rng.random_range(1..=k - start);
        record("slice_cols", fd_error(&[(m, k)], &mut rng, &move |g, v| g.slice_cols(v[0], start, len))?);
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        record("gather", fd_error(&[(m, k)], &mut rng, &move |g, v| g.gather(v[0], &ids))?);
        record("gelu", fd_error(&[(m, k)], &mut rng, &|g, v| Ok(g.gelu(v[0])))?);
        let c = k.max(2);
        record("layer_norm", fd_error(&[(m, c), (1, c), (1, c)], &mut rng, &|g, v| g.layer_norm(v[0], v[1], v[2]))?);
        record("softmax", fd_error(&[(m, k)], &mut rng, &|g, v| Ok(g.softmax(v[0])))?);
        let (batch, seq) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let heads = [1, 2, 4][trial % 3];
        let width = heads * rng.random_range(1..=16 / heads);
        let rows = batch * seq;
        record(
            "causal_attention",
            fd_error(&[(rows, width); 3], &mut rng, &move |g, v| g.causal_attention(v[0], v[1], v[2], batch, seq, heads))?,
        );
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        record("cross_entropy", fd_error(&[(m, k)], &mut rng, &move |g, v| g.cross_entropy(v[0], &targets, &mask))?);
        let drop_seed: u64 = rng.random();
        record(
            "dropout",
            fd_error(&[(m, k)], &mut rng, &move |g, v| {
                let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
                Ok(g.dropout(v[0], 0.3, &mut r))
            })?,
        );
    }

    // Full model loss over every parameter.
    let mut model_worst = 0f64;
    for (seed, (batch, seq)) in [(1u64, (4usize, 8usize)), (2, (3, 5))] {
        let cfg = ModelConfig {
            vocab_size: 11,
            context_len: 8,
            embed_dim: 16,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            seed,
        };
        let mut model = ok(TransformerModel::<f64>::init(cfg))?;
        // Move off the symmetric initialisation so every parameter matters.
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let ids: Vec<u32> = (0..batch * seq).map(|_| rng.random_range(0..11)).collect();
        let targets: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..11)).collect();
        let mask: Vec<bool> = (0..batch * seq).map(|i| i % 3 != 1).collect();
        let (_, grads) = ok(model.loss(&ids, batch, seq, &targets, &mask, true))?;
        let grads = grads.ok_or("no gradients")?;
        for i in 0..model.params().len() {
            let mut numeric = vec![0.0; model.params()[i].numel()];
            for j in 0..numeric.len() {
                let x = model.params()[i].data()[j];
                model.params_mut()[i].data_mut()[j] = x + FD_STEP;
                let up = ok(model.loss(&ids, batch, seq, &targets, &mask, false))?.0;
                model.params_mut()[i].data_mut()[j] = x - FD_STEP;
                let down = ok(model.loss(&ids, batch, seq, &targets, &mask, false))?.0;
                model.params_mut()[i].data_mut()[j] = x;
                numeric[j] = (up - down) / (2.0 * FD_STEP);
            }
            let e = relative_error(&grads[i], &numeric);
            ensure!(e <= FD_TOL, "model parameter {} relative error {e:.2e}", model.names()[i]);
            model_worst = model_worst.max(e);
        }
    }

    for (name, e) in &worst {
        ensure!(*e <= FD_TOL, "{name} relative error {e:.2e}");
    }
    let (name, e) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Ok(format!(
        "{} kernels, worst kernel {name} {e:.1e}, full model {model_worst:.1e}",
        worst.len()
    ))
}

// ---------------------------------------------------------------- C3

fn causality() -> Outcome {
    let mut cfg = ModelConfig::new(40, 16);
    cfg.embed_dim = 32;
    cfg.layers = 2;
    cfg.heads = 4;
    let model = ok(TransformerModel::<f32>::init(cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let cut = rng.random_range(1..n);
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..40)).collect();
        let mut b = a.clone();
        for t in &mut b[cut..] {
            *t = rng.random_range(0..40);
        }
        let la = ok(model.forward(&[&a]))?;
        let lb = ok(model.forward(&[&b]))?;
        for t in 0..cut {
            let d = la.row(0, t).iter().zip(lb.row(0, t)).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    ensure!(worst <= 1e-6, "past logits moved by {worst:e}");
    Ok(format!("100 perturbations, max past-logit change {worst:e}"))
}

// ---------------------------------------------------------------- C4

/// A random next-token table keyed on the last two tokens.
struct TinyModel {
    vocab: usize,
    seed: u64,
}

impl NextBlockModel for TinyModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn context_len(&self) -> usize {
        4
    }

    fn next_distributions(&self, prefixes: &[&[u32]]) -> hextraj_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let last = p[p.len() - 1] as u64;
                let before = if p.len() > 1 { p[p.len() - 2] as u64 + 1 } else { 0 };
                let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ (last * 1_000_003 + before * 7919));
                let logits: Vec<f64> = (0..self.vocab).map(|_| r.random_range(-3.0..3.0)).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                logits.iter().map(|l| l.exp() / z).collect()
            })
            .collect())
    }
}

fn beam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    let mut gap = 0f64;
    for _ in 0..100 {
        let radius = rng.random_range(1..=3);
        let vocab = Vocabulary::from_cells(disk(HexCell::new(9, 0, 0), radius));
        ensure!(vocab.len() <= 50, "vocabulary of {} tokens", vocab.len());
        let adj = GridAdjacency::new(&vocab);
        let model = TinyModel {
            vocab: vocab.len(),
            seed: rng.random(),
        };
        let k = rng.random_range(1..=3);
        let renormalize = rng.random_bool(0.5);
        let mut prefix = vec![rng.random_range(2..vocab.len() as u32)];
        for _ in 0..rng.random_range(0..4) {
            let succ: Vec<u32> = ok(adj.successors(*prefix.last().unwrap()))?.into_iter().filter(|&t| t != EOT).collect();
            prefix.push(*succ.choose(&mut rng).unwrap());
        }
        let oracle = ok(exhaustive_search(&model, &prefix, k, renormalize, &adj))?;

        let full = BeamConfig {
            width: 7usize.pow(k as u32),
            horizon: k,
            renormalize,
        };
        let top = ok(beam_search(&model, &prefix, &full, &adj))?;
        ensure!(
            top[0].tokens == oracle.tokens && top[0].log_prob == oracle.log_prob,
            "w = 7^{k}: beam {:?} ({}) vs exhaustive {:?} ({})",
            top[0].generated(),
            top[0].log_prob,
            oracle.generated(),
            oracle.log_prob
        );
        exact += 1;

        let narrow = BeamConfig { width: 5, ..full };
        let hyps = ok(beam_search(&model, &prefix, &narrow, &adj))?;
        ensure!(hyps[0].log_prob <= oracle.log_prob, "w = 5 beats the exhaustive optimum");
        ensure!(hyps.iter().all(|h| is_valid_path(h, &adj)), "w = 5 produced an invalid path");
        gap = gap.max(oracle.log_prob - hyps[0].log_prob);
    }
    Ok(format!("{exact}/100 exact at w = 7^k; largest w = 5 shortfall {gap:.3} nats"))
}

// ---------------------------------------------------------------- C5..C8, C10

const L: usize = 10;
const K: usize = 5;

fn small_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(vocab, L + K);
    cfg.embed_dim = 64;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg
}

/// Every position after the first token is supervised, so one model serves
/// all input lengths up to `L`.
fn all_position_windows(seqs: &[Vec<u32>]) -> Vec<TrainingWindow> {
    seqs.iter().flat_map(|s| make_windows(s, 1, L + K - 1)).collect()
}

struct Trained {
    corpus: SyntheticCorpus,
    test: Vec<Vec<u32>>,
    model: TransformerModel,
    train_secs: f64,
}

fn train_synthetic(handedness: bool, epochs: usize) -> Result<Trained, String> {
    let corpus = ok(synthetic::generate(&SyntheticConfig {
        handedness,
        ..SyntheticConfig::default()
    }))?;
    let split = ok(split_by_start_time(corpus.trajectories.clone()))?;
    let train_seqs = ok(corpus.encoded(&split.train))?;
    let val = ok(corpus.encoded(&split.val))?;
    let test = ok(corpus.encoded(&split.test))?;
    let mut model = ok(TransformerModel::init(small_config(corpus.vocab.len())))?;
    let t0 = Instant::now();
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    ok(train(&mut model, &all_position_windows(&train_seqs), &all_position_windows(&val), &cfg))?;
    Ok(Trained {
        corpus,
        test,
        model,
        train_secs: t0.elapsed().as_secs_f64(),
    })
}

fn accuracies(cases: &[EvalCase]) -> Result<[f64; 3], String> {
    let a = [ok(accuracy_at_n(cases, 1))?, ok(accuracy_at_n(cases, 3))?, ok(accuracy_at_n(cases, 5))?];
    ensure!(a[0] <= a[1] && a[1] <= a[2], "Acc@1/3/5 out of order: {a:?}");
    Ok(a)
}

fn beam(width: usize) -> BeamConfig {
    BeamConfig {
        width,
        horizon: K,
        renormalize: true,
    }
}

struct Synthetic {
    base: Option<Trained>,
    variant: Option<Trained>,
    variant_report: Option<EvalReport>,
    reports: Vec<(String, EvalReport)>,
}

fn learnability(s: &mut Synthetic) -> Outcome {
    let spec = GridSpec::default();
    let base = train_synthetic(false, 6)?;
    ensure!(base.train_secs <= 300.0, "base training took {:.0} s", base.train_secs);
    let adj = GridAdjacency::new(&base.corpus.vocab);
    let cases = ok(predict_cases(&base.model, &windows(&base.test, L, K), &beam(5), &adj, 256))?;
    let base_acc = accuracies(&cases)?;
    let v = base.corpus.vocab.len();
    s.base = Some(base);
    ensure!(base_acc[0] >= 0.90, "turn-rule Acc@1 {:.4} < 0.90", base_acc[0]);

    let variant = train_synthetic(true, 10)?;
    ensure!(variant.train_secs <= 300.0, "variant training took {:.0} s", variant.train_secs);
    let adj = GridAdjacency::new(&variant.corpus.vocab);
    let cfg = EvalConfig::new(L, K, 5);
    let report = ok(evaluate(&variant.model, &variant.test, &variant.corpus.vocab, &spec, &adj, &cfg))?;
    let train_seqs = ok(variant.corpus.encoded(&ok(split_by_start_time(variant.corpus.trajectories.clone()))?.train))?;
    let mc = ok(MarkovModel::fit(&train_seqs, &adj, variant.corpus.vocab.len(), true))?;
    let mc_report = ok(evaluate(&mc, &variant.test, &variant.corpus.vocab, &spec, &adj, &cfg))?;
    let cap = ok(variant.corpus.last_token_ceiling(L, K))?;
    let acc = report.acc(1).unwrap_or(0.0);
    let mc_acc = mc_report.acc(1).unwrap_or(0.0);
    let train_secs = (s.base.as_ref().map_or(0.0, |b| b.train_secs), variant.train_secs);
    s.reports.push(("variant transformer".into(), report.clone()));
    s.reports.push(("variant markov".into(), mc_report));
    s.variant_report = Some(report);
    s.variant = Some(variant);
    ensure!(acc - mc_acc >= 0.05, "variant Acc@1 {acc:.4} vs MC {mc_acc:.4}");
    ensure!(acc - cap >= 0.05, "variant Acc@1 {acc:.4} vs first-order cap {cap:.4}");
    Ok(format!(
        "V = {v}; turn-rule Acc@1 {:.4} (trained {:.0} s); second-order variant Acc@1 {acc:.4} vs MC {mc_acc:.4}, \
         analytic first-order cap {cap:.4} (trained {:.0} s)",
        base_acc[0], train_secs.0, train_secs.1
    ))
}

fn metrics(s: &Synthetic) -> Outcome {
    let case = |truth: &[u32], preds: &[&[u32]]| EvalCase {
        prefix: vec![2],
        truth: truth.to_vec(),
        predictions: preds.iter().map(|p| p.to_vec()).collect(),
    };
    // Hits at rank 1, 2, 4, never, and rank 1 once EOT is stripped.
    let cases = [
        case(&[3, 4], &[&[3, 4], &[3, 5], &[5, 6], &[6, 7], &[7, 8]]),
        case(&[3, 4], &[&[3, 5], &[3, 4], &[5, 6], &[6, 7], &[7, 8]]),
        case(&[3, 4], &[&[3, 5], &[5, 6], &[6, 7], &[3, 4], &[7, 8]]),
        case(&[3, 4], &[&[4, 3], &[3, 5], &[3], &[3, 4, 5], &[]]),
        case(&[3], &[&[3, EOT], &[4]]),
    ];
    let expect = [(1, 2.0 / 5.0), (3, 3.0 / 5.0), (5, 4.0 / 5.0)];
    for (n, want) in expect {
        let got = ok(accuracy_at_n(&cases, n))?;
        ensure!(got == want, "Acc@{n} = {got}, expected {want}");
    }

    let p = BleuParams::default();
    let ident: Vec<u32> = vec![2, 3, 4, 5, 6, 7];
    let id = ok(corpus_bleu(&[(&ident, &ident)], &p))?;
    ensure!((id - 1.0).abs() < 1e-12, "BLEU on identity = {id}");
    let bp = ok(corpus_bleu(&[(&ident[..4], &ident[..5])], &p))?;
    ensure!((bp - (-0.25f64).exp()).abs() <= 1e-9, "BP fixture = {bp}");
    // cand 2 3 4 2 3 5 / ref 2 3 4 5 3 2 3: unigrams 6/6; bigrams {23 ×2, 34}
    // of 5; trigram {234} of 4; c = 6 < r = 7 gives BP = e^(1 - 7/6).
    let cand = [2, 3, 4, 2, 3, 5];
    let reference = [2, 3, 4, 5, 3, 2, 3];
    let got = ok(corpus_bleu(&[(&cand, &reference)], &BleuParams { max_order: 3 }))?;
    let want = (1.0f64 - 7.0 / 6.0).exp() * (1.0 * (3.0 / 5.0) * (1.0 / 4.0) as f64).cbrt();
    ensure!((got - want).abs() <= 1e-9, "n-gram fixture BLEU {got} vs {want}");

    for (name, r) in &s.reports {
        let (a1, a3, a5) = (r.acc(1).unwrap_or(0.0), r.acc(3).unwrap_or(0.0), r.acc(5).unwrap_or(0.0));
        ensure!(a1 <= a3 && a3 <= a5, "{name}: Acc@1/3/5 = {a1}, {a3}, {a5}");
    }
    Ok(format!(
        "hand fixtures exact, BP {bp:.12}, n-gram BLEU {got:.12}; Acc@N ordered on {} evaluation runs",
        s.reports.len()
    ))
}

fn trends(s: &Synthetic) -> Outcome {
    let (Some(v), Some(report)) = (&s.variant, &s.variant_report) else {
        return Err("variant model unavailable".into());
    };
    let horizon: Vec<f64> = report.per_horizon.iter().map(|p| p.1).collect();
    ensure!(horizon.len() == K, "{} horizons", horizon.len());
    ensure!(horizon.windows(2).all(|w| w[1] <= w[0]), "Acc@1 by horizon not nonincreasing: {horizon:?}");

    let adj = GridAdjacency::new(&v.corpus.vocab);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut means = [0f64; L - 4];
    for seed in 1..=20u64 {
        let draw = ok(synthetic::generate(&SyntheticConfig {
            handedness: true,
            trajectories: 10,
            seed: 1000 + seed,
            ..SyntheticConfig::default()
        }))?;
        let pairs = windows(&ok(draw.encoded(&draw.trajectories))?, L, K);
        for l in 5..=L {
            let cut: Vec<(Vec<u32>, Vec<u32>)> = pairs.iter().map(|(p, t)| (p[L - l..].to_vec(), t.clone())).collect();
            let cases = ok(predict_cases(&v.model, &cut, &beam(5), &adj, 256))?;
            let a = accuracies(&cases)?[0];
            means[l - 5] += a / 20.0;
            xs.push(l as f64);
            ys.push(a);
        }
    }
    let (tau, _, p) = ok(kendall_tau(&xs, &ys))?;
    ensure!(tau > 0.0 && p < 0.05, "Kendall tau {tau:.3}, p {p:.3}");
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    Ok(format!(
        "Acc@1 by k' = 1..5: {}; mean Acc@1 by l = 5..10 over 20 seeds: {}; tau {tau:.3}, p {p:.2e}",
        fmt(&horizon),
        fmt(&means)
    ))
}

fn beam_width(s: &Synthetic) -> Outcome {
    let Some(v) = &s.variant else {
        return Err("variant model unavailable".into());
    };
    let adj = GridAdjacency::new(&v.corpus.vocab);
    let pairs = windows(&v.test, L, K);
    let mut acc = Vec::new();
    let mut times = Vec::new();
    for w in 1..=5 {
        let mut best = f64::INFINITY;
        let mut a = 0.0;
        for _ in 0..2 {
            let t0 = Instant::now();
            let cases = ok(predict_cases(&v.model, &pairs, &beam(w), &adj, 256))?;
            best = best.min(t0.elapsed().as_secs_f64());
            a = ok(accuracy_at_n(&cases, 1))?;
        }
        acc.push(a);
        times.push(best);
    }
    ensure!(acc.windows(2).all(|p| p[1] >= p[0]), "Acc@1 by width not nondecreasing: {acc:?}");
    for (i, t) in times.iter().enumerate() {
        let w = (i + 1) as f64;
        ensure!(t / times[0] <= 1.2 * w, "t({w})/t(1) = {:.2} > {:.2}", t / times[0], 1.2 * w);
    }
    let fmt = |v: &[f64], p: usize| v.iter().map(|a| format!("{a:.p$}")).collect::<Vec<_>>().join(" ");
    let ratios: Vec<f64> = times.iter().map(|t| t / times[0]).collect();
    Ok(format!(
        "{} cases; Acc@1 by w = 1..5: {}; time ratio t(w)/t(1): {}",
        pairs.len(),
        fmt(&acc, 4),
        fmt(&ratios, 2)
    ))
}

fn ablation(s: &Synthetic) -> Outcome {
    let Some(full) = &s.variant else {
        return Err("variant model unavailable".into());
    };
    let delta = |m: &TransformerModel, corpus: &SyntheticCorpus, test: &[Vec<u32>]| -> Result<(f64, f64), String> {
        let pairs = windows(test, L, K);
        let grid = GridAdjacency::new(&corpus.vocab);
        let free = Unconstrained {
            vocab_size: corpus.vocab.len(),
        };
        let with = accuracies(&ok(predict_cases(m, &pairs, &beam(5), &grid, 256))?)?[0];
        let without = accuracies(&ok(predict_cases(m, &pairs, &beam(5), &free, 256))?)?[0];
        Ok((with, without))
    };
    let early = train_synthetic(true, 1)?;
    let (e_with, e_without) = delta(&early.model, &early.corpus, &early.test)?;
    let (f_with, f_without) = delta(&full.model, &full.corpus, &full.test)?;
    let detail = format!(
        "1-epoch model Acc@1 {e_with:.4} constrained vs {e_without:.4} unconstrained (delta {:+.4}); \
         converged model {f_with:.4} vs {f_without:.4} (delta {:+.4})",
        e_without - e_with,
        f_without - f_with
    );
    ensure!(e_without < e_with && f_without <= f_with, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- C9

fn spec9() -> GridSpec {
    GridSpec::new(41.15, -8.61)
}

fn raw(id: &str, pts: &[PlanarPoint]) -> RawTrajectory {
    let s = spec9();
    RawTrajectory {
        entity_id: id.into(),
        points: pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (lat, lon) = unproject(*p, &s);
                RawPoint {
                    timestamp: i as f64,
                    lat,
                    lon,
                }
            })
            .collect(),
    }
}

/// Light uniform traffic over 7×7 km plus a dense cluster inside one res-7 cell.
fn hotspot(rng: &mut ChaCha8Rng) -> (Vec<RawTrajectory>, HexCell) {
    let s = spec9();
    let mut out = Vec::new();
    for i in 0..60 {
        let pts: Vec<PlanarPoint> = (0..5)
            .map(|_| PlanarPoint::new(rng.random_range(-3500.0..3500.0), rng.random_range(-3500.0..3500.0)))
            .collect();
        out.push(raw(&format!("bg{i}"), &pts));
    }
    let hot = HexCell::new(7, 1, 0);
    let c = cell_centroid(hot, &s);
    for i in 0..40 {
        let pts: Vec<PlanarPoint> = (0..30)
            .map(|_| {
                let r = 0.7 * s.edge(7) * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                PlanarPoint::new(c.x + r * a.cos(), c.y + r * a.sin())
            })
            .collect();
        out.push(raw(&format!("hot{i}"), &pts));
    }
    (out, hot)
}

/// Every finest-resolution descendant of every base cell has exactly one
/// active ancestor-or-self.
fn covers_exactly_once(map: &MixedResolutionMap) -> Result<(), String> {
    let r_max = map.params.r_max;
    for b in map.base() {
        for d in ok(descendants(*b, r_max, &map.spec))? {
            let mut hits = 0;
            let mut c = d;
            loop {
                hits += usize::from(map.is_active(&c));
                if c.res == b.res {
                    break;
                }
                c = ok(parent(c, &map.spec))?;
            }
            ensure!(hits == 1, "cell {d} covered {hits} times");
        }
    }
    Ok(())
}

/// Rebuilds the map iteration by iteration from its lineage, checking the
/// partition after each one.
fn replay(map: &MixedResolutionMap) -> Result<usize, String> {
    let mut m = ok(MixedResolutionMap::uniform(map.spec.clone(), map.params.clone(), map.base().iter().copied()))?;
    ok(m.validate())?;
    covers_exactly_once(&m)?;
    let mut checked = 1;
    for it in 1..=map.iterations {
        for (c, _) in map.lineage.iter().filter(|(_, i)| *i == it) {
            ok(m.split_cell(*c, it))?;
        }
        ok(m.validate())?;
        covers_exactly_once(&m)?;
        checked += 1;
    }
    ensure!(m.active() == map.active(), "replayed lineage does not reproduce the map");
    Ok(checked)
}

fn symmetric(map: &MixedResolutionMap) -> Result<(), String> {
    for c in map.active() {
        for n in ok(map.mixed_neighbors(*c))? {
            ensure!(ok(map.mixed_neighbors(n))?.contains(c), "{n} does not list {c} back");
        }
    }
    Ok(())
}

fn hiermap_suite() -> Outcome {
    let s = spec9();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let (trajs, hot) = hotspot(&mut rng);
    let mut p = SplitParams::new(7, 9);
    p.delta = 500.0;
    p.phi = 0.05;
    let map = ok(hiermap::generate(&trajs, &s, &p))?;
    ensure!(map.lineage == vec![(hot, 1)], "split lineage {:?}", map.lineage);
    let kids: BTreeSet<HexCell> = ok(children(hot, &s))?.into_iter().collect();
    let fine: BTreeSet<HexCell> = map.active().iter().filter(|c| c.res > 7).copied().collect();
    ensure!(fine == kids, "refined cells are not exactly the hot cell's children");
    let mut iterations = replay(&map)?;
    symmetric(&map)?;

    // Aggressive refinement over several inputs.
    let mut aggressive = SplitParams::new(7, 9);
    aggressive.max_iter = 4;
    let deep = ok(hiermap::generate(&trajs, &s, &aggressive))?;
    ensure!(deep.iterations <= aggressive.max_iter, "{} iterations", deep.iterations);
    iterations += replay(&deep)?;
    symmetric(&deep)?;

    // Adversarial inputs: one repeated point, points on cell corners, a
    // far-flung pair, degenerate trajectories, all with thresholds of zero.
    let corner = cell_polygon(HexCell::new(7, 0, 0), &s);
    let inputs: Vec<(&str, Vec<RawTrajectory>)> = vec![
        ("single point", (0..200).map(|i| raw(&format!("p{i}"), &[PlanarPoint::new(10.0, 10.0); 20])).collect()),
        ("cell corners", vec![raw("c", &corner.repeat(50))]),
        (
            "far apart",
            vec![raw("f", &[PlanarPoint::new(-20_000.0, -20_000.0), PlanarPoint::new(20_000.0, 20_000.0)])],
        ),
        ("one-point trajectories", (0..30).map(|i| raw(&format!("o{i}"), &[PlanarPoint::new(i as f64 * 300.0, 0.0)])).collect()),
        ("no points", vec![raw("e", &[])]),
    ];
    let mut zero = SplitParams::new(7, 10);
    zero.theta = 0.0;
    zero.max_iter = 3;
    for (name, input) in &inputs {
        let t0 = Instant::now();
        let m = ok(hiermap::generate(input, &s, &zero)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(m.iterations <= zero.max_iter, "{name}: {} iterations", m.iterations);
        ensure!(t0.elapsed() < Duration::from_secs(10), "{name}: took {:?}", t0.elapsed());
        iterations += replay(&m).map_err(|e| format!("{name}: {e}"))?;
        symmetric(&m).map_err(|e| format!("{name}: {e}"))?;
    }

    let base = disk(HexCell::new(7, 0, 0), 4);
    let uniform = ok(MixedResolutionMap::uniform(s, SplitParams::new(7, 9), base.clone()))?;
    for c in &base {
        let expected: BTreeSet<HexCell> = neighbors(*c).into_iter().filter(|n| uniform.is_active(n)).collect();
        ensure!(ok(uniform.mixed_neighbors(*c))? == expected, "uniform neighbours of {c} differ from the grid");
    }
    Ok(format!(
        "hot cell {hot} split alone; partition held over {iterations} iterations on {} maps; deep map {} cells",
        2 + inputs.len(),
        deep.active().len()
    ))
}

// ---------------------------------------------------------------- C11

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn hextraj(work: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hextraj"))
        .args(args)
        .arg("--config")
        .arg(fixture("smoke.conf"))
        .arg("--raw_path")
        .arg(fixture("trips_200.csv"))
        .arg("--work_dir")
        .arg(work)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "{} exited with {:?}: {}",
        args[0],
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap_or_default();
                out.push((p.strip_prefix(dir).unwrap_or(&p).display().to_string(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn pipeline(work: &Path) -> Result<(), String> {
    hextraj(work, &["ingest"])?;
    hextraj(work, &["train"])?;
    let test = fs::read_to_string(work.join("dataset/test.txt")).map_err(|e| e.to_string())?;
    let line = test.lines().find(|l| !l.starts_with('#')).ok_or("empty test split")?;
    let prefix = line.split_whitespace().take(L).collect::<Vec<_>>().join(" ");
    hextraj(work, &["predict", "--prefix", &prefix])?;
    hextraj(work, &["evaluate", "--markov"])?;
    Ok(())
}

fn end_to_end() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    pipeline(a.path())?;
    let first = t0.elapsed().as_secs_f64();
    ensure!(first < 180.0, "pipeline took {first:.0} s");
    pipeline(b.path())?;
    let fa = files(a.path());
    let fb = files(b.path());
    let names = |f: &[(String, Vec<u8>)]| f.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    ensure!(names(&fa) == names(&fb), "artifact sets differ: {:?} vs {:?}", names(&fa), names(&fb));
    for (x, y) in fa.iter().zip(&fb) {
        ensure!(x.1 == y.1, "{} differs between runs", x.0);
    }
    for required in ["model.ckpt", "predictions.csv", "predictions.geojson", "metrics.csv", "markov_metrics.csv"] {
        ensure!(fa.iter().any(|f| f.0 == required), "missing {required}");
    }
    let metrics = String::from_utf8_lossy(&fa.iter().find(|f| f.0 == "metrics.csv").unwrap().1).into_owned();
    let get = |m: &str| -> f64 {
        metrics
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{m},")))
            .and_then(|r| r.split(',').next())
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN)
    };
    let (a1, a3, a5) = (get("acc@1"), get("acc@3"), get("acc@5"));
    ensure!(a1 <= a3 && a3 <= a5, "Acc@1/3/5 = {a1}, {a3}, {a5}");
    Ok(format!(
        "pipeline {first:.1} s, {} artifacts identical across two runs; Acc@1 {a1:.4}",
        fa.len()
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: Vec::new() };
    suite.run("C1", "geometry", secs(10), geometry);
    suite.run("C2", "gradients", secs(60), gradients);
    suite.run("C3", "causality", secs(10), causality);
    suite.run("C4", "beam vs exhaustive", secs(60), beam_oracle);
    let mut syn = Synthetic {
        base: None,
        variant: None,
        variant_report: None,
        reports: Vec::new(),
    };
    suite.run("C5", "synthetic learnability", None, || learnability(&mut syn));
    suite.run("C6", "metrics", None, || metrics(&syn));
    suite.run("C7", "horizon and input-length trends", None, || trends(&syn));
    suite.run("C8", "beam-width tradeoff", None, || beam_width(&syn));
    suite.run("C9", "hierarchical map", secs(30), hiermap_suite);
    suite.run("C10", "adjacency ablation", None, || ablation(&syn));
    suite.run("C11", "end-to-end smoke", None, end_to_end);

    if suite.failed.is_empty() {
        println!("all 11 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", suite.failed.join(", "));
        ExitCode::FAILURE
    }
}
