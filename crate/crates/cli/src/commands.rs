//! The six pipeline stages. Each reads the artifacts of earlier stages from
//! the work directory, checks their embedded hashes against the current
//! configuration, and writes its own artifacts deterministically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hextraj_core::corpus::{
    filter_min_length, format_sequences, load_raw, parse_sequences, split_by_start_time, to_hex_sequence,
    CorpusStats, DatasetSplit, HexTrajectory, RawTrajectory, Vocabulary, make_windows,
};
use hextraj_core::decode::{beam_search, Adjacency, BeamConfig, GridAdjacency};
use hextraj_core::eval::{accuracy_at_n, bleu, evaluate, predict_cases, windows, BleuParams, EvalConfig};
use hextraj_core::hexgrid::GridSpec;
use hextraj_core::hiermap::{self, MixedAdjacency, MixedResolutionMap};
use hextraj_core::model::{
    load_checkpoint, train, write_checkpoint, Checkpoint, MarkovModel, NextBlockModel, TransformerModel,
};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::export;

const DATASET_DIR: &str = "dataset";
const SPLIT_FILES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];
const VOCAB_FILE: &str = "vocab.txt";
const MANIFEST_FILE: &str = "manifest.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";
const MAP_FILE: &str = "map.txt";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn mismatch(what: &str, found: &str, expected: &str, fix: &str) -> CliError {
    CliError::Data(format!(
        "{what} was built with config hash {found}, but the current configuration gives {expected}; {fix}"
    ))
}

/// Grid from the explicit anchor, else the mean of all points (4 decimals).
fn grid_for(cfg: &RunConfig, raw: &[RawTrajectory]) -> Result<GridSpec, CliError> {
    if let Some(spec) = cfg.anchor() {
        spec.validate()?;
        return Ok(spec);
    }
    let pts: Vec<_> = raw.iter().flat_map(|t| &t.points).collect();
    if pts.is_empty() {
        return Err(CliError::Data("raw file contains no points".into()));
    }
    let n = pts.len() as f64;
    let r = |v: f64| (v * 1e4).round() / 1e4;
    Ok(GridSpec::new(
        r(pts.iter().map(|p| p.lat).sum::<f64>() / n),
        r(pts.iter().map(|p| p.lon).sum::<f64>() / n),
    ))
}

/// Processed dataset as written by [`ingest`].
pub struct Dataset {
    pub dir: PathBuf,
    pub spec: GridSpec,
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub digest: String,
    pub map: Option<MixedResolutionMap>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let dir = cfg.work_dir.join(DATASET_DIR);
        let manifest = parse_kv(&read(&dir.join(MANIFEST_FILE))?);
        let found = manifest.get("config_hash").cloned().unwrap_or_default();
        if found != cfg.data_hash() {
            return Err(mismatch("the dataset", &found, &cfg.data_hash(), "rerun ingest"));
        }
        let texts = SPLIT_FILES
            .iter()
            .chain([&VOCAB_FILE])
            .map(|f| read(&dir.join(f)))
            .collect::<Result<Vec<_>, _>>()?;
        let dataset_digest = digest(&texts.iter().map(|t| t.as_bytes()).collect::<Vec<_>>());
        if manifest.get("dataset_digest") != Some(&dataset_digest) {
            return Err(CliError::Data(format!("dataset files in {} do not match their manifest", dir.display())));
        }
        let mut parts = Vec::new();
        let mut spec = None;
        for (f, t) in SPLIT_FILES.iter().zip(&texts) {
            let (header, seqs) = parse_sequences(t, &dir.join(f))?;
            let grid = header.strip_prefix("grid ").unwrap_or(&header);
            spec = Some(GridSpec::from_text(grid)?);
            parts.push(seqs);
        }
        let test = parts.pop().unwrap_or_default();
        let val = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        let map_text = cfg.map_path.as_deref().map(read).transpose()?;
        let map_digest = map_text.as_deref().map_or_else(String::new, |t| digest(&[t.as_bytes()]));
        if manifest.get("map_digest").map_or("", String::as_str) != map_digest {
            return Err(CliError::Data("the map file changed since ingest; rerun ingest".into()));
        }
        let map = map_text.as_deref().map(MixedResolutionMap::from_text).transpose()?;
        Ok(Dataset {
            dir,
            spec: spec.ok_or_else(|| CliError::Data("dataset without grid header".into()))?,
            split: DatasetSplit { train, val, test },
            vocab: Vocabulary::from_text(&texts[3])?,
            digest: dataset_digest,
            map,
        })
    }

    pub fn encode(&self, seqs: &[HexTrajectory]) -> Result<Vec<Vec<u32>>, CliError> {
        Ok(seqs
            .iter()
            .map(|t| self.vocab.encode_trajectory(t))
            .collect::<Result<_, _>>()?)
    }

    pub fn adjacency(&self) -> Result<Box<dyn Adjacency>, CliError> {
        Ok(match &self.map {
            Some(m) => Box::new(MixedAdjacency::new(m)?.with_vocab(&self.vocab)),
            None => Box::new(GridAdjacency::new(&self.vocab)),
        })
    }
}

pub fn ingest(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let raw = load_raw(cfg.raw_path()?)?;
    let mut map_digest = String::new();
    let (spec, seqs, res_label) = match &cfg.map_path {
        Some(p) => {
            let text = read(p)?;
            map_digest = digest(&[text.as_bytes()]);
            let map = MixedResolutionMap::from_text(&text)?;
            let adj = MixedAdjacency::new(&map)?;
            let seqs = hiermap::retokenize(&raw, &map, &adj)?;
            (map.spec.clone(), seqs, "mixed".to_string())
        }
        None => {
            let spec = grid_for(cfg, &raw)?;
            let seqs = raw
                .iter()
                .map(|t| to_hex_sequence(t, cfg.res, &spec))
                .collect::<Result<Vec<_>, _>>()?;
            (spec, seqs, cfg.res.to_string())
        }
    };
    let kept = filter_min_length(seqs, cfg.min_traj_len);
    let split = split_by_start_time(kept)?;
    let vocab = if cfg.strict {
        let v = Vocabulary::build_strict(&split);
        if let Some(c) = split.val.iter().chain(&split.test).flat_map(|t| &t.cells).find(|c| v.id(c).is_none()) {
            return Err(CliError::Data(format!("strict vocabulary: cell {c} does not occur in training data")));
        }
        v
    } else {
        Vocabulary::build(&split)
    };

    let hash = cfg.data_hash();
    let header = format!("grid {} res={res_label} config_hash={hash}", spec.to_text());
    let dir = cfg.work_dir.join(DATASET_DIR);
    let texts = [
        format_sequences(&header, &split.train),
        format_sequences(&header, &split.val),
        format_sequences(&header, &split.test),
        vocab.to_text(),
    ];
    for (f, t) in SPLIT_FILES.iter().chain([&VOCAB_FILE]).zip(&texts) {
        write(&dir.join(f), t)?;
    }
    let dataset_digest = digest(&texts.iter().map(|t| t.as_bytes()).collect::<Vec<_>>());
    let stats = CorpusStats::of(split.iter_all());
    let mut manifest = String::from("# dataset manifest\n");
    let _ = writeln!(manifest, "config_hash={hash}");
    let _ = writeln!(manifest, "dataset_digest={dataset_digest}");
    let _ = writeln!(manifest, "grid={}", spec.to_text());
    let _ = writeln!(manifest, "res={res_label}");
    let _ = writeln!(manifest, "map_digest={map_digest}");
    let _ = writeln!(manifest, "raw_trajectories={}", raw.len());
    let _ = writeln!(
        manifest,
        "train={}\nval={}\ntest={}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let _ = writeln!(manifest, "vocab_size={}", vocab.len());
    let _ = writeln!(
        manifest,
        "blocks={}\ntrajectories={}\navg_length={:.4}",
        stats.blocks, stats.trajectories, stats.avg_length
    );
    write(&dir.join(MANIFEST_FILE), manifest)?;

    Ok(format!(
        "#Block {}  #Trajectory {}  Avg. Length {:.2}\nsplit train/val/test = {}/{}/{}  vocab {}  (kept {} of {} raw)\n",
        stats.blocks,
        stats.trajectories,
        stats.avg_length,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        vocab.len(),
        stats.trajectories,
        raw.len()
    ))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let ds = Dataset::load(cfg)?;
    let to_windows = |seqs: Vec<Vec<u32>>| -> Vec<_> { seqs.iter().flat_map(|s| make_windows(s, cfg.l, cfg.k)).collect() };
    let train_w = to_windows(ds.encode(&ds.split.train)?);
    let val_w = to_windows(ds.encode(&ds.split.val)?);
    let mut model = TransformerModel::init(cfg.model_config(ds.vocab.len()))?;
    let report = train(&mut model, &train_w, &val_w, &cfg.train_config())?;

    let hash = cfg.model_hash();
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), hash.clone());
    meta.insert("data_hash".to_string(), cfg.data_hash());
    meta.insert("dataset_digest".to_string(), ds.digest.clone());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("l".to_string(), cfg.l.to_string());
    meta.insert("k".to_string(), cfg.k.to_string());
    let ck = Checkpoint { model, meta };
    let bytes = write_checkpoint(&ck)?;
    let path = cfg.work_dir.join(CHECKPOINT_FILE);
    write(&path, &bytes)?;

    let mut losses = String::from("epoch,train_loss,val_accuracy,config_hash\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let va = report.val_accuracy.get(i).map_or_else(String::new, |v| format!("{v:.6}"));
        let _ = writeln!(losses, "{},{l:.6},{va},{hash}", i + 1);
    }
    write(&cfg.work_dir.join("loss.csv"), losses)?;

    let mut manifest = String::from("# training manifest\n");
    let _ = writeln!(manifest, "config_hash={hash}");
    let _ = writeln!(manifest, "dataset_digest={}", ds.digest);
    let _ = writeln!(manifest, "checkpoint_digest={}", digest(&[&bytes]));
    let _ = writeln!(manifest, "params={}", ck.model.param_count());
    let _ = writeln!(manifest, "steps={}", report.steps);
    let _ = writeln!(manifest, "train_windows={}", train_w.len());
    let _ = writeln!(manifest, "first_batch_loss={:.6}", report.first_batch_loss);
    manifest.push_str("# configuration\n");
    manifest.push_str(&cfg.to_text().lines().filter(|l| !l.starts_with("work_dir=")).map(|l| format!("config.{l}\n")).collect::<String>());
    write(&cfg.work_dir.join("train_manifest.txt"), manifest)?;

    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} params for {} steps on {} windows; loss {:.4} -> {:.4}\n",
        ck.model.param_count(),
        report.steps,
        train_w.len(),
        report.first_batch_loss,
        last
    ))
}

fn load_model(cfg: &RunConfig, ds: &Dataset) -> Result<TransformerModel, CliError> {
    let ck = load_checkpoint(&cfg.work_dir.join(CHECKPOINT_FILE))?;
    let found = ck.meta.get("config_hash").cloned().unwrap_or_default();
    if found != cfg.model_hash() {
        return Err(mismatch("the checkpoint", &found, &cfg.model_hash(), "rerun train"));
    }
    if ck.meta.get("dataset_digest") != Some(&ds.digest) {
        return Err(CliError::Data("the checkpoint was trained on a different dataset; rerun train".into()));
    }
    if ck.model.config().vocab_size != ds.vocab.len() {
        return Err(CliError::Data("checkpoint vocabulary size differs from the dataset".into()));
    }
    Ok(ck.model)
}

/// Token ids of a space-separated prefix. Unknown cells are an error in
/// strict mode and skipped otherwise.
fn parse_prefix(cfg: &RunConfig, vocab: &Vocabulary, prefix: &str) -> Result<Vec<u32>, CliError> {
    let mut ids = Vec::new();
    for tok in prefix.split_whitespace() {
        match vocab.parse_token(tok) {
            Ok(id) if id >= 2 => ids.push(id),
            Ok(_) => return Err(CliError::Data(format!("prefix may not contain reserved token {tok}"))),
            Err(e) if cfg.strict => return Err(e.into()),
            Err(e) => log::warn!("skipping prefix token {tok}: {e}"),
        }
    }
    if ids.is_empty() {
        return Err(CliError::Data("prefix has no known cells".into()));
    }
    let start = ids.len().saturating_sub(cfg.l);
    Ok(ids.split_off(start))
}

pub fn predict(cfg: &RunConfig, prefix: &str) -> Result<String, CliError> {
    cfg.validate()?;
    let ds = Dataset::load(cfg)?;
    let model = load_model(cfg, &ds)?;
    let ids = parse_prefix(cfg, &ds.vocab, prefix)?;
    let beam = BeamConfig {
        width: cfg.beam_width,
        horizon: cfg.k,
        renormalize: true,
    };
    let adj = ds.adjacency()?;
    let hyps = beam_search(&model, &ids, &beam, adj.as_ref())?;
    let hash = cfg.eval_hash();
    write(
        &cfg.work_dir.join("predictions.csv"),
        export::predictions_csv(&hyps, &ds.vocab, &hash),
    )?;
    write(
        &cfg.work_dir.join("predictions.geojson"),
        export::predictions_geojson(&hyps, &ds.vocab, &ds.spec),
    )?;
    let mut out = String::new();
    for (i, h) in hyps.iter().enumerate() {
        let path: Vec<String> = h.generated().iter().map(|&t| ds.vocab.token_str(t)).collect();
        let _ = writeln!(out, "{:>2}  {:>10.4}  {}", i + 1, h.log_prob, path.join(" "));
    }
    Ok(out)
}

pub fn evaluate_cmd(cfg: &RunConfig, markov: bool) -> Result<String, CliError> {
    cfg.validate()?;
    let ds = Dataset::load(cfg)?;
    let model = load_model(cfg, &ds)?;
    let test = ds.encode(&ds.split.test)?;
    let adj = ds.adjacency()?;
    let ecfg = EvalConfig::new(cfg.l, cfg.k, cfg.beam_width);
    let report = evaluate(&model, &test, &ds.vocab, &ds.spec, adj.as_ref(), &ecfg)?;
    let hash = cfg.eval_hash();
    write(&cfg.work_dir.join("metrics.csv"), report.to_csv(&hash, cfg.seed))?;
    let mut out = report.to_table();

    if markov {
        let train_seqs = ds.encode(&ds.split.train)?;
        let mc = MarkovModel::fit(&train_seqs, adj.as_ref(), ds.vocab.len(), true)?;
        let r = evaluate(&mc, &test, &ds.vocab, &ds.spec, adj.as_ref(), &ecfg)?;
        write(&cfg.work_dir.join("markov_metrics.csv"), r.to_csv(&hash, cfg.seed))?;
        let _ = write!(out, "\nfirst-order Markov baseline\n{}", r.to_table());
    }

    if !cfg.sweep_l.is_empty() && !cfg.sweep_k.is_empty() {
        let mut csv = String::from("l,k,cases,acc@1,acc@3,acc@5,bleu,config_hash\n");
        for &l in &cfg.sweep_l {
            for &k in &cfg.sweep_k {
                if l == 0 || k == 0 || l + k > model.context_len() {
                    return Err(CliError::Usage(format!(
                        "sweep point l={l}, k={k} does not fit context length {}",
                        model.context_len()
                    )));
                }
                let pairs = windows(&test, l, k);
                if pairs.is_empty() {
                    let _ = writeln!(csv, "{l},{k},0,,,,,{hash}");
                    continue;
                }
                let beam = BeamConfig {
                    width: cfg.beam_width,
                    horizon: k,
                    renormalize: true,
                };
                let cases = predict_cases(&model, &pairs, &beam, adj.as_ref(), ecfg.chunk)?;
                let acc = |n: usize| -> Result<String, CliError> {
                    Ok(if n <= cfg.beam_width || n == 1 {
                        format!("{:.6}", accuracy_at_n(&cases, n)?)
                    } else {
                        String::new()
                    })
                };
                let b = bleu(&cases, &BleuParams::default())?;
                let _ = writeln!(csv, "{l},{k},{},{},{},{},{b:.6},{hash}", cases.len(), acc(1)?, acc(3)?, acc(5)?);
            }
        }
        write(&cfg.work_dir.join("sweep.csv"), csv)?;
        out.push_str("sweep written to sweep.csv\n");
    }
    Ok(out)
}

pub fn hiermap_cmd(cfg: &RunConfig) -> Result<String, CliError> {
    let raw = load_raw(cfg.raw_path()?)?;
    let spec = grid_for(cfg, &raw)?;
    let mut params = cfg.split_params();
    if cfg.delta.is_none() || cfg.phi.is_none() {
        let (d, p) = hiermap::median_thresholds(&raw, &spec, &params)?;
        params.delta = cfg.delta.unwrap_or(d);
        params.phi = cfg.phi.unwrap_or(p);
    }
    let map = hiermap::generate(&raw, &spec, &params)?;
    map.validate()?;
    let hash = cfg.map_hash();
    let text = format!("# config_hash={hash}\n{}", map.to_text());
    let path = cfg.map_path.clone().unwrap_or_else(|| cfg.work_dir.join(MAP_FILE));
    write(&path, text)?;
    write(
        &path.with_extension("geojson"),
        export::cells_geojson(map.active().iter().copied(), &spec),
    )?;
    let mut by_res: BTreeMap<u8, usize> = BTreeMap::new();
    for c in map.active() {
        *by_res.entry(c.res).or_default() += 1;
    }
    let mix: Vec<String> = by_res.iter().map(|(r, n)| format!("res {r}: {n}")).collect();
    Ok(format!(
        "map {}: {} base cells -> {} active ({}); {} splits in {} iterations, stopped on {}; delta={:.4} phi={:.4} theta={}\n",
        path.display(),
        map.base().len(),
        map.active().len(),
        mix.join(", "),
        map.lineage.len(),
        map.iterations,
        map.stop,
        params.delta,
        params.phi,
        params.theta
    ))
}

pub fn attention(cfg: &RunConfig, prefix: &str, layer: Option<usize>) -> Result<String, CliError> {
    cfg.validate()?;
    let ds = Dataset::load(cfg)?;
    let model = load_model(cfg, &ds)?;
    let ids = parse_prefix(cfg, &ds.vocab, prefix)?;
    let (_, maps) = model.forward_with_attention(&ids, layer)?;
    write(&cfg.work_dir.join("attention.csv"), export::attention_csv(&maps, &cfg.model_hash()))?;
    Ok(format!(
        "attention of layer {} over {} tokens ({} heads) written to attention.csv\n",
        maps.layer,
        maps.seq,
        maps.heads.len()
    ))
}
