//! From raw GPS points to tokenized, windowed hexagon sequences.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hexgrid::{self, GridSpec, HexCell};

pub const PAD: u32 = 0;
pub const EOT: u32 = 1;
pub const PAD_TOKEN: &str = "PAD";
pub const EOT_TOKEN: &str = "EOT";

/// Minimum number of cells (EOT excluded) a trajectory needs to be kept.
pub const DEFAULT_MIN_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    pub entity_id: String,
    pub points: Vec<RawPoint>,
}

impl RawTrajectory {
    pub fn start_time(&self) -> f64 {
        self.points.first().map_or(0.0, |p| p.timestamp)
    }
}

/// A trajectory as a walk over cells. Consecutive cells are adjacent and distinct.
#[derive(Clone, Debug, PartialEq)]
pub struct HexTrajectory {
    pub start_time: f64,
    pub cells: Vec<HexCell>,
    /// Whether the walk ends with an end-of-trajectory marker.
    pub terminated: bool,
}

impl HexTrajectory {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    entity_id: String,
    timestamp: f64,
    lat: f64,
    lon: f64,
}

/// Reads `entity_id,timestamp,lat,lon` rows, grouping by id in order of first
/// appearance and sorting each group's points by time.
pub fn load_raw(path: &Path) -> Result<Vec<RawTrajectory>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_raw_from(file, path)
}

pub fn load_raw_from<R: Read>(reader: R, path: &Path) -> Result<Vec<RawTrajectory>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(parse_err(1, e.to_string())),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Vec::new());
    }
    let expected = ["entity_id", "timestamp", "lat", "lon"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(1, format!("expected header {}, got {:?}", expected.join(","), headers)));
    }

    let mut order: Vec<RawTrajectory> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for result in rdr.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: CsvRow = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        if !row.timestamp.is_finite()
            || !row.lat.is_finite()
            || !row.lon.is_finite()
            || row.lat.abs() > 90.0
            || row.lon.abs() > 180.0
        {
            return Err(parse_err(
                line,
                format!("coordinate out of range: lat={}, lon={}, t={}", row.lat, row.lon, row.timestamp),
            ));
        }
        let slot = *index.entry(row.entity_id.clone()).or_insert_with(|| {
            order.push(RawTrajectory {
                entity_id: row.entity_id.clone(),
                points: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].points.push(RawPoint {
            timestamp: row.timestamp,
            lat: row.lat,
            lon: row.lon,
        });
    }
    for t in &mut order {
        t.points.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(order)
}

/// Appends `next` to a cell walk, filling a gap with the interior of
/// `bridge(last, next)` and skipping repeats.
pub(crate) fn push_bridged<F>(cells: &mut Vec<HexCell>, next: HexCell, bridge: F) -> Result<()>
where
    F: FnOnce(HexCell, HexCell) -> Result<Vec<HexCell>>,
{
    match cells.last() {
        Some(&last) if last == next => {}
        Some(&last) => {
            let path = bridge(last, next)?;
            // path runs last..=next; drop the already-present head
            cells.extend(path.into_iter().skip(1));
        }
        None => cells.push(next),
    }
    Ok(())
}

pub fn to_hex_sequence(t: &RawTrajectory, res: u8, spec: &GridSpec) -> Result<HexTrajectory> {
    spec.check_res(res)?;
    let mut cells = Vec::new();
    for p in &t.points {
        let cell = hexgrid::point_to_cell(hexgrid::project(p.lat, p.lon, spec)?, res, spec)?;
        push_bridged(&mut cells, cell, |a, b| {
            if hexgrid::hex_distance(a, b)? > 1 {
                hexgrid::grid_line(a, b)
            } else {
                Ok(vec![a, b])
            }
        })?;
    }
    Ok(HexTrajectory {
        start_time: t.start_time(),
        cells,
        terminated: true,
    })
}

pub fn filter_min_length(seqs: Vec<HexTrajectory>, min_len: usize) -> Vec<HexTrajectory> {
    seqs.into_iter().filter(|s| s.cells.len() >= min_len).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<HexTrajectory>,
    pub val: Vec<HexTrajectory>,
    pub test: Vec<HexTrajectory>,
}

impl DatasetSplit {
    pub fn iter_all(&self) -> impl Iterator<Item = &HexTrajectory> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Chronological 70/10/20 split. Train and validation sizes are rounded down
/// and the remainder goes to test.
pub fn split_by_start_time(mut seqs: Vec<HexTrajectory>) -> Result<DatasetSplit> {
    if seqs.len() < 10 {
        return Err(Error::TooFewSequences {
            needed: 10,
            got: seqs.len(),
        });
    }
    seqs.sort_by(|a, b| a.start_time.total_cmp(&b.start_time));
    let n = seqs.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = seqs.split_off(n_train + n_val);
    let val = seqs.split_off(n_train);
    Ok(DatasetSplit { train: seqs, val, test })
}

/// Bijection between cells and integer token ids; ids 0 and 1 are reserved
/// for padding and end-of-trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    cells: Vec<HexCell>,
    index: HashMap<HexCell, u32>,
}

impl Vocabulary {
    pub fn from_cells<I: IntoIterator<Item = HexCell>>(cells: I) -> Self {
        let mut v = Vocabulary {
            cells: Vec::new(),
            index: HashMap::new(),
        };
        for c in cells {
            v.insert(c);
        }
        v
    }

    fn insert(&mut self, c: HexCell) -> u32 {
        if let Some(&id) = self.index.get(&c) {
            return id;
        }
        let id = self.cells.len() as u32 + 2;
        self.cells.push(c);
        self.index.insert(c, id);
        id
    }

    /// Ids in first-occurrence order over train, then validation, then test.
    pub fn build(split: &DatasetSplit) -> Self {
        Self::from_cells(split.iter_all().flat_map(|t| t.cells.iter().copied()))
    }

    /// Vocabulary of training cells only; encoding anything else fails.
    pub fn build_strict(split: &DatasetSplit) -> Self {
        Self::from_cells(split.train.iter().flat_map(|t| t.cells.iter().copied()))
    }

    /// Number of ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.cells.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn id(&self, c: &HexCell) -> Option<u32> {
        self.index.get(c).copied()
    }

    pub fn encode(&self, c: &HexCell) -> Result<u32> {
        self.id(c).ok_or_else(|| Error::UnknownToken(c.to_string()))
    }

    pub fn cell(&self, id: u32) -> Option<HexCell> {
        id.checked_sub(2).and_then(|i| self.cells.get(i as usize)).copied()
    }

    pub fn cells(&self) -> &[HexCell] {
        &self.cells
    }

    pub fn token_str(&self, id: u32) -> String {
        match id {
            PAD => PAD_TOKEN.to_string(),
            EOT => EOT_TOKEN.to_string(),
            _ => self.cell(id).map_or_else(|| format!("<{id}>"), |c| c.to_string()),
        }
    }

    pub fn parse_token(&self, tok: &str) -> Result<u32> {
        match tok {
            PAD_TOKEN => Ok(PAD),
            EOT_TOKEN => Ok(EOT),
            _ => self.encode(&tok.parse()?),
        }
    }

    /// Token ids of a trajectory, with EOT appended when it is terminated.
    pub fn encode_trajectory(&self, t: &HexTrajectory) -> Result<Vec<u32>> {
        let mut ids = t.cells.iter().map(|c| self.encode(c)).collect::<Result<Vec<_>>>()?;
        if t.terminated {
            ids.push(EOT);
        }
        Ok(ids)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{PAD_TOKEN}\n{EOT_TOKEN}\n");
        for c in &self.cells {
            let _ = writeln!(out, "{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        if lines.next() != Some(PAD_TOKEN) || lines.next() != Some(EOT_TOKEN) {
            return Err(Error::Format("vocabulary must start with PAD and EOT".into()));
        }
        let mut v = Vocabulary::from_cells(std::iter::empty());
        for line in lines {
            let c: HexCell = line.trim().parse()?;
            if v.index.contains_key(&c) {
                return Err(Error::Format(format!("duplicate vocabulary entry {c}")));
            }
            v.insert(c);
        }
        Ok(v)
    }
}

/// A training sample: `tokens` plus a mask marking the supervised positions
/// (everything after the first `l` tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingWindow {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainingWindow {
    fn new(tokens: &[u32], l: usize) -> Self {
        TrainingWindow {
            tokens: tokens.to_vec(),
            loss_mask: (0..tokens.len()).map(|i| i >= l).collect(),
        }
    }
}

/// Stride-1 windows of length `l + k`, plus the shorter windows of length
/// `l + 1 .. l + k - 1` that end on the final token.
pub fn make_windows(tokens: &[u32], l: usize, k: usize) -> Vec<TrainingWindow> {
    let n = tokens.len();
    if l == 0 || k == 0 || n < l + 1 {
        return Vec::new();
    }
    let mut out = Vec::new();
    if n >= l + k {
        for start in 0..=(n - l - k) {
            out.push(TrainingWindow::new(&tokens[start..start + l + k], l));
        }
    }
    for len in ((l + 1)..(l + k)).rev() {
        if len <= n {
            out.push(TrainingWindow::new(&tokens[n - len..], l));
        }
    }
    out
}

/// Summary counts in the style of a dataset statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub blocks: usize,
    pub trajectories: usize,
    pub avg_length: f64,
}

impl CorpusStats {
    pub fn of<'a, I: IntoIterator<Item = &'a HexTrajectory>>(seqs: I) -> Self {
        let mut blocks = BTreeSet::new();
        let (mut n, mut total) = (0usize, 0usize);
        for s in seqs {
            n += 1;
            total += s.cells.len();
            blocks.extend(s.cells.iter().copied());
        }
        CorpusStats {
            blocks: blocks.len(),
            trajectories: n,
            avg_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        }
    }
}

/// Serializes trajectories one per line as space-separated cell tokens,
/// terminated trajectories ending in a literal `EOT`.
pub fn format_sequences(header: &str, seqs: &[HexTrajectory]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {header}");
    for s in seqs {
        let mut line = s.cells.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        if s.terminated {
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(EOT_TOKEN);
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Parses [`format_sequences`] output; returns the header (without `# `) and
/// the trajectories. Start times are not stored, so they are set to the line index.
pub fn parse_sequences(text: &str, path: &Path) -> Result<(String, Vec<HexTrajectory>)> {
    let mut header = String::new();
    let mut seqs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix('#') {
            if i == 0 {
                header = h.trim().to_string();
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = Vec::new();
        let mut terminated = false;
        for tok in line.split_whitespace() {
            if terminated {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "token after EOT".into(),
                });
            }
            if tok == EOT_TOKEN {
                terminated = true;
            } else {
                cells.push(tok.parse::<HexCell>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?);
            }
        }
        seqs.push(HexTrajectory {
            start_time: seqs.len() as f64,
            cells,
            terminated,
        });
    }
    Ok((header, seqs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexgrid::{cell_centroid, hex_distance, unproject, PlanarPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn load(text: &str) -> Result<Vec<RawTrajectory>> {
        load_raw_from(text.as_bytes(), Path::new("mem.csv"))
    }

    fn seq(n: usize, start: f64) -> HexTrajectory {
        HexTrajectory {
            start_time: start,
            cells: (0..n as i32).map(|i| HexCell::new(8, i, 0)).collect(),
            terminated: true,
        }
    }

    fn raw_from_cells(cells: &[HexCell], spec: &GridSpec) -> RawTrajectory {
        RawTrajectory {
            entity_id: "x".into(),
            points: cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let (lat, lon) = unproject(cell_centroid(*c, spec), spec);
                    RawPoint {
                        timestamp: i as f64,
                        lat,
                        lon,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn load_groups_and_sorts() {
        let t = load("entity_id,timestamp,lat,lon\na,10,41.1,-8.6\na,5,41.2,-8.5\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].points.len(), 2);
        assert_eq!(t[0].points[0].timestamp, 5.0);
        assert_eq!(t[0].points[1].lat, 41.1);
    }

    #[test]
    fn load_keeps_first_appearance_order() {
        let t = load("entity_id,timestamp,lat,lon\nb,1,0,0\na,1,0,0\nb,2,0,0\n").unwrap();
        let ids: Vec<_> = t.iter().map(|t| t.entity_id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
    }

    #[test]
    fn load_reports_line_of_bad_row() {
        let err = load("entity_id,timestamp,lat,lon\na,1,41.1,-8.6\na,2,north,-8.6\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(load("id,t,x,y\n").is_err());
    }

    #[test]
    fn load_empty_file() {
        assert!(load("").unwrap().is_empty());
        assert!(load("entity_id,timestamp,lat,lon\n").unwrap().is_empty());
    }

    #[test]
    fn single_cell_trajectory() {
        let spec = GridSpec::new(41.15, -8.61);
        let c = HexCell::new(8, 2, 3);
        let raw = raw_from_cells(&[c, c, c], &spec);
        let h = to_hex_sequence(&raw, 8, &spec).unwrap();
        assert_eq!(h.cells, vec![c]);
        assert!(h.terminated);
    }

    #[test]
    fn gaps_are_bridged_along_the_axis() {
        let spec = GridSpec::new(41.15, -8.61);
        let raw = raw_from_cells(&[HexCell::new(8, 0, 0), HexCell::new(8, 3, 0)], &spec);
        let h = to_hex_sequence(&raw, 8, &spec).unwrap();
        let qs: Vec<_> = h.cells.iter().map(|c| (c.q, c.r)).collect();
        assert_eq!(qs, vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
    }

    #[test]
    fn random_walks_satisfy_adjacency() {
        let spec = GridSpec::new(41.15, -8.61);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = spec.edge(9);
        for _ in 0..1000 {
            let mut p = PlanarPoint::new(0.0, 0.0);
            let mut points = Vec::new();
            for i in 0..rng.random_range(1..30) {
                p.x += rng.random_range(-4.0 * e..4.0 * e);
                p.y += rng.random_range(-4.0 * e..4.0 * e);
                let (lat, lon) = unproject(p, &spec);
                points.push(RawPoint { timestamp: i as f64, lat, lon });
            }
            let raw = RawTrajectory { entity_id: "w".into(), points };
            let h = to_hex_sequence(&raw, 9, &spec).unwrap();
            for w in h.cells.windows(2) {
                assert_eq!(hex_distance(w[0], w[1]).unwrap(), 1);
            }
        }
    }

    #[test]
    fn min_length_filter() {
        let kept = filter_min_length(vec![seq(14, 0.0), seq(15, 1.0)], DEFAULT_MIN_LEN);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].len(), 15);
        assert!(filter_min_length(Vec::new(), 15).is_empty());
    }

    #[test]
    fn split_proportions() {
        let seqs: Vec<_> = (0..100).rev().map(|i| seq(3, i as f64)).collect();
        let s = split_by_start_time(seqs).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let times: Vec<_> = s.iter_all().map(|t| t.start_time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));

        let s = split_by_start_time((0..10).map(|i| seq(3, i as f64)).collect()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert!(matches!(
            split_by_start_time(vec![seq(3, 0.0); 9]),
            Err(Error::TooFewSequences { .. })
        ));
    }

    #[test]
    fn vocabulary_ids_and_round_trip() {
        let cells: Vec<_> = (0..5).map(|i| HexCell::new(8, i, -i)).collect();
        let t = HexTrajectory {
            start_time: 0.0,
            cells: cells.iter().chain(cells.iter().rev()).copied().collect(),
            terminated: true,
        };
        let split = DatasetSplit {
            train: vec![t.clone()],
            ..Default::default()
        };
        let v = Vocabulary::build(&split);
        assert_eq!(v.len(), 7);
        assert_eq!(v, Vocabulary::build(&split));
        assert_eq!(v.id(&cells[0]), Some(2));
        let ids = v.encode_trajectory(&t).unwrap();
        assert_eq!(*ids.last().unwrap(), EOT);
        for (id, c) in ids.iter().zip(&t.cells) {
            assert_eq!(v.cell(*id), Some(*c));
        }
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(v.encode(&HexCell::new(8, 99, 99)).is_err());
    }

    #[test]
    fn strict_vocabulary_rejects_unseen_cells() {
        let split = DatasetSplit {
            train: vec![seq(3, 0.0)],
            val: vec![],
            test: vec![seq(5, 1.0)],
        };
        let strict = Vocabulary::build_strict(&split);
        assert!(strict.encode_trajectory(&split.test[0]).is_err());
        assert!(Vocabulary::build(&split).encode_trajectory(&split.test[0]).is_ok());
    }

    #[test]
    fn window_enumeration() {
        let tokens: Vec<u32> = (2..18).chain([EOT]).collect();
        assert_eq!(tokens.len(), 17);
        let w = make_windows(&tokens, 10, 5);
        assert_eq!(w.len(), 7);
        let lens: Vec<_> = w.iter().map(|w| w.tokens.len()).collect();
        assert_eq!(lens, vec![15, 15, 15, 14, 13, 12, 11]);
        for win in &w[3..] {
            assert_eq!(*win.tokens.last().unwrap(), EOT);
        }
        for win in &w {
            assert!(win.loss_mask.iter().any(|&m| m));
            assert_eq!(win.loss_mask.iter().filter(|&&m| !m).count(), 10);
        }

        let short: Vec<u32> = (2..12).chain([EOT]).collect();
        let w = make_windows(&short, 10, 5);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].tokens.len(), 11);
        assert!(make_windows(&short[..10], 10, 5).is_empty());
    }

    #[test]
    fn windows_cover_every_target_position() {
        for n in 11..40usize {
            let tokens: Vec<u32> = (0..n as u32).collect();
            let windows = make_windows(&tokens, 10, 5);
            let mut covered = vec![false; n];
            for w in &windows {
                let start = w.tokens[0] as usize;
                for (i, m) in w.loss_mask.iter().enumerate() {
                    if *m {
                        covered[start + i] = true;
                    }
                }
            }
            assert!(covered[10..].iter().all(|&c| c), "n={n}");
        }
    }

    #[test]
    fn sequence_file_round_trip() {
        let mut open = seq(4, 1.0);
        open.terminated = false;
        let seqs = vec![seq(3, 0.0), open];
        let text = format_sequences("hextraj-dataset v1", &seqs);
        assert!(text.lines().nth(1).unwrap().ends_with(" EOT"));
        let (header, parsed) = parse_sequences(&text, Path::new("x")).unwrap();
        assert_eq!(header, "hextraj-dataset v1");
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].cells, seqs[0].cells);
        assert!(!parsed[1].terminated);
    }

    #[test]
    fn stats_count_blocks() {
        let s = CorpusStats::of(&[seq(3, 0.0), seq(5, 0.0)]);
        assert_eq!((s.blocks, s.trajectories), (5, 2));
        assert!((s.avg_length - 4.0).abs() < 1e-12);
    }
}
