//! Density-driven mixed-resolution maps: iterative refinement of a base
//! tessellation, adjacency across resolutions, and retokenization.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};

use crate::corpus::{push_bridged, HexTrajectory, RawTrajectory, Vocabulary, EOT};
use crate::decode::Adjacency;
use crate::error::{Error, Result};
use crate::hexgrid::{
    self, cell_centroid, cells_covering, children, descendants, neighbors, parent, point_to_cell, project, GridSpec,
    HexCell, PlanarPoint,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SplitParams {
    /// Visit-count threshold δ.
    pub delta: f64,
    /// Spatial-variability threshold φ (dimensionless).
    pub phi: f64,
    /// Skewness threshold θ; refinement stops once skewness drops below it.
    pub theta: f64,
    pub r_min: u8,
    pub r_max: u8,
    pub max_iter: usize,
    /// Count distinct trajectories per cell instead of raw points.
    pub count_trajectories: bool,
}

impl SplitParams {
    pub fn new(r_min: u8, r_max: u8) -> Self {
        SplitParams {
            delta: 0.0,
            phi: 0.0,
            theta: 1.0,
            r_min,
            r_max,
            max_iter: 10,
            count_trajectories: false,
        }
    }

    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        spec.check_res(self.r_min)?;
        spec.check_res(self.r_max)?;
        if self.r_min > self.r_max {
            return Err(Error::Config(format!("r_min {} > r_max {}", self.r_min, self.r_max)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        for (name, v) in [("delta", self.delta), ("phi", self.phi), ("theta", self.theta)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "delta={:?} phi={:?} theta={:?} r_min={} r_max={} max_iter={} count_trajectories={}",
            self.delta, self.phi, self.theta, self.r_min, self.r_max, self.max_iter, self.count_trajectories
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let kv: HashMap<&str, &str> = text.split_whitespace().filter_map(|t| t.split_once('=')).collect();
        fn get<T: std::str::FromStr>(kv: &HashMap<&str, &str>, k: &str) -> Result<T> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("missing {k} in map parameters")))?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k} in map parameters")))
        }
        Ok(SplitParams {
            delta: get(&kv, "delta")?,
            phi: get(&kv, "phi")?,
            theta: get(&kv, "theta")?,
            r_min: get(&kv, "r_min")?,
            r_max: get(&kv, "r_max")?,
            max_iter: get(&kv, "max_iter")?,
            count_trajectories: get(&kv, "count_trajectories")?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CellStats {
    /// Visits f(h).
    pub count: f64,
    /// Trace of the point covariance divided by edge², γ(h).
    pub gamma: f64,
}

pub type FrequencyMap = BTreeMap<HexCell, CellStats>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Skewness,
    NoSplits,
    MaxIter,
    Empty,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Skewness => "skewness",
            StopReason::NoSplits => "no-splits",
            StopReason::MaxIter => "max-iter",
            StopReason::Empty => "empty",
        })
    }
}

impl std::str::FromStr for StopReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "skewness" => StopReason::Skewness,
            "no-splits" => StopReason::NoSplits,
            "max-iter" => StopReason::MaxIter,
            "empty" => StopReason::Empty,
            _ => return Err(Error::Format(format!("unknown stop reason {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedResolutionMap {
    pub spec: GridSpec,
    pub params: SplitParams,
    base: BTreeSet<HexCell>,
    active: BTreeSet<HexCell>,
    split: BTreeSet<HexCell>,
    /// `(cell, iteration)` for every split, in order.
    pub lineage: Vec<(HexCell, usize)>,
    pub iterations: usize,
    pub stop: StopReason,
}

impl MixedResolutionMap {
    /// An unrefined map over `base` (all at `params.r_min`).
    pub fn uniform(spec: GridSpec, params: SplitParams, base: impl IntoIterator<Item = HexCell>) -> Result<Self> {
        params.validate(&spec)?;
        let base: BTreeSet<HexCell> = base.into_iter().collect();
        if let Some(c) = base.iter().find(|c| c.res != params.r_min) {
            return Err(Error::Config(format!("base cell {c} not at resolution {}", params.r_min)));
        }
        Ok(MixedResolutionMap {
            spec,
            params,
            active: base.clone(),
            base,
            split: BTreeSet::new(),
            lineage: Vec::new(),
            iterations: 0,
            stop: StopReason::NoSplits,
        })
    }

    pub fn active(&self) -> &BTreeSet<HexCell> {
        &self.active
    }

    pub fn base(&self) -> &BTreeSet<HexCell> {
        &self.base
    }

    pub fn is_active(&self, c: &HexCell) -> bool {
        self.active.contains(c)
    }

    /// Replaces an active cell by its seven children.
    pub fn split_cell(&mut self, c: HexCell, iteration: usize) -> Result<()> {
        if !self.active.remove(&c) {
            return Err(Error::InactiveCell(c));
        }
        if c.res >= self.params.r_max {
            self.active.insert(c);
            return Err(Error::Resolution {
                res: c.res + 1,
                min: self.params.r_min,
                max: self.params.r_max,
            });
        }
        self.active.extend(children(c, &self.spec)?);
        self.split.insert(c);
        self.lineage.push((c, iteration));
        Ok(())
    }

    /// Deepest active cell containing `p`, descending from the base cell to
    /// the nearest child centroid at each split.
    pub fn locate(&self, p: PlanarPoint) -> Result<Option<HexCell>> {
        let mut c = point_to_cell(p, self.params.r_min, &self.spec)?;
        if !self.base.contains(&c) {
            return Ok(None);
        }
        while self.split.contains(&c) {
            let kids = children(c, &self.spec)?;
            c = *kids
                .iter()
                .min_by(|a, b| {
                    let da = cell_centroid(**a, &self.spec).distance(&p);
                    let db = cell_centroid(**b, &self.spec).distance(&p);
                    da.total_cmp(&db).then(a.cmp(b))
                })
                .expect("seven children");
        }
        Ok(Some(c))
    }

    /// The active cell that is `c` or one of its ancestors, if any.
    pub fn active_ancestor(&self, c: HexCell) -> Option<HexCell> {
        let mut cur = c;
        loop {
            if self.active.contains(&cur) {
                return Some(cur);
            }
            if cur.res <= self.params.r_min {
                return None;
            }
            cur = parent(cur, &self.spec).ok()?;
        }
    }

    /// Active cells touching `c` across any resolution boundary.
    pub fn mixed_neighbors(&self, c: HexCell) -> Result<BTreeSet<HexCell>> {
        if !self.active.contains(&c) {
            return Err(Error::InactiveCell(c));
        }
        let inside: BTreeSet<HexCell> = descendants(c, self.params.r_max, &self.spec)?.into_iter().collect();
        let mut out = BTreeSet::new();
        for d in &inside {
            for n in neighbors(*d) {
                if inside.contains(&n) {
                    continue;
                }
                if let Some(a) = self.active_ancestor(n) {
                    out.insert(a);
                }
            }
        }
        out.remove(&c);
        Ok(out)
    }

    /// Checks that active cells exactly partition the base region.
    pub fn validate(&self) -> Result<()> {
        for b in &self.base {
            if self.active.contains(b) == self.split.contains(b) {
                return Err(Error::Invariant(format!("base cell {b} must be either active or split")));
            }
        }
        for s in &self.split {
            for k in children(*s, &self.spec)? {
                if self.active.contains(&k) == self.split.contains(&k) {
                    return Err(Error::Invariant(format!("child {k} of split {s} is neither active nor split")));
                }
            }
        }
        for a in &self.active {
            if a.res < self.params.r_min || a.res > self.params.r_max {
                return Err(Error::Invariant(format!("active cell {a} outside resolution range")));
            }
            let mut cur = *a;
            while cur.res > self.params.r_min {
                cur = parent(cur, &self.spec)?;
                if !self.split.contains(&cur) {
                    return Err(Error::Invariant(format!("ancestor {cur} of {a} was never split")));
                }
            }
            if !self.base.contains(&cur) {
                return Err(Error::Invariant(format!("{a} lies outside the base region")));
            }
        }
        Ok(())
    }

    /// Header, active cells, then `SPLIT` lineage lines.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# mixed-resolution map\n");
        let _ = writeln!(s, "# params {}", self.params.to_text());
        let _ = writeln!(s, "# grid {}", self.spec.to_text());
        let _ = writeln!(s, "# iterations={} stop={}", self.iterations, self.stop);
        let _ = writeln!(s, "# base {}", self.base.len());
        for b in &self.base {
            let _ = writeln!(s, "BASE {b}");
        }
        for c in &self.active {
            let _ = writeln!(s, "{c}");
        }
        for (c, it) in &self.lineage {
            let _ = writeln!(s, "SPLIT {c} iter={it}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut params = None;
        let mut spec = None;
        let (mut iterations, mut stop) = (0, StopReason::NoSplits);
        let mut base = Vec::new();
        let mut active = BTreeSet::new();
        let mut lineage = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |m: &str| Error::Format(format!("map line {}: {m}", i + 1));
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# params ") {
                params = Some(SplitParams::from_text(rest)?);
            } else if let Some(rest) = line.strip_prefix("# grid ") {
                spec = Some(GridSpec::from_text(rest)?);
            } else if let Some(rest) = line.strip_prefix("# iterations=") {
                let (n, r) = rest.split_once(" stop=").ok_or_else(|| bad("bad iterations line"))?;
                iterations = n.parse().map_err(|_| bad("bad iteration count"))?;
                stop = r.parse()?;
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else if let Some(rest) = line.strip_prefix("BASE ") {
                base.push(rest.parse::<HexCell>()?);
            } else if let Some(rest) = line.strip_prefix("SPLIT ") {
                let (c, it) = rest.split_once(" iter=").ok_or_else(|| bad("bad SPLIT line"))?;
                lineage.push((c.parse::<HexCell>()?, it.parse().map_err(|_| bad("bad iteration"))?));
            } else {
                active.insert(line.parse::<HexCell>()?);
            }
        }
        let params = params.ok_or_else(|| Error::Format("map without params header".into()))?;
        let spec = spec.ok_or_else(|| Error::Format("map without grid header".into()))?;
        let mut map = MixedResolutionMap::uniform(spec, params, base)?;
        map.split = lineage.iter().map(|l| l.0).collect();
        map.active = active;
        map.lineage = lineage;
        map.iterations = iterations;
        map.stop = stop;
        map.validate()?;
        Ok(map)
    }
}

/// Assigns every projected point to its active cell and accumulates counts
/// and spatial spread.
pub fn build_frequency(trajectories: &[RawTrajectory], map: &MixedResolutionMap) -> Result<FrequencyMap> {
    #[derive(Default)]
    struct Acc {
        n: f64,
        sx: f64,
        sy: f64,
        sxx: f64,
        syy: f64,
        last_traj: Option<usize>,
        trajs: f64,
    }
    let mut acc: BTreeMap<HexCell, Acc> = map.active.iter().map(|c| (*c, Acc::default())).collect();
    for (ti, t) in trajectories.iter().enumerate() {
        for p in &t.points {
            let xy = project(p.lat, p.lon, &map.spec)?;
            let Some(cell) = map.locate(xy)? else { continue };
            let a = acc.get_mut(&cell).ok_or(Error::InactiveCell(cell))?;
            // Offsets from the centroid keep the moment sums well conditioned.
            let c = cell_centroid(cell, &map.spec);
            let (dx, dy) = (xy.x - c.x, xy.y - c.y);
            a.n += 1.0;
            a.sx += dx;
            a.sy += dy;
            a.sxx += dx * dx;
            a.syy += dy * dy;
            if a.last_traj != Some(ti) {
                a.last_traj = Some(ti);
                a.trajs += 1.0;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(c, a)| {
            let gamma = if a.n < 2.0 {
                0.0
            } else {
                let (mx, my) = (a.sx / a.n, a.sy / a.n);
                let trace = (a.sxx / a.n - mx * mx) + (a.syy / a.n - my * my);
                trace.max(0.0) / map.spec.edge(c.res).powi(2)
            };
            let count = if map.params.count_trajectories { a.trajs } else { a.n };
            (c, CellStats { count, gamma })
        })
        .collect())
}

/// Fisher–Pearson skewness `m3 / m2^{3/2}`; 0 for fewer than three values
/// or zero variance.
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 3 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return 0.0;
    }
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

fn projected_points(trajectories: &[RawTrajectory], spec: &GridSpec) -> Result<Vec<PlanarPoint>> {
    trajectories
        .iter()
        .flat_map(|t| &t.points)
        .map(|p| project(p.lat, p.lon, spec))
        .collect()
}

/// Base tessellation at `r_min` covering the bounding box of all points.
pub fn base_tessellation(trajectories: &[RawTrajectory], spec: &GridSpec, r_min: u8) -> Result<Vec<HexCell>> {
    let pts = projected_points(trajectories, spec)?;
    if pts.is_empty() {
        return Ok(Vec::new());
    }
    let (mut lo, mut hi) = (PlanarPoint::new(f64::MAX, f64::MAX), PlanarPoint::new(f64::MIN, f64::MIN));
    for p in &pts {
        lo = PlanarPoint::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = PlanarPoint::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let mut cells: BTreeSet<HexCell> = cells_covering(lo, hi, r_min, spec)?.into_iter().collect();
    for p in &pts {
        cells.insert(point_to_cell(*p, r_min, spec)?);
    }
    Ok(cells.into_iter().collect())
}

/// Median visit count and median γ over the base tessellation: data-driven
/// starting values for δ and φ.
pub fn median_thresholds(trajectories: &[RawTrajectory], spec: &GridSpec, params: &SplitParams) -> Result<(f64, f64)> {
    let base = base_tessellation(trajectories, spec, params.r_min)?;
    let map = MixedResolutionMap::uniform(spec.clone(), params.clone(), base)?;
    let freq = build_frequency(trajectories, &map)?;
    let median = |mut v: Vec<f64>| {
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    Ok((
        median(freq.values().map(|s| s.count).collect()),
        median(freq.values().map(|s| s.gamma).collect()),
    ))
}

/// Iterative refinement. Each iteration first tests skewness, then splits
/// every active cell with `f > δ`, `γ > φ` and resolution below `r_max`.
pub fn generate(trajectories: &[RawTrajectory], spec: &GridSpec, params: &SplitParams) -> Result<MixedResolutionMap> {
    let base = base_tessellation(trajectories, spec, params.r_min)?;
    let mut map = MixedResolutionMap::uniform(spec.clone(), params.clone(), base)?;
    if map.active.is_empty() {
        map.stop = StopReason::Empty;
        return Ok(map);
    }
    loop {
        map.iterations += 1;
        let iter = map.iterations;
        let freq = build_frequency(trajectories, &map)?;
        let counts: Vec<f64> = freq.values().map(|s| s.count).collect();
        if skewness(&counts) < params.theta {
            map.stop = StopReason::Skewness;
            break;
        }
        let to_split: Vec<HexCell> = freq
            .iter()
            .filter(|(c, s)| s.count > params.delta && s.gamma > params.phi && c.res < params.r_max)
            .map(|(c, _)| *c)
            .collect();
        if to_split.is_empty() {
            map.stop = StopReason::NoSplits;
            break;
        }
        for c in to_split {
            map.split_cell(c, iter)?;
        }
        map.validate()?;
        log::debug!("iteration {iter}: {} active cells", map.active.len());
        if iter >= params.max_iter {
            map.stop = StopReason::MaxIter;
            break;
        }
    }
    Ok(map)
}

/// Precomputed mixed-resolution adjacency over the active cells.
#[derive(Clone, Debug)]
pub struct MixedAdjacency {
    neighbors: BTreeMap<HexCell, Vec<HexCell>>,
    /// Token-level successor table for a vocabulary (index = token id).
    table: Vec<Vec<u32>>,
}

impl MixedAdjacency {
    pub fn new(map: &MixedResolutionMap) -> Result<Self> {
        let mut neighbors = BTreeMap::new();
        for c in &map.active {
            neighbors.insert(*c, map.mixed_neighbors(*c)?.into_iter().collect());
        }
        Ok(MixedAdjacency {
            neighbors,
            table: Vec::new(),
        })
    }

    /// Binds token ids of `vocab` so this can drive decoding.
    pub fn with_vocab(mut self, vocab: &Vocabulary) -> Self {
        let mut table = vec![Vec::new(); vocab.len()];
        for (i, cell) in vocab.cells().iter().enumerate() {
            let mut s: Vec<u32> = self
                .neighbors
                .get(cell)
                .map(|ns| ns.iter().filter_map(|n| vocab.id(n)).collect())
                .unwrap_or_default();
            s.push(EOT);
            s.sort_unstable();
            table[i + 2] = s;
        }
        self.table = table;
        self
    }

    pub fn cell_neighbors(&self, c: &HexCell) -> Option<&[HexCell]> {
        self.neighbors.get(c).map(Vec::as_slice)
    }

    pub fn are_adjacent(&self, a: &HexCell, b: &HexCell) -> bool {
        self.neighbors.get(a).is_some_and(|ns| ns.binary_search(b).is_ok())
    }

    /// Shortest active-cell path from `a` to `b` (both inclusive). Neighbours
    /// are explored in sorted order, so ties resolve deterministically.
    pub fn shortest_path(&self, a: HexCell, b: HexCell) -> Result<Vec<HexCell>> {
        if a == b {
            return Ok(vec![a]);
        }
        let mut prev: HashMap<HexCell, HexCell> = HashMap::new();
        let mut queue = VecDeque::from([a]);
        prev.insert(a, a);
        while let Some(c) = queue.pop_front() {
            for n in self.neighbors.get(&c).ok_or(Error::InactiveCell(c))? {
                if prev.contains_key(n) {
                    continue;
                }
                prev.insert(*n, c);
                if *n == b {
                    let mut path = vec![b];
                    let mut cur = b;
                    while cur != a {
                        cur = prev[&cur];
                        path.push(cur);
                    }
                    path.reverse();
                    return Ok(path);
                }
                queue.push_back(*n);
            }
        }
        Err(Error::Invariant(format!("no path between {a} and {b} in the map")))
    }
}

impl Adjacency for MixedAdjacency {
    fn successors(&self, token: u32) -> Result<Vec<u32>> {
        match self.table.get(token as usize) {
            Some(s) if !s.is_empty() => Ok(s.clone()),
            _ => Err(Error::UnknownToken(format!("id {token} is not a cell"))),
        }
    }
}

/// Re-expresses raw trajectories as walks over the map's active cells.
/// Gaps are filled along the straight grid line when it stays on active
/// cells of one resolution, otherwise by the shortest mixed-adjacency path.
pub fn retokenize(
    trajectories: &[RawTrajectory],
    map: &MixedResolutionMap,
    adjacency: &MixedAdjacency,
) -> Result<Vec<HexTrajectory>> {
    let mut out = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let mut cells = Vec::new();
        for p in &t.points {
            let xy = project(p.lat, p.lon, &map.spec)?;
            let Some(cell) = map.locate(xy)? else { continue };
            push_bridged(&mut cells, cell, |a, b| {
                if adjacency.are_adjacent(&a, &b) {
                    return Ok(vec![a, b]);
                }
                if a.res == b.res {
                    let line = hexgrid::grid_line(a, b)?;
                    if line.iter().all(|c| map.is_active(c)) && line.windows(2).all(|w| adjacency.are_adjacent(&w[0], &w[1]))
                    {
                        return Ok(line);
                    }
                }
                adjacency.shortest_path(a, b)
            })?;
        }
        out.push(HexTrajectory {
            start_time: t.start_time(),
            cells,
            terminated: true,
        });
    }
    Ok(out)
}
