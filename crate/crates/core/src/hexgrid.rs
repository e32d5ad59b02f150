//! Planar multi-resolution hexagonal tessellation.
//!
//! Each resolution is a flat-top hexagonal lattice centred on the grid anchor.
//! Resolution `r + 1` has an edge `√7` times shorter than resolution `r` and is
//! rotated by `arctan(√3/5)` relative to it, which makes every coarse cell the
//! parent of exactly seven fine cells (its centre child plus the ring around it).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ulps searched when seeding the exact area chain; each step succeeds with
/// probability about 0.8 per level, so a few hundred suffice.
const AREA_SEARCH_ULPS: u32 = 1 << 12;

/// Mean earth radius used by the local equirectangular projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Edge length at resolution 7 (1.406 km, as in the H3 table).
pub const RES7_EDGE_M: f64 = 1406.0;

/// Axial offsets of the six neighbours, in the fixed order used everywhere.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Rotation of each resolution's lattice relative to the next coarser one.
pub fn level_rotation() -> f64 {
    (SQRT3 / 5.0).atan()
}

/// Grid geometry shared by every cell: projection anchor, scale and the
/// admissible resolution range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub anchor_lat: f64,
    pub anchor_lon: f64,
    /// Edge length in meters at resolution 0.
    pub base_edge_m: f64,
    pub res_min: u8,
    pub res_max: u8,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new(0.0, 0.0)
    }
}

impl GridSpec {
    /// A grid anchored at the given point whose resolution 7 has a 1406 m edge.
    pub fn new(anchor_lat: f64, anchor_lon: f64) -> Self {
        GridSpec {
            anchor_lat,
            anchor_lon,
            base_edge_m: RES7_EDGE_M * 7f64.powf(3.5),
            res_min: 0,
            res_max: 15,
        }
    }

    pub fn with_resolutions(mut self, res_min: u8, res_max: u8) -> Self {
        self.res_min = res_min;
        self.res_max = res_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.anchor_lat.is_finite() && self.anchor_lon.is_finite();
        if !finite || self.anchor_lat.abs() > 90.0 || self.anchor_lon.abs() > 180.0 {
            return Err(Error::Config(format!(
                "grid anchor ({}, {}) is not a valid coordinate",
                self.anchor_lat, self.anchor_lon
            )));
        }
        if !(self.base_edge_m.is_finite() && self.base_edge_m > 0.0) {
            return Err(Error::Config(format!("base_edge_m must be positive, got {}", self.base_edge_m)));
        }
        if self.res_min > self.res_max {
            return Err(Error::Config(format!(
                "res_min {} exceeds res_max {}",
                self.res_min, self.res_max
            )));
        }
        Ok(())
    }

    /// Edge length (= circumradius) of a cell at `res`, in meters.
    pub fn edge(&self, res: u8) -> f64 {
        self.base_edge_m / 7f64.sqrt().powi(res as i32)
    }

    /// Area of a cell at `res`, in square meters: `(3√3/2)·e²`, except that
    /// areas are chained by exact factors of 7 from the finest resolution so
    /// that `cell_area(r) / cell_area(r + 1)` is exactly 7 in floating point.
    /// The chain's seed is moved by a few ulps until every quotient rounds to
    /// 7, which keeps areas within about 1e-14 of the closed form.
    pub fn cell_area(&self, res: u8) -> f64 {
        let (lo, hi) = (self.res_min.min(res), self.res_max.max(res));
        let e = self.edge(hi);
        let closed = 1.5 * SQRT3 * e * e;
        // Area at `res` and whether every quotient down to `lo` is exactly 7.
        let chain = |seed: f64| {
            let (mut a, mut at_res, mut exact) = (seed, seed, true);
            for r in (lo..hi).rev() {
                let up = a * 7.0;
                exact &= up / a == 7.0;
                a = up;
                if r == res {
                    at_res = a;
                }
            }
            (at_res, exact)
        };
        let mut seed = closed;
        for _ in 0..AREA_SEARCH_ULPS {
            let (a, exact) = chain(seed);
            if exact {
                return a;
            }
            seed = f64::from_bits(seed.to_bits() + 1);
        }
        chain(closed).0
    }

    /// Absolute rotation of the lattice at `res`.
    pub fn rotation(&self, res: u8) -> f64 {
        res as f64 * level_rotation()
    }

    pub fn check_res(&self, res: u8) -> Result<()> {
        if res < self.res_min || res > self.res_max {
            return Err(Error::Resolution {
                res,
                min: self.res_min,
                max: self.res_max,
            });
        }
        Ok(())
    }

    /// Single-line `key=value` serialization embedded in artifact headers.
    pub fn to_text(&self) -> String {
        format!(
            "anchor_lat={} anchor_lon={} base_edge_m={} res_min={} res_max={}",
            self.anchor_lat, self.anchor_lon, self.base_edge_m, self.res_min, self.res_max
        )
    }

    /// Parses the output of [`GridSpec::to_text`]; unknown keys are ignored so the
    /// block can share a header line with other fields.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lat = None;
        let mut lon = None;
        let mut edge = None;
        let mut rmin = None;
        let mut rmax = None;
        for kv in text.split_whitespace() {
            let Some((k, v)) = kv.split_once('=') else { continue };
            let bad = || Error::Format(format!("bad grid field {kv:?}"));
            match k {
                "anchor_lat" => lat = Some(v.parse::<f64>().map_err(|_| bad())?),
                "anchor_lon" => lon = Some(v.parse::<f64>().map_err(|_| bad())?),
                "base_edge_m" => edge = Some(v.parse::<f64>().map_err(|_| bad())?),
                "res_min" => rmin = Some(v.parse::<u8>().map_err(|_| bad())?),
                "res_max" => rmax = Some(v.parse::<u8>().map_err(|_| bad())?),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Format(format!("grid spec missing {k}"));
        let spec = GridSpec {
            anchor_lat: lat.ok_or_else(|| missing("anchor_lat"))?,
            anchor_lon: lon.ok_or_else(|| missing("anchor_lon"))?,
            base_edge_m: edge.ok_or_else(|| missing("base_edge_m"))?,
            res_min: rmin.ok_or_else(|| missing("res_min"))?,
            res_max: rmax.ok_or_else(|| missing("res_max"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A hexagon at a resolution, in axial coordinates. The third cube coordinate
/// is `s = -q - r`. Ordering is lexicographic on `(res, q, r)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HexCell {
    pub res: u8,
    pub q: i32,
    pub r: i32,
}

impl HexCell {
    pub const fn new(res: u8, q: i32, r: i32) -> Self {
        HexCell { res, q, r }
    }

    pub fn s(&self) -> i32 {
        -self.q - self.r
    }

    fn offset(&self, dq: i32, dr: i32) -> HexCell {
        HexCell::new(self.res, self.q + dq, self.r + dr)
    }
}

impl fmt::Display for HexCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}:{}:{}", self.res, self.q, self.r)
    }
}

impl FromStr for HexCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownToken(s.to_string());
        let rest = s.strip_prefix('r').ok_or_else(bad)?;
        let mut parts = rest.split(':');
        let res = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let q = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let r = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(HexCell::new(res, q, r))
    }
}

/// A point in the local tangent plane, meters east (`x`) and north (`y`) of the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        PlanarPoint { x, y }
    }

    pub fn distance(&self, other: &PlanarPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn rotated(&self, angle: f64) -> PlanarPoint {
        let (s, c) = angle.sin_cos();
        PlanarPoint::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

pub fn project(lat: f64, lon: f64, spec: &GridSpec) -> Result<PlanarPoint> {
    if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
        return Err(Error::InvalidCoordinate { lat, lon });
    }
    let k = EARTH_RADIUS_M * PI / 180.0;
    Ok(PlanarPoint::new(
        k * (lon - spec.anchor_lon) * spec.anchor_lat.to_radians().cos(),
        k * (lat - spec.anchor_lat),
    ))
}

/// Inverse of [`project`]; returns `(lat, lon)` in degrees.
pub fn unproject(p: PlanarPoint, spec: &GridSpec) -> (f64, f64) {
    let k = EARTH_RADIUS_M * PI / 180.0;
    let lat = spec.anchor_lat + p.y / k;
    let lon = spec.anchor_lon + p.x / (k * spec.anchor_lat.to_radians().cos());
    (lat, lon)
}

/// Centre of axial `(q, r)` in an unrotated flat-top lattice with edge `e`.
fn local_center(q: f64, r: f64, e: f64) -> PlanarPoint {
    PlanarPoint::new(e * 1.5 * q, e * SQRT3 * (r + 0.5 * q))
}

/// Standard cube rounding of fractional axial coordinates.
fn cube_round(fq: f64, fr: f64) -> (i32, i32) {
    let fs = -fq - fr;
    let (mut q, mut r, s) = (fq.round(), fr.round(), fs.round());
    let (dq, dr, ds) = ((q - fq).abs(), (r - fr).abs(), (s - fs).abs());
    if dq > dr && dq > ds {
        q = -r - s;
    } else if dr > ds {
        r = -q - s;
    }
    (q as i32, r as i32)
}

/// Nearest lattice centre to a point given in the lattice's own frame, with
/// exact or near-exact ties going to the smaller `(q, r)`.
fn nearest_center(local: PlanarPoint, e: f64, res: u8) -> HexCell {
    let fq = (2.0 / 3.0) * local.x / e;
    let fr = (-local.x / 3.0 + SQRT3 / 3.0 * local.y) / e;
    let (q0, r0) = cube_round(fq, fr);
    let base = HexCell::new(res, q0, r0);
    let d2 = |c: &HexCell| {
        let p = local_center(c.q as f64, c.r as f64, e);
        (p.x - local.x).powi(2) + (p.y - local.y).powi(2)
    };
    let candidates: Vec<(HexCell, f64)> = std::iter::once(base)
        .chain(NEIGHBOR_OFFSETS.iter().map(|&(dq, dr)| base.offset(dq, dr)))
        .map(|c| (c, d2(&c)))
        .collect();
    let best = candidates.iter().map(|&(_, d)| d).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * e * e;
    candidates
        .into_iter()
        .filter(|&(_, d)| d <= best + tol)
        .map(|(c, _)| c)
        .min()
        .expect("seven candidates")
}

pub fn point_to_cell(p: PlanarPoint, res: u8, spec: &GridSpec) -> Result<HexCell> {
    spec.check_res(res)?;
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::InvalidCoordinate { lat: p.y, lon: p.x });
    }
    let local = p.rotated(-spec.rotation(res));
    Ok(nearest_center(local, spec.edge(res), res))
}

pub fn cell_centroid(c: HexCell, spec: &GridSpec) -> PlanarPoint {
    local_center(c.q as f64, c.r as f64, spec.edge(c.res)).rotated(spec.rotation(c.res))
}

/// The six vertices of `c`, counterclockwise, starting from the vertex on the
/// lattice's local +x axis.
pub fn cell_polygon(c: HexCell, spec: &GridSpec) -> [PlanarPoint; 6] {
    let e = spec.edge(c.res);
    let center = local_center(c.q as f64, c.r as f64, e);
    let rot = spec.rotation(c.res);
    std::array::from_fn(|i| {
        let a = PI / 3.0 * i as f64;
        PlanarPoint::new(center.x + e * a.cos(), center.y + e * a.sin()).rotated(rot)
    })
}

pub fn neighbors(c: HexCell) -> [HexCell; 6] {
    NEIGHBOR_OFFSETS.map(|(dq, dr)| c.offset(dq, dr))
}

pub fn hex_distance(a: HexCell, b: HexCell) -> Result<u32> {
    if a.res != b.res {
        return Err(Error::ResolutionMismatch(a, b));
    }
    Ok(cube_distance(a, b))
}

fn cube_distance(a: HexCell, b: HexCell) -> u32 {
    let dq = (a.q - b.q).unsigned_abs();
    let dr = (a.r - b.r).unsigned_abs();
    let ds = (a.s() - b.s()).unsigned_abs();
    dq.max(dr).max(ds)
}

/// Cells crossed by the straight segment between the centres of `a` and `b`,
/// both inclusive; consecutive cells are adjacent.
pub fn grid_line(a: HexCell, b: HexCell) -> Result<Vec<HexCell>> {
    let n = hex_distance(a, b)?;
    if n == 0 {
        return Ok(vec![a]);
    }
    let mut path = Vec::with_capacity(n as usize + 1);
    path.push(a);
    for i in 1..n {
        let t = i as f64 / n as f64;
        let fq = a.q as f64 + (b.q - a.q) as f64 * t;
        let fr = a.r as f64 + (b.r - a.r) as f64 * t;
        path.push(nearest_center(local_center(fq, fr, 1.0), 1.0, a.res));
    }
    path.push(b);
    Ok(path)
}

/// Axial coordinates, one resolution finer, of the child sharing `c`'s centre.
fn center_child_coords(q: i32, r: i32) -> (i32, i32) {
    (3 * q + r, -q + 2 * r)
}

pub fn parent(c: HexCell, spec: &GridSpec) -> Result<HexCell> {
    if c.res <= spec.res_min {
        return Err(Error::Resolution {
            res: c.res.wrapping_sub(1),
            min: spec.res_min,
            max: spec.res_max,
        });
    }
    // Inverse of `center_child_coords`: the child's centroid expressed in the
    // parent lattice. Child centroids are strictly interior, so rounding is exact.
    let (a, b) = (c.q as f64, c.r as f64);
    let (q, r) = cube_round((2.0 * a - b) / 7.0, (a + 3.0 * b) / 7.0);
    Ok(HexCell::new(c.res - 1, q, r))
}

/// The seven children of `c`: centre child first, then its ring in neighbour order.
pub fn children(c: HexCell, spec: &GridSpec) -> Result<[HexCell; 7]> {
    if c.res >= spec.res_max {
        return Err(Error::Resolution {
            res: c.res.saturating_add(1),
            min: spec.res_min,
            max: spec.res_max,
        });
    }
    let (q, r) = center_child_coords(c.q, c.r);
    let center = HexCell::new(c.res + 1, q, r);
    let ring = neighbors(center);
    Ok(std::array::from_fn(|i| if i == 0 { center } else { ring[i - 1] }))
}

/// Ancestor of `c` at the coarser resolution `res` (or `c` itself when equal).
pub fn ancestor(c: HexCell, res: u8, spec: &GridSpec) -> Result<HexCell> {
    if res > c.res {
        return Err(Error::Resolution {
            res,
            min: spec.res_min,
            max: c.res,
        });
    }
    let mut cur = c;
    while cur.res > res {
        cur = parent(cur, spec)?;
    }
    Ok(cur)
}

/// All descendants of `c` at the finer resolution `res`, sorted.
pub fn descendants(c: HexCell, res: u8, spec: &GridSpec) -> Result<Vec<HexCell>> {
    spec.check_res(res)?;
    let mut level = vec![c];
    for _ in c.res..res {
        let mut next = Vec::with_capacity(level.len() * 7);
        for cell in &level {
            next.extend(children(*cell, spec)?);
        }
        level = next;
    }
    level.sort_unstable();
    Ok(level)
}

/// Every cell within `radius` steps of `center`, sorted.
pub fn disk(center: HexCell, radius: u32) -> Vec<HexCell> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dq in -r..=r {
        for dr in (-r).max(-dq - r)..=r.min(-dq + r) {
            out.push(center.offset(dq, dr));
        }
    }
    out.sort_unstable();
    out
}

/// Cells at `res` whose centroid lies inside the box inflated by one edge
/// length, so every point of the box is covered by some returned cell.
pub fn cells_covering(min: PlanarPoint, max: PlanarPoint, res: u8, spec: &GridSpec) -> Result<Vec<HexCell>> {
    spec.check_res(res)?;
    let e = spec.edge(res);
    let (x0, y0, x1, y1) = (min.x - e, min.y - e, max.x + e, max.y + e);
    let rot = -spec.rotation(res);
    let corners = [
        PlanarPoint::new(x0, y0),
        PlanarPoint::new(x0, y1),
        PlanarPoint::new(x1, y0),
        PlanarPoint::new(x1, y1),
    ];
    let (mut qmin, mut qmax, mut rmin, mut rmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in corners {
        let l = c.rotated(rot);
        let fq = (2.0 / 3.0) * l.x / e;
        let fr = (-l.x / 3.0 + SQRT3 / 3.0 * l.y) / e;
        qmin = qmin.min(fq);
        qmax = qmax.max(fq);
        rmin = rmin.min(fr);
        rmax = rmax.max(fr);
    }
    let mut out = Vec::new();
    for q in (qmin.floor() as i32 - 1)..=(qmax.ceil() as i32 + 1) {
        for r in (rmin.floor() as i32 - 1)..=(rmax.ceil() as i32 + 1) {
            let c = HexCell::new(res, q, r);
            let p = cell_centroid(c, spec);
            if p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1 {
                out.push(c);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}
