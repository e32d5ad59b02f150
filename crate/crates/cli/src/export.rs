//! GeoJSON and CSV renderings of predictions, maps and attention weights.

use std::fmt::Write as _;

use hextraj_core::corpus::Vocabulary;
use hextraj_core::decode::Hypothesis;
use hextraj_core::hexgrid::{cell_centroid, cell_polygon, unproject, GridSpec, HexCell, PlanarPoint};
use hextraj_core::model::AttentionMaps;
use serde_json::{json, Value};

/// `[lon, lat]` rounded to 1e-7 degrees (about 1 cm).
fn position(p: PlanarPoint, spec: &GridSpec) -> Value {
    let (lat, lon) = unproject(p, spec);
    let r = |v: f64| (v * 1e7).round() / 1e7;
    json!([r(lon), r(lat)])
}

/// Closed counterclockwise ring.
pub fn polygon(c: HexCell, spec: &GridSpec) -> Value {
    let mut ring: Vec<Value> = cell_polygon(c, spec).iter().map(|p| position(*p, spec)).collect();
    ring.push(ring[0].clone());
    json!({ "type": "Polygon", "coordinates": [ring] })
}

/// LineString through the centroids, or a Point for a single cell.
pub fn centroid_line(cells: &[HexCell], spec: &GridSpec) -> Value {
    let coords: Vec<Value> = cells.iter().map(|c| position(cell_centroid(*c, spec), spec)).collect();
    match coords.len() {
        0 => Value::Null,
        1 => json!({ "type": "Point", "coordinates": coords[0] }),
        _ => json!({ "type": "LineString", "coordinates": coords }),
    }
}

fn collection(features: Vec<Value>) -> String {
    let mut s = serde_json::to_string_pretty(&json!({ "type": "FeatureCollection", "features": features }))
        .expect("json values serialize");
    s.push('\n');
    s
}

fn cells_of(path: &[u32], vocab: &Vocabulary) -> Vec<HexCell> {
    path.iter().filter_map(|&t| vocab.cell(t)).collect()
}

/// One centroid path per ranked hypothesis plus the polygon of every cell it
/// visits.
pub fn predictions_geojson(hyps: &[Hypothesis], vocab: &Vocabulary, spec: &GridSpec) -> String {
    let mut features = Vec::new();
    for (rank, h) in hyps.iter().enumerate() {
        let cells = cells_of(h.path(), vocab);
        features.push(json!({
            "type": "Feature",
            "geometry": centroid_line(&cells, spec),
            "properties": {
                "kind": "path",
                "rank": rank + 1,
                "score": h.log_prob,
                "cells": cells.len(),
                "finished": h.finished,
            },
        }));
        for (step, c) in cells.iter().enumerate() {
            features.push(json!({
                "type": "Feature",
                "geometry": polygon(*c, spec),
                "properties": { "kind": "cell", "rank": rank + 1, "step": step + 1, "cell": c.to_string() },
            }));
        }
    }
    collection(features)
}

pub fn predictions_csv(hyps: &[Hypothesis], vocab: &Vocabulary, config_hash: &str) -> String {
    let mut s = String::from("rank,score,finished,path,config_hash\n");
    for (rank, h) in hyps.iter().enumerate() {
        let path: Vec<String> = h.generated().iter().map(|&t| vocab.token_str(t)).collect();
        let _ = writeln!(
            s,
            "{},{:.6},{},{},{config_hash}",
            rank + 1,
            h.log_prob,
            h.finished,
            path.join(" ")
        );
    }
    s
}

pub fn cells_geojson(cells: impl IntoIterator<Item = HexCell>, spec: &GridSpec) -> String {
    let features = cells
        .into_iter()
        .map(|c| {
            json!({
                "type": "Feature",
                "geometry": polygon(c, spec),
                "properties": { "cell": c.to_string(), "res": c.res },
            })
        })
        .collect();
    collection(features)
}

/// `layer,head,query,key,weight` rows; the head column is `max` for the
/// elementwise maximum over heads.
pub fn attention_csv(maps: &AttentionMaps, config_hash: &str) -> String {
    let mut s = String::from("layer,head,query,key,weight,config_hash\n");
    let n = maps.seq;
    let blocks = maps
        .heads
        .iter()
        .enumerate()
        .map(|(h, m)| (h.to_string(), m))
        .chain(std::iter::once(("max".to_string(), &maps.max)));
    for (head, m) in blocks {
        for q in 0..n {
            for k in 0..n {
                let _ = writeln!(s, "{},{head},{q},{k},{:.6},{config_hash}", maps.layer, m[q * n + k]);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(41.15, -8.61)
    }

    #[test]
    fn polygon_ring_is_closed_and_counterclockwise() {
        let p = polygon(HexCell::new(9, 3, -2), &spec());
        let ring = p["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 7);
        assert_eq!(ring[0], ring[6]);
        let pts: Vec<(f64, f64)> = ring
            .iter()
            .map(|v| (v[0].as_f64().unwrap(), v[1].as_f64().unwrap()))
            .collect();
        let area2: f64 = pts.windows(2).map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1).sum();
        assert!(area2 > 0.0);
    }

    #[test]
    fn line_geometry_by_length() {
        let s = spec();
        let a = HexCell::new(9, 0, 0);
        let b = HexCell::new(9, 1, 0);
        assert!(centroid_line(&[], &s).is_null());
        assert_eq!(centroid_line(&[a], &s)["type"], "Point");
        let l = centroid_line(&[a, b, a], &s);
        assert_eq!(l["type"], "LineString");
        assert_eq!(l["coordinates"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn attention_rows() {
        let maps = AttentionMaps {
            layer: 0,
            seq: 2,
            heads: vec![vec![1.0, 0.0, 0.5, 0.5], vec![1.0, 0.0, 0.2, 0.8]],
            max: vec![1.0, 0.0, 0.5, 0.8],
        };
        let csv = attention_csv(&maps, "h");
        assert_eq!(csv.lines().count(), 1 + 3 * 4);
        assert!(csv.contains("0,max,1,1,0.800000,h"));
    }
}
