//! Directed road-segment graph and its inflow/outflow adjacency matrices.
//!
//! Nodes are road segments, not intersections: an edge `i -> j` means traffic
//! leaving segment `i` can enter segment `j` directly. Connections flagged as
//! U-turns are kept in the network description but never produce an edge.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: usize,
    /// km/h
    pub speed_limit: f64,
    /// Planar midpoint in meters.
    pub midpoint: [f64; 2],
    /// Travel direction in radians, `[0, 2π)`.
    pub heading: f64,
    /// meters
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub from_id: usize,
    pub to_id: usize,
    pub is_u_turn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    labels: Vec<String>,
    segments: Vec<RoadSegment>,
    connections: Vec<Connection>,
}

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_heading(theta: f64) -> f64 {
    let h = theta.rem_euclid(TAU);
    if h >= TAU {
        0.0
    } else {
        h
    }
}

impl RoadNetwork {
    /// Validates and assembles a network. Segment `id`s must be `0..N` in
    /// order; labels default to the decimal index.
    pub fn new(segments: Vec<RoadSegment>, connections: Vec<Connection>) -> Result<Self> {
        let labels = (0..segments.len()).map(|i| i.to_string()).collect();
        Self::with_labels(labels, segments, connections)
    }

    pub fn with_labels(
        labels: Vec<String>,
        mut segments: Vec<RoadSegment>,
        connections: Vec<Connection>,
    ) -> Result<Self> {
        if labels.len() != segments.len() {
            return Err(Error::invalid("one label per segment required"));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Input("duplicate segment label".into()));
        }
        for (i, seg) in segments.iter_mut().enumerate() {
            if seg.id != i {
                return Err(Error::Input(format!(
                    "segment ids must be contiguous: position {i} has id {}",
                    seg.id
                )));
            }
            if !(seg.speed_limit > 0.0 && seg.speed_limit.is_finite()) {
                return Err(Error::Input(format!(
                    "segment {} has non-positive speed limit {}",
                    labels[i], seg.speed_limit
                )));
            }
            if !(seg.length > 0.0) {
                return Err(Error::Input(format!(
                    "segment {} has non-positive length {}",
                    labels[i], seg.length
                )));
            }
            if !seg.heading.is_finite() || !seg.midpoint.iter().all(|v| v.is_finite()) {
                return Err(Error::Input(format!(
                    "segment {} has non-finite geometry",
                    labels[i]
                )));
            }
            seg.heading = normalize_heading(seg.heading);
        }
        let n = segments.len();
        let mut seen = BTreeSet::new();
        for (index, c) in connections.iter().enumerate() {
            if c.from_id >= n || c.to_id >= n {
                let name = |id: usize| labels.get(id).cloned().unwrap_or_else(|| id.to_string());
                return Err(Error::DanglingConnection {
                    index,
                    from: name(c.from_id),
                    to: name(c.to_id),
                });
            }
            if c.from_id == c.to_id {
                return Err(Error::Input(format!(
                    "connection #{index} connects segment {} to itself",
                    labels[c.from_id]
                )));
            }
            if !seen.insert((c.from_id, c.to_id)) {
                return Err(Error::Input(format!(
                    "duplicate connection {} -> {}",
                    labels[c.from_id], labels[c.to_id]
                )));
            }
        }
        Ok(Self {
            labels,
            segments,
            connections,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn connections(&self) -> &[Connection] {
        &self.connections
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.speed_limit)
            .fold(0.0, f64::max)
    }

    /// Same network with `connection` appended.
    pub fn with_connection(&self, connection: Connection) -> Result<Self> {
        let mut connections = self.connections.clone();
        connections.push(connection);
        Self::with_labels(self.labels.clone(), self.segments.clone(), connections)
    }

    /// Reads `segments.csv` and `connections.csv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let seg_path = dir.join("segments.csv");
        let conn_path = dir.join("connections.csv");
        let seg_rows: Vec<SegmentRecord> = read_records(&seg_path)?;
        let conn_rows: Vec<ConnectionRecord> = read_records(&conn_path)?;
        Self::from_records(seg_rows, conn_rows)
    }

    /// Writes the topology pair into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("segments.csv"))?;
        for (label, s) in self.labels.iter().zip(&self.segments) {
            w.serialize(SegmentRecord {
                id: label.clone(),
                speed_limit_kmh: s.speed_limit,
                mid_x_m: s.midpoint[0],
                mid_y_m: s.midpoint[1],
                heading_rad: s.heading,
                length_m: s.length,
            })?;
        }
        w.flush().map_err(|e| Error::io(dir.join("segments.csv"), e))?;
        let mut w = csv::Writer::from_path(dir.join("connections.csv"))?;
        for c in &self.connections {
            w.serialize(ConnectionRecord {
                from_id: self.labels[c.from_id].clone(),
                to_id: self.labels[c.to_id].clone(),
                is_u_turn: u8::from(c.is_u_turn),
            })?;
        }
        w.flush().map_err(|e| Error::io(dir.join("connections.csv"), e))?;
        Ok(())
    }

    /// Builds a network from file records. String ids are mapped to indices in
    /// sorted order so the mapping does not depend on row order.
    pub fn from_records(
        segments: Vec<SegmentRecord>,
        connections: Vec<ConnectionRecord>,
    ) -> Result<Self> {
        let mut sorted: Vec<&SegmentRecord> = segments.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let index: BTreeMap<&str, usize> = sorted
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        if index.len() != segments.len() {
            return Err(Error::Input("duplicate segment id in segments.csv".into()));
        }
        let labels = sorted.iter().map(|r| r.id.clone()).collect();
        let segs = sorted
            .iter()
            .enumerate()
            .map(|(i, r)| RoadSegment {
                id: i,
                speed_limit: r.speed_limit_kmh,
                midpoint: [r.mid_x_m, r.mid_y_m],
                heading: r.heading_rad,
                length: r.length_m,
            })
            .collect();
        let mut conns = Vec::with_capacity(connections.len());
        for (i, c) in connections.iter().enumerate() {
            let (Some(&from_id), Some(&to_id)) =
                (index.get(c.from_id.as_str()), index.get(c.to_id.as_str()))
            else {
                return Err(Error::DanglingConnection {
                    index: i,
                    from: c.from_id.clone(),
                    to: c.to_id.clone(),
                });
            };
            let is_u_turn = match c.is_u_turn {
                0 => false,
                1 => true,
                v => {
                    return Err(Error::Input(format!(
                        "connection #{i}: is_u_turn must be 0 or 1, got {v}"
                    )))
                }
            };
            conns.push(Connection {
                from_id,
                to_id,
                is_u_turn,
            });
        }
        Self::with_labels(labels, segs, conns)
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Error::from)
}

/// Row of `segments.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub speed_limit_kmh: f64,
    pub mid_x_m: f64,
    pub mid_y_m: f64,
    pub heading_rad: f64,
    pub length_m: f64,
}

/// Row of `connections.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectionRecord {
    pub from_id: String,
    pub to_id: String,
    pub is_u_turn: u8,
}

/// Inflow and outflow adjacency at one rank. Entry `(i, j)` of `outflow`
/// counts directed paths of length `rank` from `i` to `j`; `inflow` is its
/// transpose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyPair {
    pub inflow: CsrMatrix<u64>,
    pub outflow: CsrMatrix<u64>,
    pub rank: usize,
}

impl AdjacencyPair {
    pub fn size(&self) -> usize {
        self.outflow.rows()
    }
}

/// Rank-1 adjacency of `network`.
pub fn build_adjacency(network: &RoadNetwork) -> Result<AdjacencyPair> {
    let n = network.len();
    let mut triplets = Vec::new();
    for (index, c) in network.connections().iter().enumerate() {
        if c.from_id >= n || c.to_id >= n {
            return Err(Error::DanglingConnection {
                index,
                from: c.from_id.to_string(),
                to: c.to_id.to_string(),
            });
        }
        if !c.is_u_turn {
            triplets.push((c.from_id, c.to_id, 1u64));
        }
    }
    let outflow = CsrMatrix::from_triplets(n, n, triplets)?;
    let inflow = outflow.transpose();
    Ok(AdjacencyPair {
        inflow,
        outflow,
        rank: 1,
    })
}

/// `k`-th matrix power of a rank-1 adjacency pair.
pub fn rank_k_adjacency(adj: &AdjacencyPair, k: usize) -> Result<AdjacencyPair> {
    if k == 0 {
        return Err(Error::invalid("rank k must be at least 1"));
    }
    if adj.rank != 1 {
        return Err(Error::invalid(format!(
            "rank_k_adjacency expects a rank-1 pair, got rank {}",
            adj.rank
        )));
    }
    let mut outflow = adj.outflow.clone();
    for _ in 1..k {
        outflow = outflow.matmul(&adj.outflow)?;
    }
    let inflow = outflow.transpose();
    Ok(AdjacencyPair {
        inflow,
        outflow,
        rank: k,
    })
}

/// Adjacency pairs for ranks `1..=k`.
pub fn adjacency_ranks(network: &RoadNetwork, k: usize) -> Result<Vec<AdjacencyPair>> {
    let base = build_adjacency(network)?;
    (1..=k).map(|r| rank_k_adjacency(&base, r)).collect()
}
