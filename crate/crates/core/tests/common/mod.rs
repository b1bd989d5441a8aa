#![allow(dead_code)]

use std::collections::BTreeSet;

use mwtgc::network::{Connection, RoadNetwork, RoadSegment};
use ndarray::Array2;
use proptest::prelude::*;

pub const LIMITS: [f64; 5] = [30.0, 40.0, 50.0, 60.0, 80.0];

/// Segment attributes: (limit index, x, y, heading).
pub type SegSpec = (usize, f64, f64, f64);

pub fn build_network(segs: &[SegSpec], edges: &BTreeSet<(usize, usize)>) -> RoadNetwork {
    let segments = segs
        .iter()
        .enumerate()
        .map(|(id, &(l, x, y, h))| RoadSegment {
            id,
            speed_limit: LIMITS[l],
            midpoint: [x, y],
            heading: h,
            length: 100.0,
        })
        .collect();
    let connections = edges
        .iter()
        .map(|&(from_id, to_id)| Connection {
            from_id,
            to_id,
            is_u_turn: false,
        })
        .collect();
    RoadNetwork::new(segments, connections).unwrap()
}

/// Random directed graph without self-loops, up to `max_n` nodes.
pub fn graph(max_n: usize) -> impl Strategy<Value = (usize, BTreeSet<(usize, usize)>)> {
    (1..=max_n).prop_flat_map(|n| {
        let pairs = proptest::collection::btree_set((0..n, 0..n), 0..=(n * n).min(40));
        pairs.prop_map(move |p| (n, p.into_iter().filter(|(a, b)| a != b).collect()))
    })
}

pub fn network(max_n: usize) -> impl Strategy<Value = RoadNetwork> {
    graph(max_n).prop_flat_map(|(n, edges)| {
        let seg = (
            0..LIMITS.len(),
            -2000.0..2000.0f64,
            -2000.0..2000.0f64,
            0.0..std::f64::consts::TAU,
        );
        proptest::collection::vec(seg, n).prop_map(move |segs| build_network(&segs, &edges))
    })
}

/// Number of directed walks of exactly `k` edges from `i` to `j`, by
/// depth-first enumeration.
pub fn count_walks(n: usize, edges: &BTreeSet<(usize, usize)>, i: usize, j: usize, k: usize) -> u64 {
    if k == 0 {
        return u64::from(i == j);
    }
    (0..n)
        .filter(|&m| edges.contains(&(i, m)))
        .map(|m| count_walks(n, edges, m, j, k - 1))
        .sum()
}

pub fn walk_matrix(n: usize, edges: &BTreeSet<(usize, usize)>, k: usize) -> Array2<u64> {
    Array2::from_shape_fn((n, n), |(i, j)| count_walks(n, edges, i, j, k))
}

/// Same network with segment `i` moved to position `perm[i]`.
pub fn permute_network(net: &RoadNetwork, perm: &[usize]) -> RoadNetwork {
    let n = net.len();
    let mut segments = vec![None; n];
    let mut labels = vec![String::new(); n];
    for (i, s) in net.segments().iter().enumerate() {
        let mut s = s.clone();
        s.id = perm[i];
        segments[perm[i]] = Some(s);
        labels[perm[i]] = net.labels()[i].clone();
    }
    let connections = net
        .connections()
        .iter()
        .map(|c| Connection {
            from_id: perm[c.from_id],
            to_id: perm[c.to_id],
            is_u_turn: c.is_u_turn,
        })
        .collect();
    RoadNetwork::with_labels(labels, segments.into_iter().map(Option::unwrap).collect(), connections)
        .unwrap()
}
