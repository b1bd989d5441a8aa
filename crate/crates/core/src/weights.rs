//! Weighted adjacency matrices.
//!
//! Every weight is evaluated on the pattern of a rank-`k` plain adjacency
//! matrix, for the ordered pair (source segment, destination segment) of the
//! movement it describes. For an outflow entry `(i, j)` the movement is
//! `i -> j`; for an inflow entry `(i, j)` it is `j -> i`. Because inflow is
//! the transpose of outflow, every inflow weight matrix is the transpose of
//! its outflow counterpart.
//!
//! | kind | raw value for movement `s -> d` |
//! |---|---|
//! | `Plain` | number of length-`k` paths |
//! | `Distance` | `exp(-dist(s, d)² / σ²)` between midpoints |
//! | `SpeedLimitRatio` | `limit_d / limit_s` |
//! | `SpeedLimitCategory` | `limit_d / category_norm` |
//! | `SpeedLimitChange` | `1` if `limit_s != limit_d`, else `0` |
//! | `Angle` | `exp(-1 / max(|π - θ₀|, floor))` |
//!
//! Raw matrices then go through [`clip_with_identity`], which adds the
//! identity and clamps to `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{adjacency_ranks, AdjacencyPair, RoadNetwork};
use crate::sparse::{CsrMatrix, SparsePatternMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Plain,
    Distance,
    SpeedLimitRatio,
    SpeedLimitCategory,
    SpeedLimitChange,
    Angle,
}

impl WeightKind {
    pub const ALL: [WeightKind; 6] = [
        WeightKind::Plain,
        WeightKind::Distance,
        WeightKind::SpeedLimitRatio,
        WeightKind::SpeedLimitCategory,
        WeightKind::SpeedLimitChange,
        WeightKind::Angle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Plain => "plain",
            WeightKind::Distance => "distance",
            WeightKind::SpeedLimitRatio => "speed_limit_ratio",
            WeightKind::SpeedLimitCategory => "speed_limit_category",
            WeightKind::SpeedLimitChange => "speed_limit_change",
            WeightKind::Angle => "angle",
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        WeightKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .or(match key.as_str() {
                "dist" => Some(WeightKind::Distance),
                "ratio" | "slr" => Some(WeightKind::SpeedLimitRatio),
                "category" | "slc" => Some(WeightKind::SpeedLimitCategory),
                "change" | "slch" => Some(WeightKind::SpeedLimitChange),
                _ => None,
            })
            .ok_or_else(|| Error::invalid(format!("unknown weight kind '{s}'")))
    }
}

/// Parses a `+`- or `,`-separated list such as `plain+speed_limit_ratio`.
pub fn parse_kinds(s: &str) -> Result<Vec<WeightKind>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(WeightKind::ALL.to_vec());
    }
    let kinds = s
        .split(['+', ','])
        .filter(|p| !p.trim().is_empty())
        .map(WeightKind::from_str)
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_kinds(&kinds))
}

/// Sorted into declaration order with duplicates removed.
pub fn normalize_kinds(kinds: &[WeightKind]) -> Vec<WeightKind> {
    let mut k = kinds.to_vec();
    k.sort();
    k.dedup();
    k
}

/// Joins kinds with `+`, e.g. `plain+speed_limit_ratio`.
pub fn kinds_label(kinds: &[WeightKind]) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Outflow,
    Inflow,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Outflow, Direction::Inflow];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Outflow => "out",
            Direction::Inflow => "in",
        }
    }

    /// (source, destination) of the movement described by entry `(i, j)`.
    fn movement(self, i: usize, j: usize) -> (usize, usize) {
        match self {
            Direction::Outflow => (i, j),
            Direction::Inflow => (j, i),
        }
    }
}

/// How the inner angle θ₀ is derived from the two headings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleConvention {
    /// θ₀ = π − Δ: a straight continuation has θ₀ = π.
    #[default]
    InnerAngle,
    /// θ₀ = Δ: a straight continuation has θ₀ = 0.
    HeadingDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    /// Distance scale in meters.
    pub sigma: f64,
    /// Lower bound on `|π − θ₀|` in radians.
    pub angle_floor: f64,
    /// km/h divisor for the category weight; `None` uses the network maximum.
    pub category_norm: Option<f64>,
    pub angle_convention: AngleConvention,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            sigma: 1000.0,
            angle_floor: 1e-6,
            category_norm: None,
            angle_convention: AngleConvention::InnerAngle,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self, network: &RoadNetwork) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.angle_floor > 0.0 && self.angle_floor <= 0.01) {
            return Err(Error::Config(format!(
                "angle_floor must lie in (0, 0.01], got {}",
                self.angle_floor
            )));
        }
        let norm = self.category_norm_for(network);
        if norm < network.max_speed_limit() {
            return Err(Error::Config(format!(
                "category_norm {norm} is below the network's maximum speed limit {}",
                network.max_speed_limit()
            )));
        }
        Ok(())
    }

    pub fn category_norm_for(&self, network: &RoadNetwork) -> f64 {
        self.category_norm.unwrap_or_else(|| network.max_speed_limit())
    }
}

/// `exp(-d² / σ²)`.
pub fn distance_weight(distance_m: f64, sigma: f64) -> f64 {
    (-(distance_m * distance_m) / (sigma * sigma)).exp()
}

/// Smallest absolute difference between two headings, in `[0, π]`.
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Angle weight for a movement from heading `from` to heading `to`.
pub fn angle_weight(from: f64, to: f64, config: &WeightConfig) -> f64 {
    let delta = heading_difference(from, to);
    let theta0 = match config.angle_convention {
        AngleConvention::InnerAngle => PI - delta,
        AngleConvention::HeadingDifference => delta,
    };
    (-1.0 / (PI - theta0).abs().max(config.angle_floor)).exp()
}

fn pattern(adj: &AdjacencyPair, direction: Direction) -> &CsrMatrix<u64> {
    match direction {
        Direction::Outflow => &adj.outflow,
        Direction::Inflow => &adj.inflow,
    }
}

fn on_pattern(
    adj: &AdjacencyPair,
    direction: Direction,
    f: impl Fn(usize, usize, u64) -> f64,
) -> SparsePatternMatrix {
    pattern(adj, direction).map(|i, j, count| {
        let (s, d) = direction.movement(i, j);
        f(s, d, count)
    })
}

pub fn weight_plain(adj: &AdjacencyPair, direction: Direction) -> SparsePatternMatrix {
    pattern(adj, direction).map(|_, _, count| count as f64)
}

pub fn weight_distance(
    network: &RoadNetwork,
    adj: &AdjacencyPair,
    direction: Direction,
    config: &WeightConfig,
) -> SparsePatternMatrix {
    let segs = network.segments();
    on_pattern(adj, direction, |s, d, _| {
        let [xs, ys] = segs[s].midpoint;
        let [xd, yd] = segs[d].midpoint;
        distance_weight((xs - xd).hypot(ys - yd), config.sigma)
    })
}

pub fn weight_speed_limit_ratio(
    network: &RoadNetwork,
    adj: &AdjacencyPair,
    direction: Direction,
) -> SparsePatternMatrix {
    let segs = network.segments();
    on_pattern(adj, direction, |s, d, _| {
        segs[d].speed_limit / segs[s].speed_limit
    })
}

pub fn weight_speed_limit_category(
    network: &RoadNetwork,
    adj: &AdjacencyPair,
    direction: Direction,
    config: &WeightConfig,
) -> SparsePatternMatrix {
    let segs = network.segments();
    let norm = config.category_norm_for(network);
    on_pattern(adj, direction, |_, d, _| segs[d].speed_limit / norm)
}

pub fn weight_speed_limit_change(
    network: &RoadNetwork,
    adj: &AdjacencyPair,
    direction: Direction,
) -> SparsePatternMatrix {
    let segs = network.segments();
    on_pattern(adj, direction, |s, d, _| {
        if segs[s].speed_limit != segs[d].speed_limit {
            1.0
        } else {
            0.0
        }
    })
}

pub fn weight_angle(
    network: &RoadNetwork,
    adj: &AdjacencyPair,
    direction: Direction,
    config: &WeightConfig,
) -> SparsePatternMatrix {
    let segs = network.segments();
    on_pattern(adj, direction, |s, d, _| {
        angle_weight(segs[s].heading, segs[d].heading, config)
    })
}

/// Raw (unclipped) weight matrix of one kind.
pub fn raw_weight(
    kind: WeightKind,
    network: &RoadNetwork,
    adj: &AdjacencyPair,
    direction: Direction,
    config: &WeightConfig,
) -> SparsePatternMatrix {
    match kind {
        WeightKind::Plain => weight_plain(adj, direction),
        WeightKind::Distance => weight_distance(network, adj, direction, config),
        WeightKind::SpeedLimitRatio => weight_speed_limit_ratio(network, adj, direction),
        WeightKind::SpeedLimitCategory => {
            weight_speed_limit_category(network, adj, direction, config)
        }
        WeightKind::SpeedLimitChange => weight_speed_limit_change(network, adj, direction),
        WeightKind::Angle => weight_angle(network, adj, direction, config),
    }
}

/// `clamp(raw + I, 0, 1)`. The diagonal is always stored and equals 1.
pub fn clip_with_identity(raw: &SparsePatternMatrix) -> Result<SparsePatternMatrix> {
    let (rows, cols) = raw.shape();
    if rows != cols {
        return Err(Error::ShapeMismatch {
            op: "clip_with_identity",
            left: raw.shape(),
            right: (cols, rows),
        });
    }
    let mut triplets: Vec<(usize, usize, f64)> = raw
        .iter()
        .map(|(i, j, v)| {
            let v = if i == j { v + 1.0 } else { v };
            (i, j, v.clamp(0.0, 1.0))
        })
        .collect();
    for i in 0..rows {
        if raw.position(i, i).is_none() {
            triplets.push((i, i, 1.0));
        }
    }
    SparsePatternMatrix::from_triplets(rows, cols, triplets)
}

/// Identifies one clipped matrix. The derived ordering (rank, kind,
/// direction) is the column order of the graph-convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightKey {
    pub rank: usize,
    pub kind: WeightKind,
    pub direction: Direction,
}

impl WeightKey {
    /// `<kind>_<dir>_k<rank>`, used in file names.
    pub fn file_stem(&self) -> String {
        format!("{}_{}_k{}", self.kind, self.direction.name(), self.rank)
    }
}

impl fmt::Display for WeightKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedMatrix {
    pub key: WeightKey,
    pub matrix: SparsePatternMatrix,
}

/// All clipped matrices for a set of kinds, both directions and ranks
/// `1..=max_rank`, stored in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedAdjacencySet {
    pub max_rank: usize,
    pub kinds: Vec<WeightKind>,
    pub entries: Vec<WeightedMatrix>,
}

impl WeightedAdjacencySet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Matrices per rank (`c` in the concatenation): `2 × |kinds|`.
    pub fn per_rank(&self) -> usize {
        2 * self.kinds.len()
    }

    pub fn get(&self, key: &WeightKey) -> Option<&SparsePatternMatrix> {
        self.entries
            .binary_search_by(|e| e.key.cmp(key))
            .ok()
            .map(|i| &self.entries[i].matrix)
    }

    pub fn keys(&self) -> impl Iterator<Item = WeightKey> + '_ {
        self.entries.iter().map(|e| e.key)
    }
}

pub fn build_weight_set(
    network: &RoadNetwork,
    max_rank: usize,
    kinds: &[WeightKind],
    config: &WeightConfig,
) -> Result<WeightedAdjacencySet> {
    if kinds.is_empty() {
        return Err(Error::invalid("at least one weight kind is required"));
    }
    if max_rank == 0 {
        return Err(Error::invalid("max_rank must be at least 1"));
    }
    config.validate(network)?;
    let kinds = normalize_kinds(kinds);
    let ranks = adjacency_ranks(network, max_rank)?;
    let mut entries = Vec::with_capacity(kinds.len() * 2 * max_rank);
    for adj in &ranks {
        for &kind in &kinds {
            for direction in Direction::BOTH {
                let raw = raw_weight(kind, network, adj, direction, config);
                entries.push(WeightedMatrix {
                    key: WeightKey {
                        rank: adj.rank,
                        kind,
                        direction,
                    },
                    matrix: clip_with_identity(&raw)?,
                });
            }
        }
    }
    Ok(WeightedAdjacencySet {
        max_rank,
        kinds,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_adjacency, rank_k_adjacency, Connection, RoadSegment};
    use approx::assert_abs_diff_eq;

    fn seg(id: usize, limit: f64, x: f64, heading: f64) -> RoadSegment {
        RoadSegment {
            id,
            speed_limit: limit,
            midpoint: [x, 0.0],
            heading,
            length: 100.0,
        }
    }

    fn pair_network(limit_a: f64, limit_b: f64, dx: f64) -> RoadNetwork {
        RoadNetwork::new(
            vec![seg(0, limit_a, 0.0, 0.0), seg(1, limit_b, dx, PI / 2.0)],
            vec![Connection {
                from_id: 0,
                to_id: 1,
                is_u_turn: false,
            }],
        )
        .unwrap()
    }

    #[test]
    fn distance_formula() {
        assert_eq!(distance_weight(0.0, 1000.0), 1.0);
        assert_abs_diff_eq!(distance_weight(1000.0, 1000.0), 0.367879, epsilon = 1e-6);
        assert_abs_diff_eq!(distance_weight(3000.0, 1000.0), 1.234098e-4, epsilon = 1e-9);
    }

    #[test]
    fn ratio_follows_movement() {
        let net = pair_network(60.0, 80.0, 500.0);
        let adj = build_adjacency(&net).unwrap();
        let out = weight_speed_limit_ratio(&net, &adj, Direction::Outflow);
        assert_abs_diff_eq!(out.get(0, 1).unwrap(), 4.0 / 3.0, epsilon = 1e-12);
        let inflow = weight_speed_limit_ratio(&net, &adj, Direction::Inflow);
        assert_abs_diff_eq!(inflow.get(1, 0).unwrap(), 4.0 / 3.0, epsilon = 1e-12);

        let net = pair_network(80.0, 60.0, 500.0);
        let adj = build_adjacency(&net).unwrap();
        let out = weight_speed_limit_ratio(&net, &adj, Direction::Outflow);
        assert_eq!(out.get(0, 1).unwrap(), 0.75);
        let clipped = clip_with_identity(&out).unwrap();
        assert_eq!(clipped.get(0, 1).unwrap(), 0.75);
    }

    #[test]
    fn category_and_change() {
        let net = pair_network(40.0, 60.0, 0.0);
        let adj = build_adjacency(&net).unwrap();
        let cfg = WeightConfig {
            category_norm: Some(100.0),
            ..Default::default()
        };
        let cat = weight_speed_limit_category(&net, &adj, Direction::Outflow, &cfg);
        assert_abs_diff_eq!(cat.get(0, 1).unwrap(), 0.6, epsilon = 1e-12);
        let change = weight_speed_limit_change(&net, &adj, Direction::Outflow);
        assert_eq!(change.get(0, 1), Some(1.0));

        let same = pair_network(60.0, 60.0, 0.0);
        let adj = build_adjacency(&same).unwrap();
        let change = weight_speed_limit_change(&same, &adj, Direction::Outflow);
        assert_eq!(change.get(0, 1), Some(0.0));
    }

    #[test]
    fn angle_formula_cases() {
        let cfg = WeightConfig::default();
        // collinear: Δ = 0, θ₀ = π, floored denominator
        assert!(angle_weight(0.3, 0.3, &cfg) < 1e-300);
        assert_abs_diff_eq!(
            angle_weight(0.0, PI / 2.0, &cfg),
            (-2.0 / PI).exp(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(angle_weight(0.0, PI / 2.0, &cfg), 0.529_077_8, epsilon = 1e-6);
        assert_abs_diff_eq!(angle_weight(0.0, PI, &cfg), 0.72738, epsilon = 1e-5);
    }

    #[test]
    fn angle_heading_difference_convention_flips_collinear() {
        let cfg = WeightConfig {
            angle_convention: AngleConvention::HeadingDifference,
            ..Default::default()
        };
        assert_abs_diff_eq!(angle_weight(1.0, 1.0, &cfg), (-1.0 / PI).exp(), epsilon = 1e-12);
    }

    #[test]
    fn clip_examples() {
        let raw =
            SparsePatternMatrix::from_triplets(2, 2, vec![(0, 1, 4.0 / 3.0), (1, 0, 0.75)]).unwrap();
        let c = clip_with_identity(&raw).unwrap();
        assert_eq!(c.get(0, 1), Some(1.0));
        assert_eq!(c.get(1, 0), Some(0.75));
        assert_eq!(c.get(0, 0), Some(1.0));
        assert_eq!(c.get(1, 1), Some(1.0));
    }

    #[test]
    fn plain_counts_before_clip() {
        let net = RoadNetwork::new(
            (0..4).map(|i| seg(i, 60.0, 0.0, 0.0)).collect(),
            [(0, 1), (0, 2), (1, 3), (2, 3)]
                .into_iter()
                .map(|(from_id, to_id)| Connection {
                    from_id,
                    to_id,
                    is_u_turn: false,
                })
                .collect(),
        )
        .unwrap();
        let a2 = rank_k_adjacency(&build_adjacency(&net).unwrap(), 2).unwrap();
        let w = weight_plain(&a2, Direction::Outflow);
        assert_eq!(w.get(0, 3), Some(2.0));
        assert_eq!(w.get(0, 1), None);
        assert_eq!(clip_with_identity(&w).unwrap().get(0, 3), Some(1.0));
    }

    #[test]
    fn set_sizes() {
        let net = pair_network(60.0, 80.0, 100.0);
        let cfg = WeightConfig::default();
        assert_eq!(build_weight_set(&net, 3, &[WeightKind::Plain], &cfg).unwrap().len(), 6);
        let all = build_weight_set(&net, 3, &WeightKind::ALL, &cfg).unwrap();
        assert_eq!(all.len(), 36);
        assert_eq!(all.per_rank(), 12);
        let d = build_weight_set(&net, 1, &[WeightKind::Distance], &cfg).unwrap();
        assert_eq!(d.len(), 2);
        assert!(build_weight_set(&net, 1, &[], &cfg).is_err());
        assert!(build_weight_set(&net, 0, &[WeightKind::Plain], &cfg).is_err());
    }

    #[test]
    fn keys_sorted_in_column_order() {
        let net = pair_network(60.0, 80.0, 100.0);
        let set = build_weight_set(
            &net,
            2,
            &[WeightKind::SpeedLimitRatio, WeightKind::Plain],
            &WeightConfig::default(),
        )
        .unwrap();
        let keys: Vec<String> = set.keys().map(|k| k.file_stem()).collect();
        assert_eq!(
            keys,
            [
                "plain_out_k1",
                "plain_in_k1",
                "speed_limit_ratio_out_k1",
                "speed_limit_ratio_in_k1",
                "plain_out_k2",
                "plain_in_k2",
                "speed_limit_ratio_out_k2",
                "speed_limit_ratio_in_k2",
            ]
        );
    }

    #[test]
    fn category_norm_below_max_rejected() {
        let net = pair_network(60.0, 80.0, 100.0);
        let cfg = WeightConfig {
            category_norm: Some(70.0),
            ..Default::default()
        };
        assert!(build_weight_set(&net, 1, &[WeightKind::SpeedLimitCategory], &cfg).is_err());
    }

    #[test]
    fn parse_kind_lists() {
        assert_eq!(
            parse_kinds("speed_limit_ratio+plain").unwrap(),
            vec![WeightKind::Plain, WeightKind::SpeedLimitRatio]
        );
        assert!(parse_kinds("curvature").is_err());
    }
}
