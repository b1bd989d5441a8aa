//! Synthetic road networks and speed dynamics for desk-scale experiments.
//!
//! Streets between intersections become two directed segments. Each segment
//! carries a congestion level `c ∈ [0, 0.95]` that relaxes toward a daily
//! sinusoidal demand target, is pulled toward the mean congestion of its
//! downstream segments (spill-back), and receives Gaussian shocks. Speed is
//! `free_flow · (1 − c)` with free flow equal to the speed limit.

use std::f64::consts::TAU;

use chrono::NaiveDateTime;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{SpeedSeries, STEPS_PER_DAY, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::network::{build_adjacency, normalize_heading, Connection, RoadNetwork, RoadSegment};
use crate::numerics::SeededRng;

const MAX_CONGESTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SynthTopology {
    /// `intersections` on a circle, two-way ring streets, plus two-way chords
    /// from every `chord_stride`-th intersection to the opposite one
    /// (`chord_stride = 0` disables chords).
    Ring {
        intersections: usize,
        chord_stride: usize,
    },
    /// `rows × cols` lattice with two-way streets.
    Grid { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub topology: SynthTopology,
    /// Intersection spacing scale in meters.
    pub spacing_m: f64,
    pub days: usize,
    pub steps_per_day: usize,
    /// Pull toward downstream congestion per step.
    pub diffusion: f64,
    /// Pull toward the demand target per step.
    pub relaxation: f64,
    /// Peak demand congestion.
    pub amplitude: f64,
    /// Std of per-step congestion shocks.
    pub noise_std: f64,
    /// Max absolute per-segment phase offset of the daily cycle (radians).
    pub phase_jitter: f64,
    pub seed: u64,
    pub start: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            topology: SynthTopology::Ring {
                intersections: 12,
                chord_stride: 2,
            },
            spacing_m: 400.0,
            days: 30,
            steps_per_day: STEPS_PER_DAY,
            diffusion: 0.25,
            relaxation: 0.04,
            amplitude: 0.6,
            noise_std: 0.02,
            phase_jitter: 0.4,
            seed: 42,
            start: "2018-04-01T00:00:00".into(),
        }
    }
}

struct Street {
    a: usize,
    b: usize,
    limit: f64,
}

fn layout(topology: SynthTopology, spacing: f64) -> Result<(Vec<[f64; 2]>, Vec<Street>)> {
    match topology {
        SynthTopology::Ring {
            intersections: m,
            chord_stride,
        } => {
            if m < 3 {
                return Err(Error::invalid("a ring needs at least 3 intersections"));
            }
            let radius = spacing * m as f64 / TAU;
            let points = (0..m)
                .map(|i| {
                    let a = TAU * i as f64 / m as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect();
            const RING_LIMITS: [f64; 6] = [60.0, 60.0, 40.0, 40.0, 80.0, 80.0];
            let mut streets: Vec<Street> = (0..m)
                .map(|i| Street {
                    a: i,
                    b: (i + 1) % m,
                    limit: RING_LIMITS[i % RING_LIMITS.len()],
                })
                .collect();
            if chord_stride > 0 && m >= 6 {
                for i in (0..m / 2).step_by(chord_stride) {
                    streets.push(Street {
                        a: i,
                        b: i + m / 2,
                        limit: 50.0,
                    });
                }
            }
            Ok((points, streets))
        }
        SynthTopology::Grid { rows, cols } => {
            if rows * cols < 2 {
                return Err(Error::invalid("a grid needs at least 2 intersections"));
            }
            let id = |r: usize, c: usize| r * cols + c;
            let points = (0..rows * cols)
                .map(|k| [spacing * (k % cols) as f64, spacing * (k / cols) as f64])
                .collect();
            let mut streets = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        let limit = if r == 0 { 80.0 } else { 60.0 };
                        streets.push(Street { a: id(r, c), b: id(r, c + 1), limit });
                    }
                    if r + 1 < rows {
                        let limit = if c % 2 == 0 { 40.0 } else { 60.0 };
                        streets.push(Street { a: id(r, c), b: id(r + 1, c), limit });
                    }
                }
            }
            Ok((points, streets))
        }
    }
}

/// Builds the directed segment graph for a topology.
pub fn synthetic_network(topology: SynthTopology, spacing: f64) -> Result<RoadNetwork> {
    let (points, streets) = layout(topology, spacing)?;
    // (from intersection, to intersection, limit)
    let mut directed = Vec::with_capacity(2 * streets.len());
    for s in &streets {
        directed.push((s.a, s.b, s.limit));
        directed.push((s.b, s.a, s.limit));
    }
    let width = directed.len().to_string().len().max(3);
    let labels = (0..directed.len()).map(|i| format!("s{i:0width$}")).collect();
    let segments = directed
        .iter()
        .enumerate()
        .map(|(id, &(u, v, limit))| {
            let [xu, yu] = points[u];
            let [xv, yv] = points[v];
            RoadSegment {
                id,
                speed_limit: limit,
                midpoint: [(xu + xv) / 2.0, (yu + yv) / 2.0],
                heading: normalize_heading((yv - yu).atan2(xv - xu)),
                length: (xv - xu).hypot(yv - yu),
            }
        })
        .collect();
    let mut connections = Vec::new();
    for (i, &(u, v, _)) in directed.iter().enumerate() {
        for (j, &(u2, w, _)) in directed.iter().enumerate() {
            if u2 == v && i != j {
                connections.push(Connection {
                    from_id: i,
                    to_id: j,
                    is_u_turn: w == u,
                });
            }
        }
    }
    RoadNetwork::with_labels(labels, segments, connections)
}

/// One congestion update.
fn advance(
    c: &[f64],
    next: &mut [f64],
    downstream: &[Vec<usize>],
    target: &[f64],
    shocks: &[f64],
    spec: &SynthSpec,
) {
    for i in 0..c.len() {
        let down = if downstream[i].is_empty() {
            c[i]
        } else {
            downstream[i].iter().map(|&j| c[j]).sum::<f64>() / downstream[i].len() as f64
        };
        next[i] = (c[i]
            + spec.relaxation * (target[i] - c[i])
            + spec.diffusion * (down - c[i])
            + shocks[i])
            .clamp(0.0, MAX_CONGESTION);
    }
}

/// Network plus `days` of simulated 5-minute speeds. Deterministic per seed.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(RoadNetwork, SpeedSeries)> {
    if spec.days == 0 || spec.steps_per_day == 0 {
        return Err(Error::invalid("synthetic series needs at least one step"));
    }
    for (name, v) in [
        ("diffusion", spec.diffusion),
        ("relaxation", spec.relaxation),
        ("amplitude", spec.amplitude),
        ("noise_std", spec.noise_std),
        ("phase_jitter", spec.phase_jitter),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be finite and non-negative")));
        }
    }
    if spec.diffusion + spec.relaxation > 1.0 {
        return Err(Error::invalid("diffusion + relaxation must not exceed 1"));
    }
    let start = NaiveDateTime::parse_from_str(&spec.start, TIMESTAMP_FORMAT)
        .map_err(|e| Error::invalid(format!("bad start timestamp '{}': {e}", spec.start)))?;
    let network = synthetic_network(spec.topology, spec.spacing_m)?;
    let n = network.len();
    let adj = build_adjacency(&network)?;
    let downstream: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            adj.outflow
                .row_range(i)
                .map(|p| adj.outflow.col_indices()[p])
                .collect()
        })
        .collect();

    let mut rng = SeededRng::stream(spec.seed, 1);
    let phase: Vec<f64> = (0..n)
        .map(|_| rng.uniform(-spec.phase_jitter, spec.phase_jitter))
        .collect();
    let sensitivity: Vec<f64> = (0..n).map(|_| rng.uniform(0.7, 1.0)).collect();
    let free_flow: Vec<f64> = network.segments().iter().map(|s| s.speed_limit).collect();

    let steps = spec.days * spec.steps_per_day;
    let mut values = Array2::zeros((n, steps));
    let mut c = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut shocks = vec![0.0; n];
    for t in 0..steps {
        for i in 0..n {
            values[[i, t]] = free_flow[i] * (1.0 - c[i]);
        }
        let day_angle = TAU * (t + 1) as f64 / spec.steps_per_day as f64;
        for i in 0..n {
            let demand = 0.5 * (1.0 - (day_angle + phase[i]).cos());
            target[i] = spec.amplitude * sensitivity[i] * demand;
            shocks[i] = if spec.noise_std > 0.0 {
                rng.normal(spec.noise_std)
            } else {
                0.0
            };
        }
        advance(&c, &mut next, &downstream, &target, &shocks, spec);
        std::mem::swap(&mut c, &mut next);
    }
    let series = SpeedSeries {
        segment_ids: network.labels().to_vec(),
        start,
        values,
        imputed: 0,
    };
    Ok((network, series))
}
