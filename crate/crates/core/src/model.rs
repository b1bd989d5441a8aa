//! The forecasting network.
//!
//! For each of the `h` input steps the speed vector `X_t` is convolved with
//! every clipped weighted adjacency matrix through a per-edge learnable
//! scaling (`(W_gc ⊙ W̃) X_t`), the `ck` results are concatenated column-wise
//! and passed through ReLU, and a shared per-node linear map (the dimension
//! reduction) turns each node's `ck` features into `C_out` features. The
//! flattened `N·C_out` vector feeds an LSTM encoder. An LSTM decoder then
//! runs `T_p` steps autoregressively: its first input is the last observed
//! speed vector and each later input is its own previous prediction.
//!
//! All computation happens on a [`Tape`], batched over windows (rows).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::numerics::{Parameterized, SeededRng, Tape, Var};
use crate::sparse::SparsePatternMatrix;
use crate::weights::{build_weight_set, WeightConfig, WeightKey, WeightKind, WeightedAdjacencySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multi-weight graph convolution + dimension reduction + seq2seq LSTM.
    MwTgc,
    /// Same encoder-decoder fed by a learned linear projection of the raw
    /// speeds; no graph convolution.
    Seq2Seq,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MwTgc => "MW-TGC",
            ModelKind::Seq2Seq => "Seq2Seq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Input steps `h`.
    pub history: usize,
    /// Predicted steps `T_p`.
    pub horizon: usize,
    /// Maximum adjacency rank `k`.
    pub max_rank: usize,
    pub c_out: usize,
    pub hidden_size: usize,
    pub kinds: Vec<WeightKind>,
    pub num_segments: usize,
}

impl Hyperparameters {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("history", self.history),
            ("horizon", self.horizon),
            ("max_rank", self.max_rank),
            ("c_out", self.c_out),
            ("hidden_size", self.hidden_size),
            ("num_segments", self.num_segments),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Initialization knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Half-width of the uniform noise added to the unit initial `W_gc`.
    pub wgc_noise: f64,
    pub forget_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            wgc_noise: 0.05,
            forget_bias: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConvEntry {
    pub key: WeightKey,
    /// Clipped weighted adjacency `W̃`, restricted to its nonzero entries.
    pub adjacency: SparsePatternMatrix,
    /// `W_gc` values, one per stored entry of `adjacency` (shape `1 × nnz`).
    pub weights: Array2<f64>,
}

impl GraphConvEntry {
    /// `W_gc` as a sparse matrix on the pattern of `W̃`.
    pub fn weight_matrix(&self) -> SparsePatternMatrix {
        let w = self.weights.as_slice().expect("contiguous");
        let mut m = self.adjacency.clone();
        m.values_mut().copy_from_slice(w);
        m
    }

    /// `W_gc ⊙ W̃`.
    pub fn product(&self) -> SparsePatternMatrix {
        let w = self.weights.as_slice().expect("contiguous");
        let mut m = self.adjacency.clone();
        for (v, wv) in m.values_mut().iter_mut().zip(w) {
            *v *= wv;
        }
        m
    }
}

/// Per-(kind, direction, rank) convolution matrices in concatenation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConvLayer {
    pub entries: Vec<GraphConvEntry>,
}

impl GraphConvLayer {
    pub fn from_weight_set(set: &WeightedAdjacencySet, noise: f64, rng: &mut SeededRng) -> Self {
        let entries = set
            .entries
            .iter()
            .map(|e| {
                let adjacency = e.matrix.filter(|_, _, v| v != 0.0);
                let weights = Array2::from_shape_fn((1, adjacency.nnz()), |_| {
                    1.0 + rng.uniform(-noise, noise)
                });
                GraphConvEntry {
                    key: e.key,
                    adjacency,
                    weights,
                }
            })
            .collect();
        Self { entries }
    }

    /// Number of output columns (`ck`).
    pub fn width(&self) -> usize {
        self.entries.len()
    }

    pub fn size(&self) -> usize {
        self.entries.first().map_or(0, |e| e.adjacency.rows())
    }

    pub fn column_order(&self) -> Vec<WeightKey> {
        self.entries.iter().map(|e| e.key).collect()
    }
}

/// Shared per-node linear map from `ck` features to `C_out` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrcKernel {
    /// `ck × C_out`
    pub gamma: Array2<f64>,
    /// `1 × C_out`
    pub bias: Array2<f64>,
}

/// Affine map `x W + b` on row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    /// `1 × out`
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    /// `input_dim × hidden`
    pub input: Array2<f64>,
    /// `hidden × hidden`
    pub hidden: Array2<f64>,
    /// `1 × hidden`
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
}

impl LstmCell {
    pub fn input_dim(&self) -> usize {
        self.input_gate.input.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.input_gate.hidden.nrows()
    }

    fn gates(&self) -> [&Gate; 4] {
        [
            &self.input_gate,
            &self.forget_gate,
            &self.output_gate,
            &self.candidate,
        ]
    }

    fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.candidate,
        ]
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let gate = || Gate {
            input: Array2::zeros((input_dim, hidden)),
            hidden: Array2::zeros((hidden, hidden)),
            bias: Array2::zeros((1, hidden)),
        };
        Self {
            input_gate: gate(),
            forget_gate: gate(),
            output_gate: gate(),
            candidate: gate(),
        }
    }

    fn init(input_dim: usize, hidden: usize, forget_bias: f64, rng: &mut SeededRng) -> Self {
        let mut cell = Self::zeros(input_dim, hidden);
        for gate in cell.gates_mut() {
            gate.input = glorot(input_dim, hidden, rng);
            gate.hidden = glorot(hidden, hidden, rng);
        }
        cell.forget_gate.bias.fill(forget_bias);
        cell
    }
}

/// Spatial front end feeding the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialStage {
    GraphConv {
        layer: GraphConvLayer,
        drc: DrcKernel,
    },
    Projection(Dense),
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform(-limit, limit))
}

/// Everything needed to rerun a trained model: hyperparameters, column
/// order, parameters, normalization and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub kind: ModelKind,
    pub hyper: Hyperparameters,
    pub spatial: SpatialStage,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    /// `hidden × N` map from decoder state to speeds.
    pub output: Dense,
    pub normalizer: Normalizer,
    pub segment_ids: Vec<String>,
    pub weight_config: WeightConfig,
    pub seed: u64,
}

impl ModelParameters {
    /// Builds and initializes a model for `network`. Initialization is a pure
    /// function of `seed`.
    pub fn new(
        kind: ModelKind,
        hyper: Hyperparameters,
        network: &RoadNetwork,
        weight_config: &WeightConfig,
        normalizer: Normalizer,
        seed: u64,
        init: InitConfig,
    ) -> Result<Self> {
        hyper.validate()?;
        let n = network.len();
        if hyper.num_segments != n {
            return Err(Error::invalid(format!(
                "hyperparameters expect {} segments, network has {n}",
                hyper.num_segments
            )));
        }
        let mut rng = SeededRng::stream(seed, 0);
        let spatial = match kind {
            ModelKind::MwTgc => {
                let set = build_weight_set(network, hyper.max_rank, &hyper.kinds, weight_config)?;
                let layer = GraphConvLayer::from_weight_set(&set, init.wgc_noise, &mut rng);
                let ck = layer.width();
                SpatialStage::GraphConv {
                    layer,
                    drc: DrcKernel {
                        gamma: glorot(ck, hyper.c_out, &mut rng),
                        bias: Array2::zeros((1, hyper.c_out)),
                    },
                }
            }
            ModelKind::Seq2Seq => SpatialStage::Projection(Dense {
                weight: glorot(n, hyper.c_out * n, &mut rng),
                bias: Array2::zeros((1, hyper.c_out * n)),
            }),
        };
        let hs = hyper.hidden_size;
        let encoder = LstmCell::init(hyper.c_out * n, hs, init.forget_bias, &mut rng);
        let decoder = LstmCell::init(n, hs, init.forget_bias, &mut rng);
        let output = Dense {
            weight: glorot(hs, n, &mut rng),
            bias: Array2::zeros((1, n)),
        };
        let mut hyper = hyper;
        hyper.kinds = crate::weights::normalize_kinds(&hyper.kinds);
        Ok(Self {
            kind,
            hyper,
            spatial,
            encoder,
            decoder,
            output,
            normalizer,
            segment_ids: network.labels().to_vec(),
            weight_config: weight_config.clone(),
            seed,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.hyper.num_segments
    }

    pub fn graph_layer(&self) -> Option<&GraphConvLayer> {
        match &self.spatial {
            SpatialStage::GraphConv { layer, .. } => Some(layer),
            SpatialStage::Projection(_) => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Binds every parameter as a tape leaf, indexed in [`Parameterized`]
    /// order.
    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound<'a> {
        let mut next = 0usize;
        let mut leaf = |tape: &mut Tape<'a>, m: &Array2<f64>| {
            let v = tape.param(next, m);
            next += 1;
            v
        };
        let spatial = match &self.spatial {
            SpatialStage::GraphConv { layer, drc } => {
                let convs = layer
                    .entries
                    .iter()
                    .map(|e| (&e.adjacency, leaf(tape, &e.weights)))
                    .collect();
                BoundSpatial::GraphConv {
                    convs,
                    gamma: leaf(tape, &drc.gamma),
                    bias: leaf(tape, &drc.bias),
                }
            }
            SpatialStage::Projection(d) => BoundSpatial::Projection(BoundDense {
                weight: leaf(tape, &d.weight),
                bias: leaf(tape, &d.bias),
            }),
        };
        let mut cell = |tape: &mut Tape<'a>, c: &LstmCell| {
            let gates = c.gates().map(|g| BoundGate {
                input: leaf(tape, &g.input),
                hidden: leaf(tape, &g.hidden),
                bias: leaf(tape, &g.bias),
            });
            BoundCell { gates }
        };
        let encoder = cell(tape, &self.encoder);
        let decoder = cell(tape, &self.decoder);
        let output = BoundDense {
            weight: leaf(tape, &self.output.weight),
            bias: leaf(tape, &self.output.bias),
        };
        Bound {
            spatial,
            encoder,
            decoder,
            output,
        }
    }

    /// Records the forward pass for a batch. `steps[t]` is the normalized
    /// `B × N` speed matrix of input step `t`; returns `T_p` prediction nodes
    /// of shape `B × N`.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, steps: &[Array2<f64>]) -> Result<Vec<Var>> {
        if steps.len() != self.hyper.history {
            return Err(Error::invalid(format!(
                "expected {} input steps, got {}",
                self.hyper.history,
                steps.len()
            )));
        }
        let n = self.num_segments();
        let batch = steps[0].nrows();
        for s in steps {
            if s.dim() != (batch, n) {
                return Err(Error::ShapeMismatch {
                    op: "forward input step",
                    left: (batch, n),
                    right: s.dim(),
                });
            }
        }
        let bound = self.bind(tape);
        let hs = self.hyper.hidden_size;
        let mut h = tape.constant(Array2::zeros((batch, hs)));
        let mut c = tape.constant(Array2::zeros((batch, hs)));
        let mut last_x = None;
        for (t, x) in steps.iter().enumerate() {
            let xv = tape.constant(x.clone());
            let features = bound.spatial.apply(tape, xv)?;
            (h, c) = bound.encoder.step(tape, features, h, c)?;
            tape.check_finite(h, || format!("encoder hidden state at step {t}"))?;
            last_x = Some(xv);
        }
        let mut input = last_x.expect("history >= 1");
        let mut preds = Vec::with_capacity(self.hyper.horizon);
        for t in 0..self.hyper.horizon {
            (h, c) = bound.decoder.step(tape, input, h, c)?;
            tape.check_finite(h, || format!("decoder hidden state at step {t}"))?;
            let y = bound.output.apply(tape, h)?;
            preds.push(y);
            input = y;
        }
        Ok(preds)
    }

    /// Predictions (normalized space) for a batch of `N × h` windows, each
    /// returned as `N × T_p`.
    pub fn predict_normalized(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let steps = batch_steps(windows, self.hyper.history)?;
        let mut tape = Tape::new();
        let preds = self.forward_tape(&mut tape, &steps)?;
        Ok(unbatch(&tape, &preds, windows.len()))
    }

    /// Mean squared error over all entries of a batch plus its gradients in
    /// [`Parameterized`] order. Inputs and targets are normalized `N × h` and
    /// `N × T_p` windows.
    pub fn loss_and_gradients(
        &self,
        inputs: &[ArrayView2<'_, f64>],
        targets: &[ArrayView2<'_, f64>],
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, inputs, targets)?;
        let grads = tape.backward(loss)?;
        let value = tape.scalar(loss);
        let analytic = self
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| grads.get_or_zeros(i, t))
            .collect();
        Ok((value, analytic))
    }

    /// Loss only.
    pub fn loss(&self, inputs: &[ArrayView2<'_, f64>], targets: &[ArrayView2<'_, f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, inputs, targets)?;
        Ok(tape.scalar(loss))
    }

    fn batch_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        inputs: &[ArrayView2<'_, f64>],
        targets: &[ArrayView2<'_, f64>],
    ) -> Result<Var> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::invalid("inputs and targets must be non-empty and paired"));
        }
        let steps = batch_steps(inputs, self.hyper.history)?;
        let target_steps = batch_steps(targets, self.hyper.horizon)?;
        let preds = self.forward_tape(tape, &steps)?;
        let mut total: Option<Var> = None;
        for (p, t) in preds.iter().zip(target_steps) {
            let tv = tape.constant(t);
            let e = tape.squared_error(*p, tv)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
        let count = inputs.len() * self.num_segments() * self.hyper.horizon;
        Ok(tape.scale(total.expect("horizon >= 1"), 1.0 / count as f64))
    }

    /// Denormalized `N × T_p` forecast for one `N × h` window in km/h.
    pub fn forecast(&self, window_kmh: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let normalized = self.normalizer.forward(&window_kmh.to_owned());
        let pred = self.predict_normalized(&[normalized.view()])?;
        Ok(self.normalizer.inverse(&pred[0]))
    }
}

/// Stacks column `t` of every window into a `B × N` matrix, for each `t`.
fn batch_steps(windows: &[ArrayView2<'_, f64>], expected_cols: usize) -> Result<Vec<Array2<f64>>> {
    let n = windows[0].nrows();
    for w in windows {
        if w.dim() != (n, expected_cols) {
            return Err(Error::ShapeMismatch {
                op: "window",
                left: (n, expected_cols),
                right: w.dim(),
            });
        }
    }
    Ok((0..expected_cols)
        .map(|t| {
            let mut m = Array2::zeros((windows.len(), n));
            for (b, w) in windows.iter().enumerate() {
                m.row_mut(b).assign(&w.column(t));
            }
            m
        })
        .collect())
}

fn unbatch(tape: &Tape<'_>, preds: &[Var], batch: usize) -> Vec<Array2<f64>> {
    let n = tape.value(preds[0]).ncols();
    (0..batch)
        .map(|b| {
            let mut out = Array2::zeros((n, preds.len()));
            for (t, p) in preds.iter().enumerate() {
                out.column_mut(t).assign(&tape.value(*p).row(b));
            }
            out
        })
        .collect()
}

struct BoundDense {
    weight: Var,
    bias: Var,
}

impl BoundDense {
    fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let z = tape.matmul(x, self.weight)?;
        tape.add_row(z, self.bias)
    }
}

struct BoundGate {
    input: Var,
    hidden: Var,
    bias: Var,
}

impl BoundGate {
    fn pre_activation(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let a = tape.matmul(x, self.input)?;
        let b = tape.matmul(h, self.hidden)?;
        let s = tape.add(a, b)?;
        tape.add_row(s, self.bias)
    }
}

struct BoundCell {
    gates: [BoundGate; 4],
}

impl BoundCell {
    fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let [gi, gf, go, gc] = &self.gates;
        let i = gi.pre_activation(tape, x, h)?;
        let i = tape.sigmoid(i);
        let f = gf.pre_activation(tape, x, h)?;
        let f = tape.sigmoid(f);
        let o = go.pre_activation(tape, x, h)?;
        let o = tape.sigmoid(o);
        let cand = gc.pre_activation(tape, x, h)?;
        let cand = tape.tanh(cand);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

enum BoundSpatial<'a> {
    GraphConv {
        convs: Vec<(&'a SparsePatternMatrix, Var)>,
        gamma: Var,
        bias: Var,
    },
    Projection(BoundDense),
}

impl<'a> BoundSpatial<'a> {
    fn apply(&self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        match self {
            BoundSpatial::GraphConv { convs, gamma, bias } => {
                let cols = convs
                    .iter()
                    .map(|(adj, w)| {
                        let y = tape.sparse_conv(adj, *w, x)?;
                        Ok(tape.relu(y))
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.dim_reduce(&cols, *gamma, *bias)
            }
            BoundSpatial::Projection(d) => d.apply(tape, x),
        }
    }
}

struct Bound<'a> {
    spatial: BoundSpatial<'a>,
    encoder: BoundCell,
    decoder: BoundCell,
    output: BoundDense,
}

impl Parameterized for ModelParameters {
    fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = Vec::new();
        match &self.spatial {
            SpatialStage::GraphConv { layer, drc } => {
                out.extend(layer.entries.iter().map(|e| &e.weights));
                out.push(&drc.gamma);
                out.push(&drc.bias);
            }
            SpatialStage::Projection(d) => {
                out.push(&d.weight);
                out.push(&d.bias);
            }
        }
        for cell in [&self.encoder, &self.decoder] {
            for g in cell.gates() {
                out.extend([&g.input, &g.hidden, &g.bias]);
            }
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        match &mut self.spatial {
            SpatialStage::GraphConv { layer, drc } => {
                out.extend(layer.entries.iter_mut().map(|e| &mut e.weights));
                out.push(&mut drc.gamma);
                out.push(&mut drc.bias);
            }
            SpatialStage::Projection(d) => {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        for cell in [&mut self.encoder, &mut self.decoder] {
            for g in cell.gates_mut() {
                out.extend([&mut g.input, &mut g.hidden, &mut g.bias]);
            }
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }
}

/// `ReLU(CAT((W_gc ⊙ W̃) X_t))` for one speed vector: an `N × ck` matrix with
/// columns in the layer's order.
pub fn graph_convolve(x: &Array1<f64>, layer: &GraphConvLayer) -> Result<Array2<f64>> {
    if x.len() != layer.size() {
        return Err(Error::ShapeMismatch {
            op: "graph_convolve",
            left: (layer.size(), layer.width()),
            right: (x.len(), 1),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().insert_axis(Axis(0)));
    let mut out = Array2::zeros((x.len(), layer.width()));
    for (c, e) in layer.entries.iter().enumerate() {
        let w = tape.constant(e.weights.clone());
        let y = tape.sparse_conv(&e.adjacency, w, xv)?;
        let y = tape.relu(y);
        out.column_mut(c).assign(&tape.value(y).row(0));
    }
    Ok(out)
}

/// Applies the kernel to every row of an `N × ck` matrix.
pub fn dimension_reduce(gc: &Array2<f64>, kernel: &DrcKernel) -> Result<Array2<f64>> {
    if gc.ncols() != kernel.gamma.nrows() {
        return Err(Error::ShapeMismatch {
            op: "dimension_reduce",
            left: gc.dim(),
            right: kernel.gamma.dim(),
        });
    }
    let mut tape = Tape::new();
    let cols: Vec<Var> = gc
        .columns()
        .into_iter()
        .map(|c| tape.constant(c.to_owned().insert_axis(Axis(0))))
        .collect();
    let gamma = tape.constant(kernel.gamma.clone());
    let bias = tape.constant(kernel.bias.clone());
    let y = tape.dim_reduce(&cols, gamma, bias)?;
    let c_out = kernel.gamma.ncols();
    Ok(tape
        .value(y)
        .clone()
        .into_shape_with_order((gc.nrows(), c_out))
        .expect("row-major node-by-feature layout"))
}

fn bind_cell<'a>(tape: &mut Tape<'a>, cell: &LstmCell) -> BoundCell {
    BoundCell {
        gates: cell.gates().map(|g| BoundGate {
            input: tape.constant(g.input.clone()),
            hidden: tape.constant(g.hidden.clone()),
            bias: tape.constant(g.bias.clone()),
        }),
    }
}

/// Runs the encoder over a sequence of flattened inputs from zero state and
/// returns the final `(h, C)`.
pub fn encode(cell: &LstmCell, inputs: &[Array1<f64>]) -> Result<(Array1<f64>, Array1<f64>)> {
    let mut tape = Tape::new();
    let bound = bind_cell(&mut tape, cell);
    let hs = cell.hidden_size();
    let mut h = tape.constant(Array2::zeros((1, hs)));
    let mut c = tape.constant(Array2::zeros((1, hs)));
    for (t, x) in inputs.iter().enumerate() {
        if x.len() != cell.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "encode input",
                left: (cell.input_dim(), 1),
                right: (x.len(), 1),
            });
        }
        let xv = tape.constant(x.clone().insert_axis(Axis(0)));
        (h, c) = bound.step(&mut tape, xv, h, c)?;
        tape.check_finite(h, || format!("encoder hidden state at step {t}"))?;
        tape.check_finite(c, || format!("encoder cell state at step {t}"))?;
    }
    Ok((tape.value(h).row(0).to_owned(), tape.value(c).row(0).to_owned()))
}

/// Autoregressive decoding: the first input is `x_last`, each later input the
/// previous prediction. Returns `horizon` predictions.
pub fn decode(
    cell: &LstmCell,
    output: &Dense,
    h: &Array1<f64>,
    c: &Array1<f64>,
    x_last: &Array1<f64>,
    horizon: usize,
) -> Result<Vec<Array1<f64>>> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let mut tape = Tape::new();
    let bound = bind_cell(&mut tape, cell);
    let out = BoundDense {
        weight: tape.constant(output.weight.clone()),
        bias: tape.constant(output.bias.clone()),
    };
    let mut hv = tape.constant(h.clone().insert_axis(Axis(0)));
    let mut cv = tape.constant(c.clone().insert_axis(Axis(0)));
    let mut input = tape.constant(x_last.clone().insert_axis(Axis(0)));
    let mut preds = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        (hv, cv) = bound.step(&mut tape, input, hv, cv)?;
        let y = out.apply(&mut tape, hv)?;
        preds.push(tape.value(y).row(0).to_owned());
        input = y;
    }
    Ok(preds)
}

/// Normalized `N × T_p` forecast for one normalized `N × h` window.
pub fn forward(model: &ModelParameters, window: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = model.predict_normalized(&[window.view()])?;
    Ok(out.remove(0))
}
