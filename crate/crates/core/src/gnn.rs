//! Score head, attention-weighted GIN, readout, and predictors.
//!
//! Parameters are split into two groups sharing one [`ParamStore`]:
//! `phi.*` produce the edge scores that drive the soft top-r selection and
//! `theta.*` predict the label from the attention-weighted graph.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBatch};
use crate::rng::{stream, Stream};
use crate::sinkhorn::{node_attention_on_tape, soft_top_r, ConvergenceTrace, Mode, Segments, TopRConfig};
use crate::tensor::{read_tensors, write_tensors, Axis, BoundParams, ParamStore, Tape, Tensor, Var};

/// Added to the score variance before the square root.
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Readout {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub readout: Readout,
    pub topr: TopRConfig,
    pub ablate_gumbel: bool,
    pub ablate_node_attn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_dim: 11,
            hidden_dim: 32,
            num_layers: 2,
            num_classes: 3,
            dropout: 0.3,
            readout: Readout::Sum,
            topr: TopRConfig::default(),
            ablate_gumbel: false,
            ablate_node_attn: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.topr.validate()
    }

    fn embed_dim(&self) -> usize {
        if self.num_layers == 0 {
            self.in_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Running mean/variance of raw edge scores, used outside training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub var: f64,
}

impl Default for ScoreStats {
    fn default() -> Self {
        Self { mean: 0.0, var: 1.0 }
    }
}

impl ScoreStats {
    pub fn update(&mut self, batch: ScoreStats) {
        self.mean = (1.0 - NORM_MOMENTUM) * self.mean + NORM_MOMENTUM * batch.mean;
        self.var = (1.0 - NORM_MOMENTUM) * self.var + NORM_MOMENTUM * batch.var;
    }
}

/// What randomness and statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMode {
    pub gumbel: bool,
    pub dropout: bool,
    /// Normalise scores with batch statistics instead of running ones.
    pub batch_stats: bool,
}

impl RunMode {
    pub const TRAIN: RunMode = RunMode { gumbel: true, dropout: true, batch_stats: true };
    pub const EVAL: RunMode = RunMode { gumbel: false, dropout: false, batch_stats: false };
}

/// Random streams consumed during a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRngs {
    pub gumbel: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl ForwardRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self { gumbel: stream(seed, Stream::Gumbel), dropout: stream(seed, Stream::Dropout) }
    }
}

#[derive(Debug)]
pub struct GraphForward {
    pub logits: Var,
    pub alpha_e: Var,
    pub alpha_v: Var,
    pub traces: Vec<ConvergenceTrace>,
    pub score_stats: Option<ScoreStats>,
}

#[derive(Debug)]
pub struct NodeForward {
    pub logits: Var,
    pub alpha_e: Var,
    pub traces: Vec<ConvergenceTrace>,
    pub score_stats: Option<ScoreStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub score_stats: ScoreStats,
}

fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f64>>();
    let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("weight shape");
    let b = Tensor::matrix(1, fan_out, draw(fan_out)).expect("bias shape");
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), b);
}

fn linear(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let xw = tape.matmul(x, w)?;
    let rows = tape.value(xw).rows();
    let bb = tape.broadcast_row(b, rows)?;
    tape.add(xw, bb)
}

fn dropout(tape: &mut Tape, x: Var, p: f64, active: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !active || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Scalar on the tape broadcast to an `[rows, 1]` column.
fn spread_scalar(tape: &mut Tape, s: Var, rows: usize) -> Result<Var> {
    let v = tape.reshape(s, &[1])?;
    tape.broadcast_row(v, rows)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        for group in ["phi", "theta"] {
            let mut d = config.in_dim;
            for l in 0..config.num_layers {
                init_linear(&mut params, &format!("{group}.gin{l}.lin1"), d, h, &mut rng);
                init_linear(&mut params, &format!("{group}.gin{l}.lin2"), h, h, &mut rng);
                d = h;
            }
        }
        let e = config.embed_dim();
        init_linear(&mut params, "phi.edge.lin1", 2 * e, h, &mut rng);
        init_linear(&mut params, "phi.edge.lin2", h, 1, &mut rng);
        init_linear(&mut params, "theta.cls.lin1", e, h, &mut rng);
        init_linear(&mut params, "theta.cls.lin2", h, config.num_classes, &mut rng);
        Ok(Self { config, params, score_stats: ScoreStats::default() })
    }

    fn gin_layer(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        graph: &Graph,
        h: Var,
        arc_weights: Option<Var>,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<Var> {
        let d = tape.value(h).cols();
        let mut msgs = tape.gather_rows(h, &graph.arc_src())?;
        if let Some(w) = arc_weights {
            let wb = tape.broadcast_col(w, d)?;
            msgs = tape.mul(msgs, wb)?;
        }
        let agg = tape.segment_sum(msgs, &graph.arc_dst(), graph.num_nodes())?;
        let z = tape.add(h, agg)?;
        let z = linear(tape, p, &format!("{prefix}.lin1"), z)?;
        let z = tape.relu(z)?;
        let z = linear(tape, p, &format!("{prefix}.lin2"), z)?;
        let z = tape.relu(z)?;
        dropout(tape, z, self.config.dropout, mode.dropout, &mut rngs.dropout)
    }

    fn check_features(&self, graph: &Graph) -> Result<()> {
        if graph.feat_dim() != self.config.in_dim {
            return Err(Error::ShapeMismatch {
                op: "encode_nodes",
                detail: format!("features have {} columns, model expects {}", graph.feat_dim(), self.config.in_dim),
            });
        }
        Ok(())
    }

    /// Score-head node embeddings: plain GIN, `num_layers` deep.
    pub fn encode_nodes(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        graph: &Graph,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<Var> {
        self.check_features(graph)?;
        let mut h = tape.constant(graph.features().clone());
        for l in 0..self.config.num_layers {
            h = self.gin_layer(tape, p, &format!("phi.gin{l}"), graph, h, None, mode, rngs)?;
        }
        Ok(h)
    }

    /// Normalised `[m, 1]` edge scores. The pairwise MLP is averaged over
    /// both orientations `[n_i, n_j]` and `[n_j, n_i]` so that relabelling
    /// nodes cannot change a score. Returns the batch statistics when they
    /// were used.
    pub fn edge_scores(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        graph: &Graph,
        emb: Var,
        mode: RunMode,
    ) -> Result<(Var, Option<ScoreStats>)> {
        let m = graph.num_edges();
        let (lo, hi): (Vec<usize>, Vec<usize>) = graph.edges().iter().copied().unzip();
        let hi_emb = tape.gather_rows(emb, &hi)?;
        let lo_emb = tape.gather_rows(emb, &lo)?;
        let fwd = tape.concat(&[lo_emb, hi_emb], Axis::Cols)?;
        let rev = tape.concat(&[hi_emb, lo_emb], Axis::Cols)?;
        let a = self.pair_mlp(tape, p, fwd)?;
        let b = self.pair_mlp(tape, p, rev)?;
        let both = tape.add(a, b)?;
        let raw = tape.scale(both, 0.5)?;

        if mode.batch_stats {
            if m < 2 {
                return Err(Error::TooFewEdges(m));
            }
            let mean = tape.mean(raw, None)?;
            let mean_col = spread_scalar(tape, mean, m)?;
            let centered = tape.sub(raw, mean_col)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean(sq, None)?;
            let stats = ScoreStats { mean: tape.value(mean).item(), var: tape.value(var).item() };
            let var_eps = tape.add_scalar(var, NORM_EPS)?;
            let std = tape.sqrt(var_eps)?;
            let std_col = spread_scalar(tape, std, m)?;
            Ok((tape.div(centered, std_col)?, Some(stats)))
        } else {
            let ScoreStats { mean, var } = self.score_stats;
            let centered = tape.add_scalar(raw, -mean)?;
            let denom = tape.constant(Tensor::full(&[m, 1], (var + NORM_EPS).sqrt()));
            Ok((tape.div(centered, denom)?, None))
        }
    }

    fn pair_mlp(&self, tape: &mut Tape, p: &BoundParams, pair: Var) -> Result<Var> {
        let z = linear(tape, p, "phi.edge.lin1", pair)?;
        let z = tape.relu(z)?;
        linear(tape, p, "phi.edge.lin2", z)
    }

    /// `h_i' = MLP(h_i + Σ_{j→i} α_ij h_j)` for one predictor layer.
    pub fn weighted_message_pass(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        graph: &Graph,
        h: Var,
        alpha_e: Var,
        layer: usize,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<Var> {
        let w = tape.gather_rows(alpha_e, &graph.arc_edge())?;
        self.gin_layer(tape, p, &format!("theta.gin{layer}"), graph, h, Some(w), mode, rngs)
    }

    /// Node-attention-weighted pooling into `[num_graphs, d]`.
    pub fn readout(
        &self,
        tape: &mut Tape,
        h: Var,
        alpha_v: Var,
        segment_of_node: &[usize],
        num_graphs: usize,
    ) -> Result<Var> {
        let d = tape.value(h).cols();
        let wb = tape.broadcast_col(alpha_v, d)?;
        let weighted = tape.mul(h, wb)?;
        pool(tape, weighted, segment_of_node, num_graphs, self.config.readout)
    }

    fn classify(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let z = linear(tape, p, "theta.cls.lin1", x)?;
        let z = tape.relu(z)?;
        linear(tape, p, "theta.cls.lin2", z)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &GraphBatch,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<(Var, Vec<ConvergenceTrace>, Option<ScoreStats>)> {
        let graph = &batch.graph;
        let m = graph.num_edges();
        let topr = self.effective_topr(mode);
        if topr.is_degenerate() {
            return Ok((tape.constant(Tensor::full(&[m, 1], 1.0)), Vec::new(), None));
        }
        let emb = self.encode_nodes(tape, p, graph, mode, rngs)?;
        let (scores, stats) = self.edge_scores(tape, p, graph, emb, mode)?;
        let segments = match topr.mode {
            Mode::Micro => Segments::new(batch.segment_of_edge.clone(), batch.num_graphs())?,
            Mode::Macro => Segments::single(m),
        };
        let out = soft_top_r(tape, scores, &segments, &topr, &mut rngs.gumbel)?;
        Ok((out.alpha, out.traces, stats))
    }

    /// Gumbel noise only in train mode and when not ablated.
    pub fn effective_topr(&self, mode: RunMode) -> TopRConfig {
        let mut t = self.config.topr;
        if !mode.gumbel || self.config.ablate_gumbel {
            t.sigma = 0.0;
        }
        t
    }

    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &GraphBatch,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<GraphForward> {
        let graph = &batch.graph;
        self.check_features(graph)?;
        let (alpha_e, traces, score_stats) = self.attention(tape, p, batch, mode, rngs)?;
        let n = graph.num_nodes();
        let alpha_v = if self.config.ablate_node_attn || self.config.topr.is_degenerate() {
            tape.constant(Tensor::full(&[n, 1], 1.0))
        } else {
            node_attention_on_tape(tape, graph, alpha_e)?
        };
        let mut h = tape.constant(graph.features().clone());
        for l in 0..self.config.num_layers {
            h = self.weighted_message_pass(tape, p, graph, h, alpha_e, l, mode, rngs)?;
        }
        let pooled = self.readout(tape, h, alpha_v, &batch.segment_of_node, batch.num_graphs())?;
        let logits = self.classify(tape, p, pooled)?;
        Ok(GraphForward { logits, alpha_e, alpha_v, traces, score_stats })
    }

    /// Per-node logits; node attention plays no role without pooling.
    pub fn forward_node(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &GraphBatch,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<NodeForward> {
        let graph = &batch.graph;
        self.check_features(graph)?;
        let (alpha_e, traces, score_stats) = self.attention(tape, p, batch, mode, rngs)?;
        let mut h = tape.constant(graph.features().clone());
        for l in 0..self.config.num_layers {
            h = self.weighted_message_pass(tape, p, graph, h, alpha_e, l, mode, rngs)?;
        }
        let logits = self.classify(tape, p, h)?;
        Ok(NodeForward { logits, alpha_e, traces, score_stats })
    }

    /// Unweighted GIN with plain pooling on the `theta` parameters.
    pub fn forward_plain_gin(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &GraphBatch,
        mode: RunMode,
        rngs: &mut ForwardRngs,
    ) -> Result<Var> {
        let graph = &batch.graph;
        self.check_features(graph)?;
        let mut h = tape.constant(graph.features().clone());
        for l in 0..self.config.num_layers {
            h = self.gin_layer(tape, p, &format!("theta.gin{l}"), graph, h, None, mode, rngs)?;
        }
        let pooled = pool(tape, h, &batch.segment_of_node, batch.num_graphs(), self.config.readout)?;
        self.classify(tape, p, pooled)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.values();
        tensors.insert("norm.running_mean".into(), Tensor::scalar(self.score_stats.mean));
        tensors.insert("norm.running_var".into(), Tensor::scalar(self.score_stats.var));
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_tensors(&mut w, &tensors)?;
        std::io::Write::flush(&mut w)?;
        std::fs::write(config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config_path(path))?)?;
        let mut tensors: BTreeMap<String, Tensor> =
            read_tensors(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let take = |t: &mut BTreeMap<String, Tensor>, k: &str| {
            t.remove(k).map(|v| v.item()).ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")))
        };
        let mean = take(&mut tensors, "norm.running_mean")?;
        let var = take(&mut tensors, "norm.running_var")?;
        let mut model = Model::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                tensors.len(),
                model.params.len()
            )));
        }
        model.params.set_values(&tensors)?;
        model.score_stats = ScoreStats { mean, var };
        Ok(model)
    }
}

/// Sidecar holding the model config next to a checkpoint.
pub fn config_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config.json");
    s.into()
}

fn pool(tape: &mut Tape, h: Var, segment_of_node: &[usize], num_graphs: usize, kind: Readout) -> Result<Var> {
    let d = tape.value(h).cols();
    let mut counts = vec![0usize; num_graphs];
    for &s in segment_of_node {
        counts[s] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptySegment(empty));
    }
    let summed = tape.segment_sum(h, segment_of_node, num_graphs)?;
    match kind {
        Readout::Sum => Ok(summed),
        Readout::Mean => {
            let denom: Vec<f64> = counts.iter().flat_map(|&c| std::iter::repeat(c as f64).take(d)).collect();
            let denom = tape.constant(Tensor::matrix(num_graphs, d, denom)?);
            tape.div(summed, denom)
        }
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn loss_nll(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = tape.value(logits).dims2();
    if labels.len() != b {
        return Err(Error::ShapeMismatch { op: "loss_nll", detail: format!("{b} rows, {} labels", labels.len()) });
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidLabel { label: y, num_classes: k });
        }
        onehot[i * k + y] = 1.0;
    }
    let mx = tape.max(logits, Some(Axis::Cols))?;
    let mxb = tape.broadcast_col(mx, k)?;
    let shifted = tape.sub(logits, mxb)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum(e, Some(Axis::Cols))?;
    let log_z = tape.log(z)?;
    let onehot = tape.constant(Tensor::matrix(b, k, onehot)?);
    let picked = tape.mul(shifted, onehot)?;
    let picked = tape.sum(picked, Some(Axis::Cols))?;
    let nll = tape.sub(log_z, picked)?;
    tape.mean(nll, None)
}

/// Class probabilities from logits, off the tape.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LabeledExample;

    fn toy_graph(n: usize, edges: &[(usize, usize)], dim: usize, salt: f64) -> Graph {
        let feats = (0..n * dim).map(|i| ((i as f64 + salt) * 0.37).sin()).collect();
        Graph::new(n, edges, Tensor::matrix(n, dim, feats).unwrap()).unwrap()
    }

    fn model(layers: usize, r: f64) -> Model {
        let cfg = ModelConfig {
            in_dim: 3,
            hidden_dim: 4,
            num_layers: layers,
            num_classes: 2,
            dropout: 0.0,
            topr: TopRConfig { r, sigma: 0.0, ..Default::default() },
            ..Default::default()
        };
        Model::new(cfg, 1).unwrap()
    }

    fn rngs() -> ForwardRngs {
        ForwardRngs::from_seed(0)
    }

    #[test]
    fn zero_layers_embed_is_features() {
        let m = model(0, 0.5);
        let g = toy_graph(3, &[(0, 1)], 3, 0.0);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let h = m.encode_nodes(&mut tape, &p, &g, RunMode::EVAL, &mut rngs()).unwrap();
        assert_eq!(tape.value(h), g.features());
    }

    #[test]
    fn isolated_node_depends_on_own_features() {
        let m = model(2, 0.5);
        let g1 = toy_graph(3, &[(0, 1)], 3, 0.0);
        // same node 2, different neighbourhood elsewhere
        let mut f = g1.features().clone();
        f.data_mut()[0] += 1.0;
        let g2 = Graph::new(3, g1.edges(), f).unwrap();
        let emb = |g: &Graph| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape);
            let h = m.encode_nodes(&mut tape, &p, g, RunMode::EVAL, &mut rngs()).unwrap();
            tape.value(h).row(2).to_vec()
        };
        assert_eq!(emb(&g1), emb(&g2));
    }

    #[test]
    fn edge_scores_normalised_and_orientation_free() {
        let m = model(2, 0.5);
        let g = toy_graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)], 3, 0.3);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let emb = m.encode_nodes(&mut tape, &p, &g, RunMode::TRAIN, &mut rngs()).unwrap();
        let (s, stats) = m.edge_scores(&mut tape, &p, &g, emb, RunMode::TRAIN).unwrap();
        let stats = stats.unwrap();
        let s = tape.value(s).data().to_vec();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - stats.var / (stats.var + NORM_EPS)).abs() < 1e-9);

        // reversed input orientation gives the same canonical edges
        let rev: Vec<(usize, usize)> = g.edges().iter().map(|&(a, b)| (b, a)).collect();
        let g_rev = Graph::new(5, &rev, g.features().clone()).unwrap();
        let mut tape2 = Tape::new();
        let p2 = m.params.bind(&mut tape2);
        let emb2 = m.encode_nodes(&mut tape2, &p2, &g_rev, RunMode::TRAIN, &mut rngs()).unwrap();
        let (s2, _) = m.edge_scores(&mut tape2, &p2, &g_rev, emb2, RunMode::TRAIN).unwrap();
        assert_eq!(tape2.value(s2).data(), s.as_slice());
    }

    #[test]
    fn identical_endpoint_embeddings_give_zero_scores() {
        let m = model(2, 0.5);
        // every node has the same features on a vertex-transitive graph
        let g = Graph::new(4, &[(0, 1), (1, 2), (2, 3), (3, 0)], Tensor::full(&[4, 3], 0.5)).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let emb = m.encode_nodes(&mut tape, &p, &g, RunMode::TRAIN, &mut rngs()).unwrap();
        let (s, _) = m.edge_scores(&mut tape, &p, &g, emb, RunMode::TRAIN).unwrap();
        assert!(tape.value(s).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn too_few_edges_for_batch_norm() {
        let m = model(1, 0.5);
        let g = toy_graph(2, &[(0, 1)], 3, 0.0);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let emb = m.encode_nodes(&mut tape, &p, &g, RunMode::TRAIN, &mut rngs()).unwrap();
        assert!(matches!(m.edge_scores(&mut tape, &p, &g, emb, RunMode::TRAIN), Err(Error::TooFewEdges(1))));
    }

    fn message_pass(m: &Model, g: &Graph, h: &Tensor, alpha: f64) -> Tensor {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let hv = tape.constant(h.clone());
        let a = tape.constant(Tensor::full(&[g.num_edges(), 1], alpha));
        let out = m.weighted_message_pass(&mut tape, &p, g, hv, a, 0, RunMode::EVAL, &mut rngs()).unwrap();
        tape.value(out).clone()
    }

    fn plain_layer(m: &Model, g: &Graph, h: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let hv = tape.constant(h.clone());
        let out = m.gin_layer(&mut tape, &p, "theta.gin0", g, hv, None, RunMode::EVAL, &mut rngs()).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn message_pass_weight_cases() {
        let m = model(1, 0.5);
        let g = toy_graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)], 3, 0.0);
        let h = g.features().clone();
        assert_eq!(message_pass(&m, &g, &h, 1.0), plain_layer(&m, &g, &h));
        // zero weights: only self features reach the MLP
        let isolated = Graph::new(4, &[], h.clone()).unwrap();
        assert_eq!(message_pass(&m, &g, &h, 0.0), plain_layer(&m, &isolated, &h));
        // half weights on a 2-regular graph with equal features: h + 0.5·2h = 2h
        let eq = Tensor::full(&[4, 3], 0.8);
        let doubled = Tensor::full(&[4, 3], 1.6);
        let got = message_pass(&m, &g, &eq, 0.5);
        let want = plain_layer(&m, &isolated, &doubled);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_cases() {
        let m = model(1, 0.5);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let ones = tape.constant(Tensor::full(&[3, 1], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[3, 1]));
        let seg = [0, 0, 1];
        let out = m.readout(&mut tape, h, ones, &seg, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[4., 6., 5., 6.]);
        let out = m.readout(&mut tape, h, zeros, &seg, 2).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let single = tape.constant(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
        let a = tape.constant(Tensor::full(&[1, 1], 0.25));
        let out = m.readout(&mut tape, single, a, &[0], 1).unwrap();
        assert_eq!(tape.value(out).data(), &[0.75, -0.25]);
        assert!(matches!(m.readout(&mut tape, h, ones, &[0, 0, 0], 2), Err(Error::EmptySegment(1))));
    }

    #[test]
    fn nll_cases() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[2, 4], 0.3));
        let l = loss_nll(&mut tape, logits, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let peaked = tape.constant(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap());
        let l = loss_nll(&mut tape, peaked, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-20);

        let two = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let l = loss_nll(&mut tape, two, &[1, 1]).unwrap();
        let l1 = (1f64.exp() + 1.0).ln() - 0.0;
        let l2 = (1.0 + 2f64.exp()).ln() - 2.0;
        assert!((tape.value(l).item() - (l1 + l2) / 2.0).abs() < 1e-12);

        assert!(matches!(loss_nll(&mut tape, two, &[0, 2]), Err(Error::InvalidLabel { label: 2, .. })));
    }

    #[test]
    fn degenerate_ratio_matches_plain_gin() {
        let m = model(2, 1.0);
        let a = LabeledExample::new(toy_graph(4, &[(0, 1), (1, 2), (2, 3)], 3, 0.0), 0);
        let b = LabeledExample::new(toy_graph(3, &[(0, 1), (1, 2), (0, 2)], 3, 1.0), 1);
        let batch = GraphBatch::new(&[&a, &b]).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let out = m.forward_graph(&mut tape, &p, &batch, RunMode::EVAL, &mut rngs()).unwrap();
        let plain = m.forward_plain_gin(&mut tape, &p, &batch, RunMode::EVAL, &mut rngs()).unwrap();
        assert_eq!(tape.value(out.logits), tape.value(plain));
        assert!(tape.value(out.alpha_e).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn node_ablation_forces_unit_node_attention() {
        let mut m = model(2, 0.5);
        m.config.ablate_node_attn = true;
        let a = LabeledExample::new(toy_graph(4, &[(0, 1), (1, 2), (2, 3)], 3, 0.0), 0);
        let batch = GraphBatch::new(&[&a]).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let out = m.forward_graph(&mut tape, &p, &batch, RunMode::EVAL, &mut rngs()).unwrap();
        assert!(tape.value(out.alpha_v).data().iter().all(|&v| v == 1.0));
        assert!(tape.value(out.alpha_e).data().iter().any(|&v| v < 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = model(2, 0.4);
        m.score_stats = ScoreStats { mean: 0.25, var: 2.5 };
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params.values(), m.params.values());
        assert_eq!(back.score_stats, m.score_stats);
    }
}
