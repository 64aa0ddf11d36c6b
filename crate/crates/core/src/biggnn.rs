//! Bidirectional gated graph neural network encoder.
//!
//! Each layer aggregates `m_v = sum_{u in N(v)} h_u W^(l)` separately over
//! successors (forward) and predecessors (backward), then updates each node
//! with a per-direction GRU. The output node matrix is `[h_fwd ; h_bwd]` and
//! the graph embedding is its column-wise max.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{gru_cell, init_gru, init_linear, linear};
use crate::numerics::{ParameterSet, Tape, Tensor, Var};

/// Adjacency of a directed graph as successor and predecessor lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderGraph {
    pub successors: Arc<Vec<Vec<usize>>>,
    pub predecessors: Arc<Vec<Vec<usize>>>,
}

impl EncoderGraph {
    /// Endpoints must be `< n`.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut succ = vec![Vec::new(); n];
        let mut pred = vec![Vec::new(); n];
        for &(a, b) in edges {
            debug_assert!(a < n && b < n, "edge ({a}, {b}) out of range for {n} nodes");
            succ[a].push(b);
            pred[b].push(a);
        }
        EncoderGraph {
            successors: Arc::new(succ),
            predecessors: Arc::new(pred),
        }
    }

    pub fn len(&self) -> usize {
        self.successors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.successors.is_empty()
    }

    pub fn neighbours(&self, dir: Direction) -> &Arc<Vec<Vec<usize>>> {
        match dir {
            Direction::Forward => &self.successors,
            Direction::Backward => &self.predecessors,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Messages from successors (outgoing edges).
    Forward,
    /// Messages from predecessors (incoming edges).
    Backward,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiGgnnConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Question and sub-KSG graphs use one parameter set.
    pub share_encoders: bool,
}

impl Default for BiGgnnConfig {
    fn default() -> Self {
        BiGgnnConfig {
            layers: 2,
            hidden: 128,
            share_encoders: false,
        }
    }
}

impl BiGgnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "biggnn needs layers >= 1 and hidden >= 1 (got {} and {})",
                self.layers, self.hidden
            )));
        }
        Ok(())
    }
}

pub fn init_biggnn<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    input: usize,
    cfg: &BiGgnnConfig,
    rng: &mut R,
) {
    let d = cfg.hidden;
    init_linear(params, &format!("{prefix}.proj"), input, d, rng);
    for dir in [Direction::Forward, Direction::Backward] {
        for l in 0..cfg.layers {
            params.glorot(&format!("{prefix}.{}.msg{l}", dir.tag()), d, d, rng);
        }
        init_gru(params, &format!("{prefix}.{}.gru", dir.tag()), d, d, rng);
    }
}

/// Messages for every node at `layer` (0-based) in one direction.
pub fn aggregate(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    states: Var,
    graph: &EncoderGraph,
    dir: Direction,
    layer: usize,
) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.{}.msg{layer}", dir.tag()))?;
    // sum_u h_u W == (sum_u h_u) W
    let summed = tape.propagate(states, graph.neighbours(dir).clone())?;
    tape.matmul(summed, w)
}

pub fn layer_update(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    messages: Var,
    prev: Var,
    dir: Direction,
) -> Result<Var> {
    gru_cell(
        tape,
        params,
        &format!("{prefix}.{}.gru", dir.tag()),
        messages,
        prev,
    )
}

/// Runs `layers` bidirectional steps from D-wide initial states; returns the
/// `n x 2D` node matrix.
pub fn propagate_states(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    graph: &EncoderGraph,
    init: Var,
    layers: usize,
) -> Result<Var> {
    if graph.is_empty() {
        return Err(Error::invalid("cannot encode an empty graph"));
    }
    if tape.value(init).rows() != graph.len() {
        return Err(Error::Shape {
            op: "biggnn",
            shapes: format!(
                "{} initial rows vs {} nodes",
                tape.value(init).rows(),
                graph.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(2);
    for dir in [Direction::Forward, Direction::Backward] {
        let mut h = init;
        for l in 0..layers {
            let m = aggregate(tape, params, prefix, h, graph, dir, l)?;
            h = layer_update(tape, params, prefix, m, h, dir)?;
        }
        out.push(h);
    }
    tape.concat_cols(&out)
}

/// Projects initial embeddings to D, encodes, and max-pools. Returns the node
/// matrix and the `1 x 2D` graph embedding.
pub fn encode_graph(
    tape: &mut Tape,
    params: &ParameterSet,
    prefix: &str,
    graph: &EncoderGraph,
    initial: Var,
    cfg: &BiGgnnConfig,
) -> Result<(Var, Var)> {
    if graph.is_empty() {
        return Err(Error::invalid("cannot encode an empty graph"));
    }
    let h0 = linear(tape, params, &format!("{prefix}.proj"), initial)?;
    let nodes = propagate_states(tape, params, prefix, graph, h0, cfg.layers)?;
    let r = tape.max_rows(nodes)?;
    Ok((nodes, r))
}

/// Plain values of an encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphEncoding {
    pub nodes: Tensor,
    pub r: Tensor,
}

/// Gradient-free convenience wrapper around [`encode_graph`].
pub fn encode_graph_values(
    params: &ParameterSet,
    prefix: &str,
    graph: &EncoderGraph,
    initial: Tensor,
    cfg: &BiGgnnConfig,
) -> Result<GraphEncoding> {
    let mut tape = Tape::new();
    let x = tape.constant(initial);
    let (nodes, r) = encode_graph(&mut tape, params, prefix, graph, x, cfg)?;
    Ok(GraphEncoding {
        nodes: tape.value(nodes).clone(),
        r: tape.value(r).clone(),
    })
}
