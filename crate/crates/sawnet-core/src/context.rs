//! Per-pass execution context.
//!
//! Everything a forward pass needs besides the input lives here: the tape,
//! train/eval mode, the rng for stochastic layers, and the neighbor-graph
//! policy. Graph capture/replay exists for gradient checking: finite
//! differences only measure the smooth part of the function, so the checker
//! captures the graphs once and replays them for every probe.

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::rng::Prng;
use crate::tensor::{Element, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How layers obtain neighbor graphs during a pass.
pub enum GraphMode<'a> {
    /// Compute from current features (normal operation).
    Dynamic,
    /// Compute, but also record every graph in order.
    Capture(&'a mut Vec<NeighborGraph>),
    /// Use previously captured graphs instead of recomputing.
    Replay(&'a [NeighborGraph]),
}

pub struct RunCtx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub mode: Mode,
    pub rng: Option<&'a mut Prng>,
    graphs: GraphMode<'a>,
    cursor: usize,
}

impl<'a, T: Element> RunCtx<'a, T> {
    pub fn train(tape: &'a mut Tape<T>, rng: &'a mut Prng) -> Self {
        Self {
            tape,
            mode: Mode::Train,
            rng: Some(rng),
            graphs: GraphMode::Dynamic,
            cursor: 0,
        }
    }

    pub fn eval(tape: &'a mut Tape<T>) -> Self {
        Self {
            tape,
            mode: Mode::Eval,
            rng: None,
            graphs: GraphMode::Dynamic,
            cursor: 0,
        }
    }

    pub fn with_graphs(mut self, graphs: GraphMode<'a>) -> Self {
        self.graphs = graphs;
        self.cursor = 0;
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// The rng, which must have been provided for stochastic layers to run.
    pub fn rng(&mut self) -> Result<&mut Prng> {
        match self.rng.as_deref_mut() {
            Some(r) => Ok(r),
            None => Err(Error::Contract(
                "this pass needs an rng (stochastic layer in train mode)".into(),
            )),
        }
    }

    /// Yields the next neighbor graph, either by running `compute` or by
    /// replaying a captured one. Graph consumers must call this in a fixed
    /// order, which model code does by construction.
    pub fn next_graph(
        &mut self,
        compute: impl FnOnce() -> Result<NeighborGraph>,
    ) -> Result<NeighborGraph> {
        match &mut self.graphs {
            GraphMode::Dynamic => compute(),
            GraphMode::Capture(store) => {
                let g = compute()?;
                store.push(g.clone());
                Ok(g)
            }
            GraphMode::Replay(store) => {
                let g = store.get(self.cursor).cloned().ok_or_else(|| {
                    Error::Contract(format!(
                        "graph replay exhausted after {} graphs",
                        self.cursor
                    ))
                })?;
                self.cursor += 1;
                Ok(g)
            }
        }
    }
}
