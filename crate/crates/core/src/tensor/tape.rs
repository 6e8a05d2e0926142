use std::rc::Rc;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running batch-norm statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn fresh(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Abs {
        x: Var,
    },
    AbsSum {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Max {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        plane: usize,
    },
    Conv3x3 {
        x: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    Filter3x3 {
        x: Var,
        kernel: [f64; 9],
        planes: usize,
        h: usize,
        w: usize,
    },
    HardSwish {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Gelu {
        x: Var,
    },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Which side of every non-smooth point the forward pass landed on.
///
/// Two evaluations with different signatures straddle a kink, so a finite
/// difference between them is meaningless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinkTrace {
    pub signature: u64,
    pub min_distance: f64,
}

impl KinkTrace {
    fn new() -> Self {
        Self { signature: 0xcbf2_9ce4_8422_2325, min_distance: f64::INFINITY }
    }
}

/// Append-only record of operations. Single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    kinks: Option<KinkTrace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that records branch decisions at kinks (abs, max, hardswish).
    pub fn with_kink_tracking() -> Self {
        Self { nodes: Vec::new(), kinks: Some(KinkTrace::new()) }
    }

    pub fn kink_trace(&self) -> Option<KinkTrace> {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Learnable leaf; gradients are reported for it after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a computed node after checking the finiteness contract.
    pub(crate) fn record(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    pub(crate) fn note_branch(&mut self, branch: u8, distance: f64) {
        if let Some(trace) = self.kinks.as_mut() {
            trace.signature = (trace.signature ^ branch as u64).wrapping_mul(0x0100_0000_01b3);
            if distance < trace.min_distance {
                trace.min_distance = distance;
            }
        }
    }

    pub(crate) fn tracks_kinks(&self) -> bool {
        self.kinks.is_some()
    }
}
