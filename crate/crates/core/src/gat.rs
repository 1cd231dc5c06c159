//! The graph-attention block: attention-derived adjacency over a node set,
//! two dense graph layers, and attention-weighted sum pooling down to a
//! single feature vector. One block definition serves unsupervised
//! pretraining and every position of the recognition head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, Real, Tape, Var};

/// Parameters of one block: adjacency projections `u`/`v` (F x F_a), graph
/// layers `w1`/`w2` (F x F), pooling attention `w_p` (F x 1).
#[derive(Debug, Clone)]
pub struct GatBlockParams {
    pub u: Parameter,
    pub v: Parameter,
    pub w1: Parameter,
    pub w2: Parameter,
    pub w_p: Parameter,
}

impl GatBlockParams {
    /// Node feature width F.
    pub fn feature_dim(&self) -> usize {
        self.w1.value.rows()
    }

    /// Attention projection width F_a.
    pub fn attention_dim(&self) -> usize {
        self.u.value.cols()
    }

    /// Parameters in fixed order (u, v, w1, w2, w_p) for optimizers and
    /// checkpoints.
    pub fn params(&self) -> [&Parameter; 5] {
        [&self.u, &self.v, &self.w1, &self.w2, &self.w_p]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 5] {
        [
            &mut self.u,
            &mut self.v,
            &mut self.w1,
            &mut self.w2,
            &mut self.w_p,
        ]
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Xavier-uniform bound for a `fan_in x fan_out` matrix.
fn xavier_bound(fan_in: usize, fan_out: usize) -> Real {
    (6.0 / (fan_in + fan_out) as Real).sqrt()
}

/// Fresh block parameters, each matrix uniform in (-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)). Deterministic per seed.
pub fn init_params(f: usize, f_a: usize, seed: u64) -> Result<GatBlockParams> {
    if f == 0 || f_a == 0 {
        return Err(Error::InvalidArgument {
            op: "init_params",
            msg: format!("dimensions must be >= 1, got F={f}, F_a={f_a}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |name: &str, rows: usize, cols: usize| {
        let a = xavier_bound(rows, cols);
        Parameter::new(name, Matrix::uniform(rows, cols, -a, a, &mut rng))
    };
    Ok(GatBlockParams {
        u: draw("U", f, f_a),
        v: draw("V", f, f_a),
        w1: draw("W1", f, f),
        w2: draw("W2", f, f),
        w_p: draw("w_p", f, 1),
    })
}

/// Deep copy with gradients zeroed; the source is untouched afterwards.
pub fn copy_params(src: &GatBlockParams) -> GatBlockParams {
    let copy_one = |p: &Parameter| Parameter::new(&p.name, p.value.clone());
    GatBlockParams {
        u: copy_one(&src.u),
        v: copy_one(&src.v),
        w1: copy_one(&src.w1),
        w2: copy_one(&src.w2),
        w_p: copy_one(&src.w_p),
    }
}

fn check_nodes(params: &GatBlockParams, nodes: &Matrix) -> Result<()> {
    if nodes.rows() == 0 {
        return Err(Error::EmptyNodeSet);
    }
    if nodes.cols() != params.feature_dim() {
        return Err(Error::DimMismatch {
            op: "gat_forward",
            lhs: format!("node features {}x{}", nodes.rows(), nodes.cols()),
            rhs: format!("block feature dim {}", params.feature_dim()),
        });
    }
    Ok(())
}

/// Intermediate products of one forward pass, for inspection and tests.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct GatParts {
    pub attention: Matrix,
    pub h2: Matrix,
    pub pooling: Matrix,
    pub output: Matrix,
}

pub(crate) fn gat_forward_parts(params: &GatBlockParams, nodes: &Matrix) -> Result<GatParts> {
    check_nodes(params, nodes)?;
    let scale = 1.0 / (params.attention_dim() as Real).sqrt();
    let scores = nodes
        .matmul(&params.u.value)?
        .matmul(&nodes.matmul(&params.v.value)?.transpose())?
        .scale(scale);
    let attention = scores.row_softmax();
    let h1 = attention.matmul(nodes)?.matmul(&params.w1.value)?.relu();
    let h2 = attention.matmul(&h1)?.matmul(&params.w2.value)?.relu();
    let pooling = h2.matmul(&params.w_p.value)?.transpose().row_softmax();
    let output = pooling.matmul(&h2)?;
    Ok(GatParts {
        attention,
        h2,
        pooling,
        output,
    })
}

/// Map a node set (M x F) to a single 1 x F vector:
/// A = rowsoftmax((Y U)(Y V)^T / sqrt(F_a)), two ReLU graph layers sharing A,
/// then an attention-weighted sum over node rows.
pub fn gat_forward(params: &GatBlockParams, nodes: &Matrix) -> Result<Matrix> {
    gat_forward_parts(params, nodes).map(|parts| parts.output)
}

/// Tape handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GatVars {
    pub u: Var,
    pub v: Var,
    pub w1: Var,
    pub w2: Var,
    pub w_p: Var,
}

/// Register the block's parameters on a tape for one training step.
pub fn watch(tape: &mut Tape, params: &GatBlockParams) -> GatVars {
    GatVars {
        u: tape.param(params.u.value.clone()),
        v: tape.param(params.v.value.clone()),
        w1: tape.param(params.w1.value.clone()),
        w2: tape.param(params.w2.value.clone()),
        w_p: tape.param(params.w_p.value.clone()),
    }
}

/// Parameter handles in the same fixed order as [`GatBlockParams::params`].
pub fn var_list(vars: &GatVars) -> [Var; 5] {
    [vars.u, vars.v, vars.w1, vars.w2, vars.w_p]
}

/// [`gat_forward`] recorded on a tape so gradients reach the parameters and
/// the node features.
pub fn gat_forward_traced(tape: &mut Tape, vars: &GatVars, nodes: Var) -> Result<Var> {
    let f_a = tape.value(vars.u).cols();
    if tape.value(nodes).rows() == 0 {
        return Err(Error::EmptyNodeSet);
    }
    let scale = 1.0 / (f_a as Real).sqrt();
    let yu = tape.matmul(nodes, vars.u)?;
    let yv = tape.matmul(nodes, vars.v)?;
    let yv_t = tape.transpose(yv);
    let scores = tape.matmul(yu, yv_t)?;
    let scores = tape.scale(scores, scale);
    let attention = tape.row_softmax(scores);
    let ay = tape.matmul(attention, nodes)?;
    let h1_pre = tape.matmul(ay, vars.w1)?;
    let h1 = tape.relu(h1_pre);
    let ah1 = tape.matmul(attention, h1)?;
    let h2_pre = tape.matmul(ah1, vars.w2)?;
    let h2 = tape.relu(h2_pre);
    let pooled_scores = tape.matmul(h2, vars.w_p)?;
    let pooled_t = tape.transpose(pooled_scores);
    let pooling = tape.row_softmax(pooled_t);
    tape.matmul(pooling, h2)
}
