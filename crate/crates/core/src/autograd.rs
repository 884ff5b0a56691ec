//! Tape-based reverse-mode automatic differentiation on dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D array. Scalars are `1×1`, vectors are
//! `1×n` rows, and batches of vectors are `B×n` with one sample per row. Each
//! primitive appends one node whose operands precede it, so append order is a
//! topological order and the backward pass is a single reverse scan.
//!
//! ```
//! use flowtune::autograd::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.scalar(3.0);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.scalar(x), Some(6.0));
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("variable does not belong to this tape (or the tape was cleared since it was recorded)")]
    ForeignVar,
    #[error("backward requires a scalar (1x1) output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: (usize, usize),
        output: (usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape (and tape generation) that
/// produced it; using it elsewhere yields [`AutogradError::ForeignVar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    generation: u32,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Primitive operation kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Elementwise `a + b`.
    Add,
    /// Elementwise `a - b`.
    Sub,
    /// Elementwise `a * b`.
    Mul,
    /// Matrix product `a · b`.
    MatMul,
    /// `x · w + b` with `b` a `1×n` row broadcast over the rows of `x`.
    Affine,
    /// `ln(1 + e^x)`, elementwise.
    Softplus,
    /// Elementwise `x²`.
    Square,
    /// Mean over all entries, giving `1×1`.
    Mean,
    /// Sum over all entries, giving `1×1`.
    Sum,
    /// Column-wise concatenation of any number of operands with equal row count.
    Concat,
    /// Columns `start..end` of the operand.
    Slice { start: usize, end: usize },
    /// Multiplication by a constant.
    Scale(f64),
    /// `x * scale + shift`, column-wise with constant vectors.
    ColAffine { scale: Array1<f64>, shift: Array1<f64> },
    /// `(x - mean) / std`, column-wise with constant vectors.
    Normalize { mean: Array1<f64>, std: Array1<f64> },
    /// Per-row constant matrix applied to each row: `y_r = M_r · x_r`.
    RowLinear(Vec<Array2<f64>>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Softplus => "softplus",
            OpKind::Square => "square",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Scale(_) => "scale",
            OpKind::ColAffine { .. } => "col_affine",
            OpKind::Normalize { .. } => "normalize",
            OpKind::RowLinear(_) => "row_linear",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Kind(OpKind),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    operands: Vec<usize>,
    value: Array2<f64>,
    /// Local partial cached at record time (the logistic of the input for softplus).
    cache: Option<Array2<f64>>,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    generation: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            nodes: Vec::with_capacity(nodes),
        }
    }

    /// Drops all recorded nodes but keeps the allocation. Vars recorded
    /// before the clear become foreign to this tape.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(&self.nodes[v.index])
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            generation: self.generation,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Node {
            op: Op::Leaf,
            operands: Vec::new(),
            value,
            cache: None,
            requires_grad: true,
        })
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Node {
            op: Op::Leaf,
            operands: Vec::new(),
            value,
            cache: None,
            requires_grad: false,
        })
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Records a `1×n` row vector leaf.
    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn value(&self, v: Var) -> Result<&Array2<f64>> {
        Ok(&self.check(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<(usize, usize)> {
        Ok(self.check(v)?.value.dim())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Affine, &[x, w, b])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Softplus, &[x])
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Square, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Mean, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[x])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(OpKind::Concat, parts)
    }
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.record(OpKind::Slice { start, end }, &[x])
    }
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.record(OpKind::Scale(factor), &[x])
    }
    pub fn col_affine(&mut self, x: Var, scale: Array1<f64>, shift: Array1<f64>) -> Result<Var> {
        self.record(OpKind::ColAffine { scale, shift }, &[x])
    }
    pub fn normalize(&mut self, x: Var, mean: Array1<f64>, std: Array1<f64>) -> Result<Var> {
        self.record(OpKind::Normalize { mean, std }, &[x])
    }
    pub fn row_linear(&mut self, x: Var, matrices: Vec<Array2<f64>>) -> Result<Var> {
        self.record(OpKind::RowLinear(matrices), &[x])
    }

    /// Records one primitive. Operands must live on this tape and have
    /// shapes conforming to `op`.
    pub fn record(&mut self, op: OpKind, operands: &[Var]) -> Result<Var> {
        let name = op.name();
        let expect = |n: usize| -> Result<()> {
            if operands.len() != n {
                return Err(AutogradError::Shape {
                    op: name,
                    detail: format!("expected {n} operands, got {}", operands.len()),
                });
            }
            Ok(())
        };
        let mut vals: Vec<&Array2<f64>> = Vec::with_capacity(operands.len());
        let mut requires_grad = false;
        for v in operands {
            let node = self.check(*v)?;
            requires_grad |= node.requires_grad;
            vals.push(&node.value);
        }
        let mismatch = |detail: String| AutogradError::Shape { op: name, detail };

        let mut cache = None;
        let value = match &op {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                expect(2)?;
                let (a, b) = (vals[0], vals[1]);
                if a.dim() != b.dim() {
                    return Err(mismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
                }
                match op {
                    OpKind::Add => a + b,
                    OpKind::Sub => a - b,
                    _ => a * b,
                }
            }
            OpKind::MatMul => {
                expect(2)?;
                let (a, b) = (vals[0], vals[1]);
                if a.ncols() != b.nrows() {
                    return Err(mismatch(format!("{:?} · {:?}", a.dim(), b.dim())));
                }
                a.dot(b)
            }
            OpKind::Affine => {
                expect(3)?;
                let (x, w, b) = (vals[0], vals[1], vals[2]);
                if x.ncols() != w.nrows() || b.dim() != (1, w.ncols()) {
                    return Err(mismatch(format!(
                        "x {:?}, w {:?}, b {:?}",
                        x.dim(),
                        w.dim(),
                        b.dim()
                    )));
                }
                let mut y = x.dot(w);
                y += b;
                y
            }
            OpKind::Softplus => {
                expect(1)?;
                let x = vals[0];
                cache = Some(x.mapv(sigmoid));
                x.mapv(softplus)
            }
            OpKind::Square => {
                expect(1)?;
                vals[0].mapv(|v| v * v)
            }
            OpKind::Mean | OpKind::Sum => {
                expect(1)?;
                let x = vals[0];
                if x.is_empty() {
                    return Err(mismatch("empty operand".into()));
                }
                let total = x.sum();
                let v = if matches!(op, OpKind::Mean) {
                    total / x.len() as f64
                } else {
                    total
                };
                Array2::from_elem((1, 1), v)
            }
            OpKind::Concat => {
                if vals.is_empty() {
                    return Err(mismatch("no operands".into()));
                }
                let rows = vals[0].nrows();
                if vals.iter().any(|v| v.nrows() != rows) {
                    let dims: Vec<_> = vals.iter().map(|v| v.dim()).collect();
                    return Err(mismatch(format!("row counts differ: {dims:?}")));
                }
                let views: Vec<ArrayView2<f64>> = vals.iter().map(|v| v.view()).collect();
                ndarray::concatenate(Axis(1), &views).expect("validated concat")
            }
            OpKind::Slice { start, end } => {
                expect(1)?;
                let x = vals[0];
                if start > end || *end > x.ncols() {
                    return Err(mismatch(format!("columns {start}..{end} of {:?}", x.dim())));
                }
                x.slice(s![.., *start..*end]).to_owned()
            }
            OpKind::Scale(factor) => {
                expect(1)?;
                vals[0] * *factor
            }
            OpKind::ColAffine { scale, shift } => {
                expect(1)?;
                let x = vals[0];
                if scale.len() != x.ncols() || shift.len() != x.ncols() {
                    return Err(mismatch(format!(
                        "x {:?}, scale {}, shift {}",
                        x.dim(),
                        scale.len(),
                        shift.len()
                    )));
                }
                let mut y = x * scale;
                y += shift;
                y
            }
            OpKind::Normalize { mean, std } => {
                expect(1)?;
                let x = vals[0];
                if mean.len() != x.ncols() || std.len() != x.ncols() {
                    return Err(mismatch(format!(
                        "x {:?}, mean {}, std {}",
                        x.dim(),
                        mean.len(),
                        std.len()
                    )));
                }
                let mut y = x - mean;
                y /= std;
                y
            }
            OpKind::RowLinear(mats) => {
                expect(1)?;
                let x = vals[0];
                if mats.len() != x.nrows() || mats.iter().any(|m| m.ncols() != x.ncols()) {
                    return Err(mismatch(format!(
                        "x {:?} with {} matrices",
                        x.dim(),
                        mats.len()
                    )));
                }
                let out = mats.first().map(|m| m.nrows()).unwrap_or(0);
                if mats.iter().any(|m| m.nrows() != out) {
                    return Err(mismatch("matrices differ in row count".into()));
                }
                let mut y = Array2::zeros((x.nrows(), out));
                for (r, m) in mats.iter().enumerate() {
                    y.row_mut(r).assign(&m.dot(&x.row(r)));
                }
                y
            }
        };

        Ok(self.push(Node {
            op: Op::Kind(op),
            operands: operands.iter().map(|v| v.index).collect(),
            value,
            cache,
            requires_grad,
        }))
    }

    /// Reverse sweep from a scalar output, retaining gradients for every node.
    pub fn backward(&self, y: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(y)?;
        if (rows, cols) != (1, 1) {
            return Err(AutogradError::NonScalarOutput { rows, cols });
        }
        self.backward_seeded(y, Array2::ones((1, 1)), true)
    }

    /// Reverse sweep keeping only leaf gradients, which bounds memory on
    /// long unrolled tapes.
    pub fn backward_leaves(&self, y: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(y)?;
        if (rows, cols) != (1, 1) {
            return Err(AutogradError::NonScalarOutput { rows, cols });
        }
        self.backward_seeded(y, Array2::ones((1, 1)), false)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `y`) backward.
    pub fn backward_seeded(&self, y: Var, seed: Array2<f64>, keep_all: bool) -> Result<Gradients> {
        let out = self.check(y)?;
        if seed.dim() != out.value.dim() {
            return Err(AutogradError::SeedShape {
                seed: seed.dim(),
                output: out.value.dim(),
            });
        }
        let n = y.index + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[y.index] = Some(seed);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let op = match &node.op {
                Op::Leaf => continue,
                Op::Kind(op) => op,
            };
            let g = if keep_all {
                match &grads[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.propagate(op, node, g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            generation: self.generation,
            grads,
        })
    }

    fn propagate(&self, op: &OpKind, node: &Node, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let ops = &node.operands;
        let val = |k: usize| &self.nodes[ops[k]].value;
        let wants = |k: usize| self.nodes[ops[k]].requires_grad;
        match op {
            OpKind::Add => {
                if wants(1) {
                    accumulate(grads, ops[1], g.clone());
                }
                if wants(0) {
                    accumulate(grads, ops[0], g);
                }
            }
            OpKind::Sub => {
                if wants(1) {
                    accumulate(grads, ops[1], -&g);
                }
                if wants(0) {
                    accumulate(grads, ops[0], g);
                }
            }
            OpKind::Mul => {
                if wants(0) {
                    accumulate(grads, ops[0], &g * val(1));
                }
                if wants(1) {
                    accumulate(grads, ops[1], &g * val(0));
                }
            }
            OpKind::MatMul => {
                if wants(0) {
                    accumulate(grads, ops[0], g.dot(&val(1).t()));
                }
                if wants(1) {
                    accumulate(grads, ops[1], val(0).t().dot(&g));
                }
            }
            OpKind::Affine => {
                if wants(2) {
                    accumulate(grads, ops[2], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if wants(1) {
                    accumulate(grads, ops[1], val(0).t().dot(&g));
                }
                if wants(0) {
                    accumulate(grads, ops[0], g.dot(&val(1).t()));
                }
            }
            OpKind::Softplus => {
                let sig = node.cache.as_ref().expect("softplus caches its derivative");
                accumulate(grads, ops[0], g * sig);
            }
            OpKind::Square => {
                let mut d = val(0) * 2.0;
                d *= &g;
                accumulate(grads, ops[0], d);
            }
            OpKind::Mean | OpKind::Sum => {
                let x = val(0);
                let mut scale = g[[0, 0]];
                if matches!(op, OpKind::Mean) {
                    scale /= x.len() as f64;
                }
                accumulate(grads, ops[0], Array2::from_elem(x.dim(), scale));
            }
            OpKind::Concat => {
                let mut start = 0;
                for (k, &idx) in ops.iter().enumerate() {
                    let width = val(k).ncols();
                    if wants(k) {
                        accumulate(grads, idx, g.slice(s![.., start..start + width]).to_owned());
                    }
                    start += width;
                }
            }
            OpKind::Slice { start, end } => {
                let x = val(0);
                let mut d = Array2::zeros(x.dim());
                d.slice_mut(s![.., *start..*end]).assign(&g);
                accumulate(grads, ops[0], d);
            }
            OpKind::Scale(factor) => accumulate(grads, ops[0], g * *factor),
            OpKind::ColAffine { scale, .. } => accumulate(grads, ops[0], g * scale),
            OpKind::Normalize { std, .. } => accumulate(grads, ops[0], g / std),
            OpKind::RowLinear(mats) => {
                let mut d = Array2::zeros(val(0).dim());
                for (r, m) in mats.iter().enumerate() {
                    d.row_mut(r).assign(&m.t().dot(&g.row(r)));
                }
                accumulate(grads, ops[0], d);
            }
        }
    }

    /// Per-row Jacobians `∂y_r/∂x_r` for a map whose rows are computed
    /// independently from the matching rows of `x` (a batched evaluation).
    /// Uses one seeded reverse sweep per output column.
    pub fn row_jacobians(&self, y: Var, x: Var) -> Result<Vec<Array2<f64>>> {
        let (rows, m) = self.shape(y)?;
        let (xrows, n) = self.shape(x)?;
        if rows != xrows {
            return Err(AutogradError::Shape {
                op: "row_jacobians",
                detail: format!("output {:?} vs input {:?}", (rows, m), (xrows, n)),
            });
        }
        let mut jacs = vec![Array2::zeros((m, n)); rows];
        for i in 0..m {
            let mut seed = Array2::zeros((rows, m));
            seed.column_mut(i).fill(1.0);
            let grads = self.backward_seeded(y, seed, false)?;
            if let Some(gx) = grads.get(x) {
                for (r, jac) in jacs.iter_mut().enumerate() {
                    jac.row_mut(i).assign(&gx.row(r));
                }
            }
        }
        Ok(jacs)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    generation: u32,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the
    /// output (or was recorded after it).
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        if v.tape != self.tape || v.generation != self.generation {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `v` when `v` received nothing.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Result<Array2<f64>> {
        let shape = tape.shape(v)?;
        Ok(self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape)))
    }

    pub fn scalar(&self, v: Var) -> Option<f64> {
        self.get(v).map(|g| g[[0, 0]])
    }
}

/// Jacobian of a vector function at `x`, assembled from one reverse sweep
/// per output component.
///
/// `f` receives a fresh tape and the `1×n` input var and must return a
/// `1×m` (or `m×1`) output var.
pub fn jacobian<F, E>(f: F, x: &[f64]) -> std::result::Result<Array2<f64>, E>
where
    F: FnOnce(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<AutogradError>,
{
    let mut tape = Tape::new();
    let xv = tape.row(x);
    let y = f(&mut tape, xv)?;
    let (r, c) = tape.shape(y)?;
    if r != 1 && c != 1 {
        return Err(AutogradError::Shape {
            op: "jacobian",
            detail: format!("output must be a vector, got {r}x{c}"),
        }
        .into());
    }
    let m = r * c;
    let mut jac = Array2::zeros((m, x.len()));
    for i in 0..m {
        let mut seed = Array2::zeros((r, c));
        seed.as_slice_mut().expect("contiguous")[i] = 1.0;
        let grads = tape.backward_seeded(y, seed, false)?;
        if let Some(g) = grads.get(xv) {
            jac.row_mut(i).assign(&g.row(0));
        }
    }
    Ok(jac)
}
