//! The sequential-modular sweep, generic over how stream values are held:
//! plain batched matrices for inference, or tape variables for training.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::{Flowsheet, FlowsheetError, Result};
use crate::autograd::{Tape, Var};
use crate::nn::{MlpSurrogate, MlpVars};

/// A unit's input → output map on a batch (rows are samples).
pub trait UnitModel: Send + Sync {
    fn eval(&self, x: ArrayView2<f64>) -> std::result::Result<Array2<f64>, String>;
}

impl UnitModel for MlpSurrogate {
    fn eval(&self, x: ArrayView2<f64>) -> std::result::Result<Array2<f64>, String> {
        if x.ncols() != self.d_in() {
            return Err(format!("expected {} inputs, got {}", self.d_in(), x.ncols()));
        }
        Ok(self.forward_batch(x))
    }
}

/// Storage and evaluation of stream values during a sweep.
pub trait SweepBackend {
    type Value: Clone;
    fn width(&self, v: &Self::Value) -> Result<usize>;
    fn concat(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn slice(&mut self, v: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn apply(&mut self, fs: &Flowsheet, unit: usize, input: Self::Value) -> Result<Self::Value>;
    fn is_finite(&self, _v: &Self::Value) -> bool {
        true
    }
}

/// Current value of every stream, indexed like [`Flowsheet::streams`].
#[derive(Debug, Clone)]
pub struct SweepState<V> {
    pub values: Vec<Option<V>>,
}

impl<V: Clone> SweepState<V> {
    pub fn new(fs: &Flowsheet) -> Self {
        SweepState {
            values: vec![None; fs.streams().len()],
        }
    }

    pub fn set(&mut self, stream: usize, v: V) {
        self.values[stream] = Some(v);
    }

    pub fn get(&self, fs: &Flowsheet, stream: usize) -> Result<&V> {
        self.values[stream]
            .as_ref()
            .ok_or_else(|| FlowsheetError::MissingValue(fs.stream_spec(stream).name.clone()))
    }
}

/// Evaluates every unit once in execution order. Consumers of a tear stream
/// read `tears_in` (ordered like [`Flowsheet::tears`]); every produced
/// stream, tears included, is written to `state`. Returns the recomputed
/// tear values, i.e. the flowsheet response at `tears_in`.
pub fn sweep<B: SweepBackend>(
    fs: &Flowsheet,
    backend: &mut B,
    state: &mut SweepState<B::Value>,
    tears_in: &[B::Value],
) -> Result<Vec<B::Value>> {
    if tears_in.len() != fs.tears().len() {
        return Err(FlowsheetError::Definition(format!(
            "expected {} tear values, got {}",
            fs.tears().len(),
            tears_in.len()
        )));
    }
    let name = |u: usize| fs.units()[u].name.clone();
    for &u in fs.order() {
        let mut parts = Vec::with_capacity(fs.unit_inputs(u).len());
        for &s in fs.unit_inputs(u) {
            let v = match fs.tears().iter().position(|&t| t == s) {
                Some(pos) => tears_in[pos].clone(),
                None => state.get(fs, s)?.clone(),
            };
            let (w, want) = (backend.width(&v)?, fs.stream_spec(s).dim());
            if w != want {
                return Err(FlowsheetError::Width {
                    unit: name(u),
                    detail: format!("input `{}` has {w} values, expected {want}", fs.stream_spec(s).name),
                });
            }
            parts.push(v);
        }
        let input = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            backend.concat(&parts)?
        };
        let out = backend.apply(fs, u, input)?;
        let (w, want) = (backend.width(&out)?, fs.unit_out_dim(u));
        if w != want {
            return Err(FlowsheetError::Width {
                unit: name(u),
                detail: format!("model produced {w} outputs, expected {want}"),
            });
        }
        let outputs = fs.unit_outputs(u);
        let mut start = 0;
        for &s in outputs {
            let d = fs.stream_spec(s).dim();
            let v = if outputs.len() == 1 {
                out.clone()
            } else {
                backend.slice(&out, start, start + d)?
            };
            if !backend.is_finite(&v) {
                return Err(FlowsheetError::NonFinite {
                    stream: fs.stream_spec(s).name.clone(),
                });
            }
            state.set(s, v);
            start += d;
        }
    }
    fs.tears().iter().map(|&t| state.get(fs, t).cloned()).collect()
}

/// Batched plain-matrix backend; `models[u]` evaluates unit `u`.
pub struct BatchBackend<'a> {
    pub models: Vec<&'a dyn UnitModel>,
}

impl<'a> BatchBackend<'a> {
    pub fn new(models: Vec<&'a dyn UnitModel>) -> Self {
        BatchBackend { models }
    }
}

impl SweepBackend for BatchBackend<'_> {
    type Value = Array2<f64>;

    fn width(&self, v: &Array2<f64>) -> Result<usize> {
        Ok(v.ncols())
    }

    fn concat(&mut self, parts: &[Array2<f64>]) -> Result<Array2<f64>> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| FlowsheetError::Definition(format!("concat: {e}")))
    }

    fn slice(&mut self, v: &Array2<f64>, start: usize, end: usize) -> Result<Array2<f64>> {
        Ok(v.slice(s![.., start..end]).to_owned())
    }

    fn apply(&mut self, fs: &Flowsheet, unit: usize, input: Array2<f64>) -> Result<Array2<f64>> {
        let model = self.models.get(unit).ok_or_else(|| FlowsheetError::Unit {
            unit: fs.units()[unit].name.clone(),
            reason: "no model bound".into(),
        })?;
        model.eval(input.view()).map_err(|reason| FlowsheetError::Unit {
            unit: fs.units()[unit].name.clone(),
            reason,
        })
    }

    fn is_finite(&self, v: &Array2<f64>) -> bool {
        v.iter().all(|x| x.is_finite())
    }
}

/// Records the sweep on a tape through surrogate forward passes.
pub struct TapeBackend<'a> {
    pub tape: &'a mut Tape,
    pub models: &'a [&'a MlpSurrogate],
    pub params: &'a [MlpVars],
}

impl SweepBackend for TapeBackend<'_> {
    type Value = Var;

    fn width(&self, v: &Var) -> Result<usize> {
        Ok(self.tape.shape(*v)?.1)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        Ok(self.tape.concat(parts)?)
    }

    fn slice(&mut self, v: &Var, start: usize, end: usize) -> Result<Var> {
        Ok(self.tape.slice(*v, start, end)?)
    }

    fn apply(&mut self, _fs: &Flowsheet, unit: usize, input: Var) -> Result<Var> {
        Ok(self.models[unit].record_forward(self.tape, &self.params[unit], input)?)
    }

    fn is_finite(&self, v: &Var) -> bool {
        self.tape.value(*v).map(|a| a.iter().all(|x| x.is_finite())).unwrap_or(false)
    }
}

/// Splits a concatenated tear matrix into per-tear blocks.
pub fn split_tears(fs: &Flowsheet, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut start = 0;
    fs.tears()
        .iter()
        .map(|&t| {
            let d = fs.stream_spec(t).dim();
            let block = x.slice(s![.., start..start + d]).to_owned();
            start += d;
            block
        })
        .collect()
}

/// Concatenates per-tear blocks.
pub fn join_tears(blocks: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(1), &views).expect("tear blocks share row count")
}
