//! Flowsheet topology: streams, units, feed/product designations, the tear
//! set and the execution order of the sequential-modular sweep.
//!
//! Unit-specific extra inputs (setpoints) and extra outputs (calculated
//! quantities) are modelled as pseudo-streams named `<UNIT>.set` and
//! `<UNIT>.calc`, so every unit maps one concatenated input vector to one
//! concatenated output vector.

pub mod graph;
pub mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use graph::Edge;

pub use sweep::{sweep, BatchBackend, SweepBackend, SweepState, TapeBackend, UnitModel};

#[derive(Debug, Error)]
pub enum FlowsheetError {
    #[error("definition: {0}")]
    Definition(String),
    #[error("stream `{0}` is referenced but never declared")]
    UnknownStream(String),
    #[error("unit `{0}` does not exist")]
    UnknownUnit(String),
    #[error("stream `{stream}` has {count} producers; expected {expected}")]
    Producers {
        stream: String,
        count: usize,
        expected: usize,
    },
    #[error("stream `{0}` is neither consumed nor a product")]
    Dangling(String),
    #[error("tear set leaves the cycle {0}")]
    CycleRemains(String),
    #[error("stream `{0}` cannot be torn: it is not produced inside the flowsheet")]
    BadTear(String),
    #[error("too many simple cycles to enumerate")]
    TooManyCycles,
    #[error("unit `{unit}` failed: {reason}")]
    Unit { unit: String, reason: String },
    #[error("unit `{unit}` width mismatch: {detail}")]
    Width { unit: String, detail: String },
    #[error("stream `{stream}` has a non-finite value")]
    NonFinite { stream: String },
    #[error("stream `{0}` has no value before it is needed")]
    MissingValue(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
}

pub type Result<T> = std::result::Result<T, FlowsheetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamKind {
    /// Material stream between units.
    Process,
    /// Extra inputs of one unit.
    Setpoint,
    /// Extra outputs of one unit.
    Calculated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSpec {
    pub name: String,
    pub variables: Vec<String>,
    pub kind: StreamKind,
}

impl StreamSpec {
    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    /// Column labels `stream.variable`.
    pub fn labels(&self) -> impl Iterator<Item = String> + '_ {
        self.variables.iter().map(move |v| format!("{}.{v}", self.name))
    }
}

/// One unit as written in a definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDef {
    pub name: String,
    pub kind: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub setpoints: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub calculated: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

/// Contents of a flowsheet definition file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowsheetDef {
    pub name: String,
    /// Variables of every process stream unless overridden.
    pub variables: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stream_variables: BTreeMap<String, Vec<String>>,
    pub feeds: Vec<String>,
    pub products: Vec<String>,
    /// Product used for end-to-end metrics; defaults to the first product.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_product: Option<String>,
    /// Explicit tear streams; selected automatically when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tears: Option<Vec<String>>,
    /// Nominal values of source variables and initial tear guesses,
    /// keyed `stream.variable`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub nominal: BTreeMap<String, f64>,
    /// Default variation plan for data generation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vary: Vec<VariedVariable>,
    #[serde(rename = "unit")]
    pub units: Vec<UnitDef>,
}

/// One source variable swept over `[from, to]` during data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariedVariable {
    pub label: String,
    pub from: f64,
    pub to: f64,
}

impl FlowsheetDef {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlowsheetError::Definition(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("definition serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct Flowsheet {
    pub def: FlowsheetDef,
    streams: Vec<StreamSpec>,
    stream_index: BTreeMap<String, usize>,
    unit_index: BTreeMap<String, usize>,
    unit_inputs: Vec<Vec<usize>>,
    unit_outputs: Vec<Vec<usize>>,
    producer: Vec<Option<usize>>,
    consumers: Vec<Vec<usize>>,
    feeds: Vec<usize>,
    products: Vec<usize>,
    key_product: usize,
    tears: Vec<usize>,
    order: Vec<usize>,
}

impl Flowsheet {
    pub fn new(def: FlowsheetDef) -> Result<Self> {
        let mut streams = Vec::new();
        let mut stream_index = BTreeMap::new();
        let mut unit_index = BTreeMap::new();
        let mut add_stream = |spec: StreamSpec, streams: &mut Vec<StreamSpec>| -> Result<usize> {
            if stream_index.contains_key(&spec.name) {
                return Ok(stream_index[&spec.name]);
            }
            let names: BTreeSet<&String> = spec.variables.iter().collect();
            if names.len() != spec.variables.len() || spec.variables.is_empty() {
                return Err(FlowsheetError::Definition(format!(
                    "stream `{}` needs unique, non-empty variable names",
                    spec.name
                )));
            }
            stream_index.insert(spec.name.clone(), streams.len());
            streams.push(spec);
            Ok(streams.len() - 1)
        };
        let process = |name: &str| StreamSpec {
            name: name.to_string(),
            variables: def
                .stream_variables
                .get(name)
                .cloned()
                .unwrap_or_else(|| def.variables.clone()),
            kind: StreamKind::Process,
        };

        for name in def.feeds.iter() {
            add_stream(process(name), &mut streams)?;
        }
        let mut unit_inputs = Vec::new();
        let mut unit_outputs = Vec::new();
        for (ui, u) in def.units.iter().enumerate() {
            if unit_index.insert(u.name.clone(), ui).is_some() {
                return Err(FlowsheetError::Definition(format!("duplicate unit `{}`", u.name)));
            }
            if u.name.contains('.') {
                return Err(FlowsheetError::Definition(format!("unit name `{}` contains '.'", u.name)));
            }
            let mut ins = Vec::new();
            for s in &u.inputs {
                ins.push(add_stream(process(s), &mut streams)?);
            }
            if !u.setpoints.is_empty() {
                ins.push(add_stream(
                    StreamSpec {
                        name: format!("{}.set", u.name),
                        variables: u.setpoints.clone(),
                        kind: StreamKind::Setpoint,
                    },
                    &mut streams,
                )?);
            }
            let mut outs = Vec::new();
            for s in &u.outputs {
                outs.push(add_stream(process(s), &mut streams)?);
            }
            if !u.calculated.is_empty() {
                outs.push(add_stream(
                    StreamSpec {
                        name: format!("{}.calc", u.name),
                        variables: u.calculated.clone(),
                        kind: StreamKind::Calculated,
                    },
                    &mut streams,
                )?);
            }
            if ins.is_empty() || outs.is_empty() {
                return Err(FlowsheetError::Definition(format!(
                    "unit `{}` needs at least one input and one output",
                    u.name
                )));
            }
            unit_inputs.push(ins);
            unit_outputs.push(outs);
        }

        let n_streams = streams.len();
        let mut producers = vec![Vec::new(); n_streams];
        let mut consumers = vec![Vec::new(); n_streams];
        for (ui, outs) in unit_outputs.iter().enumerate() {
            for &s in outs {
                producers[s].push(ui);
            }
        }
        for (ui, ins) in unit_inputs.iter().enumerate() {
            for &s in ins {
                if !consumers[s].contains(&ui) {
                    consumers[s].push(ui);
                }
            }
        }
        let lookup = |name: &String| -> Result<usize> {
            stream_index
                .get(name)
                .copied()
                .ok_or_else(|| FlowsheetError::UnknownStream(name.clone()))
        };
        let feeds: Vec<usize> = def.feeds.iter().map(lookup).collect::<Result<_>>()?;
        let products: Vec<usize> = def.products.iter().map(lookup).collect::<Result<_>>()?;
        let key_product = match &def.key_product {
            Some(k) => lookup(k)?,
            None => *products
                .first()
                .ok_or_else(|| FlowsheetError::Definition("no product streams".into()))?,
        };
        for (s, spec) in streams.iter().enumerate() {
            let is_feed = feeds.contains(&s) || spec.kind == StreamKind::Setpoint;
            let expected = usize::from(!is_feed);
            if producers[s].len() != expected {
                return Err(FlowsheetError::Producers {
                    stream: spec.name.clone(),
                    count: producers[s].len(),
                    expected,
                });
            }
            let is_sink = products.contains(&s) || spec.kind == StreamKind::Calculated;
            if consumers[s].is_empty() && !is_sink {
                return Err(FlowsheetError::Dangling(spec.name.clone()));
            }
        }
        if !products.contains(&key_product) {
            return Err(FlowsheetError::Definition("key product is not a product stream".into()));
        }

        let mut fs = Flowsheet {
            streams,
            stream_index,
            unit_index,
            unit_inputs,
            unit_outputs,
            producer: producers.into_iter().map(|p| p.first().copied()).collect(),
            consumers,
            feeds,
            products,
            key_product,
            tears: Vec::new(),
            order: Vec::new(),
            def,
        };
        let tears = match fs.def.tears.clone() {
            Some(names) => {
                let cut: BTreeSet<usize> = names.iter().map(lookup_in(&fs)).collect::<Result<_>>()?;
                for &t in &cut {
                    if fs.producer[t].is_none() || fs.consumers[t].is_empty() {
                        return Err(FlowsheetError::BadTear(fs.streams[t].name.clone()));
                    }
                }
                if let Some(cycle) = graph::remaining_cycle(fs.units().len(), &fs.edges(), &cut) {
                    let names: Vec<&str> = cycle.iter().map(|&u| fs.def.units[u].name.as_str()).collect();
                    return Err(FlowsheetError::CycleRemains(format!("{} → {}", names.join(" → "), names[0])));
                }
                cut
            }
            None => {
                let cycles = fs.cycles()?;
                let names: Vec<String> = fs.streams.iter().map(|s| s.name.clone()).collect();
                graph::select_tears(&cycles, &names)
            }
        };
        fs.tears = tears.into_iter().collect();
        fs.tears.sort_by(|a, b| fs.streams[*a].name.cmp(&fs.streams[*b].name));
        let cut: BTreeSet<usize> = fs.tears.iter().copied().collect();
        let kept: Vec<Edge> = fs.edges().into_iter().filter(|e| !cut.contains(&e.label)).collect();
        fs.order = graph::topological_order(fs.units().len(), &kept)
            .ok_or_else(|| FlowsheetError::CycleRemains("after tear selection".into()))?;
        Ok(fs)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::new(FlowsheetDef::from_toml(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(FlowsheetDef::load(path)?)
    }

    /// Producer → consumer edges labelled by stream index.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for (s, cons) in self.consumers.iter().enumerate() {
            if let Some(p) = self.producer[s] {
                for &c in cons {
                    out.push(Edge { from: p, to: c, label: s });
                }
            }
        }
        out
    }

    pub fn cycles(&self) -> Result<Vec<graph::Cycle>> {
        graph::simple_cycles(self.units().len(), &self.edges()).ok_or(FlowsheetError::TooManyCycles)
    }

    /// Strongly connected components as unit names.
    pub fn sccs(&self) -> Vec<Vec<String>> {
        graph::strongly_connected_components(self.units().len(), &self.edges())
            .into_iter()
            .map(|c| c.into_iter().map(|u| self.def.units[u].name.clone()).collect())
            .collect()
    }

    /// True when some unit lies on two distinct simple cycles.
    pub fn has_nested_cycles(&self) -> Result<bool> {
        let cycles = self.cycles()?;
        Ok((0..self.units().len()).any(|u| cycles.iter().filter(|c| c.nodes.contains(&u)).count() >= 2))
    }

    pub fn units(&self) -> &[UnitDef] {
        &self.def.units
    }

    pub fn unit(&self, name: &str) -> Result<usize> {
        self.unit_index
            .get(name)
            .copied()
            .ok_or_else(|| FlowsheetError::UnknownUnit(name.to_string()))
    }

    pub fn streams(&self) -> &[StreamSpec] {
        &self.streams
    }

    pub fn stream(&self, name: &str) -> Result<usize> {
        self.stream_index
            .get(name)
            .copied()
            .ok_or_else(|| FlowsheetError::UnknownStream(name.to_string()))
    }

    pub fn stream_spec(&self, s: usize) -> &StreamSpec {
        &self.streams[s]
    }

    /// Stream indices feeding unit `u`, setpoint stream last.
    pub fn unit_inputs(&self, u: usize) -> &[usize] {
        &self.unit_inputs[u]
    }

    /// Stream indices produced by unit `u`, calculated stream last.
    pub fn unit_outputs(&self, u: usize) -> &[usize] {
        &self.unit_outputs[u]
    }

    pub fn unit_in_dim(&self, u: usize) -> usize {
        self.unit_inputs[u].iter().map(|&s| self.streams[s].dim()).sum()
    }

    pub fn unit_out_dim(&self, u: usize) -> usize {
        self.unit_outputs[u].iter().map(|&s| self.streams[s].dim()).sum()
    }

    pub fn producer(&self, s: usize) -> Option<usize> {
        self.producer[s]
    }

    pub fn consumers(&self, s: usize) -> &[usize] {
        &self.consumers[s]
    }

    /// Process feed streams.
    pub fn feeds(&self) -> &[usize] {
        &self.feeds
    }

    /// Streams without a producer: process feeds plus setpoint streams.
    pub fn sources(&self) -> Vec<usize> {
        (0..self.streams.len()).filter(|&s| self.producer[s].is_none()).collect()
    }

    pub fn products(&self) -> &[usize] {
        &self.products
    }

    pub fn key_product(&self) -> usize {
        self.key_product
    }

    /// Tear streams sorted by name.
    pub fn tears(&self) -> &[usize] {
        &self.tears
    }

    pub fn tear_names(&self) -> Vec<&str> {
        self.tears.iter().map(|&t| self.streams[t].name.as_str()).collect()
    }

    pub fn tear_dim(&self) -> usize {
        self.tears.iter().map(|&t| self.streams[t].dim()).sum()
    }

    /// `stream.variable` labels of the concatenated tear vector.
    pub fn tear_labels(&self) -> Vec<String> {
        self.tears.iter().flat_map(|&t| self.streams[t].labels()).collect()
    }

    /// Unit indices in execution order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn order_names(&self) -> Vec<&str> {
        self.order.iter().map(|&u| self.def.units[u].name.as_str()).collect()
    }

    /// The sub-flowsheet made of `units`. Streams entering from outside
    /// become feeds; process streams leaving it become products. Tears are
    /// selected automatically.
    pub fn subgraph(&self, units: &[&str], key_product: Option<&str>) -> Result<Flowsheet> {
        let keep: BTreeSet<usize> = units.iter().map(|n| self.unit(n)).collect::<Result<_>>()?;
        let mut def = self.def.clone();
        def.units = self.def.units.iter().enumerate().filter(|(i, _)| keep.contains(i)).map(|(_, u)| u.clone()).collect();
        let mut feeds = Vec::new();
        let mut products = Vec::new();
        for (s, spec) in self.streams.iter().enumerate() {
            if spec.kind != StreamKind::Process {
                continue;
            }
            let produced = self.producer[s].is_some_and(|p| keep.contains(&p));
            let consumed = self.consumers[s].iter().any(|c| keep.contains(c));
            if consumed && !produced {
                feeds.push(spec.name.clone());
            }
            if produced && !consumed {
                products.push(spec.name.clone());
            }
        }
        def.name = format!("{}-sub", self.def.name);
        def.feeds = feeds;
        def.products = products;
        def.key_product = key_product.map(str::to_string);
        def.tears = None;
        Flowsheet::new(def)
    }
}

fn lookup_in(fs: &Flowsheet) -> impl Fn(&String) -> Result<usize> + '_ {
    move |name| fs.stream(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ring_def(n: usize, tears: Option<Vec<&str>>) -> FlowsheetDef {
        let mut units = Vec::new();
        for i in 0..n {
            let mut inputs = vec![format!("s{i}")];
            if i == 0 {
                inputs.insert(0, "feed".to_string());
            }
            let mut outputs = vec![format!("s{}", (i + 1) % n)];
            if i == n - 1 {
                outputs.push("product".to_string());
            }
            units.push(UnitDef {
                name: format!("U{i}"),
                kind: "linear".into(),
                inputs,
                outputs,
                setpoints: vec![],
                calculated: vec![],
                params: BTreeMap::new(),
            });
        }
        FlowsheetDef {
            name: "ring".into(),
            variables: vec!["a".into(), "b".into()],
            stream_variables: BTreeMap::new(),
            feeds: vec!["feed".into()],
            products: vec!["product".into()],
            key_product: None,
            tears: tears.map(|t| t.into_iter().map(String::from).collect()),
            nominal: BTreeMap::new(),
            vary: vec![],
            units,
        }
    }

    #[test]
    fn ring_gets_one_tear_and_valid_order() {
        let fs = Flowsheet::new(ring_def(3, None)).unwrap();
        assert_eq!(fs.tears().len(), 1);
        assert_eq!(fs.tear_names(), vec!["s0"]);
        assert_eq!(fs.order_names(), vec!["U0", "U1", "U2"]);
        assert_eq!(fs.sccs(), vec![vec!["U0", "U1", "U2"]]);
        assert_eq!(fs.tear_dim(), 2);
        assert_eq!(fs.tear_labels(), vec!["s0.a", "s0.b"]);
    }

    #[test]
    fn explicit_tear_moves_the_order() {
        let fs = Flowsheet::new(ring_def(3, Some(vec!["s2"]))).unwrap();
        assert_eq!(fs.order_names(), vec!["U2", "U0", "U1"]);
    }

    #[test]
    fn bad_tear_reports_the_cycle() {
        let mut def = ring_def(3, Some(vec![]));
        let err = Flowsheet::new(def.clone()).unwrap_err();
        assert!(matches!(err, FlowsheetError::CycleRemains(ref c) if c.contains("U0")), "{err}");
        def.tears = Some(vec!["feed".into()]);
        assert!(matches!(Flowsheet::new(def).unwrap_err(), FlowsheetError::BadTear(_)));
    }

    #[test]
    fn structural_errors() {
        let mut def = ring_def(3, None);
        def.products.clear();
        assert!(matches!(Flowsheet::new(def).unwrap_err(), FlowsheetError::Dangling(_) | FlowsheetError::Definition(_)));

        let mut def = ring_def(3, None);
        def.units[1].outputs.push("s1".into());
        assert!(matches!(Flowsheet::new(def).unwrap_err(), FlowsheetError::Producers { count: 2, .. }));

        let mut def = ring_def(3, None);
        def.feeds.push("ghost".into());
        assert!(matches!(Flowsheet::new(def).unwrap_err(), FlowsheetError::Dangling(_)));
    }

    #[test]
    fn setpoints_become_pseudo_streams() {
        let mut def = ring_def(2, None);
        def.units[1].setpoints = vec!["T_target".into()];
        def.units[1].calculated = vec!["duty".into()];
        let fs = Flowsheet::new(def).unwrap();
        let set = fs.stream("U1.set").unwrap();
        assert_eq!(fs.stream_spec(set).kind, StreamKind::Setpoint);
        assert_eq!(fs.unit_inputs(1).last(), Some(&set));
        assert_eq!(fs.unit_in_dim(1), 3);
        assert_eq!(fs.unit_out_dim(1), 2 + 2 + 1);
        assert!(fs.sources().contains(&set));
    }

    #[test]
    fn toml_round_trip() {
        let def = ring_def(3, Some(vec!["s1"]));
        let back = FlowsheetDef::from_toml(&def.to_toml()).unwrap();
        assert_eq!(def, back);
    }

    #[test]
    fn acyclic_chain_has_no_tears() {
        let mut def = ring_def(3, None);
        def.units[2].outputs = vec!["product".into()];
        def.units[0].inputs = vec!["feed".into()];
        let fs = Flowsheet::new(def).unwrap();
        assert!(fs.tears().is_empty());
        assert!(!fs.has_nested_cycles().unwrap());
    }

    #[test]
    fn subgraph_derives_feeds_and_products() {
        let fs = Flowsheet::new(ring_def(4, None)).unwrap();
        let sub = fs.subgraph(&["U1", "U2"], None).unwrap();
        assert_eq!(sub.def.feeds, vec!["s1"]);
        assert_eq!(sub.def.products, vec!["s3"]);
        assert!(sub.tears().is_empty());
    }
}
