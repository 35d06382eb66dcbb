use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Precision, QuantParams};
use crate::error::{Error, Result};
use crate::model::graph::{NodeKey, NodeKind};
use crate::model::ModelConfig;

/// Preset names accepted by [`PrecisionPlan::preset`].
pub const PRESETS: [&str; 6] = [
    "fp32",
    "int8",
    "mix-lstm",
    "mix-lstm-fpconv",
    "mix-lstm-fpconv-mixmlp",
    "mix-lstm-fpconv-fullmlp",
];

/// Precision of one graph node: its weight tensor, its activation edges and,
/// for integer activations, the calibrated parameters of those edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    /// Weight precision; `f32` for the weightless LSTM cell.
    pub weight: Precision,
    pub activation: Precision,
    /// Whether an integer node requantizes its output. When false the
    /// accumulators are dequantized directly into the next stage.
    #[serde(default)]
    pub requantize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<QuantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<QuantParams>,
    /// Integer LSTM cell state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<QuantParams>,
}

impl NodeAssignment {
    pub fn float() -> Self {
        Self::new(Precision::F32, Precision::F32, false)
    }

    pub fn new(weight: Precision, activation: Precision, requantize: bool) -> Self {
        NodeAssignment { weight, activation, requantize, input: None, output: None, state: None }
    }

    /// Missing calibration data, if any.
    fn missing(&self, node: NodeKey) -> Option<&'static str> {
        if !self.activation.is_int() {
            return None;
        }
        if node.kind() == NodeKind::Cell {
            return self.state.is_none().then_some("cell state range");
        }
        if self.input.is_none() {
            return Some("input range");
        }
        (self.requantize && self.output.is_none()).then_some("output range")
    }
}

/// Precision assignment for every node of a model graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    preset: String,
    nodes: BTreeMap<String, NodeAssignment>,
}

impl PrecisionPlan {
    /// All-f32 plan.
    pub fn float(cfg: &ModelConfig) -> Self {
        Self::preset("fp32", cfg).expect("fp32 preset")
    }

    /// One of [`PRESETS`], uncalibrated.
    pub fn preset(name: &str, cfg: &ModelConfig) -> Result<Self> {
        if !PRESETS.contains(&name) {
            return Err(Error::config(format!(
                "unknown preset '{name}'; expected one of {}",
                PRESETS.join(", ")
            )));
        }
        let nodes = NodeKey::all(cfg)
            .into_iter()
            .map(|n| (n.to_string(), preset_assignment(name, n)))
            .collect();
        Ok(PrecisionPlan { preset: name.to_string(), nodes })
    }

    /// An empty plan to be filled with [`PrecisionPlan::assign`].
    pub fn custom(name: &str) -> Self {
        PrecisionPlan { preset: name.to_string(), nodes: BTreeMap::new() }
    }

    pub fn preset_name(&self) -> &str {
        &self.preset
    }

    pub fn get(&self, node: NodeKey) -> Option<&NodeAssignment> {
        self.nodes.get(&node.to_string())
    }

    pub fn get_mut(&mut self, node: NodeKey) -> Option<&mut NodeAssignment> {
        self.nodes.get_mut(&node.to_string())
    }

    pub fn assign(&mut self, node: NodeKey, a: NodeAssignment) {
        self.nodes.insert(node.to_string(), a);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NodeAssignment)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// True when every node runs in f32.
    pub fn is_float(&self) -> bool {
        self.nodes.values().all(|a| a.weight == Precision::F32 && a.activation == Precision::F32)
    }

    /// Graph nodes of `cfg` without an assignment.
    pub fn unassigned(&self, cfg: &ModelConfig) -> Vec<NodeKey> {
        NodeKey::all(cfg).into_iter().filter(|n| self.get(*n).is_none()).collect()
    }

    /// Nodes with integer activations that lack calibration data.
    pub fn uncalibrated(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|(k, a)| {
                let node: NodeKey = k.parse().ok()?;
                a.missing(node).map(|what| format!("{k} ({what})"))
            })
            .collect()
    }

    /// Checks that the plan covers exactly the graph of `cfg`, uses supported
    /// precision combinations and is calibrated.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let missing = self.unassigned(cfg);
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|n| n.to_string()).collect();
            return Err(Error::config(format!("precision plan leaves nodes unassigned: {}", names.join(", "))));
        }
        let known: Vec<String> = NodeKey::all(cfg).iter().map(|n| n.to_string()).collect();
        if let Some(extra) = self.nodes.keys().find(|k| !known.contains(k)) {
            return Err(Error::config(format!("precision plan names unknown node '{extra}'")));
        }
        for (name, a) in &self.nodes {
            let node: NodeKey = name.parse()?;
            check_combination(node, a).map_err(|m| Error::config(format!("{name}: {m}")))?;
            for qp in [&a.input, &a.output, &a.state].into_iter().flatten() {
                qp.validate()?;
            }
        }
        let uncal = self.uncalibrated();
        if !uncal.is_empty() {
            return Err(Error::config(format!("precision plan is not calibrated: {}", uncal.join(", "))));
        }
        Ok(())
    }
}

fn check_combination(node: NodeKey, a: &NodeAssignment) -> std::result::Result<(), &'static str> {
    use Precision::*;
    match node.kind() {
        NodeKind::Cell => match a.activation {
            F32 | Bf16 | Int8 => Ok(()),
            Int16 => Err("int16 LSTM cells are not supported"),
        },
        _ => match (a.weight, a.activation) {
            (F32, F32) | (Bf16, Bf16) | (Int8, Int8) => Ok(()),
            (Int8, Int16) if node.kind() != NodeKind::EdgeConv => Ok(()),
            _ => Err("unsupported weight/activation precision pair"),
        },
    }
}

fn preset_assignment(preset: &str, node: NodeKey) -> NodeAssignment {
    use Precision::*;
    if preset == "fp32" {
        return NodeAssignment::float();
    }
    let int8 = NodeAssignment::new(Int8, Int8, true);
    let mix_lstm = preset != "int8";
    let fpconv = preset.contains("fpconv");
    match node.kind() {
        NodeKind::Cell if mix_lstm => NodeAssignment::new(F32, Bf16, false),
        NodeKind::Cell => NodeAssignment::new(F32, Int8, false),
        NodeKind::EdgeConv if fpconv => NodeAssignment::new(Bf16, Bf16, false),
        NodeKind::Mlp => {
            let odd = node.block().is_some_and(|b| b % 2 == 1);
            let wide = preset.ends_with("fullmlp") || (preset.ends_with("mixmlp") && odd);
            if wide {
                NodeAssignment::new(Int8, Int16, true)
            } else {
                int8
            }
        }
        // mixed LSTM gate convolutions feed the bf16 cell straight from the accumulator
        NodeKind::Conv if mix_lstm && matches!(node, NodeKey::GatesX(_) | NodeKey::GatesH(_)) => {
            NodeAssignment::new(Int8, Int8, false)
        }
        _ => int8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_complete() {
        for cfg in [ModelConfig::default(), ModelConfig { compression: 2, ..ModelConfig::tse() }] {
            for name in PRESETS {
                let p = PrecisionPlan::preset(name, &cfg).unwrap();
                assert!(p.unassigned(&cfg).is_empty(), "{name}");
                assert_eq!(p.len(), NodeKey::all(&cfg).len());
                assert_eq!(p.is_float(), name == "fp32");
                assert_eq!(p.uncalibrated().is_empty(), name == "fp32");
            }
        }
        assert!(matches!(PrecisionPlan::preset("int4", &ModelConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn preset_contents() {
        use Precision::*;
        let cfg = ModelConfig::default();
        let get = |name: &str, node: NodeKey| PrecisionPlan::preset(name, &cfg).unwrap().get(node).unwrap().clone();
        let mlp = |block| NodeKey::Mixer { block, rep: 1, layer: crate::model::graph::MixerLayer::ChannelFc1 };

        assert_eq!(get("int8", NodeKey::Encoder).weight, Int8);
        assert_eq!(get("int8", NodeKey::Cell(1)).activation, Int8);
        assert_eq!(get("mix-lstm", NodeKey::Cell(1)).activation, Bf16);
        assert_eq!(get("mix-lstm", NodeKey::GatesX(2)).weight, Int8);
        assert!(!get("mix-lstm", NodeKey::GatesH(2)).requantize);
        assert_eq!(get("mix-lstm", NodeKey::Encoder).weight, Int8);
        assert_eq!(get("mix-lstm-fpconv", NodeKey::Encoder).weight, Bf16);
        assert_eq!(get("mix-lstm-fpconv", NodeKey::Decoder).activation, Bf16);
        for b in 1..=6 {
            let mixed = get("mix-lstm-fpconv-mixmlp", mlp(b));
            assert_eq!(mixed.weight, Int8);
            assert_eq!(mixed.activation, if b % 2 == 1 { Int16 } else { Int8 });
            assert_eq!(get("mix-lstm-fpconv-fullmlp", mlp(b)).activation, Int16);
            assert_eq!(get("mix-lstm-fpconv", mlp(b)).activation, Int8);
        }
    }

    #[test]
    fn validation_reports_problems() {
        let cfg = ModelConfig::default();
        let mut p = PrecisionPlan::float(&cfg);
        p.validate(&cfg).unwrap();
        p.nodes.remove("decoder");
        let e = p.validate(&cfg).unwrap_err().to_string();
        assert!(e.contains("decoder"), "{e}");

        let q = PrecisionPlan::preset("int8", &cfg).unwrap();
        assert!(q.validate(&cfg).unwrap_err().to_string().contains("not calibrated"));

        let mut bad = PrecisionPlan::float(&cfg);
        bad.assign(NodeKey::Encoder, NodeAssignment::new(Precision::Bf16, Precision::Int8, true));
        assert!(matches!(bad.validate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn serde_round_trip() {
        let cfg = ModelConfig::default();
        let mut p = PrecisionPlan::preset("mix-lstm-fpconv-mixmlp", &cfg).unwrap();
        p.get_mut(NodeKey::Proj(1)).unwrap().input = Some(QuantParams::per_tensor(0.5, -3, 8).unwrap());
        let s = serde_json::to_string(&p).unwrap();
        let back: PrecisionPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
