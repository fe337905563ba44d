use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Op};
use crate::error::{Error, Result};

/// Receptive field of a node with respect to the graph input, in input pixels.
///
/// Composition along a path: `rf' = rf + (k - 1) * jump`, `jump' = jump * stride`.
/// Bilinear upsampling widens the field by one source step (two taps) and
/// keeps the jump, so both quantities never decrease along a path. Multi-input nodes follow the input with the
/// largest field. Channel gates follow their data input: the gate rescales
/// channels but does not mix spatial positions. A global pool sets `global`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub rf: u64,
    pub jump: u64,
    pub global: bool,
}

impl ReceptiveField {
    const INPUT: ReceptiveField = ReceptiveField {
        rf: 1,
        jump: 1,
        global: false,
    };

    fn key(&self) -> (bool, u64) {
        (self.global, self.rf)
    }
}

pub fn receptive_field(g: &Graph, node: NodeId) -> Result<ReceptiveField> {
    g.node(node)?;
    let mut fields: Vec<Option<ReceptiveField>> = Vec::with_capacity(node.0 + 1);
    for n in &g.nodes[..=node.0] {
        let ins: Vec<ReceptiveField> = match n.op {
            Op::ChannelGate => n.inputs[..1].iter().filter_map(|i| fields[i.0]).collect(),
            _ => n.inputs.iter().filter_map(|i| fields[i.0]).collect(),
        };
        let best = ins.iter().copied().max_by_key(|f| f.key());
        let field = match (&n.op, best) {
            (Op::Input { .. }, _) => Some(ReceptiveField::INPUT),
            (_, None) => None,
            (Op::GlobalAvgPool, Some(f)) => Some(ReceptiveField { global: true, ..f }),
            (Op::Upsample { .. }, Some(f)) => Some(ReceptiveField { rf: f.rf + f.jump, ..f }),
            (op, Some(f)) => match op.window() {
                Some((k, s)) => Some(ReceptiveField {
                    rf: f.rf + (k as u64 - 1) * f.jump,
                    jump: f.jump * s as u64,
                    global: f.global,
                }),
                None => Some(f),
            },
        };
        fields.push(field);
    }
    fields[node.0].ok_or_else(|| Error::Graph(format!("node {node} is not connected to a graph input")))
}
