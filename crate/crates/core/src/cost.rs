//! Analytic multiply-accumulate and parameter counts.
//!
//! Conventions: a conv costs `k*k*Cin*Cout*Ho*Wo / groups` MACs; a
//! deformable conv adds `4` MACs per bilinear sample per input channel on
//! top of its main conv (its offset conv is a separate node); norms and
//! ReLUs cost `2` per element, bilinear resizes `4` per output element and
//! an n-way add `n - 1` per element. "FLOPs" in reports are these MACs.
//! Parameters are counted once per distinct tensor, so shared head layers
//! count once and per-level layers five times.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::decoder_graph::{DecoderGraph, NodeOp, Section};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub node: usize,
    pub label: String,
    pub section: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub macs: u64,
    pub params: u64,
    pub fpn_macs: u64,
    pub fpn_params: u64,
    pub head_macs: u64,
    pub head_params: u64,
    pub rows: Vec<CostRow>,
}

fn node_params(op: &NodeOp) -> Vec<String> {
    match op {
        NodeOp::Conv { param, .. } | NodeOp::DeformConv { param } => {
            vec![format!("{param}.w"), format!("{param}.b")]
        }
        NodeOp::Norm { param, .. } => vec![format!("{param}.g"), format!("{param}.b")],
        _ => Vec::new(),
    }
}

/// Costs of every node of `graph` evaluated on an `h x w` image.
pub fn cost(graph: &DecoderGraph, hw: (usize, usize)) -> CostReport {
    let (h, w) = hw;
    let sizes: std::collections::HashMap<&str, u64> =
        graph.params.iter().map(|p| (p.name.as_str(), p.numel() as u64)).collect();
    let dims = |id: usize| {
        let s = graph.nodes[id].spec;
        (s.channels as u64, h.div_ceil(s.stride) as u64, w.div_ceil(s.stride) as u64)
    };
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut rows = Vec::with_capacity(graph.nodes.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        let (c, ho, wo) = dims(id);
        let elems = c * ho * wo;
        let macs = match &node.op {
            NodeOp::Input { .. } | NodeOp::Concat => 0,
            NodeOp::Conv { kernel, groups, .. } => {
                let cin = dims(node.inputs[0]).0;
                let k = *kernel as u64;
                k * k * cin * c * ho * wo / *groups as u64
            }
            NodeOp::DeformConv { .. } => {
                let cin = dims(node.inputs[0]).0;
                9 * cin * c * ho * wo + 4 * 9 * cin * ho * wo
            }
            NodeOp::Norm { .. } | NodeOp::Relu => 2 * elems,
            NodeOp::Resize => 4 * elems,
            NodeOp::Add => (node.inputs.len() as u64 - 1) * elems,
        };
        let params = node_params(&node.op)
            .into_iter()
            .filter(|n| seen.insert(n.clone()))
            .map(|n| sizes.get(n.as_str()).copied().unwrap_or(0))
            .sum();
        let section = match node.section {
            Section::Fpn => "fpn".to_string(),
            Section::Head(l) => format!("head.p{}", l + 3),
        };
        rows.push(CostRow {
            node: id,
            label: node.label.clone(),
            section,
            macs,
            params,
        });
    }
    let sum = |f: &dyn Fn(&CostRow) -> bool, g: &dyn Fn(&CostRow) -> u64| -> u64 {
        rows.iter().filter(|r| f(r)).map(g).sum()
    };
    let is_fpn = |r: &CostRow| r.section == "fpn";
    let is_head = |r: &CostRow| r.section != "fpn";
    CostReport {
        height: h,
        width: w,
        macs: sum(&|_| true, &|r| r.macs),
        params: sum(&|_| true, &|r| r.params),
        fpn_macs: sum(&is_fpn, &|r| r.macs),
        fpn_params: sum(&is_fpn, &|r| r.params),
        head_macs: sum(&is_head, &|r| r.macs),
        head_params: sum(&is_head, &|r| r.params),
        rows,
    }
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,section,label,macs,params\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},\"{}\",{},{}", r.node, r.section, r.label.replace('"', "'"), r.macs, r.params);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "input {}x{}: total {:.3} GMACs / {:.4} M params (fpn {:.3} G / {:.4} M, head {:.3} G / {:.4} M); FLOPs counted as MACs",
            self.height,
            self.width,
            self.macs as f64 / 1e9,
            self.params as f64 / 1e6,
            self.fpn_macs as f64 / 1e9,
            self.fpn_params as f64 / 1e6,
            self.head_macs as f64 / 1e9,
            self.head_params as f64 / 1e6,
        )
    }
}

/// One line per named graph, in input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub head_macs: u64,
    pub head_params: u64,
}

pub fn compare(graphs: &[(&str, &DecoderGraph)], hw: (usize, usize)) -> Vec<CompareRow> {
    graphs
        .iter()
        .map(|(name, g)| {
            let r = cost(g, hw);
            CompareRow {
                name: name.to_string(),
                macs: r.macs,
                params: r.params,
                head_macs: r.head_macs,
                head_params: r.head_params,
            }
        })
        .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("name,macs,params,head_macs,head_params\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.name, r.macs, r.params, r.head_macs, r.head_params);
    }
    s
}
