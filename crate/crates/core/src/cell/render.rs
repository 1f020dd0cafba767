use std::fmt::Write;

use super::CellSpec;
use crate::attention::KvSource;

/// Text diagram of a cell: one line per node with its incoming edges.
pub fn render(spec: &CellSpec) -> String {
    let mut out = String::new();
    let kv = match spec.kv_source {
        KvSource::OperationInput => "op_input",
        KvSource::CellInput => "cell_input",
    };
    let _ = writeln!(
        out,
        "cell K={} kv={} C_red={} C_op={} T_group={} resize={}x{}",
        spec.k, kv, spec.c_reduction, spec.c_op, spec.t_group, spec.h_resize, spec.w_resize
    );
    let _ = writeln!(out, "  f0 = preprocess(input)");
    for (i, op) in spec.ops.iter().enumerate() {
        let srcs: Vec<String> = op.input_indices.iter().map(|j| format!("f{j}")).collect();
        let _ = writeln!(out, "  f{} = {}  <- {}", i + 1, op, srcs.join(" + "));
    }
    let comb: Vec<String> = spec.combine_indices.iter().map(|j| format!("f{j}")).collect();
    let _ = writeln!(out, "  out = input + project(postprocess(combine[{}]))", comb.join(", "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Activation, AttentionDimension, AttentionOpSpec, AttentionType};
    use crate::cell::CellDims;

    #[test]
    fn single_node_rendering() {
        let op = AttentionOpSpec::new(
            AttentionDimension::Spatiotemporal,
            AttentionType::DotProduct,
            Activation::Softmax,
            false,
            [0],
            4,
            4,
        );
        let s = CellSpec::new(vec![op], KvSource::OperationInput, CellDims::default());
        let r = render(&s);
        let nodes: Vec<&str> = r.lines().filter(|l| l.contains("<-")).collect();
        assert_eq!(nodes, vec!["  f1 = spatiotemporal/dot/softmax  <- f0"]);
    }
}
