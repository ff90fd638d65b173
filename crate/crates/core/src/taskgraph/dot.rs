use std::fmt::Write;

use super::TaskGraph;

/// Graphviz rendering with nodes and edges in TaskId order.
pub fn export_dot(graph: &TaskGraph) -> String {
    let mut out = String::from("digraph workflow {\n  rankdir=TB;\n  node [shape=circle];\n");
    for t in graph.tasks() {
        let _ = writeln!(out, "  t{} [label=\"{}\\n{}\"];", t.id.0, t.id.0, escape(t.type_name()));
    }
    for (a, b) in graph.edges() {
        let _ = writeln!(out, "  t{} -> t{};", a.0, b.0);
    }
    out.push_str("}\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
