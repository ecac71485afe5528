//! Regenerates the shipped graph files, DOT figures and the DDQN stub
//! fixture: `cargo run -p pgdag --example export`.

use std::fs;
use std::path::Path;

use pgdag::fixture::BatchFixture;
use pgdag::graph_file::serialize_graph;
use pgdag_core::graph::to_dot;
use pgdag_core::reference::{self, oracle};

fn main() -> std::io::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    fs::create_dir_all(root.join("graphs"))?;
    fs::create_dir_all(root.join("docs/figures"))?;
    fs::create_dir_all(root.join("fixtures"))?;
    for name in reference::GRAPH_NAMES {
        let g = reference::graph(name).expect("reference graph");
        fs::write(root.join(format!("graphs/{name}.graph.json")), serialize_graph(&g))?;
        fs::write(root.join(format!("docs/figures/{name}.dot")), to_dot(&g))?;
    }
    let s = oracle::ddqn_fixture();
    let f = BatchFixture::new(&s.store, &s.bindings, &s.hp, &s.actions);
    let text = serde_json::to_string_pretty(&f).expect("fixture serializes");
    fs::write(root.join("fixtures/ddqn_stub.json"), text + "\n")?;
    println!("wrote {} graphs to {}", reference::GRAPH_NAMES.len(), root.display());
    Ok(())
}
