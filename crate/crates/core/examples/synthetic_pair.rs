//! Generate a synthetic graph pair and print how far graph B drifts from A.
//!
//! cargo run --example synthetic_pair -- [delta]

use dane::graph::GraphTag;
use dane::synth::{block_means, generate_pair, SynthSpec};

fn main() -> dane::Result<()> {
    let delta = std::env::args()
        .nth(1)
        .map_or(0.3, |s| s.parse().expect("delta is a number"));
    let spec = SynthSpec {
        delta,
        ..SynthSpec::default()
    };
    let synth = generate_pair(&spec)?;
    for tag in [GraphTag::A, GraphTag::B] {
        let g = synth.pair.get(tag);
        let (p_in, p_out) = spec.probabilities(tag);
        let mean_deg = 2.0 * g.num_edges() as f64 / g.num_nodes() as f64;
        println!(
            "graph {tag}: {} nodes, {} edges, mean degree {mean_deg:.2} (p_in {p_in:.3}, p_out {p_out:.3})",
            g.num_nodes(),
            g.num_edges()
        );
    }
    let (ma, mb) = (block_means(&spec, GraphTag::A), block_means(&spec, GraphTag::B));
    for b in 0..spec.num_blocks {
        let shift: f64 = ma
            .row(b)
            .iter()
            .zip(mb.row(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        println!("block {b}: feature mean moved by {shift:.3}");
    }
    Ok(())
}
