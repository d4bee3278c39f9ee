//! Project both graphs' embeddings into one 2-D PCA frame and write a CSV
//! suitable for plotting.
//!
//! cargo run --example embedding_projection -- [out.csv]

use dane::eval::{project_2d, projection_csv};
use dane::synth::{generate_pair, SynthSpec};
use dane::train::{fit, TrainConfig};

fn main() -> dane::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "projection.csv".into());
    let synth = generate_pair(&SynthSpec::default())?;
    let out = fit(
        &synth.pair,
        TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        },
    )?;
    let [va, vb] = &out.embeddings;
    let proj = project_2d(&[va, vb])?;
    let csv = projection_csv(&proj, &[(va, Some(&synth.labels[0])), (vb, Some(&synth.labels[1]))]);
    std::fs::write(&path, &csv).expect("projection file is writable");
    println!(
        "wrote {} points to {path}{}",
        proj.coords.rows(),
        if proj.degenerate { " (rank < 2)" } else { "" }
    );
    Ok(())
}
