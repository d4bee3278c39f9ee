//! Train, then fit a classifier on one graph and score it on the other.
//!
//! cargo run --example transfer_eval

use dane::eval::{transfer, ClassifierConfig};
use dane::synth::{generate_pair, SynthSpec};
use dane::train::{fit, TrainConfig};

fn main() -> dane::Result<()> {
    let synth = generate_pair(&SynthSpec::default())?;
    let out = fit(
        &synth.pair,
        TrainConfig {
            epochs: 50,
            ..TrainConfig::default()
        },
    )?;
    let [va, vb] = &out.embeddings;
    let [la, lb] = &synth.labels;
    let cfg = ClassifierConfig::default();
    for report in [transfer((va, la), (vb, lb), &cfg)?, transfer((vb, lb), (va, la), &cfg)?] {
        println!(
            "{}: micro F1 {:.4}, macro F1 {:.4}, loss gap {:+.4}, MMD² {:.5}",
            report.direction,
            report.micro_f1,
            report.macro_f1,
            report.gap,
            report.mmd2.unwrap_or(f64::NAN)
        );
        for c in &report.per_class {
            println!(
                "  class {}: p {:.3} r {:.3} f1 {:.3} (n={})",
                c.class, c.precision, c.recall, c.f1, c.support
            );
        }
    }
    Ok(())
}
