//! Compare training with and without the adversarial term across seeds.
//!
//! cargo run --example ablation -- [seeds] [epochs]

use dane::eval::{transfer, ClassifierConfig};
use dane::synth::{generate_pair, SynthSpec};
use dane::train::{fit, TrainConfig};

fn main() -> dane::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds is an integer"));
    let epochs: usize = args.next().map_or(100, |s| s.parse().expect("epochs is an integer"));
    println!("seed  lambda  macro_f1(A->B)  mmd2");
    for seed in 0..seeds {
        let synth = generate_pair(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })?;
        for lambda in [0.0, 1.0] {
            let out = fit(
                &synth.pair,
                TrainConfig {
                    seed,
                    lambda,
                    epochs,
                    ..TrainConfig::default()
                },
            )?;
            let [va, vb] = &out.embeddings;
            let r = transfer(
                (va, &synth.labels[0]),
                (vb, &synth.labels[1]),
                &ClassifierConfig {
                    seed,
                    ..ClassifierConfig::default()
                },
            )?;
            println!(
                "{seed:>4}  {lambda:>6}  {:>14.4}  {:.5}",
                r.macro_f1,
                r.mmd2.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
