//! Train the shared encoder on a synthetic pair and watch the losses.
//!
//! cargo run --example train_pair -- [epochs]

use dane::synth::{generate_pair, SynthSpec};
use dane::train::{TrainConfig, Trainer};

fn main() -> dane::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(50, |s| s.parse().expect("epochs is an integer"));
    let synth = generate_pair(&SynthSpec::default())?;
    let mut trainer = Trainer::new(
        &synth.pair,
        TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
    )?;
    println!("epoch      l_gcn     l_d   l_adv  score_src  score_tgt");
    for e in 0..epochs {
        let r = trainer.run_epoch()?;
        if e % 10 == 0 || e + 1 == epochs {
            println!(
                "{:>5} {:>10.2} {:>7.4} {:>7.4} {:>10.3} {:>10.3}",
                r.epoch, r.l_gcn, r.l_d, r.l_adv, r.mean_score_src, r.mean_score_tgt
            );
        }
    }
    let [a, b] = trainer.embeddings()?;
    println!(
        "embeddings: {}×{} and {}×{}",
        a.num_nodes(),
        a.dim(),
        b.num_nodes(),
        b.dim()
    );
    Ok(())
}
