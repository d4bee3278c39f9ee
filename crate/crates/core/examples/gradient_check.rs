//! Compare the analytic encoder gradient against central differences on a
//! small pair.
//!
//! cargo run --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dane::graph::build_negative_sampler;
use dane::model::EdgeBatch;
use dane::synth::{generate_pair, SynthSpec};
use dane::train::{encoder_objective, TrainConfig, TrainContext};

fn main() -> dane::Result<()> {
    let spec = SynthSpec {
        num_blocks: 2,
        nodes_per_block: 6,
        p_in: 0.6,
        p_out: 0.1,
        feature_dim: 3,
        ..SynthSpec::default()
    };
    let synth = generate_pair(&spec)?;
    let cfg = TrainConfig {
        embedding_dim: 4,
        disc_hidden: Some(vec![4]),
        ..TrainConfig::default()
    };
    let ctx = TrainContext::new(&synth.pair, cfg.clone())?;
    let (encoder, disc) = cfg.init_params(spec.feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut batch = |g: &dane::graph::Graph| -> dane::Result<EdgeBatch> {
        Ok(EdgeBatch::sample(
            g.edges(),
            &build_negative_sampler(g, 0)?,
            cfg.negative_samples,
            &mut rng,
        ))
    };
    let batches = [batch(&synth.pair.source)?, batch(&synth.pair.target)?];
    let objective = |enc: &dane::model::EncoderParams| {
        encoder_objective(&ctx, enc, &disc, [&batches[0], &batches[1]], [None, None])
    };
    let analytic = objective(&encoder)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for layer in 0..encoder.weights.len() {
        for i in 0..encoder.weights[layer].data().len() {
            let mut up = encoder.clone();
            up.weights[layer].data_mut()[i] += h;
            let mut down = encoder.clone();
            down.weights[layer].data_mut()[i] -= h;
            let numeric = (objective(&up)?.value - objective(&down)?.value) / (2.0 * h);
            let a = analytic.encoder[layer].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    println!(
        "objective {:.6}, worst relative gradient error {worst:.2e}",
        analytic.value
    );
    Ok(())
}
