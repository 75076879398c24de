//! Decodes answers from an untrained model with several beam widths and
//! shows the ranked hypotheses.

use mqa::data::{build_vocabulary, generate_synthetic};
use mqa::decode::{answer_all, BeamConfig};
use mqa::{MqaConfig, MqaModel};

fn main() -> mqa::Result<()> {
    let synth = generate_synthetic(2, 2, 1)?;
    let vocab = build_vocabulary(&synth.examples, 1)?;
    let model = MqaModel::init(MqaConfig {
        n: vocab.len(),
        d_embed: 8,
        d_hidden: 8,
        d_fuse: 8,
        d_img: synth.features.d_img(),
        init_scale: 1.0,
        seed: 5,
        ..MqaConfig::default()
    })?;
    let ex = &synth.examples[0];
    println!("image {}  question: {}", ex.image_id, ex.question.join(" "));
    for k in [1, 3, 5] {
        let cfg = BeamConfig {
            k,
            max_len: 6,
            ..BeamConfig::default()
        };
        println!("beam width {k}:");
        for (words, logprob) in answer_all(
            &model,
            &synth.features,
            &vocab,
            &ex.image_id,
            &ex.question,
            &cfg,
        )? {
            println!("  {logprob:>9.4}  {}", words.join(" "));
        }
    }
    Ok(())
}
