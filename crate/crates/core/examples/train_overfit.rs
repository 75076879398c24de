//! Memorizes sixteen synthetic question/answer pairs, first with the
//! published schedule (lr 1, ÷10 per epoch), then with a slowly decaying
//! one, and decodes every pair back with a width-1 beam.

use mqa::data::{build_vocabulary, generate_synthetic, ImageFeatureStore};
use mqa::decode::{beam_search, BeamConfig};
use mqa::model::{encode_examples, EncodedExample};
use mqa::train::{train, TrainConfig};
use mqa::vocab::Vocabulary;
use mqa::{MqaConfig, MqaModel, Variant};

fn run(
    label: &str,
    init_scale: f64,
    cfg: &TrainConfig,
    data: &[EncodedExample],
    vocab: &Vocabulary,
    features: &ImageFeatureStore,
) -> mqa::Result<()> {
    let model = MqaModel::init(MqaConfig {
        n: vocab.len(),
        d_embed: 32,
        d_hidden: 32,
        d_fuse: 32,
        d_img: 33,
        variant: Variant::Complete,
        init_scale,
        ..MqaConfig::default()
    })?;
    let out = train(model, data, &[], features, cfg)?;
    let loss = mqa::eval::mean_loss(&out.model, data, features)?;
    let mut hits = 0;
    for ex in data {
        let image = out.model.image_for(features, &ex.image_id)?;
        let best = &beam_search(&out.model, image, &ex.question, &BeamConfig::with_k(1))?[0];
        hits += usize::from(best.answer_ids() == ex.answer.as_slice());
    }
    println!(
        "{label:<28} epochs {:>4}  mean token loss {loss:.5}  reproduced {hits}/{}",
        out.history.records.len(),
        data.len()
    );
    Ok(())
}

fn main() -> mqa::Result<()> {
    let synth = generate_synthetic(6, 3, 7)?;
    let examples = &synth.examples[..16];
    let vocab = build_vocabulary(examples, 1)?;
    let data = encode_examples(&vocab, examples);
    for ex in examples {
        println!("{:<32} {}", ex.question.join(" "), ex.answer.join(" "));
    }
    let paper = TrainConfig {
        max_epochs: 10,
        ..TrainConfig::default()
    };
    run(
        "published schedule",
        0.08,
        &paper,
        &data,
        &vocab,
        &synth.features,
    )?;
    let slow = TrainConfig {
        initial_lr: 0.05,
        decay_factor: 1.002,
        max_epochs: 600,
        ..TrainConfig::default()
    };
    run(
        "slow decay, init ±0.3",
        0.3,
        &slow,
        &data,
        &vocab,
        &synth.features,
    )?;
    Ok(())
}
