//! Trains all five variants on a synthetic benchmark and prints the
//! comparison table. Pass an image count to change the size (default 300;
//! the full benchmark uses 2500).

use mqa::data::{build_vocabulary, generate_synthetic};
use mqa::decode::BeamConfig;
use mqa::eval::{ablation_report, benchmark_preset, AblationData};
use mqa::model::encode_examples;
use mqa::Variant;

fn main() -> mqa::Result<()> {
    let n_images: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let synth = generate_synthetic(n_images, 3, 0)?;
    let split = synth.split_default();
    let vocab = build_vocabulary(&split.train, 1)?;
    let (train, valid, test) = (
        encode_examples(&vocab, &split.train),
        encode_examples(&vocab, &split.valid),
        encode_examples(&vocab, &split.test),
    );
    let (model_cfg, train_cfg) = benchmark_preset(vocab.len(), Variant::Complete, 0);
    let report = ablation_report(
        AblationData {
            train: &train,
            valid: &valid,
            test: &test,
            features: &synth.features,
        },
        &model_cfg,
        &train_cfg,
        &BeamConfig::with_k(1),
        None,
    )?;
    print!("{}", report.to_text());
    Ok(())
}
