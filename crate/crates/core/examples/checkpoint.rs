//! Saves a model, reloads it and checks the bytes and predictions agree.

use mqa::checkpoint;
use mqa::{MqaConfig, MqaModel, Variant};

fn main() -> mqa::Result<()> {
    let model = MqaModel::init(MqaConfig {
        n: 50,
        d_embed: 16,
        d_hidden: 12,
        d_fuse: 16,
        d_img: 8,
        variant: Variant::NoTws,
        seed: 3,
        ..MqaConfig::default()
    })?;
    let dir = std::env::temp_dir().join(format!("mqa-checkpoint-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| mqa::MqaError::io(&dir, e))?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path)?;
    let back = checkpoint::load(&path)?;
    println!(
        "{} parameters, {} bytes",
        model.parameter_count(),
        checkpoint::to_bytes(&model).len()
    );
    println!("identical after reload: {}", back == model);
    println!(
        "byte-exact re-save: {}",
        checkpoint::to_bytes(&back) == checkpoint::to_bytes(&model)
    );
    for t in back.params.tensors() {
        println!("  {:<24} {:>6}", t.name, t.data.len());
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
