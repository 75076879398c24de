//! Generates a few synthetic scenes with their questions, answers and
//! feature vectors.

use mqa::data::{generate_synthetic, COLORS, POSITIONS, SHAPES};

fn main() -> mqa::Result<()> {
    let synth = generate_synthetic(20, 3, 42)?;
    for scene in synth.scenes.iter().take(3) {
        let objects: Vec<String> = scene
            .objects
            .iter()
            .map(|o| {
                format!(
                    "{} {} at {}",
                    COLORS[o.color], SHAPES[o.shape], POSITIONS[o.position]
                )
            })
            .collect();
        println!("{}: {}", scene.image_id, objects.join(", "));
        let f = synth.features.get(&scene.image_id)?;
        let bits: String = f.iter().map(|&x| if x > 0.0 { '1' } else { '.' }).collect();
        println!("  features {bits}");
        for ex in synth
            .examples
            .iter()
            .filter(|e| e.image_id == scene.image_id)
        {
            println!("  {:<32} {}", ex.question.join(" "), ex.answer.join(" "));
        }
    }
    let split = synth.split_default();
    println!(
        "split: {} / {} / {}",
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(())
}
