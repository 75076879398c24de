//! Builds a vocabulary from a toy corpus and round-trips text through ids.

use mqa::vocab::{tokenize, Vocabulary};

fn main() -> mqa::Result<()> {
    let corpus: Vec<Vec<String>> = ["what color is the bus ?", "what is on the table ?", "red"]
        .iter()
        .map(|s| tokenize(s))
        .collect();
    let vocab = Vocabulary::build(&corpus, 1)?;
    for (id, tok) in vocab.tokens().iter().enumerate() {
        println!("{id:>3} {tok}");
    }
    let ids = vocab.encode(&tokenize("what color is the giraffe ?"));
    println!("encoded: {ids:?}");
    println!("decoded: {}", vocab.decode(&ids)?.join(" "));
    Ok(())
}
