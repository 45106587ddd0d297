//! Regenerates the bundled synthetic corpus under `data/`.

use std::path::Path;

use hgere_core::corpus::write_jsonl;
use hgere_core::synth;

fn main() -> hgere_core::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    std::fs::create_dir_all(&dir).map_err(|e| hgere_core::Error::io(&dir, e))?;
    let schema = serde_json::to_string_pretty(&synth::schema()).expect("schema serializes");
    let schema_path = dir.join("schema.json");
    std::fs::write(&schema_path, schema + "\n").map_err(|e| hgere_core::Error::io(&schema_path, e))?;
    let (train, dev, test) = synth::split(synth::generate(200, synth::CORPUS_SEED, "synth"));
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("dev.jsonl"), &dev)?;
    write_jsonl(&dir.join("test.jsonl"), &test)?;
    write_jsonl(&dir.join("toy.jsonl"), &synth::generate(16, synth::TOY_SEED, "toy"))?;
    for (name, docs) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let n: usize = docs.iter().map(|d| d.num_sentences()).sum();
        println!("{name}: {} documents, {n} sentences", docs.len());
    }
    Ok(())
}
