//! Save a trained model, load it back and confirm identical predictions.

use nadetopic::corpus::{gen_synthetic, SyntheticSpec};
use nadetopic::model::predict_class;
use nadetopic::trainer::{self, load_checkpoint, save_checkpoint, Checkpoint};
use nadetopic::TrainConfig;

fn main() -> nadetopic::Result<()> {
    let corpus = gen_synthetic(&SyntheticSpec {
        classes: 2,
        k: 10,
        m: 1,
        a: 4,
        docs_per_class: 20,
        doc_len: 30,
        ann_len: 2,
        concentration: 0.1,
        seed: 2,
    })?;
    let config = TrainConfig {
        hidden: 8,
        learning_rate: 0.002,
        epochs: 20,
        ..TrainConfig::default()
    };
    let (params, _) = trainer::train(&corpus, &config)?;

    let path = std::env::temp_dir().join("nadetopic-example.ntck");
    save_checkpoint(
        &Checkpoint {
            params: params.clone(),
            config: Some(config),
            corpus_hash: Some(corpus.header_hash()),
        },
        &path,
    )?;
    let loaded = load_checkpoint(&path)?;
    println!("{} bytes, corpus {:?}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), loaded.corpus_hash);
    for doc in &corpus.docs {
        assert_eq!(predict_class(&params, doc)?, predict_class(&loaded.params, doc)?);
    }
    println!("all {} predictions match", corpus.len());
    std::fs::remove_file(&path).ok();
    Ok(())
}
