//! Train on a synthetic corpus and list the joint words most associated
//! with each class through the classifier and word weights.

use nadetopic::corpus::{gen_synthetic, SyntheticSpec};
use nadetopic::model::inspect_class_associations;
use nadetopic::{trainer, TrainConfig};

fn main() -> nadetopic::Result<()> {
    let corpus = gen_synthetic(&SyntheticSpec {
        classes: 3,
        k: 12,
        m: 2,
        a: 6,
        docs_per_class: 50,
        doc_len: 40,
        ann_len: 2,
        concentration: 0.05,
        seed: 8,
    })?;
    let config = TrainConfig {
        lambda: 0.1,
        hidden: 12,
        learning_rate: 0.002,
        epochs: 80,
        ..TrainConfig::default()
    };
    let (params, _) = trainer::train(&corpus, &config)?;

    for class in 0..params.num_classes() {
        let assoc = inspect_class_associations(&params, class, 2, 6)?;
        let words: Vec<String> = assoc.words.iter().map(|w| format!("{} {:+.2}", w.name, w.score)).collect();
        println!("class {class} via units {:?}: {}", assoc.topics, words.join(", "));
    }
    Ok(())
}
