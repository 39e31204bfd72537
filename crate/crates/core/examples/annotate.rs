//! Train a mostly generative model and suggest annotation words for
//! documents from their visual words alone.

use nadetopic::corpus::{gen_synthetic, SyntheticSpec};
use nadetopic::model::predict_annotations;
use nadetopic::{eval, trainer, TrainConfig};

fn main() -> nadetopic::Result<()> {
    let mut corpus = gen_synthetic(&SyntheticSpec {
        classes: 3,
        k: 16,
        m: 2,
        a: 8,
        docs_per_class: 60,
        doc_len: 40,
        ann_len: 4,
        concentration: 0.1,
        seed: 5,
    })?;
    corpus.vocab.annotation_names = Some((0..8).map(|i| format!("tag{i}")).collect());
    let config = TrainConfig {
        lambda: 1.0,
        hidden: 16,
        learning_rate: 0.002,
        epochs: 60,
        ..TrainConfig::default()
    };
    let (params, _) = trainer::train(&corpus, &config)?;

    for doc in corpus.docs.iter().step_by(45) {
        let top = predict_annotations(&params, doc, 3)?;
        let names: Vec<String> = top
            .iter()
            .map(|(a, lp)| format!("{} ({:.3})", params.vocab.describe(params.vocab.visual_size() + a).unwrap(), lp.exp()))
            .collect();
        println!("class {} truth {:?} -> {}", doc.label, doc.annotations, names.join(", "));
    }
    let f = eval::corpus_f_measure(&params, &corpus, 3)?;
    println!("mean top-3 F-measure {:.3} over {} documents", f.mean, f.scored);
    Ok(())
}
