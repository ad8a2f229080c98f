use vcagan::data::{build_corpus, CorpusConfig, Split};
use vcagan::trainer::{load_examples, TrainConfig, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("vcagan_smoke");
    let corpus = build_corpus(&CorpusConfig::new(64, 11, &dir)).unwrap();
    let train = load_examples(&corpus, Split::Train).unwrap();
    let val = load_examples(&corpus, Split::Val).unwrap();
    let cfg = TrainConfig { data_dir: dir, steps: 2000, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, vcagan::model::ModelConfig::default()).unwrap();
    let v0 = trainer.validate(&val).unwrap();
    println!("val L_recon @init = {v0:.4}");
    for s in 0..2000u64 {
        let batch = trainer.sample_batch(&train).unwrap();
        let rec = trainer.train_step(&batch).unwrap();
        if s % 100 == 0 || s == 1999 {
            let v = trainer.validate(&val).unwrap();
            println!("{rec} | val={v:.4}");
        }
    }
}
