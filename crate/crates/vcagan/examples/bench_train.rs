use std::time::Instant;
use vcagan::data::{build_corpus, CorpusConfig, Split};
use vcagan::trainer::{load_examples, TrainConfig, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("vcagan_bench_corpus");
    let t0 = Instant::now();
    let corpus = build_corpus(&CorpusConfig::new(24, 7, &dir)).unwrap();
    println!("corpus 24 samples: {:.2}s", t0.elapsed().as_secs_f64());
    let train = load_examples(&corpus, Split::Train).unwrap();
    let cfg = TrainConfig { data_dir: dir.clone(), ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, vcagan::model::ModelConfig::default()).unwrap();
    println!("params: {} tensors, {} elements", trainer.model.params.len(), trainer.model.params.total_elements());
    // warmup
    let batch = trainer.sample_batch(&train).unwrap();
    let rec = trainer.train_step(&batch).unwrap();
    println!("warmup: {rec}");
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let batch = trainer.sample_batch(&train).unwrap();
        let rec = trainer.train_step(&batch).unwrap();
        assert!(rec.finite());
    }
    let per = t0.elapsed().as_secs_f64() / n as f64;
    println!("{per:.3} s/step  -> 5000 steps = {:.1} min", per * 5000.0 / 60.0);
    let t0 = Instant::now();
    let v = trainer.validate(&train[0..4]).unwrap();
    println!("validate 4 clips: {:.2}s (L_recon={v:.4})", t0.elapsed().as_secs_f64());
}
