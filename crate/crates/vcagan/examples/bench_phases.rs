use std::time::Instant;
use vcagan::data::{build_corpus, CorpusConfig, Split};
use vcagan::model::net::temporal_average;
use vcagan::model::ModelConfig;
use vcagan::tensor::Tape;
use vcagan::trainer::{load_examples, TrainConfig, Trainer};

fn main() {
    let dir = std::env::temp_dir().join("vcagan_bench_corpus2");
    let corpus = build_corpus(&CorpusConfig::new(16, 7, &dir)).unwrap();
    let train = load_examples(&corpus, Split::Train).unwrap();
    let cfg = TrainConfig { data_dir: dir.clone(), ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, ModelConfig::default()).unwrap();
    let batch = trainer.sample_batch(&train).unwrap();
    let model = &trainer.model;

    // forward_generator alone (frozen), per 8-sample batch
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let bind = model.bind_frozen(&mut tape);
        for (clip, _) in &batch {
            let f = model.forward_generator(&mut tape, &bind, clip, None).unwrap();
            let _ = temporal_average(&mut tape, f.c_v);
        }
    }
    println!("G forward x8 (frozen): {:.0} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward + generator grads
    let gg: Vec<_> = trainer.g_group.clone();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape, vcagan::model::GENERATOR_GROUP);
        let mut acc = None;
        for (clip, _) in &batch {
            let f = model.forward_generator(&mut tape, &bind, clip, None).unwrap();
            let m = tape.mean_all(f.gen.mels[2]);
            acc = Some(match acc { Some(a) => tape.add(a, m), None => m });
        }
        let loss = acc.unwrap();
        let ids = bind.tensor_ids(&gg);
        let _ = tape.grad(loss, &ids);
    }
    println!("G fwd+bwd x8: {:.0} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // binding cost alone
    let t0 = Instant::now();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let _ = model.bind_frozen(&mut tape);
    }
    println!("bind all params: {:.1} ms", t0.elapsed().as_secs_f64() / 50.0 * 1e3);

    // full step breakdown via repeated calls
    let t0 = Instant::now();
    for _ in 0..reps {
        let b = trainer.sample_batch(&train).unwrap();
        let _ = trainer.train_step(&b).unwrap();
    }
    println!("full step: {:.0} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
