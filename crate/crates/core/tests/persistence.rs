use pram_core::checkpoint;
use pram_core::synth::{generate_split, TRAIN_SPLIT};
use pram_core::{Dataset, GenConfig, StepLog, TrainConfig, Trainer};
use tempfile::TempDir;

fn data() -> Dataset {
    let cfg = GenConfig { num_ids: 6, test_ids: 0, per_id: 2, seed: 11, ..GenConfig::default() };
    generate_split(&cfg, TRAIN_SPLIT).unwrap()
}

fn small_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(&format!(
        "train.steps = {steps}\ntrain.batch_size = 4\ntrain.embed_dim = 32\ntrain.head_dim = 16\n\
         train.conv_stages = 8:5:2:2,8:3:1:2\ndata.crop_size = 120\ndata.part_size = 48\n"
    ))
    .unwrap();
    cfg.validate().unwrap();
    cfg
}

fn bits(logs: &[StepLog]) -> Vec<[u64; 3]> {
    logs.iter()
        .map(|l| [l.l_softmax.to_bits(), l.l_cat.to_bits(), l.l_total.to_bits()])
        .collect()
}

#[test]
fn resumed_run_is_bit_identical() {
    let ds = data();
    let mut full = Trainer::new(small_config(8), &ds).unwrap();
    let all = full.train(&ds, |_| {}).unwrap();

    let mut first = Trainer::new(small_config(8), &ds).unwrap();
    for _ in 0..3 {
        first.train_step(&ds).unwrap();
    }
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("mid.bin");
    checkpoint::save(&first, &path).unwrap();
    let mut resumed = checkpoint::load(&path).unwrap();
    assert_eq!(resumed.step(), 3);
    let rest = resumed.train(&ds, |_| {}).unwrap();
    assert_eq!(bits(&rest), bits(&all[3..]));

    let end = tmp.path().join("end.bin");
    let end2 = tmp.path().join("end2.bin");
    checkpoint::save(&full, &end).unwrap();
    checkpoint::save(&resumed, &end2).unwrap();
    assert_eq!(std::fs::read(end).unwrap(), std::fs::read(end2).unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_config_and_embeddings() {
    let ds = data();
    let mut t = Trainer::new(small_config(2), &ds).unwrap();
    t.train(&ds, |_| {}).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("c.bin");
    checkpoint::save(&t, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config(), t.config());
    assert_eq!(back.classes(), t.classes());
    assert_eq!(back.embed_dataset(&ds).unwrap(), t.embed_dataset(&ds).unwrap());
}

#[test]
fn corrupt_checkpoint_files_are_rejected() {
    let ds = data();
    let t = Trainer::new(small_config(1), &ds).unwrap();
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("c.bin");
    checkpoint::save(&t, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let bad = tmp.path().join("bad.bin");
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    assert!(checkpoint::load(&bad).is_err());
    std::fs::write(&bad, b"PRAMCK01").unwrap();
    assert!(checkpoint::load(&bad).is_err());
    assert!(checkpoint::load(&tmp.path().join("missing.bin")).is_err());
}
