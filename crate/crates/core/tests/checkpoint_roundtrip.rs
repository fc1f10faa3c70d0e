use isda::checkpoint;
use isda::config::ModelConfig;
use isda::model::Model;
use isda::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn forward_after_reload_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::tiny();
    let (model, store) = Model::new(&cfg, 3).unwrap();
    let image = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&store, &path).unwrap();

    // A differently seeded store receives the saved values.
    let (_, mut fresh) = Model::new(&cfg, 4).unwrap();
    checkpoint::load_into(&mut fresh, &path).unwrap();
    let (p0, m0) = model.infer(&store, &image).unwrap();
    let (p1, m1) = model.infer(&fresh, &image).unwrap();
    assert_eq!(bits(&p0), bits(&p1));
    assert_eq!(bits(&m0), bits(&m1));
    assert_eq!(std::fs::read(&path).unwrap(), checkpoint::encode(&fresh));
}

#[test]
fn loading_into_another_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = Model::new(&ModelConfig::tiny(), 0).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&store, &path).unwrap();
    let (_, mut other) = Model::new(&ModelConfig { num_queries: 6, ..ModelConfig::tiny() }, 0).unwrap();
    let before = checkpoint::encode(&other);
    let err = checkpoint::load_into(&mut other, &path).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
    assert_eq!(checkpoint::encode(&other), before);
}
