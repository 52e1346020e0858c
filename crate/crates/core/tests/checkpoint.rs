mod common;

use sinodiff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, VERSION};
use sinodiff::training::{train, Trainer};
use sinodiff::Error;

fn trained() -> (sinodiff::config::RunConfig, Trainer) {
    let run = common::small_run();
    let pairs = common::pairs(&run, 2);
    let mut tr = Trainer::new(&run).unwrap();
    train(&mut tr, &pairs, &run, 2, |_, _| Ok(())).unwrap();
    (run, tr)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (run, tr) = trained();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&Checkpoint::from_trainer(&run, &tr), &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.config, run);
    assert_eq!(loaded.iteration, 2);
    assert_eq!(loaded.rng, tr.rng_state());
    assert_eq!(loaded.optimizer, tr.optimizer);
    for (name, t) in tr.params.iter() {
        assert_eq!(loaded.params.get(name).unwrap(), t);
    }
}

#[test]
fn truncation_and_corruption_are_integrity_errors() {
    let (run, tr) = trained();
    let bytes = Checkpoint::from_trainer(&run, &tr).to_bytes();
    for cut in [0, 7, 15, 19, bytes.len() / 2, bytes.len() - 1] {
        let r = Checkpoint::from_bytes(&bytes[..cut], "x".as_ref());
        assert!(matches!(r, Err(Error::Integrity { .. })), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 3;
    flipped[mid] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped, "x".as_ref()), Err(Error::Integrity { .. })));
}

#[test]
fn other_version_is_rejected() {
    let (run, tr) = trained();
    let mut bytes = Checkpoint::from_trainer(&run, &tr).to_bytes();
    bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes, "x".as_ref()) {
        Err(Error::Version { found, expected }) => assert_eq!((found, expected), (VERSION + 1, VERSION)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn architecture_mismatch_lists_fields() {
    let (run, tr) = trained();
    let ckpt = Checkpoint::from_trainer(&run, &tr);
    ckpt.check_architecture(&run).unwrap();
    let mut other = run.clone();
    other.denoiser.fhd.embed_dim = 48;
    match ckpt.check_architecture(&other) {
        Err(Error::ArchitectureMismatch(fields)) => {
            assert_eq!(fields.len(), 1);
            assert!(fields[0].starts_with("denoiser.fhd.embed_dim"), "{fields:?}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn step_after_round_trip_equals_step_without() {
    let (run, tr) = trained();
    let pairs = common::pairs(&run, 2);
    let mut direct = tr.clone();
    let a = direct.step(&pairs, &run).unwrap();
    let bytes = Checkpoint::from_trainer(&run, &tr).to_bytes();
    let mut restored = Checkpoint::from_bytes(&bytes, "x".as_ref()).unwrap().into_trainer();
    let b = restored.step(&pairs, &run).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    for (name, t) in direct.params.iter() {
        assert_eq!(restored.params.get(name).unwrap(), t);
    }
}
