use ml2::dataset::{generate_synthetic, SyntheticSpec};
use ml2::eval::evaluate;
use ml2::model::{load_checkpoint, save_checkpoint, EncoderConfig};
use ml2::sampler::Regime;
use ml2::trainer::{train, validate_model, TrainConfig};
use ml2::EmbeddingModel;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        train_size: 400,
        val_size: 100,
        test_size: 100,
        ..SyntheticSpec::desk_default(11)
    }
}

#[test]
fn training_improves_on_initialization_and_survives_a_checkpoint() {
    let d = generate_synthetic(&small_spec()).unwrap();
    let enc = EncoderConfig {
        hidden: vec![32],
        embedding_dim: 16,
        ..EncoderConfig::new(32)
    };
    let cfg = TrainConfig {
        iterations: 300,
        eval_every: 50,
        ..TrainConfig::desk_default(Regime::Ml2plus)
    };
    let initial = validate_model(&EmbeddingModel::new(enc.clone()).unwrap(), &d.val, 0).unwrap();
    let out = train(&d.train, &d.val, &enc, &cfg).unwrap();
    let best = out.report.best_val_nmi.unwrap();
    assert!(best > initial.0, "best {best} vs initial {}", initial.0);

    let before = evaluate(&out.model, &d.test, Some(&d.train), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_checkpoint(&out.model, out.report.best_iteration.unwrap(), &path).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.iteration, out.report.best_iteration.unwrap());
    let after = evaluate(&loaded, &d.test, Some(&d.train), 0).unwrap();
    assert_eq!(before, after);
}

#[test]
fn every_regime_trains_on_generated_data() {
    let d = generate_synthetic(&small_spec()).unwrap();
    let enc = EncoderConfig {
        hidden: vec![16],
        embedding_dim: 8,
        ..EncoderConfig::new(32)
    };
    for regime in [Regime::Contrastive, Regime::Triplet, Regime::Ml2, Regime::Ml2plus] {
        let cfg = TrainConfig {
            iterations: 20,
            eval_every: 10,
            ..TrainConfig::desk_default(regime)
        };
        let out = train(&d.train, &d.val, &enc, &cfg).unwrap();
        assert_eq!(out.report.history.len(), 2, "{regime}");
        assert!(out.report.history.iter().all(|r| r.train_loss.is_finite() && r.train_loss >= 0.0));
    }
}
