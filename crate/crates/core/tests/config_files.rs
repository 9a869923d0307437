use serl::config::{ExperimentConfig, PseudoSource};
use serl::losses::SpcrNorm;
use serl::mining::{HardPool, Pairing};

fn repo_file(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn published_hyperparameters_are_the_defaults() {
    let c = ExperimentConfig::default();
    assert_eq!(c.lambda_prob, 0.3);
    assert_eq!(c.lambda_mix, 60.0);
    assert_eq!(c.lambda_pre, 3.0);
    assert_eq!(c.tau, 0.15);
    assert_eq!(c.beta, 0.7);
    assert_eq!(c.mixup_alpha, 1.0);
    assert_eq!(c.n_easy, 15);
    assert_eq!(c.n_hard, 15);
    assert_eq!(c.cls_temperature, 0.05);
    assert_eq!(c.momentum, 0.9);
    assert_eq!(c.weight_decay, 0.0005);
    assert_eq!((c.lr_backbone, c.lr_bottleneck, c.lr_classifier), (0.001, 0.01, 0.01));
    assert_eq!(c.shots, 3);
    assert_eq!(c.classes, 5);
    assert_eq!(c.rotation_deg, 50.0);
    assert_eq!(c.seeds, vec![1, 2, 3]);
    assert_eq!(c.pseudo_source, PseudoSource::Propagate);
    assert_eq!(c.spcr_norm, SpcrNorm::Batch);
    assert_eq!(c.pair, Pairing::CyclicRandom);
    assert_eq!(c.hard_pool, HardPool::ClassRestricted);
}

#[test]
fn file_round_trip() {
    let mut c = ExperimentConfig::default();
    c.lambda_prob = 0.1;
    c.seeds = vec![4, 5, 6, 7];
    c.spcr_norm = SpcrNorm::Positives;
    c.translation = vec![0.125, -1.5];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.conf");
    c.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), c);
}

#[test]
fn shipped_configs_parse() {
    let text = std::fs::read_to_string(repo_file("crates/core/config/default.conf")).unwrap();
    assert_eq!(ExperimentConfig::from_text(&text).unwrap(), ExperimentConfig::default());

    let desk = ExperimentConfig::load(repo_file("configs/desk.conf")).unwrap();
    assert_eq!(desk.spcr_norm, SpcrNorm::Positives);
    assert_eq!(desk.lambda_mix, 1.0);
    assert_eq!(desk.aug_mask, 0.0);
    assert_eq!(desk.lambda_prob, 0.3);
}

#[test]
fn bad_files_are_config_errors() {
    for text in [
        "lamda_mix = 3\n",
        "tau = 0\n",
        "beta = 1\n",
        "seeds =\n",
        "unlabeled_batch = 1\n",
        "shots = 200\n",
        "spcr_norm = mean\n",
        "knn_k = five\n",
        "no equals sign\n",
    ] {
        let err = ExperimentConfig::from_text(text).unwrap_err();
        assert!(err.is_config(), "{text:?} gave {err}");
    }
    let err = ExperimentConfig::load("/nonexistent/exp.conf").unwrap_err();
    assert!(err.is_config());
}
