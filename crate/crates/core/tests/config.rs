use staged_alae::alae::ReconSpace;
use staged_alae::config::{Config, StageEpochs};
use staged_alae::Error;

#[test]
fn defaults_from_an_empty_file() {
    let c = Config::from_toml_str("").unwrap();
    assert_eq!(c, Config::default());
    assert_eq!((c.lr_stage, c.lr_finetune, c.batch_size), (1e-3, 1e-4, 32));
    assert_eq!((c.alae.epochs, c.alae.lr, c.alae.batch_size), (120, 1e-4, 8));
    assert_eq!(c.concepts.lambda, 1e-2);
    assert_eq!(c.epochs_for_stage(3).unwrap(), 10);
}

#[test]
fn full_file() {
    let text = r#"
resolution = 32
stage_epochs = [3, 4]
finetune_epochs = 2
lr_stage = 0.002
lr_finetune = 0.0002
batch_size = 16
seed = 9
width_divisor = 8

[split]
train = 0.7
val = 0.2

[alae]
epochs = 30
recon_space = "image"
r1_gamma = 10.0

[concepts]
lambda = 0.5
standardize = true
"#;
    let c = Config::from_toml_str(text).unwrap();
    assert_eq!(c.stage_epochs, StageEpochs::PerStage(vec![3, 4]));
    assert_eq!(c.epochs_for_stage(2).unwrap(), 4);
    assert!(c.epochs_for_stage(3).is_err());
    assert_eq!(c.alae.recon_space, ReconSpace::Image);
    assert_eq!(c.alae.batch_size, 8);
    assert!(c.concepts.logistic_options().standardize);
    assert_eq!(c.schedule().unwrap().stem_filters, 32);
    assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
}

#[test]
fn rejects_bad_files() {
    for text in [
        "resolutoin = 64",
        "resolution = 48",
        "stage_epochs = [1, 2]",
        "stage_epochs = 0",
        "batch_size = 0",
        "lr_stage = -1.0",
        "[alae]\nema_decay = 1.5",
        "[alae]\nrecon_space = \"pixels\"",
        "[alae]\nunknown = 1",
        "[split]\ntrain = 0.9\nval = 0.2",
        "seed = \"x\"",
    ] {
        assert!(matches!(Config::from_toml_str(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn loads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "stage_epochs = 2\n").unwrap();
    assert_eq!(Config::load(&path).unwrap().stage_epochs, StageEpochs::Uniform(2));
    assert!(matches!(Config::load(&dir.path().join("missing.toml")), Err(Error::Io { .. })));
}
