use std::fs;

use noiseadapt::config::RunConfig;
use noiseadapt::data::generate_stream;
use noiseadapt::models::checksum;
use noiseadapt::pipeline::{load_models, save_models, train_models, training_streams, DENOISER_FILE, FEATURES_FILE};
use noiseadapt::stream::run_stream;
use noiseadapt::Error;

const TINY: &str = "\
ae_epochs = 1
denoiser_iterations = 10
train_streams = 1
clips_per_stream = 6
stream_length = 6
drift_at = none
steps = 2
";

#[test]
fn saved_models_reload_bit_identically() {
    let config = RunConfig::parse(TINY).unwrap();
    let models = train_models(&config.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("a/b");
    save_models(&nested, &models, config.train.feature_seed).unwrap();
    let (bundle, schedule) = load_models(&nested, config.train.model).unwrap();
    assert_eq!(schedule, models.schedule);
    assert_eq!(checksum(bundle.denoiser.tensors()), checksum(models.bundle.denoiser.tensors()));
    assert_eq!(checksum(bundle.autoencoder.tensors()), checksum(models.bundle.autoencoder.tensors()));

    let clips = generate_stream(&config.stream_spec()).unwrap();
    let a = run_stream(&bundle, &schedule, clips.clone(), &config.stream, &mut config.rng()).unwrap();
    let b = run_stream(&models.bundle, &models.schedule, clips, &config.stream, &mut config.rng()).unwrap();
    let hashes = |r: &noiseadapt::stream::StreamRun| r.records.iter().map(|s| s.prediction_hash).collect::<Vec<_>>();
    assert_eq!(hashes(&a), hashes(&b));
}

#[test]
fn damaged_files_are_rejected() {
    let config = RunConfig::parse(TINY).unwrap();
    let models = train_models(&config.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_models(dir.path(), config.train.model), Err(Error::Io { .. })));

    save_models(dir.path(), &models, config.train.feature_seed).unwrap();
    let path = dir.path().join(DENOISER_FILE);
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 3);
    fs::write(&path, &bytes).unwrap();
    assert!(load_models(dir.path(), config.train.model).is_err());

    save_models(dir.path(), &models, config.train.feature_seed + 1).unwrap();
    assert!(matches!(load_models(dir.path(), config.train.model), Err(Error::InvalidConfig(_))));
    assert!(dir.path().join(FEATURES_FILE).exists());
}

#[test]
fn training_streams_cover_the_initial_and_every_drifted_regime() {
    let config = RunConfig::parse("train_streams = 2\nclips_per_stream = 4\n").unwrap();
    let (initial, drifted) = training_streams(&config.train).unwrap();
    assert_eq!(initial.len(), 2);
    assert_eq!(drifted.len(), 2 * config.train.stream.drift.len());
    assert!(!drifted.is_empty());
    assert!(initial.iter().chain(&drifted).all(|s| s.len() == 4));
    assert_ne!(checksum([initial[0][0].pixels()]), checksum([drifted[0][0].pixels()]));
}
