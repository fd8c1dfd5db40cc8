use fednorm_cli::{DatasetKind, ExperimentConfig, Precision};
use fednorm_core::fed::ModelId;
use fednorm_core::NormKind;

#[test]
fn empty_file_gives_published_defaults() {
    let c = ExperimentConfig::parse("").unwrap();
    assert_eq!(c.fed.local_epochs, 10);
    assert_eq!(c.fed.batch_size, 64);
    assert_eq!(c.fed.learning_rate, 0.01);
    assert_eq!(c.fed.devices_per_round, 10);
    assert_eq!(c.fed.num_devices, 100);
    assert_eq!(c.fed.total_rounds, 5000);
    assert_eq!(c.fed.model, ModelId::Cnn);
    assert_eq!(c.fed.threads, 1);
    assert_eq!(c.classes_per_device, 2);
    assert_eq!(c.samples_per_class, 100);
    assert_eq!(c.precision, Precision::F64);
    assert_eq!(c.dataset, DatasetKind::Cifar10);
    assert_eq!(c, ExperimentConfig::parse("# only a comment\n\n   \n").unwrap());
}

#[test]
fn norm_key_selects_the_kind() {
    assert_eq!(ExperimentConfig::parse("norm = layer").unwrap().fed.norm_kind, NormKind::Layer);
    assert_eq!(ExperimentConfig::parse("norm=fixed_batch # inline").unwrap().fed.norm_kind, NormKind::FixedBatch);
    assert_eq!(ExperimentConfig::parse("norm = group").unwrap().fed.norm_kind, NormKind::Group(2));
    assert_eq!(ExperimentConfig::parse("norm = group:3").unwrap().fed.norm_kind, NormKind::Group(3));
    assert_eq!(ExperimentConfig::parse("norm = group\ngroups = 6").unwrap().fed.norm_kind, NormKind::Group(6));
}

#[test]
fn unknown_norm_kind_lists_the_valid_ones() {
    let msg = format!("{:#}", ExperimentConfig::parse("norm = batchnorm2").unwrap_err());
    assert!(msg.contains("batchnorm2"), "{msg}");
    for kind in NormKind::NAMES {
        assert!(msg.contains(kind), "{kind} missing from {msg}");
    }
}

#[test]
fn strictness() {
    let err = |text: &str| format!("{:#}", ExperimentConfig::parse(text).unwrap_err());
    assert!(err("learning_rat = 0.1").contains("unknown key"));
    assert!(err("seed = 1\nseed = 2").contains("duplicate key"));
    assert!(err("batch_size 64").contains("key = value"));
    assert!(err("batch_size = sixty").contains("batch_size"));
    assert!(err("local_epochs = 0").contains("local_epochs"));
    assert!(err("devices_per_round = 101").contains("devices_per_round"));
    assert!(err("groups = 3").contains("groups"));
    assert!(err("dataset = imagenet").contains("synthetic-cifar"));
    assert!(err("precision = f16").contains("f32"));
    assert!(err("record_wall_clock = yes").contains("record_wall_clock"));
    assert!(err("norm = layer\n\nthreads = 0").contains("threads"));
}

#[test]
fn resolved_snapshot_reparses_to_the_same_config() {
    let text = "dataset = synthetic-mnist\nnorm = group:3\nlearning_rate = 0.0123\nnorm_epsilon = 1e-7\nseed = 99\n\
                output_dir = /tmp/x y\ntoy_delta = -0.25\nthreads = 4\nprecision = f32\nrecord_wall_clock = false";
    let c = ExperimentConfig::parse(text).unwrap();
    let snapshot = c.to_resolved_text();
    let again = ExperimentConfig::parse(&snapshot).unwrap();
    assert_eq!(again.fed, c.fed);
    assert_eq!(again.toy, c.toy);
    assert_eq!(again.output_dir, c.output_dir);
    assert_eq!(again.resolved_train_per_class(), c.resolved_train_per_class());
    assert_eq!(again.resolved_synthetic_side(), 28);
    assert_eq!(again.to_resolved_text(), snapshot);
    assert_eq!(again.toy.seed, 99);
}

#[test]
fn synthetic_size_defaults_cover_the_partition() {
    let c = ExperimentConfig::parse("num_devices = 20\ndevices_per_round = 5\nsamples_per_class = 30").unwrap();
    assert_eq!(c.resolved_train_per_class(), 20 * 2 * 30 / 10);
    assert_eq!(c.resolved_synthetic_side(), 32);
}
