use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fednorm_cli::{CHECKPOINT_FILE, HISTOGRAM_FILE, METRICS_FILE, PARTITION_FILE, RESOLVED_CONFIG_FILE, SHIFT_STATS_FILE, SHIFT_SUMMARY_FILE};
use fednorm_core::data::{synthetic, write_cifar10_file, write_mnist, Split, SyntheticSpec};
use fednorm_core::fed::read_jsonl;
use fednorm_core::partition::PartitionManifest;
use fednorm_core::{checkpoint, ModelState64};

fn fednorm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fednorm"))
        .args(args)
        .current_dir(dir)
        .env_remove("FEDNORM_DATA_DIR")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "dataset = synthetic-cifar\nsynthetic_side = 16\nnum_devices = 10\ndevices_per_round = 3\n\
                     local_epochs = 2\ntotal_rounds = 3\neval_every = 2\nnorm = batch\nrecord_wall_clock = false\n";

#[test]
fn default_config_with_synthetic_data_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "default.cfg", "dataset = synthetic-cifar\ntotal_rounds = 1\noutput_dir = out\n");
    let o = fednorm(&["run", &cfg], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    let records = read_jsonl(&fs::read_to_string(out.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].devices.len(), 10);
    assert!(records[0].secs.is_some());
    let model: ModelState64 = checkpoint::load(out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(model.topology.input_shape, vec![3, 32, 32]);
    let manifest = PartitionManifest::read(out.join(PARTITION_FILE)).unwrap();
    assert_eq!(manifest.num_devices(), 100);
    assert!(manifest.assignments.iter().all(|a| a.len() == 200));
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.cfg", &format!("{SMALL}output_dir = a\n"));
    let b = write_config(tmp.path(), "b.cfg", &format!("{SMALL}output_dir = b\n"));
    assert!(fednorm(&["run", &a], tmp.path()).status.success());
    assert!(fednorm(&["run", &b], tmp.path()).status.success());
    for f in [METRICS_FILE, CHECKPOINT_FILE, PARTITION_FILE] {
        let x = fs::read(tmp.path().join("a").join(f)).unwrap();
        let y = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let records = read_jsonl(&fs::read_to_string(tmp.path().join("a").join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(records.iter().map(|r| r.round).collect::<Vec<_>>(), vec![2, 3]);
    assert!(records.iter().all(|r| r.secs.is_none()));
}

#[test]
fn resolved_snapshot_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", &format!("{SMALL}output_dir = first\nprecision = f32\n"));
    assert!(fednorm(&["run", &cfg], tmp.path()).status.success());
    let snapshot = fs::read_to_string(tmp.path().join("first").join(RESOLVED_CONFIG_FILE)).unwrap();
    let replay = snapshot.replace("output_dir = first", "output_dir = second");
    assert_ne!(replay, snapshot);
    let cfg2 = write_config(tmp.path(), "replay.cfg", &replay);
    assert!(fednorm(&["run", &cfg2], tmp.path()).status.success());
    for f in [METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(
            fs::read(tmp.path().join("first").join(f)).unwrap(),
            fs::read(tmp.path().join("second").join(f)).unwrap()
        );
    }
}

#[test]
fn corrupted_dataset_file_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("cifar");
    fs::create_dir(&data).unwrap();
    let mut spec = SyntheticSpec::cifar_like(32, 3);
    spec.classes = 10;
    let d = synthetic::<f64>(&spec, 1, 2).unwrap();
    for i in 1..=5 {
        write_cifar10_file(&d, data.join(format!("data_batch_{i}.bin"))).unwrap();
    }
    write_cifar10_file(&d, data.join("test_batch.bin")).unwrap();
    let mut bytes = fs::read(data.join("data_batch_3.bin")).unwrap();
    bytes.truncate(bytes.len() - 100);
    fs::write(data.join("data_batch_3.bin"), bytes).unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", &format!("data_dir = {}\nnum_devices = 5\ndevices_per_round = 1\nsamples_per_class = 5\ntotal_rounds = 1\n", data.display()));
    let o = fednorm(&["run", &cfg], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data_batch_3.bin"), "{}", stderr(&o));

    // A bad label byte is rejected too.
    let mut bytes = fs::read(data.join("data_batch_1.bin")).unwrap();
    bytes[0] = 42;
    fs::write(data.join("data_batch_3.bin"), bytes).unwrap();
    let o = fednorm(&["partition", &cfg], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("label byte 42"), "{}", stderr(&o));
}

#[test]
fn data_dir_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir(&data).unwrap();
    write_mnist(&synthetic::<f64>(&SyntheticSpec::mnist_like(10), 3, 4).unwrap(), &data, Split::Train).unwrap();
    write_mnist(&synthetic::<f64>(&SyntheticSpec::mnist_like(2), 3, 5).unwrap(), &data, Split::Test).unwrap();
    let cfg = write_config(
        tmp.path(),
        "m.cfg",
        "dataset = mnist\nnum_devices = 10\ndevices_per_round = 2\nsamples_per_class = 5\nlocal_epochs = 1\ntotal_rounds = 1\nnorm = layer\noutput_dir = out\n",
    );
    let o = fednorm(&["run", &cfg], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("FEDNORM_DATA_DIR"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_fednorm"))
        .args(["run", &cfg])
        .current_dir(tmp.path())
        .env("FEDNORM_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let snapshot = fs::read_to_string(tmp.path().join("out").join(RESOLVED_CONFIG_FILE)).unwrap();
    assert!(snapshot.contains(&format!("data_dir = {}", data.display())));
    let model: ModelState64 = checkpoint::load(tmp.path().join("out").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(model.topology.input_shape, vec![1, 28, 28]);
}

#[test]
fn partition_command_writes_a_valid_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "p.cfg", &format!("{SMALL}output_dir = p\nseed = 5\n"));
    let o = fednorm(&["partition", &cfg], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let m = PartitionManifest::read(tmp.path().join("p").join(PARTITION_FILE)).unwrap();
    assert_eq!(m.num_devices(), 10);
    assert!(tmp.path().join("p").join(RESOLVED_CONFIG_FILE).exists());
    assert!(fednorm(&["partition", &cfg], tmp.path()).status.success());
    assert_eq!(m, PartitionManifest::read(tmp.path().join("p").join(PARTITION_FILE)).unwrap());
}

#[test]
fn toy_shift_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.cfg",
        "dataset = synthetic-mnist\nsynthetic_train_per_class = 20\ntoy_samples = 200\ntoy_steps = 20\nprobe_size = 64\noutput_dir = t\n",
    );
    let o = fednorm(&["toy-shift", &cfg], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("t");
    let stats = fs::read_to_string(out.join(SHIFT_STATS_FILE)).unwrap();
    assert!(stats.lines().count() > 1);
    assert!(fs::read_to_string(out.join(HISTOGRAM_FILE)).unwrap().lines().count() > 64);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(SHIFT_SUMMARY_FILE)).unwrap()).unwrap();
    assert!(summary.is_object() || summary.is_array());
    let first = fs::read(out.join(SHIFT_STATS_FILE)).unwrap();
    assert!(fednorm(&["toy-shift", &cfg], tmp.path()).status.success());
    assert_eq!(first, fs::read(out.join(SHIFT_STATS_FILE)).unwrap());
}

#[test]
fn check_props_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fednorm(&["check-props", "--seed", "3", "--trials", "20"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(!fednorm(&["check-props", "--trials", "0"], tmp.path()).status.success());
    assert!(!fednorm(&["check-props", "--trials", "many"], tmp.path()).status.success());
}

#[test]
fn bad_configs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", "norm = batchnorm2\n");
    let o = fednorm(&["run", &cfg], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("valid kinds"), "{}", stderr(&o));
    let o = fednorm(&["toy-shift", "missing.cfg"], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.cfg"));
    let cfg = write_config(tmp.path(), "nodata.cfg", "data_dir = /nonexistent/fednorm\n");
    let o = fednorm(&["run", &cfg], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));
}
