//! Exercises the C entry points the way a foreign binding would.

use hidenseek_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn last_error() -> String {
    let mut buf = vec![0i8; 512];
    let len = unsafe { hns_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take_while(|&&b| b != 0).map(|&b| b as u8).collect();
    let msg = String::from_utf8_lossy(&bytes).into_owned();
    assert!(len >= msg.len());
    msg
}

fn set(exp: *mut HnsExperiment, key: &str, value: &str) -> HnsStatus {
    let k = CString::new(key).unwrap();
    let v = CString::new(value).unwrap();
    unsafe { hns_experiment_set(exp, k.as_ptr(), v.as_ptr()) }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(hns_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn full_run_through_the_c_surface() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");

    let mut exp: *mut HnsExperiment = ptr::null_mut();
    let status = unsafe { hns_experiment_new(ptr::null(), &mut exp) };
    assert_eq!(status, HnsStatus::Ok);
    assert!(!exp.is_null());

    for (k, v) in [
        ("dataset", "synthetic"),
        ("clients", "6"),
        ("rounds", "2"),
        ("repetitions", "1"),
        ("local_epochs", "1"),
        ("synthetic_per_class", "30"),
        ("output_dir", out_dir.to_str().unwrap()),
    ] {
        assert_eq!(set(exp, k, v), HnsStatus::Ok, "setting {k}");
    }

    // resolved output dir round-trips through the byte buffer
    let mut buf = vec![0i8; 512];
    let len = unsafe { hns_experiment_output_dir(exp, buf.as_mut_ptr(), buf.len()) };
    let reported: Vec<u8> = buf.iter().take_while(|&&b| b != 0).map(|&b| b as u8).collect();
    assert_eq!(len, reported.len());
    assert_eq!(String::from_utf8(reported).unwrap(), out_dir.display().to_string());

    assert_eq!(unsafe { hns_experiment_run(exp) }, HnsStatus::Ok);
    assert!(out_dir.join("metrics_seed0.csv").is_file());
    assert!(out_dir.join("summary.csv").is_file());

    let mut up = 0u64;
    let mut down = 0u64;
    assert_eq!(
        unsafe { hns_experiment_cost(exp, &mut up, &mut down) },
        HnsStatus::Ok
    );
    assert!(up > 0 && down > 0);
    assert!(out_dir.join("cost.csv").is_file());

    assert_eq!(unsafe { hns_experiment_prune_only(exp) }, HnsStatus::Ok);
    assert!(out_dir.join("pruned.hns").is_file());

    unsafe { hns_experiment_free(exp) };
}

#[test]
fn config_errors_surface_with_messages() {
    let mut exp: *mut HnsExperiment = ptr::null_mut();
    assert_eq!(unsafe { hns_experiment_new(ptr::null(), &mut exp) }, HnsStatus::Ok);

    assert_eq!(set(exp, "sample_rate", "2.0"), HnsStatus::Config);
    assert!(last_error().contains("sample_rate"), "{}", last_error());
    // the handle keeps its previous valid config
    assert_eq!(set(exp, "rounds", "1"), HnsStatus::Ok);

    assert_eq!(set(exp, "no_such_key", "1"), HnsStatus::Config);
    unsafe { hns_experiment_free(exp) };
}

#[test]
fn null_arguments_are_invalid_not_fatal() {
    assert_eq!(
        unsafe { hns_experiment_new(ptr::null(), ptr::null_mut()) },
        HnsStatus::InvalidArgument
    );
    assert_eq!(unsafe { hns_experiment_run(ptr::null_mut()) }, HnsStatus::InvalidArgument);
    let mut exp: *mut HnsExperiment = ptr::null_mut();
    assert_eq!(unsafe { hns_experiment_new(ptr::null(), &mut exp) }, HnsStatus::Ok);
    assert_eq!(
        unsafe { hns_experiment_set(exp, ptr::null(), ptr::null()) },
        HnsStatus::InvalidArgument
    );
    unsafe { hns_experiment_free(exp) };
    unsafe { hns_experiment_free(ptr::null_mut()) };
}

#[test]
fn missing_dataset_reports_data_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut exp: *mut HnsExperiment = ptr::null_mut();
    assert_eq!(unsafe { hns_experiment_new(ptr::null(), &mut exp) }, HnsStatus::Ok);
    for (k, v) in [
        ("dataset", "mnist"),
        ("model", "smallcnn"),
        ("data_dir", dir.path().join("nothing").to_str().unwrap()),
        ("output_dir", dir.path().join("out").to_str().unwrap()),
    ] {
        assert_eq!(set(exp, k, v), HnsStatus::Ok);
    }
    assert_eq!(unsafe { hns_experiment_run(exp) }, HnsStatus::Data);
    assert!(!last_error().is_empty());
    unsafe { hns_experiment_free(exp) };
}

#[test]
fn config_file_path_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(&cfg_path, "algorithm = \"fedavg\"\ndataset = \"synthetic\"\n").unwrap();
    let c_path = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let mut exp: *mut HnsExperiment = ptr::null_mut();
    assert_eq!(
        unsafe { hns_experiment_new(c_path.as_ptr(), &mut exp) },
        HnsStatus::Ok
    );
    unsafe { hns_experiment_free(exp) };

    let missing = CString::new(dir.path().join("nope.toml").to_str().unwrap()).unwrap();
    let mut exp2: *mut HnsExperiment = ptr::null_mut();
    assert_eq!(
        unsafe { hns_experiment_new(missing.as_ptr(), &mut exp2) },
        HnsStatus::Config
    );
    assert!(exp2.is_null());
}
