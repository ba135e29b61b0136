//! Exercises the C ABI end to end from Rust: handle lifecycle, status
//! codes, error reporting, prediction determinism and checkpoint round-trip.

use std::ffi::CString;
use std::ptr;

use nriqa_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0i8; 512];
    let n = nriqa_last_error(buf.as_mut_ptr(), buf.len());
    let bytes: Vec<u8> = buf[..n.min(buf.len() - 1)]
        .iter()
        .map(|&c| c as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn tiny_config_json() -> CString {
    CString::new(
        r#"{
            "embed_dim": 16, "vision_dim": 24,
            "text_layers": 1, "vision_layers": 2, "decoder_layers": 1,
            "text_heads": 2, "vision_heads": 2, "decoder_heads": 2,
            "mlp_ratio": 2, "patch_size": 8, "image_size": 32,
            "crop_size": 16, "crops_per_image": 2, "batch_size": 4,
            "total_epochs": 2, "warmup_epochs": 1
        }"#,
    )
    .unwrap()
}

fn new_tiny_model(seed: u64) -> *mut nriqa_model {
    let cfg = tiny_config_json();
    let mut model: *mut nriqa_model = ptr::null_mut();
    let st = nriqa_model_new(cfg.as_ptr(), seed, &mut model);
    assert_eq!(st, nriqa_status::NRIQA_OK, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(nriqa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_out_pointer_is_rejected() {
    let st = nriqa_model_new(ptr::null(), 0, ptr::null_mut());
    assert_eq!(st, nriqa_status::NRIQA_NULL_ARGUMENT);
    assert!(!last_error().is_empty());
}

#[test]
fn invalid_config_json_reports_config_error() {
    let cfg = CString::new("{\"embed_dim\": 0}").unwrap();
    let mut model: *mut nriqa_model = ptr::null_mut();
    let st = nriqa_model_new(cfg.as_ptr(), 0, &mut model);
    assert_eq!(st, nriqa_status::NRIQA_CONFIG_ERROR);
    assert!(model.is_null());
    assert!(last_error().contains("embed_dim"), "{}", last_error());
}

#[test]
fn predict_is_deterministic_and_validates_arguments() {
    let model = new_tiny_model(3);
    let (w, h) = (32usize, 32usize);
    let pixels: Vec<f32> = (0..w * h * 3).map(|i| (i % 255) as f32 / 255.0).collect();

    let mut s1 = f64::NAN;
    let mut s2 = f64::NAN;
    assert_eq!(
        nriqa_predict(model, pixels.as_ptr(), w, h, 7, &mut s1),
        nriqa_status::NRIQA_OK,
        "{}",
        last_error()
    );
    assert_eq!(
        nriqa_predict(model, pixels.as_ptr(), w, h, 7, &mut s2),
        nriqa_status::NRIQA_OK
    );
    assert!(s1.is_finite());
    assert_eq!(s1, s2, "same pixels and seed must give the same score");

    assert_eq!(
        nriqa_predict(model, ptr::null(), w, h, 7, &mut s1),
        nriqa_status::NRIQA_NULL_ARGUMENT
    );
    // Image smaller than the crop size is a data error from the core.
    let small: Vec<f32> = vec![0.5; 8 * 8 * 3];
    assert_eq!(
        nriqa_predict(model, small.as_ptr(), 8, 8, 7, &mut s1),
        nriqa_status::NRIQA_DATA_ERROR
    );
    nriqa_model_free(model);
}

#[test]
fn synthetic_dataset_train_evaluate_and_checkpoint_round_trip() {
    let mut ds: *mut nriqa_dataset = ptr::null_mut();
    assert_eq!(
        nriqa_dataset_synthesize(8, 42, 32, &mut ds),
        nriqa_status::NRIQA_OK
    );
    assert_eq!(nriqa_dataset_len(ds), 8);

    let model = new_tiny_model(1);
    let policy = CString::new("manifest").unwrap();
    assert_eq!(
        nriqa_train(model, ds, policy.as_ptr(), ptr::null()),
        nriqa_status::NRIQA_OK,
        "{}",
        last_error()
    );

    let mut srcc = f64::NAN;
    let mut plcc = f64::NAN;
    assert_eq!(
        nriqa_evaluate(model, ds, 5, &mut srcc, &mut plcc),
        nriqa_status::NRIQA_OK,
        "{}",
        last_error()
    );
    assert!(srcc.is_finite() && plcc.is_finite());
    assert!((-1.0..=1.0).contains(&srcc));

    let tmp = tempfile::tempdir().unwrap();
    let dir = CString::new(tmp.path().join("ckpt").to_str().unwrap()).unwrap();
    assert_eq!(nriqa_model_save(model, dir.as_ptr()), nriqa_status::NRIQA_OK);

    let mut restored: *mut nriqa_model = ptr::null_mut();
    assert_eq!(
        nriqa_model_load(dir.as_ptr(), &mut restored),
        nriqa_status::NRIQA_OK,
        "{}",
        last_error()
    );

    let pixels: Vec<f32> = (0..32 * 32 * 3).map(|i| (i % 97) as f32 / 96.0).collect();
    let mut before = f64::NAN;
    let mut after = f64::NAN;
    assert_eq!(
        nriqa_predict(model, pixels.as_ptr(), 32, 32, 11, &mut before),
        nriqa_status::NRIQA_OK
    );
    assert_eq!(
        nriqa_predict(restored, pixels.as_ptr(), 32, 32, 11, &mut after),
        nriqa_status::NRIQA_OK
    );
    assert_eq!(before, after, "checkpoint round-trip must preserve scores");

    nriqa_model_free(restored);
    nriqa_model_free(model);
    nriqa_dataset_free(ds);
}

#[test]
fn missing_checkpoint_reports_io_error() {
    let dir = CString::new("/definitely/not/here").unwrap();
    let mut model: *mut nriqa_model = ptr::null_mut();
    let st = nriqa_model_load(dir.as_ptr(), &mut model);
    assert_eq!(st, nriqa_status::NRIQA_IO_ERROR);
    assert!(model.is_null());
}

#[test]
fn correlation_helpers_match_known_values() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [1.0, 3.0, 2.0, 4.0];
    let mut s = f64::NAN;
    assert_eq!(
        nriqa_srcc(a.as_ptr(), b.as_ptr(), 4, &mut s),
        nriqa_status::NRIQA_OK
    );
    assert_eq!(s, 0.8);
    let mut p = f64::NAN;
    assert_eq!(
        nriqa_plcc(a.as_ptr(), a.as_ptr(), 4, &mut p),
        nriqa_status::NRIQA_OK
    );
    assert!((p - 1.0).abs() < 1e-12);

    assert_eq!(
        nriqa_srcc(ptr::null(), b.as_ptr(), 4, &mut s),
        nriqa_status::NRIQA_NULL_ARGUMENT
    );
    // Degenerate input: constant array has no rank ordering.
    let c = [2.0, 2.0, 2.0, 2.0];
    assert_eq!(
        nriqa_srcc(c.as_ptr(), b.as_ptr(), 4, &mut s),
        nriqa_status::NRIQA_DATA_ERROR
    );
    assert!(!last_error().is_empty());
}

#[test]
fn generated_header_declares_the_full_surface() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/nriqa.h"
    ))
    .expect("cbindgen header missing; build must generate include/nriqa.h");
    for symbol in [
        "nriqa_last_error",
        "nriqa_version",
        "nriqa_model_new",
        "nriqa_model_load",
        "nriqa_model_save",
        "nriqa_model_free",
        "nriqa_dataset_load",
        "nriqa_dataset_synthesize",
        "nriqa_dataset_len",
        "nriqa_dataset_free",
        "nriqa_train",
        "nriqa_predict",
        "nriqa_predict_path",
        "nriqa_evaluate",
        "nriqa_srcc",
        "nriqa_plcc",
        "NRIQA_OK",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
