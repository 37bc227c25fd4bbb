use std::ffi::{CStr, CString};
use std::ptr;

use pap_core::classifier::{ClassifierArch, ClassifierModel};
use pap_core::unet::UNetModel;
use pap_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let p = pap_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_arch() -> ClassifierArch {
    ClassifierArch {
        in_channels: 3,
        input_size: 16,
        filters: [4, 8, 16],
        dense_units: 8,
    }
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(pap_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn metrics_through_the_abi() {
    let mut m = PapMetrics::default();
    let s = unsafe { pap_metrics_from_confusion(645, 30, 144, 98, &mut m) };
    assert_eq!(s, PapStatus::Ok);
    assert!((m.accuracy - 743.0 / 917.0).abs() < 1e-15);
    assert_eq!(m.recall_weighted, m.accuracy);
    assert_eq!(m.undefined_ratio, 0);
    assert!(pap_last_error_message().is_null());

    let s = unsafe { pap_metrics_from_confusion(0, 0, 0, 0, &mut m) };
    assert_eq!(s, PapStatus::InvalidArgument);
    assert!(last_error().contains("empty"));
    let s = unsafe { pap_metrics_from_confusion(1, 0, 0, 1, ptr::null_mut()) };
    assert_eq!(s, PapStatus::NullPointer);
}

#[test]
fn classifier_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cls.ckpt");
    let model = ClassifierModel::<f32>::new(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    model.to_checkpoint().save(&path).unwrap();

    let mut h: *mut PapClassifier = ptr::null_mut();
    assert_eq!(
        unsafe { pap_classifier_load(cpath(&path).as_ptr(), &mut h) },
        PapStatus::Ok
    );
    assert!(!h.is_null());
    let mut size = 0usize;
    assert_eq!(unsafe { pap_classifier_input_size(h, &mut size) }, PapStatus::Ok);
    assert_eq!(size, 16);

    let pixels: Vec<u8> = (0..32 * 24 * 3).map(|i| (i * 7 % 251) as u8).collect();
    let mut probs = [0.0f64; 2];
    let mut label = PapLabel::Normal;
    let s = unsafe { pap_classifier_predict(h, pixels.as_ptr(), 32, 24, 3, probs.as_mut_ptr(), &mut label) };
    assert_eq!(s, PapStatus::Ok);
    assert!((probs[0] + probs[1] - 1.0).abs() < 1e-6);
    let expected = if probs[0] > probs[1] {
        PapLabel::Normal
    } else {
        PapLabel::Abnormal
    };
    assert_eq!(label, expected);

    let mut heat = vec![-1.0f64; 256];
    let s = unsafe { pap_classifier_grad_cam(h, pixels.as_ptr(), 32, 24, 3, 1, heat.as_mut_ptr(), heat.len()) };
    assert_eq!(s, PapStatus::Ok);
    assert!(heat.iter().all(|v| (0.0..=1.0).contains(v)));

    let s = unsafe { pap_classifier_grad_cam(h, pixels.as_ptr(), 32, 24, 3, 2, heat.as_mut_ptr(), heat.len()) };
    assert_eq!(s, PapStatus::InvalidArgument);
    let s = unsafe { pap_classifier_grad_cam(h, pixels.as_ptr(), 32, 24, 3, 0, heat.as_mut_ptr(), 10) };
    assert_eq!(s, PapStatus::InvalidArgument);
    assert!(last_error().contains("256"));
    let s = unsafe { pap_classifier_predict(h, pixels.as_ptr(), 32, 24, 2, probs.as_mut_ptr(), &mut label) };
    assert_ne!(s, PapStatus::Ok);
    unsafe { pap_classifier_free(h) };
    unsafe { pap_classifier_free(ptr::null_mut()) };
}

#[test]
fn load_failures_are_reported() {
    let mut h: *mut PapClassifier = ptr::null_mut();
    let missing = CString::new("/nonexistent/cls.ckpt").unwrap();
    assert_eq!(unsafe { pap_classifier_load(missing.as_ptr(), &mut h) }, PapStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nonexistent"));
    assert_eq!(
        unsafe { pap_classifier_load(ptr::null(), &mut h) },
        PapStatus::NullPointer
    );

    // a U-Net checkpoint is not a classifier
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("unet.ckpt");
    UNetModel::<f32>::new(2, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .to_checkpoint()
        .save(&path)
        .unwrap();
    assert_eq!(
        unsafe { pap_classifier_load(cpath(&path).as_ptr(), &mut h) },
        PapStatus::Checkpoint
    );
    assert!(last_error().contains("magic"));
}

#[test]
fn unet_segments_to_binary_mask() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("unet.ckpt");
    UNetModel::<f32>::new(2, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap()
        .to_checkpoint()
        .save(&path)
        .unwrap();
    let mut h: *mut PapUNet = ptr::null_mut();
    assert_eq!(unsafe { pap_unet_load(cpath(&path).as_ptr(), &mut h) }, PapStatus::Ok);
    let pixels: Vec<u8> = (0..32 * 16).map(|i| (i % 256) as u8).collect();
    let mut mask = vec![7u8; 32 * 16];
    for refine in [0, 1] {
        let s = unsafe {
            pap_unet_segment(
                h,
                pixels.as_ptr(),
                32,
                16,
                1,
                0.5,
                refine,
                mask.as_mut_ptr(),
                mask.len(),
            )
        };
        assert_eq!(s, PapStatus::Ok);
        assert!(mask.iter().all(|&v| v == 0 || v == 255));
    }
    let s = unsafe { pap_unet_segment(h, pixels.as_ptr(), 30, 16, 1, 0.5, 0, mask.as_mut_ptr(), 30 * 16) };
    assert_eq!(s, PapStatus::Shape);
    let s = unsafe { pap_unet_segment(h, pixels.as_ptr(), 32, 16, 1, 1.5, 0, mask.as_mut_ptr(), mask.len()) };
    assert_eq!(s, PapStatus::InvalidArgument);
    unsafe { pap_unet_free(h) };
}

#[test]
fn header_declares_the_abi() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pap.h")).unwrap();
    for name in [
        "pap_last_error_message",
        "pap_version",
        "pap_classifier_load",
        "pap_classifier_free",
        "pap_classifier_input_size",
        "pap_classifier_predict",
        "pap_classifier_grad_cam",
        "pap_unet_load",
        "pap_unet_free",
        "pap_unet_segment",
        "pap_metrics_from_confusion",
        "typedef struct PapClassifier PapClassifier",
        "typedef struct PapUNet PapUNet",
        "PAP_STATUS_OK = 0",
        "PAP_STATUS_NULL_POINTER = 1",
    ] {
        assert!(header.contains(name), "header is missing {name}");
    }
}
