use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use salfit_core::classifier::Classifier;
use salfit_core::data::{generate_dataset, DatasetSpec, ImageSample, IMAGE_SIDE};
use salfit_core::masker::{Masker, MaskerConfig};
use salfit_core::metrics::pxap;
use salfit_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { sf_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    classifier: Classifier,
    masker: Masker,
    classifier_path: CString,
    masker_path: CString,
    samples: Vec<ImageSample>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let classifier = Classifier::new(4, &mut rng);
    let masker = Masker::new(MaskerConfig::default(), &mut rng).unwrap();
    let cp = dir.path().join("classifier.bin");
    let mp = dir.path().join("masker.bin");
    classifier.save(&cp, 0).unwrap();
    masker.save(&mp, 0).unwrap();
    let samples = generate_dataset(&DatasetSpec::new(4, 2, 3));
    Fixture {
        classifier_path: cpath(&cp),
        masker_path: cpath(&mp),
        _dir: dir,
        classifier,
        masker,
        samples,
    }
}

fn flat_images(samples: &[ImageSample]) -> Vec<f32> {
    samples
        .iter()
        .flat_map(|s| s.image.iter().copied())
        .collect()
}

#[test]
fn classifier_predictions_match_core() {
    let fx = fixture();
    let mut handle = ptr::null_mut();
    assert_eq!(
        unsafe { sf_classifier_load(fx.classifier_path.as_ptr(), &mut handle) },
        SfStatus::Ok
    );
    assert_eq!(unsafe { sf_classifier_num_classes(handle) }, 4);

    let n = fx.samples.len();
    let images = flat_images(&fx.samples);
    let mut probs = vec![0f32; n * 4];
    let status = unsafe {
        sf_classifier_predict(handle, images.as_ptr(), n, probs.as_mut_ptr(), probs.len())
    };
    assert_eq!(status, SfStatus::Ok);

    let refs: Vec<&ImageSample> = fx.samples.iter().collect();
    let expected = fx
        .classifier
        .predict_probs(&salfit_core::data::to_batch(&refs))
        .unwrap();
    assert_eq!(probs, expected);
    for row in probs.chunks(4) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    unsafe { sf_classifier_free(handle) };
}

#[test]
fn masker_predictions_match_core() {
    let fx = fixture();
    let mut cls = ptr::null_mut();
    let mut msk = ptr::null_mut();
    unsafe {
        assert_eq!(
            sf_classifier_load(fx.classifier_path.as_ptr(), &mut cls),
            SfStatus::Ok
        );
        assert_eq!(
            sf_masker_load(fx.masker_path.as_ptr(), cls, &mut msk),
            SfStatus::Ok
        );
        // The masker keeps its own copy of the classifier.
        sf_classifier_free(cls);
    }

    let n = fx.samples.len();
    let side = sf_image_side();
    assert_eq!(side, IMAGE_SIDE);
    let images = flat_images(&fx.samples);
    let mut masks = vec![0f32; n * side * side];
    let status =
        unsafe { sf_masker_predict(msk, images.as_ptr(), n, masks.as_mut_ptr(), masks.len()) };
    assert_eq!(status, SfStatus::Ok);

    let refs: Vec<&ImageSample> = fx.samples.iter().collect();
    let expected: Vec<f32> = fx.masker.predict(&fx.classifier, &refs).unwrap().concat();
    assert_eq!(masks, expected);
    assert!(masks.iter().all(|&m| (0.0..=1.0).contains(&m)));
    unsafe { sf_masker_free(msk) };
}

#[test]
fn null_and_undersized_arguments_are_rejected() {
    let fx = fixture();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            sf_classifier_load(ptr::null(), &mut handle),
            SfStatus::NullPointer
        );
        assert_eq!(
            sf_classifier_load(fx.classifier_path.as_ptr(), ptr::null_mut()),
            SfStatus::NullPointer
        );
        assert_eq!(sf_classifier_num_classes(ptr::null()), 0);
        sf_classifier_free(ptr::null_mut());
        sf_masker_free(ptr::null_mut());

        assert_eq!(
            sf_classifier_load(fx.classifier_path.as_ptr(), &mut handle),
            SfStatus::Ok
        );
        let images = flat_images(&fx.samples[..1]);
        let mut probs = vec![0f32; 3];
        let st = sf_classifier_predict(handle, images.as_ptr(), 1, probs.as_mut_ptr(), probs.len());
        assert_eq!(st, SfStatus::Shape);
        assert!(last_error().contains("probs"));
        let st = sf_classifier_predict(handle, images.as_ptr(), 0, probs.as_mut_ptr(), probs.len());
        assert_eq!(st, SfStatus::InvalidArgument);
        let st = sf_classifier_predict(
            ptr::null(),
            images.as_ptr(),
            1,
            probs.as_mut_ptr(),
            probs.len(),
        );
        assert_eq!(st, SfStatus::NullPointer);

        let mut msk = ptr::null_mut();
        assert_eq!(
            sf_masker_load(fx.masker_path.as_ptr(), ptr::null(), &mut msk),
            SfStatus::NullPointer
        );
        sf_classifier_free(handle);
    }
}

#[test]
fn bad_files_map_to_io_and_format_codes() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("nope.bin"));
    let garbage_path = dir.path().join("garbage.bin");
    std::fs::write(&garbage_path, b"not a checkpoint").unwrap();
    let garbage = cpath(&garbage_path);

    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(
            sf_classifier_load(missing.as_ptr(), &mut handle),
            SfStatus::Io
        );
        assert!(last_error().contains("nope.bin"));
        assert_eq!(
            sf_classifier_load(garbage.as_ptr(), &mut handle),
            SfStatus::Format
        );
        assert!(handle.is_null());

        // A masker checkpoint is not a classifier.
        assert_eq!(
            sf_classifier_load(fx.masker_path.as_ptr(), &mut handle),
            SfStatus::Format
        );
        assert!(last_error().contains("architecture"));
    }
}

#[test]
fn last_error_truncates_and_reports_full_length() {
    let mut handle = ptr::null_mut();
    let path = CString::new("/definitely/missing/classifier.bin").unwrap();
    assert_eq!(
        unsafe { sf_classifier_load(path.as_ptr(), &mut handle) },
        SfStatus::Io
    );
    let full = unsafe { sf_last_error(ptr::null_mut(), 0) };
    let mut small = [1 as c_char; 8];
    let reported = unsafe { sf_last_error(small.as_mut_ptr(), small.len()) };
    assert_eq!(reported, full);
    assert!(full > small.len());
    assert_eq!(small[7], 0);
    assert_eq!(
        unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(),
        7
    );
}

#[test]
fn pxap_matches_core() {
    let scores = [0.9f32, 0.8, 0.3, 0.1, 0.7, 0.2];
    let gt = [1u8, 0, 1, 0, 1, 0];
    let mut out = 0.0;
    assert_eq!(
        unsafe { sf_pxap(scores.as_ptr(), gt.as_ptr(), scores.len(), &mut out) },
        SfStatus::Ok
    );
    assert_eq!(out, pxap(&scores, &gt).unwrap());
    assert_eq!(
        unsafe { sf_pxap(ptr::null(), gt.as_ptr(), 6, &mut out) },
        SfStatus::NullPointer
    );
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_every_export() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/salfit.h"))
            .unwrap();
    for name in [
        "sf_version",
        "sf_image_side",
        "sf_last_error",
        "sf_classifier_load",
        "sf_classifier_free",
        "sf_classifier_num_classes",
        "sf_classifier_predict",
        "sf_masker_load",
        "sf_masker_free",
        "sf_masker_predict",
        "sf_pxap",
        "typedef struct SfClassifier SfClassifier",
        "SF_STATUS_NULL_POINTER = 1",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
