use std::ffi::{CStr, CString};
use std::ptr;

use adl_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(adl_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(adl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_set_validates() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(adl_config_new(&mut cfg), AdlStatus::Ok);
        assert_eq!(adl_config_set(cfg, cstr("sample").as_ptr(), cstr("steps").as_ptr(), cstr("25").as_ptr()), AdlStatus::Ok);
        let bad = adl_config_set(cfg, cstr("sample").as_ptr(), cstr("bogus").as_ptr(), cstr("1").as_ptr());
        assert_eq!(bad, AdlStatus::Config);
        assert!(last_error().contains("bogus"), "{}", last_error());
        adl_config_free(cfg);
    }
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(adl_config_new(ptr::null_mut()), AdlStatus::NullPointer);
        let s = cstr("x");
        assert_eq!(adl_config_set(ptr::null_mut(), s.as_ptr(), s.as_ptr(), s.as_ptr()), AdlStatus::NullPointer);
        assert_eq!(adl_run_stage(ptr::null(), s.as_ptr(), s.as_ptr()), AdlStatus::NullPointer);
        let mut v = 0.0;
        assert_eq!(adl_ms_ssim(ptr::null(), ptr::null(), 16, 16, &mut v), AdlStatus::NullPointer);
        adl_config_free(ptr::null_mut());
        adl_model_free(ptr::null_mut());
    }
}

#[test]
fn metrics_through_the_abi() {
    let a: Vec<f64> = (0..32 * 32).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let mut v = 0.0;
    unsafe {
        assert_eq!(adl_ms_ssim(a.as_ptr(), a.as_ptr(), 32, 32, &mut v), AdlStatus::Ok);
    }
    assert!((v - 1.0).abs() < 1e-12);
    let pred = [1u8, 1, 0, 0];
    let truth = [1u8, 0, 0, 0];
    unsafe {
        assert_eq!(adl_dice(pred.as_ptr(), truth.as_ptr(), 4, 1, &mut v), AdlStatus::Ok);
    }
    assert!((v - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn missing_artifacts_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ptr::null_mut();
    let run = cstr(dir.path().to_str().unwrap());
    unsafe {
        adl_config_new(&mut cfg);
        assert_eq!(adl_run_stage(cfg, run.as_ptr(), cstr("train-base").as_ptr()), AdlStatus::MissingArtifact);
        assert!(last_error().contains("gen-data"), "{}", last_error());
        assert_eq!(adl_run_stage(cfg, run.as_ptr(), cstr("nope").as_ptr()), AdlStatus::InvalidArgument);
        let mut model = ptr::null_mut();
        let missing = cstr(dir.path().join("none.ckpt").to_str().unwrap());
        assert_eq!(adl_model_load(missing.as_ptr(), ptr::null(), &mut model), AdlStatus::Io);
        assert!(model.is_null());
        adl_config_free(cfg);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/adl.h")).unwrap();
    for sym in [
        "adl_last_error",
        "adl_config_new",
        "adl_config_load",
        "adl_config_set",
        "adl_config_free",
        "adl_run_stage",
        "adl_model_load",
        "adl_model_free",
        "adl_sample",
        "adl_ms_ssim",
        "adl_dice",
        "typedef struct AdlModel AdlModel",
        "ADL_STATUS_MISSING_ARTIFACT = 6",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn sampling_matches_the_library() {
    use adl_core::config::RunConfig;
    use adl_core::denoiser::ModelParams;
    use adl_core::numerics::{tns::DType, Rng};

    let dir = tempfile::tempdir().unwrap();
    let mut rc = RunConfig::default();
    rc.set("data", "size", 32).unwrap();
    rc.set("sample", "steps", 3).unwrap();
    let p = ModelParams::init(&mut Rng::new(3, 0), rc.arch().unwrap()).unwrap();
    let path = dir.path().join("m.ckpt");
    adl_core::trainer::checkpoint::save_checkpoint(&p, &path, DType::F64).unwrap();

    let mut cfg = ptr::null_mut();
    let mut model = ptr::null_mut();
    let mut buf = vec![0.0; 32 * 32];
    unsafe {
        adl_config_new(&mut cfg);
        adl_config_set(cfg, cstr("data").as_ptr(), cstr("size").as_ptr(), cstr("32").as_ptr());
        adl_config_set(cfg, cstr("sample").as_ptr(), cstr("steps").as_ptr(), cstr("3").as_ptr());
        let cp = cstr(path.to_str().unwrap());
        assert_eq!(adl_model_load(cp.as_ptr(), ptr::null(), &mut model), AdlStatus::Ok);
        assert_eq!(adl_sample(model, cfg, 2, 5, buf.as_mut_ptr(), buf.len()), AdlStatus::Ok);
        assert_eq!(adl_sample(model, cfg, 2, 5, buf.as_mut_ptr(), 7), AdlStatus::InvalidArgument);
        assert_eq!(adl_sample(model, cfg, 9, 5, buf.as_mut_ptr(), buf.len()), AdlStatus::Config);
        adl_model_free(model);
        adl_config_free(cfg);
    }
    let mut sc = rc.sampler(2).unwrap();
    sc.stream += 5;
    let want = adl_core::sampler::sample(&p, &rc.schedule().unwrap(), &sc).unwrap().image;
    assert_eq!(buf, want.data());
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/adl.h");
    let out = match std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() {
        Ok(o) => o,
        Err(_) => return, // no C compiler on this host
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
