use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use tailor_core::dataset::{save_pair, synthetic_pair};
use tailor_ffi::*;

fn last_error() -> String {
    let p = tailor_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    tailor_string_free(s);
    out
}

#[test]
fn schedule_matches_closed_form() {
    let mut v = 0.0;
    for d in [0i64, 1, 100, 250, 499] {
        let st = unsafe { tailor_schedule_intensity(TailorDegradationMode::Dynamic as i32, 0.5, 32.0, 0.4, 499, d, &mut v) };
        assert_eq!(st, TailorStatus::Ok);
        let expect = 0.5 * (1.0 - (d as f64 / 499.0).powf(32.0));
        assert!((v - expect).abs() <= 1e-15 * expect.abs().max(1.0), "{d}: {v} vs {expect}");
    }
    assert!(tailor_last_error().is_null());
    let st = unsafe { tailor_schedule_intensity(TailorDegradationMode::Fixed as i32, 0.5, 32.0, 0.6, 10, 3, &mut v) };
    assert_eq!((st, v), (TailorStatus::Ok, 0.6));

    let st = unsafe { tailor_schedule_intensity(42, 0.5, 32.0, 0.4, 499, 0, &mut v) };
    assert_eq!(st, TailorStatus::InvalidArgument);
    assert!(last_error().contains("unknown degradation mode 42"));
    let st = unsafe { tailor_schedule_intensity(0, 0.5, 32.0, 0.4, 499, 500, &mut v) };
    assert_eq!(st, TailorStatus::InvalidArgument);
    let st = unsafe { tailor_schedule_intensity(0, 0.5, 32.0, 0.4, 499, 0, ptr::null_mut()) };
    assert_eq!(st, TailorStatus::NullPointer);

    let mut len = 0usize;
    assert_eq!(unsafe { tailor_schedule_length(200, 300, &mut len) }, TailorStatus::Ok);
    assert_eq!(len, 499);
}

#[test]
fn degrade_keeps_masked_pixels() {
    let (c, h, w) = (3usize, 5usize, 4usize);
    let image: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
    let mask: Vec<u8> = (0..h * w).map(|i| u8::from(i % 3 == 0)).collect();
    let mut out = vec![0.0; image.len()];
    let st = unsafe { tailor_degrade(image.as_ptr(), mask.as_ptr(), c, h, w, 0.5, 9, out.as_mut_ptr()) };
    assert_eq!(st, TailorStatus::Ok);
    let mut changed = 0;
    for i in 0..image.len() {
        if mask[i % (h * w)] == 1 {
            assert_eq!(out[i].to_bits(), image[i].to_bits());
        } else if out[i] != image[i] {
            changed += 1;
        }
    }
    assert!(changed > 0);
    let mut again = vec![0.0; image.len()];
    unsafe { tailor_degrade(image.as_ptr(), mask.as_ptr(), c, h, w, 0.5, 9, again.as_mut_ptr()) };
    assert_eq!(out, again);

    let st = unsafe { tailor_degrade(image.as_ptr(), mask.as_ptr(), c, h, w, 1.5, 9, out.as_mut_ptr()) };
    assert_eq!(st, TailorStatus::InvalidArgument);
    let st = unsafe { tailor_degrade(ptr::null(), mask.as_ptr(), c, h, w, 0.5, 9, out.as_mut_ptr()) };
    assert_eq!(st, TailorStatus::NullPointer);
    let st = unsafe { tailor_degrade(image.as_ptr(), mask.as_ptr(), 0, h, w, 0.5, 9, out.as_mut_ptr()) };
    assert_eq!(st, TailorStatus::InvalidArgument);
}

#[test]
fn losses_match_elementwise_oracles() {
    let (c, h, w) = (2usize, 3usize, 3usize);
    let target: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.1).collect();
    let pred: Vec<f64> = (0..c * h * w).map(|i| (i as f64).cos()).collect();
    let mask: Vec<u8> = vec![1, 0, 1, 1, 1, 0, 0, 0, 1];
    let mut sum = 0.0;
    let mut active = 0.0;
    for i in 0..c * h * w {
        let m = f64::from(mask[i % (h * w)]);
        sum += m * (target[i] - pred[i]).powi(2);
        active += m;
    }
    let mut v = 0.0;
    let st = unsafe {
        tailor_masked_diffusion_loss(target.as_ptr(), pred.as_ptr(), mask.as_ptr(), c, h, w, TailorReduction::FullGrid as i32, &mut v)
    };
    assert_eq!(st, TailorStatus::Ok);
    assert!((v - sum / (c * h * w) as f64).abs() < 1e-12);
    unsafe {
        tailor_masked_diffusion_loss(target.as_ptr(), pred.as_ptr(), mask.as_ptr(), c, h, w, TailorReduction::MaskArea as i32, &mut v)
    };
    assert!((v - sum / active).abs() < 1e-12);
    let st = unsafe { tailor_masked_diffusion_loss(target.as_ptr(), pred.as_ptr(), mask.as_ptr(), c, h, w, 7, &mut v) };
    assert_eq!(st, TailorStatus::InvalidArgument);

    let attn: Vec<f64> = (0..h * w).map(|i| i as f64 / 8.0).collect();
    let expect = attn.iter().zip(&mask).map(|(a, &m)| (a - f64::from(m)).powi(2)).sum::<f64>() / (h * w) as f64;
    assert_eq!(unsafe { tailor_cross_attention_loss(attn.as_ptr(), mask.as_ptr(), h, w, &mut v) }, TailorStatus::Ok);
    assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
}

#[test]
fn diff_max_breaks_ties_toward_the_first_sample() {
    let (mut i, mut v) = (0usize, 0.0);
    let losses = [0.3, 0.7, 0.7];
    assert_eq!(unsafe { tailor_diff_max(losses.as_ptr(), 3, &mut i, &mut v) }, TailorStatus::Ok);
    assert_eq!((i, v), (2, 0.7));
    assert_eq!(unsafe { tailor_diff_max(losses.as_ptr(), 0, &mut i, &mut v) }, TailorStatus::InvalidArgument);
}

#[test]
fn prompt_rendering_and_strings() {
    let t = CString::new("a photo of <placeholder> on the beach").unwrap();
    let a = CString::new("<dog>").unwrap();
    let b = CString::new("<hat>").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { tailor_render_prompt(t.as_ptr(), a.as_ptr(), b.as_ptr(), &mut out) }, TailorStatus::Ok);
    assert_eq!(unsafe { take(out) }, "a photo of <dog> with <hat> on the beach");
    let bad = CString::new("no placeholder").unwrap();
    assert_eq!(unsafe { tailor_render_prompt(bad.as_ptr(), a.as_ptr(), b.as_ptr(), &mut out) }, TailorStatus::InvalidArgument);
    unsafe { tailor_string_free(ptr::null_mut()) };
    let version = unsafe { CStr::from_ptr(tailor_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

fn open(overrides: &[(&str, String)]) -> (TailorStatus, *mut TailorRun) {
    let keys: Vec<CString> = overrides.iter().map(|(k, _)| CString::new(*k).unwrap()).collect();
    let vals: Vec<CString> = overrides.iter().map(|(_, v)| CString::new(v.as_str()).unwrap()).collect();
    let kp: Vec<_> = keys.iter().map(|c| c.as_ptr()).collect();
    let vp: Vec<_> = vals.iter().map(|c| c.as_ptr()).collect();
    let mut run = ptr::null_mut();
    let st = unsafe { tailor_run_open(ptr::null(), kp.as_ptr(), vp.as_ptr(), kp.len(), &mut run) };
    (st, run)
}

#[test]
fn run_handle_trains_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let pair_path = save_pair(&synthetic_pair(16, 2, 0), &tmp.path().join("pair")).unwrap();
    let base = |name: &str| {
        vec![
            ("data.pair", pair_path.display().to_string()),
            ("backbone.kind", "toy".to_string()),
            ("backbone.attn_size", "4".to_string()),
            ("backbone.lora_rank", "4".to_string()),
            ("warmup.steps", "3".to_string()),
            ("dsbal.steps", "4".to_string()),
            ("output.dir", tmp.path().join("runs").display().to_string()),
            ("output.name", name.to_string()),
        ]
    };
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let (st, run) = open(&base(name));
        assert_eq!(st, TailorStatus::Ok);
        let mut s = ptr::null_mut();
        assert_eq!(unsafe { tailor_run_config_hash(run, &mut s) }, TailorStatus::Ok);
        assert_eq!(unsafe { take(s) }.len(), 64);
        assert_eq!(unsafe { tailor_run_train(run, &mut s) }, TailorStatus::Ok);
        let dir = PathBuf::from(unsafe { take(s) });
        assert!(dir.join("checkpoints/final").is_file());
        let mut len = 0;
        assert_eq!(unsafe { tailor_run_loss_trace(run, ptr::null_mut(), 0, &mut len) }, TailorStatus::Ok);
        assert_eq!(len, 7);
        let mut buf = vec![0.0; len];
        unsafe { tailor_run_loss_trace(run, buf.as_mut_ptr(), len, &mut len) };
        traces.push(buf.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        unsafe { tailor_run_free(run) };
    }
    assert_eq!(traces[0], traces[1]);

    let mut bad = base("c");
    bad.push(("dsbal.colour", "1".into()));
    let (st, run) = open(&bad);
    assert_eq!((st, run.is_null()), (TailorStatus::Config, true));
    assert!(last_error().contains("dsbal.colour"));

    let mut real = base("d");
    real[1].1 = "real".into();
    let (st, run) = open(&real);
    assert_eq!(st, TailorStatus::Ok);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { tailor_run_train(run, &mut s) }, TailorStatus::BackendUnavailable);
    assert!(last_error().starts_with("real backend required"));
    unsafe { tailor_run_free(run) };
}

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tailor.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let h = header();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14, "{exports:?}");
    for f in exports {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    for t in ["typedef struct TailorRun TailorRun;", "TAILOR_STATUS_OK = 0", "TAILOR_STATUS_PANIC = 8"] {
        assert!(h.contains(t), "{t}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "tailor.h"

int main(void) {
    double a = -1.0;
    if (tailor_schedule_intensity(TAILOR_DEGRADATION_MODE_DYNAMIC, 0.5, 32.0, 0.4, 499, 0, &a) != TAILOR_STATUS_OK) return 1;
    if (a != 0.5) return 2;
    if (tailor_schedule_intensity(TAILOR_DEGRADATION_MODE_DYNAMIC, 0.5, 32.0, 0.4, 499, 499, &a) != TAILOR_STATUS_OK) return 3;
    if (a != 0.0) return 4;
    if (tailor_schedule_intensity(TAILOR_DEGRADATION_MODE_DYNAMIC, 0.5, 32.0, 0.4, 499, 0, NULL) != TAILOR_STATUS_NULL_POINTER) return 5;
    if (tailor_last_error() == NULL) return 6;
    char *s = NULL;
    if (tailor_render_prompt("<placeholder>, in the snow", "<a>", "<b>", &s) != TAILOR_STATUS_OK) return 7;
    int ok = strcmp(s, "<a> with <b>, in the snow") == 0;
    tailor_string_free(s);
    if (!ok) return 8;
    printf("%s\n", tailor_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libtailor_ffi.a");
    if !lib.is_file() {
        panic!("static library not built at {}", lib.display());
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = tmp.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("run cc");
    assert!(status.success(), "C compile failed");
    let out = std::process::Command::new(&bin).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
