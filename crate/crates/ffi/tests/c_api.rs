use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use taco_ffi::*;

fn last_error() -> String {
    let p = taco_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn batch_sizes_match_the_kilt_table() {
    let sizes = [76_000usize, 53_000, 69_000, 80_000, 95_000, 71_000, 100_000, 18_000];
    let mut out = [0usize; 8];
    let s = unsafe { taco_mixing_batch_sizes(sizes.as_ptr(), 8, 4.0, 120, out.as_mut_ptr()) };
    assert_eq!(s, TacoStatus::Ok);
    assert_eq!(out, [16, 14, 15, 16, 16, 15, 17, 11]);
    assert!(taco_last_error_message().is_null());

    let s = unsafe { taco_mixing_batch_sizes(sizes.as_ptr(), 8, 4.0, 3, out.as_mut_ptr()) };
    assert_eq!(s, TacoStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn null_buffers_are_rejected() {
    let mut out = 0.0;
    let s = unsafe { taco_task_entropy(ptr::null(), 3, &mut out) };
    assert_eq!(s, TacoStatus::NullPointer);
    let s = unsafe { taco_mixing_batch_sizes(ptr::null(), 2, 4.0, 10, ptr::null_mut()) };
    assert_eq!(s, TacoStatus::NullPointer);
}

#[test]
fn entropy_and_distribution() {
    let mut q = [0.05 / 7.0; 8];
    q[0] = 0.95;
    let mut h = 0.0;
    assert_eq!(unsafe { taco_task_entropy(q.as_ptr(), 8, &mut h) }, TacoStatus::Ok);
    assert!((h - 0.296).abs() < 1e-3);

    let sigma = [1.0, 2.0, 3.0];
    let mut u = [0.0; 3];
    assert_eq!(
        unsafe { taco_task_distribution(sigma.as_ptr(), 3, 1.0, u.as_mut_ptr()) },
        TacoStatus::Ok
    );
    assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(u[2] > u[1] && u[1] > u[0]);
    assert_eq!(
        unsafe { taco_task_distribution(sigma.as_ptr(), 3, 0.0, u.as_mut_ptr()) },
        TacoStatus::InvalidArgument
    );
}

#[test]
fn sensitivity_handle_burn_in_is_uniform() {
    let (d, k) = (3usize, 2usize);
    let state = taco_sensitivity_new(d, k, 0.9, 2.0, 0.5, 4);
    assert!(!state.is_null());
    let grads = [1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
    let params = [0.5, -1.0, 2.0];
    let mut out = [0.0; 3];
    for step in 0..4 {
        let s = unsafe { taco_sensitivity_step(state, grads.as_ptr(), params.as_ptr(), out.as_mut_ptr()) };
        assert_eq!(s, TacoStatus::Ok);
        if step < 2 {
            for i in 0..d {
                assert_eq!(out[i], 0.5 * grads[i] + 0.5 * grads[d + i]);
            }
        }
    }
    assert_eq!(unsafe { taco_sensitivity_steps(state) }, 4);
    let mut again = [0.0; 3];
    assert_eq!(
        unsafe { taco_sensitivity_combine(state, grads.as_ptr(), again.as_mut_ptr()) },
        TacoStatus::Ok
    );
    unsafe { taco_sensitivity_free(state) };

    assert!(taco_sensitivity_new(3, 2, 1.5, 2.0, 0.1, 4).is_null());
    assert!(last_error().contains("beta"));
}

#[test]
fn config_and_tiny_run() {
    let cfg = taco_config_new();
    let set = |k: &str, v: &str| {
        let (k, v) = (CString::new(k).unwrap(), CString::new(v).unwrap());
        unsafe { taco_config_set(cfg, k.as_ptr(), v.as_ptr()) }
    };
    for (k, v) in [
        ("num_tasks", "2"),
        ("train_sizes", "40,20"),
        ("val_sizes", "10,10"),
        ("difficulty", "1,1.5"),
        ("kb_size", "60"),
        ("cluster_count", "6"),
        ("input_dim", "6"),
        ("task_noise_dims", "1"),
        ("subspace_dims", "0"),
        ("hidden_dims", "8"),
        ("embed_dim", "4"),
        ("batch_total", "12"),
        ("warmup_epochs", "1"),
        ("episodes", "1"),
        ("epochs_per_episode", "1"),
    ] {
        assert_eq!(set(k, v), TacoStatus::Ok, "{k}");
    }
    assert_eq!(set("no_such_key", "1"), TacoStatus::InvalidConfig);
    assert!(last_error().contains("no_such_key"));

    let mut report = ptr::null_mut();
    assert_eq!(unsafe { taco_run_experiment(cfg, &mut report) }, TacoStatus::Ok);
    let r = unsafe { taco_report_avg_r_precision(report) };
    assert!((0.0..=1.0).contains(&r));
    let f = unsafe { taco_report_fraction_task_specific(report) };
    assert!((0.0..=1.0).contains(&f));

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { taco_report_to_json(report, &mut json) }, TacoStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["method"], "taco");
    unsafe {
        taco_string_free(json);
        taco_report_free(report);
        taco_config_free(cfg);
    }
    assert!(unsafe { taco_report_avg_r_precision(ptr::null()) }.is_nan());
}

/// Compiles a C program against the generated header and static library.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("taco.h").exists());
    let target = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    // CARGO_TARGET_TMPDIR is <target>/tmp; the library sits in <target>/<profile>.
    let target_root = target.parent().unwrap();
    let lib = ["debug", "release"]
        .iter()
        .map(|p| target_root.join(p).join("libtaco_ffi.a"))
        .filter(|p| p.exists())
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
        .expect("static library built alongside the tests");
    let exe = target.join("taco_c_smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests").join("smoke.c"))
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("run cc");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "16 14 15 16 16 15 17 11");
}
