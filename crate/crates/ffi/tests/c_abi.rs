use std::ffi::{c_char, CString};
use std::ptr;

use speech_inpaint::train::{TrainConfig, Trainer};
use speech_inpaint_ffi::*;

fn tiny_checkpoint(dir: &std::path::Path) -> CString {
    let mut cfg = TrainConfig::toy();
    cfg.model.k = 1;
    cfg.griffin_lim_iters = 3;
    let path = dir.join("m.spkt");
    Trainer::new(cfg, 4).unwrap().save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe { si_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn load_analyze_inpaint_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { si_model_load(path.as_ptr(), &mut model) }, SiStatus::Ok);
    let mut info = SiModelInfo::default();
    assert_eq!(unsafe { si_model_info(model, &mut info) }, SiStatus::Ok);
    assert_eq!((info.sample_rate, info.n_frames, info.n_mels), (8000, 48, 16));
    assert_eq!(info.window_samples, 24000);

    let n = info.window_samples;
    let mut audio: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.07).sin()).collect();
    let mut frames = 0;
    let mut mel = vec![0.0; info.n_frames * info.n_mels];
    let st = unsafe { si_log_mel(model, audio.as_ptr(), n, mel.as_mut_ptr(), mel.len(), &mut frames) };
    assert_eq!((st, frames), (SiStatus::Ok, 48));
    assert!(mel.iter().all(|v| v.is_finite()));
    let st = unsafe { si_log_mel(model, audio.as_ptr(), n, mel.as_mut_ptr(), 10, &mut frames) };
    assert_eq!(st, SiStatus::BufferTooSmall);

    let text = CString::new("abcdefgh").unwrap();
    let mut out = vec![0.0; n];
    let st = unsafe { si_inpaint(model, audio.as_ptr(), n, text.as_ptr(), usize::MAX, 0, 0, out.as_mut_ptr()) };
    assert_eq!(st, SiStatus::NoGap, "{}", last_error());

    audio[8000..12000].fill(0.0);
    let st = unsafe { si_inpaint(model, audio.as_ptr(), n, text.as_ptr(), usize::MAX, 0, 1, out.as_mut_ptr()) };
    assert_eq!(st, SiStatus::Ok, "{}", last_error());
    assert_eq!(&out[..7000], &audio[..7000]);
    assert_eq!(&out[13000..], &audio[13000..]);

    let long = CString::new("x".repeat(info.max_transcript_bytes + 1)).unwrap();
    let st = unsafe { si_inpaint(model, audio.as_ptr(), n, long.as_ptr(), 100, 800, 0, out.as_mut_ptr()) };
    assert_eq!(st, SiStatus::TranscriptTooLong);
    assert!(last_error().contains(&info.max_transcript_bytes.to_string()));
    unsafe { si_model_free(model) };
}

#[test]
fn bad_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.spkt");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let c = CString::new(p.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { si_model_load(c.as_ptr(), &mut model) }, SiStatus::Checkpoint);
    assert!(model.is_null());
    let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { si_model_load(missing.as_ptr(), &mut model) }, SiStatus::Io);
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/speech_inpaint.h")).unwrap();
    for name in [
        "si_model_load",
        "si_model_free",
        "si_model_info",
        "si_log_mel",
        "si_inpaint",
        "si_last_error",
        "si_version",
        "SI_STATUS_OK",
        "typedef struct SiModel SiModel",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"speech_inpaint.h\"\nint main(void) { SiModel *m = 0; SiStatus s = si_model_load(\"x\", &m); si_model_free(m); return (int)s; }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include")))
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success()),
        Err(e) => eprintln!("no C compiler available, skipped: {e}"),
    }
}
