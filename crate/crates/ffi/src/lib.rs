//! C interface to checkpoint loading, log-mel analysis and gap filling.
//!
//! Every function returns an [`SiStatus`]. On failure a message is kept per
//! thread and can be copied out with [`si_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use speech_inpaint::dsp::{AudioBuffer, MelAnalyzer};
use speech_inpaint::model::{count_params, Generator};
use speech_inpaint::train::{inpaint, load_generator, TrainConfig};
use speech_inpaint::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    AudioTooShort = 6,
    TranscriptTooLong = 7,
    NoGap = 8,
    NonFinite = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A loaded generator with its configuration.
pub struct SiModel {
    config: TrainConfig,
    gen: Generator,
    analyzer: MelAnalyzer,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SiModelInfo {
    pub sample_rate: u32,
    /// Samples in one model window.
    pub window_samples: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    pub max_transcript_bytes: usize,
    pub param_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SiStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::NonScalarLoss(_) => SiStatus::Shape,
        Error::NonFinite(_) | Error::Diverged { .. } => SiStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Config { .. } => SiStatus::InvalidArgument,
        Error::AudioTooShort { .. } => SiStatus::AudioTooShort,
        Error::TranscriptTooLong { .. } => SiStatus::TranscriptTooLong,
        Error::ImpossibleGap(_) => SiStatus::NoGap,
        Error::Checkpoint(_) => SiStatus::Checkpoint,
        Error::Io { .. } | Error::Wav { .. } => SiStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SiStatus, String)>) -> SiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SiStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SiStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SiStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SiStatus, String) {
    (SiStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SiStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SiStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (SiStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (SiStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `cap` bytes, into `buf`. Returns the size needed for the full
/// message including the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn si_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Static version string.
#[no_mangle]
pub extern "C" fn si_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn si_model_load(path: *const c_char, out: *mut *mut SiModel) -> SiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let (config, gen) = load_generator(path).map_err(lib_err)?;
        let analyzer = MelAnalyzer::new(config.dsp.clone()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SiModel { config, gen, analyzer }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`si_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn si_model_free(model: *mut SiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn si_model_info(model: *const SiModel, info: *mut SiModelInfo) -> SiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        *info = SiModelInfo {
            sample_rate: m.config.dsp.sample_rate,
            window_samples: m.config.crop_samples(),
            n_frames: m.config.model.n,
            n_mels: m.config.model.d_mel,
            max_transcript_bytes: m.config.model.m,
            param_count: count_params(&m.config.model),
        };
        Ok(())
    })
}

/// Log-mel analysis of `samples` with the model's front end, written
/// frame-major into `out` (`frames × n_mels` values).
///
/// # Safety
/// Pointers must be valid for the stated lengths; `frames` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn si_log_mel(
    model: *const SiModel,
    samples: *const f64,
    n_samples: usize,
    out: *mut f64,
    out_len: usize,
    frames: *mut usize,
) -> SiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let frames = frames.as_mut().ok_or_else(|| null("frames"))?;
        let input = slice(samples, n_samples, "samples")?;
        let audio = AudioBuffer::new(input.to_vec(), m.config.dsp.sample_rate).map_err(lib_err)?;
        let mel = m.analyzer.analyze(&audio).map_err(lib_err)?;
        *frames = mel.n_frames;
        if out_len < mel.values.len() {
            return Err((
                SiStatus::BufferTooSmall,
                format!("need {} values, buffer holds {out_len}", mel.values.len()),
            ));
        }
        slice_mut(out, out_len, "out")?[..mel.values.len()].copy_from_slice(&mel.values);
        Ok(())
    })
}

/// Fills a gap and writes `n_samples` output samples to `out`.
///
/// With `gap_len == 0` and `gap_start == usize::MAX` the longest run of zero
/// samples is used. Otherwise `[gap_start, gap_start + gap_len)` is zeroed
/// and filled. A nonzero `stitch` keeps the input outside the gap.
///
/// # Safety
/// `samples` and `out` must be valid for `n_samples` values; `text` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn si_inpaint(
    model: *const SiModel,
    samples: *const f64,
    n_samples: usize,
    text: *const c_char,
    gap_start: usize,
    gap_len: usize,
    stitch: i32,
    out: *mut f64,
) -> SiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let text = c_str(text, "text")?;
        let input = slice(samples, n_samples, "samples")?;
        let audio = AudioBuffer::new(input.to_vec(), m.config.dsp.sample_rate).map_err(lib_err)?;
        let gap = if gap_start == usize::MAX && gap_len == 0 {
            None
        } else {
            Some((gap_start, gap_len))
        };
        let r = inpaint(&m.config, &m.gen, &audio, text, gap, stitch != 0).map_err(lib_err)?;
        slice_mut(out, n_samples, "out")?.copy_from_slice(&r.audio.samples);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_buffer_truncates() {
        set_error("abcdef".into());
        let mut buf = [1 as c_char; 4];
        let need = unsafe { si_last_error(buf.as_mut_ptr(), buf.len()) };
        assert_eq!(need, 7);
        assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "abc");
        assert_eq!(unsafe { si_last_error(ptr::null_mut(), 0) }, 7);
    }

    #[test]
    fn null_handles_are_reported() {
        let mut info = SiModelInfo::default();
        assert_eq!(unsafe { si_model_info(ptr::null(), &mut info) }, SiStatus::NullPointer);
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { si_model_load(ptr::null(), &mut m) }, SiStatus::NullPointer);
        assert!(m.is_null());
        unsafe { si_model_free(ptr::null_mut()) };
    }

    #[test]
    fn version_is_terminated() {
        let v = unsafe { CStr::from_ptr(si_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
