//! Process-wide float width.
//!
//! Tensor storage is always `f64`. In [`Precision::F32`] mode every op output is
//! rounded to the nearest `f32`, so values behave like single-precision storage;
//! [`Precision::F64`] keeps full width for verification. The process default comes
//! from `BATKIT_F64=1`; [`with_precision`] overrides it for the current thread.

use std::cell::Cell;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Once;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

const UNSET: u8 = 0;
const F32: u8 = 1;
const F64: u8 = 2;

static GLOBAL: AtomicU8 = AtomicU8::new(UNSET);
static ENV_INIT: Once = Once::new();

thread_local! {
    static OVERRIDE: Cell<Option<Precision>> = const { Cell::new(None) };
}

fn encode(p: Precision) -> u8 {
    match p {
        Precision::F32 => F32,
        Precision::F64 => F64,
    }
}

fn global() -> Precision {
    ENV_INIT.call_once(|| {
        let from_env = matches!(std::env::var("BATKIT_F64").as_deref(), Ok("1"));
        let p = if from_env { F64 } else { F32 };
        let _ = GLOBAL.compare_exchange(UNSET, p, Ordering::SeqCst, Ordering::SeqCst);
    });
    match GLOBAL.load(Ordering::SeqCst) {
        F64 => Precision::F64,
        _ => Precision::F32,
    }
}

/// The precision in effect on this thread.
pub fn precision() -> Precision {
    OVERRIDE.with(|o| o.get()).unwrap_or_else(global)
}

/// Sets the process-wide default. Threads inside [`with_precision`] are unaffected.
pub fn set_precision(p: Precision) {
    ENV_INIT.call_once(|| {});
    GLOBAL.store(encode(p), Ordering::SeqCst);
}

/// Runs `f` with `p` in effect on the current thread.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Precision>);
    impl Drop for Restore {
        fn drop(&mut self) {
            OVERRIDE.with(|o| o.set(self.0));
        }
    }
    let _restore = Restore(OVERRIDE.with(|o| o.replace(Some(p))));
    f()
}

#[inline]
pub(crate) fn round_slice(data: &mut [f64], p: Precision) {
    if p == Precision::F32 {
        for x in data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}
