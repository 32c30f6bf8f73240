//! Scalar abstraction over `f32`/`f64`.
//!
//! Training runs in `f32` for throughput; gradient checks instantiate the
//! same code in `f64`. The atomic hooks let table gradients accumulate in
//! place from worker threads (single-threaded runs stay bit-deterministic
//! since only one writer exists).

use std::fmt::{Debug, Display};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    type Atomic: Send + Sync;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;

    fn atomic_vec(n: usize) -> Vec<Self::Atomic>;
    fn atomic_add(slot: &Self::Atomic, v: Self);
    fn atomic_load(slot: &Self::Atomic) -> Self;
    fn atomic_store(slot: &Self::Atomic, v: Self);
}

impl Scalar for f32 {
    type Atomic = AtomicU32;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }

    fn atomic_vec(n: usize) -> Vec<AtomicU32> {
        (0..n).map(|_| AtomicU32::new(0f32.to_bits())).collect()
    }

    #[inline]
    fn atomic_add(slot: &AtomicU32, v: f32) {
        let mut cur = slot.load(Ordering::Relaxed);
        loop {
            let next = (f32::from_bits(cur) + v).to_bits();
            match slot.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    #[inline(always)]
    fn atomic_load(slot: &AtomicU32) -> f32 {
        f32::from_bits(slot.load(Ordering::Relaxed))
    }

    #[inline(always)]
    fn atomic_store(slot: &AtomicU32, v: f32) {
        slot.store(v.to_bits(), Ordering::Relaxed);
    }
}

impl Scalar for f64 {
    type Atomic = AtomicU64;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }

    fn atomic_vec(n: usize) -> Vec<AtomicU64> {
        (0..n).map(|_| AtomicU64::new(0f64.to_bits())).collect()
    }

    #[inline]
    fn atomic_add(slot: &AtomicU64, v: f64) {
        let mut cur = slot.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(cur) + v).to_bits();
            match slot.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    #[inline(always)]
    fn atomic_load(slot: &AtomicU64) -> f64 {
        f64::from_bits(slot.load(Ordering::Relaxed))
    }

    #[inline(always)]
    fn atomic_store(slot: &AtomicU64, v: f64) {
        slot.store(v.to_bits(), Ordering::Relaxed);
    }
}
