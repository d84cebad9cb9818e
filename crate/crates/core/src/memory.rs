//! Live-tensor byte accounting.
//!
//! A [`MemoryAccountant`] is installed on the current thread with
//! [`MemoryAccountant::scope`]. While the scope guard lives, every tensor
//! buffer allocated on that thread registers its size with the accountant
//! and unregisters on drop, wherever the drop happens. Buffers allocated
//! with no accountant installed carry no token and cost nothing extra.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryAccountant {
    inner: Arc<Counters>,
}

thread_local! {
    static CURRENT: RefCell<Option<MemoryAccountant>> = const { RefCell::new(None) };
}

impl MemoryAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    /// Install this accountant on the current thread until the guard drops.
    pub fn scope(&self) -> ScopeGuard {
        let previous = CURRENT.with(|c| c.borrow_mut().replace(self.clone()));
        ScopeGuard { previous }
    }

    pub fn live_bytes(&self) -> usize {
        self.inner.live.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> usize {
        self.inner.peak.load(Ordering::Relaxed)
    }

    /// Restart peak tracking from the current live level.
    pub fn reset_peak(&self) {
        self.inner
            .peak
            .store(self.inner.live.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    fn register(&self, bytes: usize) {
        let live = self.inner.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.inner.peak.fetch_max(live, Ordering::Relaxed);
    }

    fn release(&self, bytes: usize) {
        self.inner.live.fetch_sub(bytes, Ordering::Relaxed);
    }
}

pub struct ScopeGuard {
    previous: Option<MemoryAccountant>,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        let previous = self.previous.take();
        CURRENT.with(|c| *c.borrow_mut() = previous);
    }
}

#[derive(Debug)]
struct Token {
    accountant: MemoryAccountant,
    bytes: usize,
}

impl Drop for Token {
    fn drop(&mut self) {
        self.accountant.release(self.bytes);
    }
}

fn token_for(bytes: usize) -> Option<Token> {
    CURRENT.with(|c| {
        c.borrow().as_ref().map(|acc| {
            acc.register(bytes);
            Token {
                accountant: acc.clone(),
                bytes,
            }
        })
    })
}

/// A `Vec` whose allocation is visible to the installed accountant.
#[derive(Debug)]
pub struct Tracked<U> {
    data: Vec<U>,
    _token: Option<Token>,
}

impl<U> Tracked<U> {
    pub fn new(data: Vec<U>) -> Self {
        let bytes = data.len() * std::mem::size_of::<U>();
        Self {
            _token: token_for(bytes),
            data,
        }
    }

    pub fn into_vec(self) -> Vec<U> {
        self.data
    }
}

impl<U: Clone> Clone for Tracked<U> {
    fn clone(&self) -> Self {
        Self::new(self.data.clone())
    }
}

impl<U: PartialEq> PartialEq for Tracked<U> {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl<U> Deref for Tracked<U> {
    type Target = [U];
    fn deref(&self) -> &[U] {
        &self.data
    }
}

impl<U> DerefMut for Tracked<U> {
    fn deref_mut(&mut self) -> &mut [U] {
        &mut self.data
    }
}
