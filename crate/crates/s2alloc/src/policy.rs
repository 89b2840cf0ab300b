//! What happens when the allocator reports tampering.

use std::fmt;

use s2alloc_core::{AllocError, AllocatorConfig, DetectionReport};

type Hook = Box<dyn Fn(&DetectionReport) + Send + Sync>;

/// Prints each report as one line on stderr, calls the optional hook, then
/// aborts the process unless aborting is disabled.
pub struct DetectionPolicy {
    abort: bool,
    hook: Option<Hook>,
}

impl fmt::Debug for DetectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DetectionPolicy")
            .field("abort", &self.abort)
            .field("hook", &self.hook.is_some())
            .finish()
    }
}

impl DetectionPolicy {
    pub fn new(abort: bool) -> Self {
        DetectionPolicy { abort, hook: None }
    }

    pub fn from_config(cfg: &AllocatorConfig) -> Self {
        Self::new(cfg.abort_on_tamper)
    }

    pub fn with_hook(mut self, hook: impl Fn(&DetectionReport) + Send + Sync + 'static) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    /// Handles a detection and passes the result through unchanged.
    pub fn handle<T>(&self, result: Result<T, AllocError>) -> Result<T, AllocError> {
        if let Err(AllocError::Detected(report)) = &result {
            eprintln!("{report}");
            if let Some(hook) = &self.hook {
                hook(report);
            }
            if self.abort {
                std::process::abort();
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use s2alloc_core::{Allocator, MacKey, SimulatedBacking};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn hook_sees_reports_without_abort() {
        let seen = Arc::new(AtomicUsize::new(0));
        let s = seen.clone();
        let policy = DetectionPolicy::new(false).with_hook(move |r| {
            assert_eq!(r.kind.as_str(), "DOUBLE_FREE");
            s.fetch_add(1, Ordering::Relaxed);
        });
        let alloc = Allocator::new(
            AllocatorConfig::with_key(MacKey::from_seed(1)),
            SimulatedBacking::default(),
            1,
        )
        .unwrap();
        let mut h = alloc.thread_heap();
        let p = h.malloc(8).unwrap();
        policy.handle(h.free(p)).unwrap();
        assert!(policy.handle(h.free(p)).is_err());
        assert_eq!(seen.load(Ordering::Relaxed), 1);
    }
}
