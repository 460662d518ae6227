//! Any-quantile recurrent forecasting for panels of hourly series.
//!
//! The crate trains a dual-track dilated RNN that, once fitted, emits the
//! conditional quantile of the next two days of hourly values for *any*
//! quantile level supplied at inference time. The main pieces:
//!
//! * [`autodiff`] — reverse-mode tape over dense `f64` tensors, Adam, and a
//!   finite-difference gradient checker.
//! * [`cells`] — the dilated recurrent cell and its ring-buffer state.
//! * [`network`] — patching, the dual-track model, inference, serialization.
//! * [`quantile`] — quantile-level subranges, blending, and training-time
//!   level sampling.
//! * [`training`] — pinball/team losses, feedback controllers, and the fit
//!   loop.
//! * [`dataset`] — panel loading, segmentation, normalization, splits, and a
//!   synthetic solar-style generator.
//! * [`metrics`] — probabilistic evaluation (CRPS, calibration, interval
//!   scores, Diebold–Mariano comparisons).
//! * [`baseline`] — a seasonal empirical-quantile reference forecaster.

pub mod autodiff;
pub mod baseline;
pub mod cells;
pub mod dataset;
pub mod metrics;
pub mod network;
pub mod quantile;
pub mod training;

/// Crate-wide error type. Variants map onto the failure classes surfaced by
/// the CLI: configuration (exit 2), data (exit 3), numeric (exit 4).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not conform.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    /// An argument is outside its mathematical domain (e.g. q outside (0,1)).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed, misaligned, or incomplete input data.
    #[error("data error: {0}")]
    Data(String),
    /// A non-finite value surfaced during training or inference.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A model file is not in the expected format or is corrupted.
    #[error("model format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Writes a file atomically: the bytes land in a sibling temporary file that
/// is renamed over the target, so readers never observe a half-written file.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("tmp-aq");
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs `f` over `items` on up to `max_threads` scoped threads, preserving
/// input order in the returned vector. `AQ_THREADS=1` (or `max_threads = 1`)
/// degrades to a plain sequential loop.
pub fn parallel_map_indexed<T, R, F>(items: Vec<T>, max_threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let n = items.len();
    let threads = max_threads.max(1).min(n.max(1));
    if threads <= 1 || n <= 1 {
        return items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let queue: Vec<std::sync::Mutex<Option<(usize, T)>>> =
        items.into_iter().enumerate().map(|p| std::sync::Mutex::new(Some(p))).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: std::sync::Mutex<Vec<(usize, R)>> = std::sync::Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let (idx, item) = queue[i].lock().unwrap().take().expect("each slot taken once");
                let r = f(idx, item);
                results.lock().unwrap().push((idx, r));
            });
        }
    });
    for (idx, r) in results.into_inner().unwrap() {
        slots[idx] = Some(r);
    }
    slots.into_iter().map(|s| s.expect("every index produced")).collect()
}

/// Reads the `AQ_THREADS` thread cap, defaulting to the machine parallelism.
pub fn thread_cap() -> usize {
    match std::env::var("AQ_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}
