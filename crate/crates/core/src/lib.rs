//! Lyapunov-spectrum diagnostics for closed-loop control systems.
//!
//! * [`dynsys`]: deterministic systems, rollouts, closed-loop Jacobians
//! * [`policy`]: feedback policies and their weight files
//! * [`autodiff`]: a small reverse-mode tape
//! * [`lyapunov`]: spectrum estimation, classification, reward divergence
//! * [`mleg`]: imagined-rollout bundles and the variance regulariser trainer
//! * [`eval`]: robust statistics and observation-noise sweeps
//! * [`cli`]: the `chaoscope` command-line front end

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dynsys;
pub mod error;
pub mod eval;
pub mod lyapunov;
pub mod mleg;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};

use std::io::Write as _;
use std::path::Path;

/// Write `bytes` to `path` via a temporary file in the same directory and
/// a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
