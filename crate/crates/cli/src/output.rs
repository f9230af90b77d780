//! Prediction records and output paths.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use mnm_core::numerics::Matrix;

/// `x` rounded to 9 significant digits, printed in its shortest form.
pub fn sig9(x: f64) -> Result<String> {
    if !x.is_finite() {
        bail!("non-finite value {x} in output");
    }
    let rounded: f64 = format!("{x:.8e}").parse()?;
    Ok(format!("{rounded}"))
}

/// One line per mode: `{"scene_id", "mode", "prob", "points": [[x, y], ...]}`.
pub fn write_modes<W: Write>(w: &mut W, scene_id: usize, modes: &[Matrix], probs: &[f64]) -> Result<()> {
    for (mode, (m, p)) in modes.iter().zip(probs).enumerate() {
        let mut points = Vec::with_capacity(m.rows());
        for t in 0..m.rows() {
            points.push(format!("[{},{}]", sig9(m.get(t, 0))?, sig9(m.get(t, 1))?));
        }
        writeln!(
            w,
            "{{\"scene_id\":{scene_id},\"mode\":{mode},\"prob\":{},\"points\":[{}]}}",
            sig9(*p)?,
            points.join(",")
        )?;
    }
    Ok(())
}

/// `dir/name.ext` next to `path`, named `<file name>.<ext>`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}
