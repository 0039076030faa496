//! The three synthesis regimes and the batch task driver.
//!
//! Task files hold one task per line:
//!
//! ```text
//! <content_domain>/<content_id> <style_id> <style_domain> <output_path>
//! ```
//!
//! Matching ids and domains reconstruct, matching domains transfer within
//! the domain, and differing domains translate. Relative output paths are
//! resolved against the output directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use xlate_tensor::Tensor;

use crate::conditioning::ConditioningStack;
use crate::dataset::Dataset;
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::generator::DenormParams;
use crate::model::TranslationModel;
use crate::trace::TraceEvent;

fn fingerprint(x: &ImageTensor) -> String {
    let mut h = Sha256::new();
    for v in x.pixels().data() {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn render(
    model: &TranslationModel,
    x: &ImageTensor,
    style_image: &ImageTensor,
    cond: &ConditioningStack,
    dump: Option<&mut Vec<DenormParams>>,
) -> Result<ImageTensor> {
    model.bundle(x.domain())?;
    let style_domain = style_image.domain();
    let content = model.encode_content(cond)?;
    let style = model.encode_style(style_image, style_domain)?;
    model.record(TraceEvent::Synthesized {
        content_source: fingerprint(x),
        style_source: fingerprint(style_image),
        content_domain: x.domain().clone(),
        style_domain: style_domain.clone(),
        training: false,
    });
    Ok(model
        .synthesize_batch(&content, &[&style], style_domain, dump)?
        .remove(0))
}

/// Content and style both from `x`; `cond` must be `x`'s conditioning.
pub fn reconstruct(
    model: &TranslationModel,
    x: &ImageTensor,
    cond: &ConditioningStack,
) -> Result<ImageTensor> {
    render(model, x, x, cond, None)
}

/// Content from `x`, style from another exemplar of the same domain.
pub fn transfer_within(
    model: &TranslationModel,
    x: &ImageTensor,
    x_style: &ImageTensor,
    cond: &ConditioningStack,
) -> Result<ImageTensor> {
    if x.domain() != x_style.domain() {
        return Err(Error::DomainMismatch {
            content: x.domain().clone(),
            style: x_style.domain().clone(),
        });
    }
    render(model, x, x_style, cond, None)
}

/// Content from `x`, style from `y_style` through its own domain's
/// encoder.
pub fn translate(
    model: &TranslationModel,
    x: &ImageTensor,
    y_style: &ImageTensor,
    cond: &ConditioningStack,
) -> Result<ImageTensor> {
    if x.domain() == y_style.domain() {
        return Err(Error::SameDomain(x.domain().clone()));
    }
    model.bundle(y_style.domain())?;
    render(model, x, y_style, cond, None)
}

/// Any regime, also returning every injection's denormalization maps.
pub fn render_with_denorm(
    model: &TranslationModel,
    x: &ImageTensor,
    style_image: &ImageTensor,
    cond: &ConditioningStack,
) -> Result<(ImageTensor, Vec<DenormParams>)> {
    let mut dump = Vec::new();
    let y = render(model, x, style_image, cond, Some(&mut dump))?;
    Ok((y, dump))
}

/// Writes a tensor as a NumPy `.npy` file of little-endian `f64`.
pub fn write_npy(path: &Path, t: &Tensor) -> Result<()> {
    let shape = match t.shape() {
        [n] => format!("({n},)"),
        s => format!(
            "({})",
            s.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape}, }}");
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + t.len() * 8);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Reconstruct,
    Within,
    Translate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub content_domain: DomainId,
    pub content_id: String,
    pub style_id: String,
    pub style_domain: DomainId,
    pub output: PathBuf,
}

impl Task {
    pub fn regime(&self) -> Regime {
        if self.content_domain != self.style_domain {
            Regime::Translate
        } else if self.content_id == self.style_id {
            Regime::Reconstruct
        } else {
            Regime::Within
        }
    }
}

/// Parses a task file; malformed lines are skipped and reported.
pub fn parse_tasks(text: &str) -> (Vec<Task>, Vec<String>) {
    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = match f.as_slice() {
            [content, style_id, style_domain, out] => {
                content.split_once('/').and_then(|(d, id)| {
                    (!d.is_empty() && !id.is_empty()).then(|| Task {
                        content_domain: DomainId::new(d),
                        content_id: id.to_string(),
                        style_id: style_id.to_string(),
                        style_domain: DomainId::new(*style_domain),
                        output: PathBuf::from(out),
                    })
                })
            }
            _ => None,
        };
        match parsed {
            Some(t) => tasks.push(t),
            None => warnings.push(format!(
                "task line {}: expected `<domain>/<content_id> <style_id> <style_domain> <output_path>`",
                n + 1
            )),
        }
    }
    (tasks, warnings)
}

#[derive(Clone, Debug, Default)]
pub struct TaskReport {
    pub written: Vec<(PathBuf, Regime)>,
    pub warnings: Vec<String>,
}

fn run_task(
    model: &TranslationModel,
    data: &Dataset,
    task: &Task,
    out_dir: &Path,
    dump_denorm: bool,
) -> Result<(PathBuf, Regime)> {
    let manifest = model.manifest();
    let x = data.load_image(&task.content_domain, &task.content_id)?;
    let (cond, _) = data.load_conditioning(&task.content_domain, &task.content_id, manifest, &x)?;
    let regime = task.regime();
    let style = match regime {
        Regime::Reconstruct => x.clone(),
        _ => data.load_image(&task.style_domain, &task.style_id)?,
    };
    let out = out_dir.join(&task.output);
    let y = if dump_denorm {
        let (y, maps) = render_with_denorm(model, &x, &style, &cond)?;
        let stem = out.with_extension("");
        for (j, d) in maps.iter().enumerate() {
            write_npy(
                &PathBuf::from(format!("{}.inj{j}.scale.npy", stem.display())),
                &d.scale,
            )?;
            write_npy(
                &PathBuf::from(format!("{}.inj{j}.bias.npy", stem.display())),
                &d.bias,
            )?;
        }
        y
    } else {
        match regime {
            Regime::Reconstruct => reconstruct(model, &x, &cond)?,
            Regime::Within => transfer_within(model, &x, &style, &cond)?,
            Regime::Translate => translate(model, &x, &style, &cond)?,
        }
    };
    y.save_png(&out)?;
    Ok((out, regime))
}

/// Runs every task; failures become warnings and the rest still run.
pub fn run_tasks(
    model: &TranslationModel,
    data: &Dataset,
    tasks: &[Task],
    out_dir: &Path,
    dump_denorm: bool,
    exec: Execution,
) -> TaskReport {
    let results = exec.map(tasks, |t| run_task(model, data, t, out_dir, dump_denorm));
    let mut rep = TaskReport::default();
    for (t, r) in tasks.iter().zip(results) {
        match r {
            Ok(w) => rep.written.push(w),
            Err(e) => rep.warnings.push(format!(
                "task {}/{} -> {}: {e}",
                t.content_domain,
                t.content_id,
                t.output.display()
            )),
        }
    }
    rep
}
