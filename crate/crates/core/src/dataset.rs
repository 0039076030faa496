//! On-disk dataset layout:
//!
//! ```text
//! <root>/<domain>/images/<id>.png
//! <root>/<domain>/conditioning/<id>.cond
//! <root>/<domain>/sidecars/<id>.<modality>.{txt,png}
//! <root>/<domain>/split.txt          lines of `train <id>` or `val <id>`
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;

use crate::conditioning::cache::{cache_read, cache_write};
use crate::conditioning::{sidecar, stub, ConditioningStack, Manifest};
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trainer::TrainingSample;

pub const SPLIT_FILE: &str = "split.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Where a conditioning stack came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondOrigin {
    Cache,
    Stub,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    resolution: usize,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>, resolution: usize) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Dataset(format!(
                "{} is not a directory",
                root.display()
            )));
        }
        Ok(Self { root, resolution })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Subdirectories holding a split file, sorted.
    pub fn domains(&self) -> Result<Vec<DomainId>> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(&self.root)? {
            let e = e?;
            if e.path().join(SPLIT_FILE).is_file() {
                out.push(DomainId::new(e.file_name().to_string_lossy()));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn has_domain(&self, domain: &DomainId) -> bool {
        self.root.join(domain.as_str()).join(SPLIT_FILE).is_file()
    }

    pub fn ids(&self, domain: &DomainId, split: Split) -> Result<Vec<String>> {
        let path = self.root.join(domain.as_str()).join(SPLIT_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(s), Some(id), None) if s == "train" || s == "val" => {
                    if s == split.as_str() {
                        out.push(id.to_string());
                    }
                }
                _ => {
                    return Err(Error::Dataset(format!(
                        "{} line {}: expected `train <id>` or `val <id>`",
                        path.display(),
                        n + 1
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn image_path(&self, domain: &DomainId, id: &str) -> PathBuf {
        self.root
            .join(domain.as_str())
            .join("images")
            .join(format!("{id}.png"))
    }

    pub fn cond_path(&self, domain: &DomainId, id: &str) -> PathBuf {
        self.root
            .join(domain.as_str())
            .join("conditioning")
            .join(format!("{id}.cond"))
    }

    pub fn sidecar_dir(&self, domain: &DomainId) -> PathBuf {
        self.root.join(domain.as_str()).join("sidecars")
    }

    pub fn load_image(&self, domain: &DomainId, id: &str) -> Result<ImageTensor> {
        ImageTensor::load_png(
            &self.image_path(domain, id),
            self.resolution,
            domain.clone(),
        )
    }

    /// The image's own conditioning: its cache when present, else the stub
    /// extractors run on `image`.
    pub fn load_conditioning(
        &self,
        domain: &DomainId,
        id: &str,
        manifest: &Manifest,
        image: &ImageTensor,
    ) -> Result<(ConditioningStack, CondOrigin)> {
        let path = self.cond_path(domain, id);
        if path.is_file() {
            let stack = cache_read(&path)?;
            if stack.manifest() != manifest {
                return Err(Error::Manifest(format!(
                    "cache {} was extracted with a different manifest; rerun extract",
                    path.display()
                )));
            }
            if stack.resolution() != self.resolution {
                return Err(Error::shape(
                    "conditioning cache",
                    self.resolution,
                    stack.resolution(),
                ));
            }
            return Ok((stack, CondOrigin::Cache));
        }
        Ok((stub::extract(image, manifest)?, CondOrigin::Stub))
    }

    pub fn load_sample(
        &self,
        domain: &DomainId,
        id: &str,
        manifest: &Manifest,
    ) -> Result<TrainingSample> {
        let image = self.load_image(domain, id)?;
        let (cond, _) = self.load_conditioning(domain, id, manifest, &image)?;
        Ok(TrainingSample::new(id, image, cond))
    }

    pub fn load_split(
        &self,
        domain: &DomainId,
        split: Split,
        manifest: &Manifest,
        exec: Execution,
    ) -> Result<Vec<TrainingSample>> {
        let ids = self.ids(domain, split)?;
        exec.map(&ids, |id| self.load_sample(domain, id, manifest))
            .into_iter()
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExtractSummary {
    pub written: usize,
    /// Per modality: images where it was present.
    pub present: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
}

/// Writes a conditioning cache for every image listed in every split of
/// every domain. Modalities without a sidecar fall back to the stub
/// extractors when one exists, else are marked absent.
pub fn extract_all(
    dataset: &Dataset,
    manifest: &Manifest,
    exec: Execution,
) -> Result<ExtractSummary> {
    let mut jobs = Vec::new();
    for d in dataset.domains()? {
        for split in [Split::Train, Split::Val] {
            for id in dataset.ids(&d, split)? {
                jobs.push((d.clone(), id));
            }
        }
    }
    let results = exec.map(&jobs, |(d, id)| extract_one(dataset, manifest, d, id));
    let mut sum = ExtractSummary::default();
    for spec in manifest.entries() {
        sum.present.insert(spec.kind.to_string(), 0);
    }
    for ((d, id), r) in jobs.iter().zip(results) {
        match r {
            Ok((stack, missing)) => {
                sum.written += 1;
                for (spec, valid) in manifest.entries().iter().zip(stack.validity()) {
                    if *valid {
                        *sum.present.get_mut(spec.kind.name()).expect("seeded") += 1;
                    }
                }
                for m in missing {
                    let w = format!("{d}/{id}: no `{m}` sidecar, marked absent");
                    warn!("{w}");
                    sum.warnings.push(w);
                }
            }
            Err(e) => {
                let w = format!("{d}/{id}: {e}");
                warn!("{w}");
                sum.failures.push(w);
            }
        }
    }
    Ok(sum)
}

fn extract_one(
    dataset: &Dataset,
    manifest: &Manifest,
    domain: &DomainId,
    id: &str,
) -> Result<(ConditioningStack, Vec<String>)> {
    let r = dataset.resolution();
    let dir = dataset.sidecar_dir(domain);
    let mut blocks = Vec::new();
    let mut missing = Vec::new();
    let mut image = None;
    for spec in manifest.entries() {
        let mut b = sidecar::load_block(&dir, id, spec, r)?;
        if b.is_none() && stub::supports(spec.kind) {
            if image.is_none() {
                image = Some(dataset.load_image(domain, id)?);
            }
            b = Some(stub::sobel_edges(image.as_ref().expect("loaded")));
        }
        if b.is_none() {
            missing.push(spec.kind.to_string());
        }
        blocks.push(b);
    }
    let stack = crate::conditioning::assemble_stack(blocks, manifest, r)?;
    cache_write(&stack, &dataset.cond_path(domain, id))?;
    Ok((stack, missing))
}
