//! All content x style pairs synthesized in the target domain, scored by
//! Fréchet distance against a reference population.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::frechet::frechet_distance;
use super::stats::{accumulate_statistics, FeatureStatistics};
use crate::dataset::SPLIT_FILE;
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::generator::ContentCode;
use crate::model::TranslationModel;
use crate::probe::PROBE_ID;
use crate::trace::TraceEvent;
use crate::trainer::TrainingSample;

/// The line-delimited result record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRecord {
    pub source_domain: DomainId,
    pub target_domain: DomainId,
    pub n_pairs: usize,
    pub fid: Option<f64>,
    pub probe_id: String,
}

#[derive(Clone, Debug)]
pub struct ProtocolOptions {
    pub exec: Execution,
    /// Root of an archive in the dataset layout; outputs go to
    /// `<archive>/<target>/images/<content_id>__<style_id>.png`.
    pub archive: Option<PathBuf>,
    /// Keep outputs whose (content, style) indices fall below these bounds,
    /// for a comparison grid.
    pub keep: (usize, usize),
    /// Pairs per synthesis batch.
    pub chunk: usize,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            exec: Execution::default(),
            archive: None,
            keep: (0, 0),
            chunk: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub record: FidRecord,
    /// Statistics of every synthesized image; `count()` is the number of
    /// outputs.
    pub generated: FeatureStatistics,
    pub kept: BTreeMap<(usize, usize), ImageTensor>,
    pub warnings: Vec<String>,
}

impl ProtocolResult {
    pub fn n_outputs(&self) -> usize {
        self.generated.count()
    }
}

fn output_name(content: &TrainingSample, style: &TrainingSample) -> String {
    format!("{}__{}", content.id, style.id)
}

fn single_domain<'a>(set: &'a [TrainingSample], what: &str) -> Result<&'a DomainId> {
    let Some(first) = set.first() else {
        return Err(Error::TooFew {
            what: format!("{what} images"),
            needed: 1,
            found: 0,
        });
    };
    let d = first.image.domain();
    if let Some(bad) = set.iter().find(|s| s.image.domain() != d) {
        return Err(Error::Dataset(format!(
            "{what} set mixes domains {d} and {}",
            bad.image.domain()
        )));
    }
    Ok(d)
}

/// Synthesizes `content x style` images, each with content from a source
/// image's conditioning and style through the target domain's encoder,
/// and scores them against `reference` (target-domain training images).
///
/// The distance needs at least two reference images; with fewer it is
/// reported as `None`. A single output has zero covariance.
pub fn pairwise_protocol(
    model: &TranslationModel,
    content: &[TrainingSample],
    style: &[TrainingSample],
    reference: &[&ImageTensor],
    opts: &ProtocolOptions,
) -> Result<ProtocolResult> {
    let source = single_domain(content, "content")?.clone();
    let target = single_domain(style, "style")?.clone();
    model.bundle(&source)?;
    model.bundle(&target)?;
    let exec = opts.exec;
    let probe = model.probe();

    let code_chunks = exec.map_chunks(content, 16, |_, c| {
        model.encode_content_batch(&c.iter().map(|s| &s.cond).collect::<Vec<_>>())
    });
    let mut codes = Vec::with_capacity(content.len());
    for c in code_chunks {
        let c = c?;
        codes.extend((0..c.batch_size()).map(|i| c.select(i)));
    }
    let style_chunks = exec.map_chunks(style, 16, |_, c| {
        model.encode_style_batch(&c.iter().map(|s| &s.image).collect::<Vec<_>>(), &target)
    });
    let mut styles = Vec::with_capacity(style.len());
    for s in style_chunks {
        styles.extend(s?);
    }

    let image_dir = opts
        .archive
        .as_ref()
        .map(|a| a.join(target.as_str()).join("images"));
    if let Some(d) = &image_dir {
        std::fs::create_dir_all(d)?;
    }
    let ns = style.len();
    let pairs: Vec<usize> = (0..content.len() * ns).collect();
    type Part = (FeatureStatistics, Vec<((usize, usize), ImageTensor)>);
    let parts = exec.map_chunks(&pairs, opts.chunk, |_, chunk| -> Result<Part> {
        let code_refs: Vec<&ContentCode> = chunk.iter().map(|p| &codes[p / ns]).collect();
        let style_refs: Vec<_> = chunk.iter().map(|p| &styles[p % ns]).collect();
        for p in chunk {
            let (c, s) = (&content[p / ns], &style[p % ns]);
            model.record(TraceEvent::Synthesized {
                content_source: c.id.clone(),
                style_source: s.id.clone(),
                content_domain: source.clone(),
                style_domain: target.clone(),
                training: false,
            });
        }
        let out =
            model.synthesize_batch(&ContentCode::stack(&code_refs), &style_refs, &target, None)?;
        let refs: Vec<&ImageTensor> = out.iter().collect();
        let stats =
            FeatureStatistics::from_rows(&probe.pooled_features(&ImageTensor::batch(&refs)));
        let mut kept = Vec::new();
        for (p, img) in chunk.iter().zip(out) {
            let (ci, si) = (p / ns, p % ns);
            if let Some(d) = &image_dir {
                img.save_png(&d.join(format!("{}.png", output_name(&content[ci], &style[si]))))?;
            }
            if ci < opts.keep.0 && si < opts.keep.1 {
                kept.push(((ci, si), img));
            }
        }
        Ok((stats, kept))
    });
    let mut generated = FeatureStatistics::empty(probe.feature_dim());
    let mut kept = BTreeMap::new();
    for part in parts {
        let (s, k) = part?;
        generated.merge(&s);
        kept.extend(k);
    }
    if let Some(a) = &opts.archive {
        write_split(&a.join(target.as_str()), content, style)?;
    }

    let mut warnings = Vec::new();
    let fid = if reference.len() >= 2 {
        let r = accumulate_statistics(reference, probe, exec)?;
        Some(frechet_distance(&generated, &r)?)
    } else {
        let w = format!(
            "{} reference image(s); the distance needs at least 2",
            reference.len()
        );
        warn!("{w}");
        warnings.push(w);
        None
    };
    Ok(ProtocolResult {
        record: FidRecord {
            source_domain: source,
            target_domain: target,
            n_pairs: generated.count(),
            fid,
            probe_id: PROBE_ID.to_string(),
        },
        generated,
        kept,
        warnings,
    })
}

fn write_split(dir: &Path, content: &[TrainingSample], style: &[TrainingSample]) -> Result<()> {
    let mut text = String::new();
    for c in content {
        for s in style {
            text.push_str(&format!("val {}\n", output_name(c, s)));
        }
    }
    std::fs::write(dir.join(SPLIT_FILE), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::fixtures;
    use crate::trainer::build_variant;

    #[test]
    fn cartesian_counts_and_archive() {
        let cfg = fixtures::tiny_config(Variant::E, &["a", "b"]);
        let state = build_variant(&cfg).unwrap();
        let data = fixtures::training_set(&cfg, 4).unwrap();
        let (a, b) = (&data[&"a".into()], &data[&"b".into()]);
        let reference: Vec<&ImageTensor> = b.iter().map(|s| &s.image).collect();
        let dir = tempfile::tempdir().unwrap();
        let opts = ProtocolOptions {
            archive: Some(dir.path().to_path_buf()),
            keep: (2, 2),
            chunk: 5,
            ..Default::default()
        };
        let r = pairwise_protocol(&state.model, &a[..3], &b[..4], &reference, &opts).unwrap();
        assert_eq!(r.n_outputs(), 12);
        assert_eq!(r.record.n_pairs, 12);
        assert_eq!(r.kept.len(), 4);
        assert!(r.record.fid.unwrap().is_finite());
        let ds = crate::dataset::Dataset::open(dir.path(), 32).unwrap();
        assert_eq!(
            ds.ids(&"b".into(), crate::dataset::Split::Val)
                .unwrap()
                .len(),
            12
        );

        let one = pairwise_protocol(
            &state.model,
            &a[..1],
            &b[..1],
            &reference[..2],
            &Default::default(),
        )
        .unwrap();
        assert_eq!(one.n_outputs(), 1);
        assert!(one.record.fid.is_some());
        let none = pairwise_protocol(
            &state.model,
            &a[..1],
            &b[..1],
            &reference[..1],
            &Default::default(),
        )
        .unwrap();
        assert!(none.record.fid.is_none());
        assert!(
            pairwise_protocol(&state.model, &[], &b[..1], &reference, &Default::default()).is_err()
        );
    }

    #[test]
    fn modes_agree() {
        let cfg = fixtures::tiny_config(Variant::D, &["a", "b"]);
        let state = build_variant(&cfg).unwrap();
        let data = fixtures::training_set(&cfg, 3).unwrap();
        let (a, b) = (&data[&"a".into()], &data[&"b".into()]);
        let reference: Vec<&ImageTensor> = b.iter().map(|s| &s.image).collect();
        let run = |exec| {
            let o = ProtocolOptions {
                exec,
                chunk: 4,
                ..Default::default()
            };
            pairwise_protocol(&state.model, a, b, &reference, &o)
                .unwrap()
                .record
                .fid
                .unwrap()
        };
        assert!((run(Execution::Sequential) - run(Execution::Parallel)).abs() < 1e-8);
    }
}
