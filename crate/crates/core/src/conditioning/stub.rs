//! Built-in extractors that derive conditioning directly from pixels.
//! They stand in for external models when no cache or sidecar exists.

use super::{
    assemble_stack, encode_edges, ChannelBlock, ConditioningStack, Manifest, ModalityKind,
};
use crate::domain::ImageTensor;
use crate::error::Result;

/// Sobel gradient magnitude above this (on luminance in `[0, 1]`) is an edge.
pub const EDGE_THRESHOLD: f64 = 0.25;

fn luminance(image: &ImageTensor) -> Vec<f64> {
    let r = image.resolution();
    let hw = r * r;
    let d = image.pixels().data();
    (0..hw)
        .map(|i| {
            let rgb = [d[i], d[hw + i], d[2 * hw + i]].map(|v| (v + 1.0) * 0.5);
            0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        })
        .collect()
}

/// Binary edge map from the Sobel magnitude of image luminance.
pub fn sobel_edges(image: &ImageTensor) -> ChannelBlock {
    let r = image.resolution();
    let lum = luminance(image);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, r as isize - 1) as usize;
        let y = y.clamp(0, r as isize - 1) as usize;
        lum[y * r + x]
    };
    let mut mag = vec![0.0; r * r];
    for y in 0..r as isize {
        for x in 0..r as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            mag[y as usize * r + x as usize] = (gx * gx + gy * gy).sqrt() / 4.0;
        }
    }
    encode_edges(&mag, r, EDGE_THRESHOLD).expect("sized from image")
}

/// Modalities the stubs can produce.
pub fn supports(kind: ModalityKind) -> bool {
    kind == ModalityKind::Edges
}

/// Conditioning from pixels alone: supported modalities are extracted, the
/// rest are flagged absent.
pub fn extract(image: &ImageTensor, manifest: &Manifest) -> Result<ConditioningStack> {
    let blocks = manifest
        .entries()
        .iter()
        .map(|spec| supports(spec.kind).then(|| sobel_edges(image)))
        .collect();
    assemble_stack(blocks, manifest, image.resolution())
}
