//! Decoder with per-injection content/style fusion feeding spatially
//! adaptive denormalization.

use rand::Rng;
use xlate_tensor::{Graph, Tensor, Var};

use crate::config::{ModelConfig, Variant};
use crate::content::{ContentPyramid, PyramidVars};
use crate::domain::{DomainId, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, ParamStore, LEAK, NORM_EPS};
use crate::style::StyleVector;

pub const PREFIX: &str = "gen.";

/// What the fusion modules see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionSource {
    /// Raw conditioning stack, resized to each layer.
    Conditioning,
    /// The 32x32 pyramid level alone.
    Content,
    /// The broadcast style vector concatenated with the 32x32 level.
    ContentStyle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrunkSource {
    /// Convolution of the 8x8 pyramid level.
    Content8,
    /// Fully-connected projection of the style vector to 8x8.
    Style,
}

/// Spatial content as the generator consumes it.
#[derive(Clone, Debug, PartialEq)]
pub enum ContentCode {
    Pyramid(ContentPyramid),
    /// `[N, d, R, R]` conditioning for variants without a content encoder.
    Raw(Tensor),
}

impl ContentCode {
    pub fn batch_size(&self) -> usize {
        match self {
            ContentCode::Pyramid(p) => p.batch_size(),
            ContentCode::Raw(t) => t.shape()[0],
        }
    }

    pub fn select(&self, i: usize) -> Self {
        match self {
            ContentCode::Pyramid(p) => ContentCode::Pyramid(p.select(i)),
            ContentCode::Raw(t) => ContentCode::Raw(t.slice_outer(i, 1)),
        }
    }

    pub fn stack(parts: &[&ContentCode]) -> Self {
        match parts[0] {
            ContentCode::Pyramid(_) => {
                let ps: Vec<&ContentPyramid> = parts
                    .iter()
                    .map(|p| match p {
                        ContentCode::Pyramid(p) => p,
                        ContentCode::Raw(_) => panic!("mixed content codes"),
                    })
                    .collect();
                ContentCode::Pyramid(ContentPyramid::stack(&ps))
            }
            ContentCode::Raw(_) => {
                let ts: Vec<Tensor> = parts
                    .iter()
                    .map(|p| match p {
                        ContentCode::Raw(t) => t.clone(),
                        ContentCode::Pyramid(_) => panic!("mixed content codes"),
                    })
                    .collect();
                ContentCode::Raw(Tensor::stack_outer(&ts))
            }
        }
    }

    pub fn to_vars(&self, g: &mut Graph) -> ContentVars {
        match self {
            ContentCode::Pyramid(p) => ContentVars::Pyramid(p.to_vars(g)),
            ContentCode::Raw(t) => ContentVars::Raw(g.constant(t.clone())),
        }
    }
}

#[derive(Clone, Debug)]
pub enum ContentVars {
    Pyramid(PyramidVars),
    Raw(Var),
}

/// Scale and bias maps for one injection, `[N, C, r, r]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct DenormParams {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl DenormParams {
    pub fn norm(&self) -> f64 {
        (self.scale.norm_l2().powi(2) + self.bias.norm_l2().powi(2)).sqrt()
    }
}

/// Parameter-free per-channel normalization, then `x * (1 + scale) + bias`.
pub fn spade_inject_var(g: &mut Graph, x: Var, scale: Var, bias: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    for (what, v) in [("scale", scale), ("bias", bias)] {
        if g.value(v).shape() != xs.as_slice() {
            return Err(Error::shape(
                &format!("denormalization {what}"),
                format!("{xs:?}"),
                format!("{:?}", g.value(v).shape()),
            ));
        }
    }
    let n = g.instance_norm(x, NORM_EPS);
    let m = g.mul(n, scale);
    let y = g.add(n, m);
    Ok(g.add(y, bias))
}

pub fn spade_inject(activations: &Tensor, denorm: &DenormParams) -> Result<Tensor> {
    if activations.rank() != 4 {
        return Err(Error::shape("activations", "rank 4", activations.rank()));
    }
    let mut g = Graph::inference();
    let x = g.constant(activations.clone());
    let s = g.constant(denorm.scale.clone());
    let b = g.constant(denorm.bias.clone());
    let y = spade_inject_var(&mut g, x, s, b)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
struct Fusion {
    resolution: usize,
    hidden: Vec<Conv>,
    scale: Conv,
    bias: Conv,
}

#[derive(Clone, Debug)]
struct SpadeBlock {
    resolution: usize,
    conv0: Conv,
    conv1: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    resolution: usize,
    style_dim: usize,
    source: FusionSource,
    trunk: TrunkSource,
    trunk_conv: Option<Conv>,
    trunk_fc: Option<Dense>,
    trunk_width: usize,
    blocks: Vec<SpadeBlock>,
    fusion: Vec<Fusion>,
    head: Conv,
    head_gain: f64,
}

impl Generator {
    /// `cond_channels` is the conditioning depth and `level_widths` the
    /// pyramid widths at (8, 32); which of them matter depends on `variant`.
    pub fn new(
        cfg: &ModelConfig,
        variant: Variant,
        resolution: usize,
        cond_channels: usize,
        level_widths: (usize, usize),
    ) -> Self {
        let source = if !variant.has_content_encoder() {
            FusionSource::Conditioning
        } else if variant.fused_style() {
            FusionSource::ContentStyle
        } else {
            FusionSource::Content
        };
        let trunk = if variant.fused_style() {
            TrunkSource::Content8
        } else {
            TrunkSource::Style
        };
        let fusion_in = match source {
            FusionSource::Conditioning => cond_channels,
            FusionSource::Content => level_widths.1,
            FusionSource::ContentStyle => level_widths.1 + cfg.style_dim,
        };
        let trunk_width = cfg.decoder_width(8);
        let (trunk_conv, trunk_fc) = match trunk {
            TrunkSource::Content8 => (
                Some(Conv::same("gen.trunk", level_widths.0, trunk_width)),
                None,
            ),
            TrunkSource::Style => (
                None,
                Some(Dense::new("gen.trunk_fc", cfg.style_dim, trunk_width * 64)),
            ),
        };
        let hidden_w = cfg.fusion_width();
        let mut fusion = Vec::new();
        let mut add_fusion = |r: usize, channels: usize| {
            let j = fusion.len();
            let name = format!("gen.fuse{j}");
            let mut cin = fusion_in;
            let hidden = (0..cfg.fusion_layers)
                .map(|l| {
                    let c = Conv::same(format!("{name}.h{l}"), cin, hidden_w);
                    cin = hidden_w;
                    c
                })
                .collect();
            fusion.push(Fusion {
                resolution: r,
                hidden,
                scale: Conv::same(format!("{name}.scale"), hidden_w, channels),
                bias: Conv::same(format!("{name}.bias"), hidden_w, channels),
            });
        };
        let mut blocks = Vec::new();
        let mut fin = trunk_width;
        let mut r = 8;
        while r <= resolution {
            let fout = cfg.decoder_width(r);
            let fmid = fin.min(fout);
            let name = format!("gen.block{r}");
            add_fusion(r, fin);
            add_fusion(r, fmid);
            blocks.push(SpadeBlock {
                resolution: r,
                conv0: Conv::same(format!("{name}.conv0"), fin, fmid).no_bias(),
                conv1: Conv::same(format!("{name}.conv1"), fmid, fout),
                skip: (fin != fout).then(|| {
                    Conv::same(format!("{name}.skip"), fin, fout)
                        .strided(1, 1, 0)
                        .no_bias()
                }),
            });
            fin = fout;
            r *= 2;
        }
        Self {
            resolution,
            style_dim: cfg.style_dim,
            source,
            trunk,
            trunk_conv,
            trunk_fc,
            trunk_width,
            blocks,
            fusion,
            head: Conv::same("gen.head", fin, 3),
            head_gain: cfg.fusion_head_gain,
        }
    }

    pub fn injection_count(&self) -> usize {
        self.fusion.len()
    }

    pub fn injection_resolution(&self, index: usize) -> Option<usize> {
        self.fusion.get(index).map(|f| f.resolution)
    }

    pub fn fusion_source(&self) -> FusionSource {
        self.source
    }

    pub fn trunk_source(&self) -> TrunkSource {
        self.trunk
    }

    /// Prefix of the parameters private to injection `index`.
    pub fn fusion_prefix(index: usize) -> String {
        format!("gen.fuse{index}.")
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R) {
        if let Some(c) = &self.trunk_conv {
            c.init(ps, rng, 1.0);
        }
        if let Some(d) = &self.trunk_fc {
            d.init(ps, rng, 1.0);
        }
        for b in &self.blocks {
            b.conv0.init(ps, rng, 1.0);
            b.conv1.init(ps, rng, 1.0);
            if let Some(s) = &b.skip {
                s.init(ps, rng, 1.0);
            }
        }
        for f in &self.fusion {
            for h in &f.hidden {
                h.init(ps, rng, 1.0);
            }
            f.scale.init(ps, rng, self.head_gain);
            f.bias.init(ps, rng, self.head_gain);
        }
        self.head.init(ps, rng, 1.0);
    }

    /// The map every fusion module resizes: `[N, F, 32, 32]` from content
    /// (and style), or the raw conditioning.
    fn fusion_input(
        &self,
        g: &mut Graph,
        content: &ContentVars,
        style: Option<Var>,
    ) -> Result<Var> {
        match (self.source, content) {
            (FusionSource::Conditioning, ContentVars::Raw(c)) => Ok(*c),
            (FusionSource::Content, ContentVars::Pyramid(p)) => p.level(32),
            (FusionSource::ContentStyle, ContentVars::Pyramid(p)) => {
                let l32 = p.level(32)?;
                let style = style.ok_or_else(|| Error::shape("fusion", "style vector", "none"))?;
                let b = g.broadcast_spatial(style, 32, 32);
                Ok(g.concat_channels(&[b, l32]))
            }
            _ => Err(Error::shape(
                "generator content",
                format!("{:?} input", self.source),
                "the other content representation",
            )),
        }
    }

    fn fuse_var(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        input: Var,
        index: usize,
    ) -> Result<(Var, Var)> {
        let f = self.fusion.get(index).ok_or(Error::InjectionIndex {
            index,
            count: self.fusion.len(),
        })?;
        let mut h = g.resize_bilinear(input, f.resolution, f.resolution);
        for c in &f.hidden {
            h = c.forward(g, ps, h);
            h = g.leaky_relu(h, LEAK);
        }
        Ok((f.scale.forward(g, ps, h), f.bias.forward(g, ps, h)))
    }

    /// Full forward pass; `style` is `[N, S]`. Denormalization maps are
    /// appended to `dump` when given.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        content: &ContentVars,
        style: Var,
        mut dump: Option<&mut Vec<DenormParams>>,
    ) -> Result<Var> {
        let (n, s) = g.value(style).dims2();
        if s != self.style_dim {
            return Err(Error::shape("style vector", self.style_dim, s));
        }
        let fusion_in = self.fusion_input(g, content, Some(style))?;
        let mut x = match self.trunk {
            TrunkSource::Content8 => {
                let ContentVars::Pyramid(p) = content else {
                    unreachable!()
                };
                let l8 = p.level(8)?;
                self.trunk_conv.as_ref().unwrap().forward(g, ps, l8)
            }
            TrunkSource::Style => {
                let h = self.trunk_fc.as_ref().unwrap().forward(g, ps, style);
                g.reshape(h, &[n, self.trunk_width, 8, 8])
            }
        };
        let mut inj = 0;
        for (bi, b) in self.blocks.iter().enumerate() {
            if bi > 0 {
                x = g.upsample_nearest2(x);
            }
            debug_assert_eq!(g.value(x).shape()[2], b.resolution);
            let mut h = x;
            for conv in [&b.conv0, &b.conv1] {
                let (sc, bs) = self.fuse_var(g, ps, fusion_in, inj)?;
                if let Some(d) = dump.as_deref_mut() {
                    d.push(DenormParams {
                        scale: g.value(sc).clone(),
                        bias: g.value(bs).clone(),
                    });
                }
                h = spade_inject_var(g, h, sc, bs)?;
                h = g.leaky_relu(h, LEAK);
                h = conv.forward(g, ps, h);
                inj += 1;
            }
            let skip = match &b.skip {
                Some(c) => c.forward(g, ps, x),
                None => x,
            };
            x = g.add(skip, h);
        }
        let x = g.leaky_relu(x, LEAK);
        let x = self.head.forward(g, ps, x);
        Ok(g.tanh(x))
    }

    /// Denormalization maps of one injection in evaluation mode.
    pub fn fuse_content_style(
        &self,
        ps: &ParamStore,
        content: &ContentCode,
        style: &StyleVector,
        index: usize,
    ) -> Result<DenormParams> {
        let mut g = Graph::inference();
        let c = content.to_vars(&mut g);
        let sv = g.constant(StyleVector::batch(&vec![style; content.batch_size()]));
        let input = self.fusion_input(&mut g, &c, Some(sv))?;
        let (s, b) = self.fuse_var(&mut g, ps, input, index)?;
        Ok(DenormParams {
            scale: g.value(s).clone(),
            bias: g.value(b).clone(),
        })
    }

    /// Evaluation-mode synthesis of a batch; `styles` has one entry per
    /// content sample.
    pub fn synthesize_batch(
        &self,
        ps: &ParamStore,
        content: &ContentCode,
        styles: &[&StyleVector],
        domain: &DomainId,
        dump: Option<&mut Vec<DenormParams>>,
    ) -> Result<Vec<ImageTensor>> {
        if styles.len() != content.batch_size() {
            return Err(Error::shape(
                "style batch",
                content.batch_size(),
                styles.len(),
            ));
        }
        let mut g = Graph::inference();
        let c = content.to_vars(&mut g);
        let s = g.constant(StyleVector::batch(styles));
        let y = self.forward(&mut g, ps, &c, s, dump)?;
        Ok(ImageTensor::unbatch(g.value(y), domain))
    }

    pub fn synthesize(
        &self,
        ps: &ParamStore,
        content: &ContentCode,
        style: &StyleVector,
        domain: &DomainId,
    ) -> Result<ImageTensor> {
        Ok(self
            .synthesize_batch(ps, content, &[style], domain, None)?
            .remove(0))
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{assemble_stack, encode_depth, Manifest, ModalitySpec};
    use crate::content::ContentEncoder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn cfg() -> ModelConfig {
        ModelConfig {
            width_mult: 0.0625,
            style_dim: 8,
            fusion_hidden: 64,
            ..ModelConfig::default()
        }
    }

    fn setup(res: usize) -> (Generator, ContentEncoder, ParamStore) {
        let cfg = cfg();
        let enc = ContentEncoder::new(&cfg, res, 1);
        let gen = Generator::new(
            &cfg,
            Variant::E,
            res,
            1,
            (enc.level_width(8), enc.level_width(32)),
        );
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        enc.init(&mut ps, &mut rng);
        gen.init(&mut ps, &mut rng);
        (gen, enc, ps)
    }

    fn content(enc: &ContentEncoder, ps: &ParamStore, res: usize) -> ContentCode {
        let m = Manifest::new(vec![ModalitySpec::depth(0.0, 1.0)]).unwrap();
        let d: Vec<f64> = (0..res * res)
            .map(|i| ((i * 13) % 17) as f64 / 16.0)
            .collect();
        let s = assemble_stack(
            vec![Some(encode_depth(&d, res, 0.0, 1.0).unwrap())],
            &m,
            res,
        )
        .unwrap();
        ContentCode::Pyramid(enc.encode(ps, &s).unwrap())
    }

    fn style(seed: u64) -> StyleVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StyleVector::new(Tensor::randn(&[8], 1.0, &mut rng).into_data()).unwrap()
    }

    #[test]
    fn spade_oracle_two_by_two() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let zero = DenormParams {
            scale: Tensor::zeros(&[1, 1, 2, 2]),
            bias: Tensor::zeros(&[1, 1, 2, 2]),
        };
        let y = spade_inject(&x, &zero).unwrap();
        let sigma = 1.25f64.sqrt();
        for (v, raw) in y.data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((v - (raw - 2.5) / sigma).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_yields_bias() {
        let x = Tensor::full(&[1, 2, 3, 3], 4.0);
        let d = DenormParams {
            scale: Tensor::full(&[1, 2, 3, 3], 0.7),
            bias: Tensor::full(&[1, 2, 3, 3], -0.3),
        };
        let y = spade_inject(&x, &d).unwrap();
        assert!(y.data().iter().all(|v| (v + 0.3).abs() < 1e-12));
        let bad = DenormParams {
            scale: Tensor::zeros(&[1, 2, 2, 2]),
            bias: Tensor::zeros(&[1, 2, 3, 3]),
        };
        assert!(spade_inject(&x, &bad).is_err());
    }

    #[test]
    fn synthesis_shape_range_and_style_sensitivity() {
        let (gen, enc, ps) = setup(32);
        let c = content(&enc, &ps, 32);
        let a = gen.synthesize(&ps, &c, &style(1), &"a".into()).unwrap();
        let b = gen.synthesize(&ps, &c, &style(2), &"a".into()).unwrap();
        assert_eq!(a.pixels().shape(), &[3, 32, 32]);
        assert!(a.pixels().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.mean_abs_error(&b) > 0.0);
        assert_eq!(a, gen.synthesize(&ps, &c, &style(1), &"a".into()).unwrap());
    }

    #[test]
    fn style_reaches_every_injection() {
        let (gen, enc, ps) = setup(32);
        let c = content(&enc, &ps, 32);
        assert_eq!(gen.injection_count(), 6);
        for j in 0..gen.injection_count() {
            let z = gen
                .fuse_content_style(&ps, &c, &StyleVector::zeros(8), j)
                .unwrap();
            let s = gen.fuse_content_style(&ps, &c, &style(3), j).unwrap();
            assert_ne!(z, s, "injection {j}");
            assert_ne!(z.norm(), s.norm());
            let r = gen.injection_resolution(j).unwrap();
            assert_eq!(&s.scale.shape()[2..], &[r, r]);
        }
        assert!(matches!(
            gen.fuse_content_style(&ps, &c, &style(3), 6),
            Err(Error::InjectionIndex { index: 6, count: 6 })
        ));
    }

    #[test]
    fn zeroed_fusion_weights_gate_style() {
        let (gen, enc, mut ps) = setup(32);
        let c = content(&enc, &ps, 32);
        let names: Vec<String> = ps
            .names_with_prefix(&Generator::fusion_prefix(2))
            .cloned()
            .collect();
        for n in names {
            let t = ps.get_mut(&n).unwrap();
            let fill = if n.ends_with(".bias.bias") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        let ones = StyleVector::new(vec![1.0; 8]).unwrap();
        let a = gen
            .fuse_content_style(&ps, &c, &StyleVector::zeros(8), 2)
            .unwrap();
        let b = gen.fuse_content_style(&ps, &c, &ones, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.bias.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sixteen_pixel_injection_shape() {
        let (gen, enc, ps) = setup(32);
        let c = content(&enc, &ps, 32);
        let j = (0..gen.injection_count())
            .find(|&j| gen.injection_resolution(j) == Some(16))
            .unwrap();
        let d = gen.fuse_content_style(&ps, &c, &style(1), j).unwrap();
        assert_eq!(d.scale.shape(), &[1, cfg().decoder_width(8), 16, 16]);
    }

    #[test]
    fn missing_level_is_rejected() {
        let (gen, _, ps) = setup(32);
        let mut levels = BTreeMap::new();
        levels.insert(8, Tensor::zeros(&[1, 32, 8, 8]));
        let mut g = Graph::inference();
        let mut vars = PyramidVars {
            levels: BTreeMap::new(),
        };
        vars.levels.insert(8, g.constant(levels[&8].clone()));
        let s = g.constant(Tensor::zeros(&[1, 8]));
        assert!(gen
            .forward(&mut g, &ps, &ContentVars::Pyramid(vars), s, None)
            .is_err());
    }
}
