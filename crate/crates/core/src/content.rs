//! The shared content encoder: conditioning stack to a three-level feature
//! pyramid.

use std::collections::BTreeMap;

use rand::Rng;
use xlate_tensor::{Graph, Tensor, Var};

use crate::conditioning::ConditioningStack;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv, ParamStore, LEAK, NORM_EPS};

pub const PYRAMID_LEVELS: [usize; 3] = [8, 16, 32];
pub const PREFIX: &str = "content.";

/// Feature maps keyed by resolution, each `[N, C_r, r, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentPyramid {
    levels: BTreeMap<usize, Tensor>,
}

impl ContentPyramid {
    pub fn new(levels: BTreeMap<usize, Tensor>) -> Result<Self> {
        let keys: Vec<usize> = levels.keys().copied().collect();
        if keys != PYRAMID_LEVELS {
            return Err(Error::shape(
                "content pyramid",
                "levels [8, 16, 32]",
                format!("{keys:?}"),
            ));
        }
        for (r, t) in &levels {
            let (_, _, h, w) = t.dims4();
            if (h, w) != (*r, *r) {
                return Err(Error::shape(
                    "content pyramid",
                    format!("{r}x{r}"),
                    format!("{h}x{w}"),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, r: usize) -> Option<&Tensor> {
        self.levels.get(&r)
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.keys().copied().collect()
    }

    pub fn batch_size(&self) -> usize {
        self.levels[&8].shape()[0]
    }

    /// Sample `i` as a batch of one.
    pub fn select(&self, i: usize) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|(r, t)| (*r, t.slice_outer(i, 1)))
                .collect(),
        }
    }

    pub fn stack(parts: &[&ContentPyramid]) -> Self {
        let levels = PYRAMID_LEVELS
            .iter()
            .map(|r| {
                let ts: Vec<Tensor> = parts.iter().map(|p| p.levels[r].clone()).collect();
                (*r, Tensor::stack_outer(&ts))
            })
            .collect();
        Self { levels }
    }

    pub fn all_finite(&self) -> bool {
        self.levels.values().all(Tensor::all_finite)
    }

    pub fn to_vars(&self, g: &mut Graph) -> PyramidVars {
        PyramidVars {
            levels: self
                .levels
                .iter()
                .map(|(r, t)| (*r, g.constant(t.clone())))
                .collect(),
        }
    }
}

/// Pyramid levels living on a tape.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: BTreeMap<usize, Var>,
}

impl PyramidVars {
    pub fn level(&self, r: usize) -> Result<Var> {
        self.levels
            .get(&r)
            .copied()
            .ok_or_else(|| Error::shape("content pyramid", format!("level {r}"), "missing level"))
    }

    pub fn to_pyramid(&self, g: &Graph) -> ContentPyramid {
        ContentPyramid {
            levels: self
                .levels
                .iter()
                .map(|(r, v)| (*r, g.value(*v).clone()))
                .collect(),
        }
    }
}

/// Conv, instance norm, leaky rectifier, conv, instance norm, plus skip.
#[derive(Clone, Debug)]
struct NormResBlock {
    a: Conv,
    b: Conv,
}

impl NormResBlock {
    fn new(prefix: &str, width: usize) -> Self {
        Self {
            a: Conv::same(format!("{prefix}.a"), width, width).no_bias(),
            b: Conv::same(format!("{prefix}.b"), width, width).no_bias(),
        }
    }

    fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R) {
        self.a.init(ps, rng, 1.0);
        self.b.init(ps, rng, 1.0);
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.a.forward(g, ps, x);
        let h = g.instance_norm(h, NORM_EPS);
        let h = g.leaky_relu(h, LEAK);
        let h = self.b.forward(g, ps, h);
        let h = g.instance_norm(h, NORM_EPS);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    resolution: usize,
    down: Conv,
    res: NormResBlock,
}

#[derive(Clone, Debug)]
pub struct ContentEncoder {
    resolution: usize,
    channels: usize,
    level32_after_residual: bool,
    stem: Conv,
    stages: Vec<Stage>,
}

impl ContentEncoder {
    /// Encoder for `channels`-deep stacks at `resolution`, one stride-2 stage
    /// per halving down to 8x8.
    pub fn new(cfg: &ModelConfig, resolution: usize, channels: usize) -> Self {
        let stem = Conv::same("content.stem", channels, cfg.content_width(resolution)).no_bias();
        let mut stages = Vec::new();
        let mut r = resolution;
        while r > 8 {
            let (cin, cout) = (cfg.content_width(r), cfg.content_width(r / 2));
            r /= 2;
            stages.push(Stage {
                resolution: r,
                down: Conv::same(format!("content.down{r}"), cin, cout)
                    .strided(3, 2, 1)
                    .no_bias(),
                res: NormResBlock::new(&format!("content.res{r}"), cout),
            });
        }
        Self {
            resolution,
            channels,
            level32_after_residual: cfg.level32_after_residual,
            stem,
            stages,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.channels
    }

    pub fn level_width(&self, r: usize) -> usize {
        if r == self.resolution {
            return self.stem.cout;
        }
        self.stages
            .iter()
            .find(|s| s.resolution == r)
            .map(|s| s.down.cout)
            .unwrap_or(0)
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamStore, rng: &mut R) {
        self.stem.init(ps, rng, 1.0);
        for s in &self.stages {
            s.down.init(ps, rng, 1.0);
            s.res.init(ps, rng);
        }
    }

    /// `x` is `[N, d, R, R]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<PyramidVars> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != self.channels {
            return Err(Error::shape(
                "content encoder input",
                format!("{} channels", self.channels),
                c,
            ));
        }
        if (h, w) != (self.resolution, self.resolution) {
            return Err(Error::shape(
                "content encoder input",
                format!("{0}x{0}", self.resolution),
                format!("{h}x{w}"),
            ));
        }
        let x = self.stem.forward(g, ps, x);
        let x = g.instance_norm(x, NORM_EPS);
        let mut x = g.leaky_relu(x, LEAK);
        let mut levels = BTreeMap::new();
        if self.resolution == 32 {
            levels.insert(32, x);
        }
        for s in &self.stages {
            let d = s.down.forward(g, ps, x);
            let d = g.instance_norm(d, NORM_EPS);
            let d = g.leaky_relu(d, LEAK);
            if s.resolution == 32 && !self.level32_after_residual {
                levels.insert(32, d);
            }
            x = s.res.forward(g, ps, d);
            if PYRAMID_LEVELS.contains(&s.resolution) && !levels.contains_key(&s.resolution) {
                levels.insert(s.resolution, x);
            }
        }
        Ok(PyramidVars { levels })
    }

    /// Evaluation-mode encoding of one stack.
    pub fn encode(&self, ps: &ParamStore, stack: &ConditioningStack) -> Result<ContentPyramid> {
        self.encode_batch(ps, &[stack])
    }

    pub fn encode_batch(
        &self,
        ps: &ParamStore,
        stacks: &[&ConditioningStack],
    ) -> Result<ContentPyramid> {
        if let Some(s) = stacks.iter().find(|s| s.channels() != self.channels) {
            return Err(Error::shape(
                "conditioning stack",
                format!("{} channels", self.channels),
                s.channels(),
            ));
        }
        let mut g = Graph::inference();
        let x = g.constant(ConditioningStack::batch(stacks));
        let vars = self.forward(&mut g, ps, x)?;
        Ok(vars.to_pyramid(&g))
    }
}

/// Trainable scalar count of the content encoder.
pub fn content_param_count(ps: &ParamStore) -> usize {
    ps.scalar_count(PREFIX)
}
