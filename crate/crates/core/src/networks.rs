//! Growable generator, mirror discriminator and projection encoder.
//!
//! The generator concatenates all sub-vectors into one linear layer. A
//! branch is frozen by feeding its sub-vector zeros: the matching weight
//! columns then multiply zero inputs and receive exactly zero gradient,
//! while the shared bias keeps training.
//!
//! Parameter naming (stage `s`, blocks `k = 1..s-1`):
//!
//! | network | layers |
//! |---|---|
//! | generator | `g.linear`, `g.block{k}` (+`.norm`), `g.head{s}` |
//! | discriminator | `d.from_rgb{s}` (+`.norm`), `d.block{k}` (+`.norm`), `d.linear` |
//! | encoder | same as the discriminator with prefix `e.` |
//!
//! Growing adds one block and a new output head (generator) or a new input
//! layer (discriminator). The previous head/input layer stays in the
//! parameter store but is no longer part of the forward chain.

use std::collections::BTreeSet;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::latent::BranchedLatent;
use crate::nn::conv::ConvGeom;
use crate::nn::layers::init_params;
use crate::nn::{self, Op, ParamStore, Tape, Tensor};

/// Behaviour shared by all three networks.
pub trait Network {
    fn config(&self) -> &NetConfig;
    fn stage(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Layer chain of the current stage.
    fn ops(&self) -> Vec<Op>;

    /// Names of the parameters used by the current forward chain.
    fn active_params(&self) -> BTreeSet<String> {
        self.ops()
            .iter()
            .flat_map(|op| op.param_specs().into_iter().map(|(k, _, _)| k))
            .collect()
    }
}

fn block_ops(prefix: &str, conv: Op, channels: usize, cfg: &NetConfig) -> Vec<Op> {
    vec![
        conv,
        Op::InstanceNorm {
            name: format!("{prefix}.norm"),
            channels,
            eps: cfg.norm_epsilon,
        },
        Op::LeakyRelu {
            slope: cfg.leaky_slope,
        },
    ]
}

fn generator_ops(cfg: &NetConfig, stage: usize) -> Vec<Op> {
    let res = cfg.resolutions();
    let sched = &cfg.channel_schedule;
    let (h0, w0) = res[0];
    let mut ops = vec![
        Op::Linear {
            name: "g.linear".into(),
            inputs: cfg.latent_dim(),
            outputs: sched[0] * h0 * w0,
        },
        Op::Reshape {
            c: sched[0],
            h: h0,
            w: w0,
        },
    ];
    for k in 1..stage {
        let name = format!("g.block{k}");
        let conv = Op::ConvUp {
            name: name.clone(),
            cin: sched[k - 1],
            cout: sched[k],
            geom: ConvGeom::new(res[k], res[k - 1]),
        };
        ops.extend(block_ops(&name, conv, sched[k], cfg));
    }
    ops.push(Op::ConvUp {
        name: format!("g.head{stage}"),
        cin: sched[stage - 1],
        cout: cfg.output_channels,
        geom: ConvGeom::new(res[stage], res[stage - 1]),
    });
    ops.push(Op::Sigmoid);
    ops
}

/// Downsampling trunk shared by the discriminator and the encoder.
fn mirror_ops(prefix: &str, cfg: &NetConfig, stage: usize, outputs: usize) -> Vec<Op> {
    let res = cfg.resolutions();
    let sched = &cfg.channel_schedule;
    let mut ops = Vec::new();
    let name = format!("{prefix}.from_rgb{stage}");
    let conv = Op::ConvDown {
        name: name.clone(),
        cin: cfg.output_channels,
        cout: sched[stage - 1],
        geom: ConvGeom::new(res[stage], res[stage - 1]),
    };
    ops.extend(block_ops(&name, conv, sched[stage - 1], cfg));
    for k in (1..stage).rev() {
        let name = format!("{prefix}.block{k}");
        let conv = Op::ConvDown {
            name: name.clone(),
            cin: sched[k],
            cout: sched[k - 1],
            geom: ConvGeom::new(res[k], res[k - 1]),
        };
        ops.extend(block_ops(&name, conv, sched[k - 1], cfg));
    }
    let (h0, w0) = res[0];
    ops.push(Op::Flatten);
    ops.push(Op::Linear {
        name: format!("{prefix}.linear"),
        inputs: sched[0] * h0 * w0,
        outputs,
    });
    ops
}

fn encoder_ops(cfg: &NetConfig, stage: usize) -> Vec<Op> {
    let mut ops = mirror_ops("e", cfg, stage, cfg.latent_dim());
    ops.push(Op::Tanh);
    ops
}

fn check_images(cfg: &NetConfig, stage: usize, images: &[Image]) -> Result<()> {
    let expected = cfg.stage_resolution(stage)?;
    for im in images {
        if im.resolution() != expected {
            return Err(Error::ResolutionMismatch {
                expected,
                actual: im.resolution(),
            });
        }
        if im.channels != cfg.output_channels {
            return Err(Error::DimensionMismatch(format!(
                "image has {} channels, expected {}",
                im.channels, cfg.output_channels
            )));
        }
    }
    Ok(())
}

macro_rules! impl_network {
    ($ty:ident, $ops:expr) => {
        impl Network for $ty {
            fn config(&self) -> &NetConfig {
                &self.config
            }
            fn stage(&self) -> usize {
                self.stage
            }
            fn params(&self) -> &ParamStore {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ParamStore {
                &mut self.params
            }
            fn ops(&self) -> Vec<Op> {
                $ops(&self.config, self.stage)
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: NetConfig,
    stage: usize,
    pub params: ParamStore,
}

impl_network!(Generator, generator_ops);

impl Generator {
    pub fn build(config: &NetConfig, stage: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_stage(stage)?;
        let mut params = ParamStore::new();
        init_params(&generator_ops(config, stage), &mut params, config.weight_init_stddev, seed);
        Ok(Generator {
            config: config.clone(),
            stage,
            params,
        })
    }

    /// Reassembles a generator from stored parameters.
    pub fn from_params(config: &NetConfig, stage: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_stage(stage)?;
        let g = Generator {
            config: config.clone(),
            stage,
            params,
        };
        check_param_shapes(&g)?;
        Ok(g)
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.config.resolutions()[self.stage]
    }

    /// Returns the network at `stage + 1`; existing parameters are kept bit-exact.
    pub fn grow(&self, seed: u64) -> Result<Self> {
        if self.stage >= self.config.stages {
            return Err(Error::InvalidStage {
                stage: self.stage + 1,
                stages: self.config.stages,
            });
        }
        let mut next = self.clone();
        next.stage += 1;
        init_params(&next.ops(), &mut next.params, self.config.weight_init_stddev, seed);
        Ok(next)
    }

    /// Parameters introduced by the most recent growth step (the whole
    /// network at stage 1).
    pub fn growth_unit(&self) -> BTreeSet<String> {
        if self.stage == 1 {
            return self.active_params();
        }
        let k = self.stage - 1;
        self.active_params()
            .into_iter()
            .filter(|n| n.starts_with(&format!("g.block{k}.")) || n.starts_with(&format!("g.head{}.", self.stage)))
            .collect()
    }

    pub fn latents_to_tensor(&self, zs: &[BranchedLatent]) -> Result<Tensor> {
        let d = self.config.latent_dim();
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            z.validate(&self.config)?;
            data.extend(z.flatten());
        }
        Ok(Tensor::from_vec(zs.len(), d, 1, 1, data))
    }

    pub fn forward(&self, z: Tensor) -> Tape {
        nn::forward(&self.ops(), &self.params, z)
    }

    pub fn generate(&self, z: &BranchedLatent) -> Result<Image> {
        Ok(self.generate_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn generate_batch(&self, zs: &[BranchedLatent]) -> Result<Vec<Image>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.latents_to_tensor(zs)?;
        let out = nn::infer(&self.ops(), &self.params, z);
        Ok(Image::from_tensor(&out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: NetConfig,
    stage: usize,
    pub params: ParamStore,
}

impl_network!(Discriminator, discriminator_ops);

fn discriminator_ops(cfg: &NetConfig, stage: usize) -> Vec<Op> {
    mirror_ops("d", cfg, stage, 1)
}

impl Discriminator {
    pub fn build(config: &NetConfig, stage: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_stage(stage)?;
        let mut params = ParamStore::new();
        init_params(&discriminator_ops(config, stage), &mut params, config.weight_init_stddev, seed);
        Ok(Discriminator {
            config: config.clone(),
            stage,
            params,
        })
    }

    pub fn from_params(config: &NetConfig, stage: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_stage(stage)?;
        let d = Discriminator {
            config: config.clone(),
            stage,
            params,
        };
        check_param_shapes(&d)?;
        Ok(d)
    }

    pub fn grow(&self, seed: u64) -> Result<Self> {
        if self.stage >= self.config.stages {
            return Err(Error::InvalidStage {
                stage: self.stage + 1,
                stages: self.config.stages,
            });
        }
        let mut next = self.clone();
        next.stage += 1;
        init_params(&next.ops(), &mut next.params, self.config.weight_init_stddev, seed);
        Ok(next)
    }

    pub fn forward(&self, x: Tensor) -> Tape {
        nn::forward(&self.ops(), &self.params, x)
    }

    /// One logit per image.
    pub fn discriminate(&self, images: &[Image]) -> Result<Vec<f32>> {
        check_images(&self.config, self.stage, images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = Image::to_tensor(images)?;
        Ok(nn::infer(&self.ops(), &self.params, x).data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: NetConfig,
    stage: usize,
    pub params: ParamStore,
}

impl_network!(Encoder, encoder_ops);

impl Encoder {
    pub fn build(config: &NetConfig, stage: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        config.check_stage(stage)?;
        let mut params = ParamStore::new();
        init_params(&encoder_ops(config, stage), &mut params, config.weight_init_stddev, seed);
        Ok(Encoder {
            config: config.clone(),
            stage,
            params,
        })
    }

    pub fn from_params(config: &NetConfig, stage: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_stage(stage)?;
        let e = Encoder {
            config: config.clone(),
            stage,
            params,
        };
        check_param_shapes(&e)?;
        Ok(e)
    }

    pub fn forward(&self, x: Tensor) -> Tape {
        nn::forward(&self.ops(), &self.params, x)
    }

    pub fn encode(&self, image: &Image) -> Result<BranchedLatent> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<BranchedLatent>> {
        check_images(&self.config, self.stage, images)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let out = nn::infer(&self.ops(), &self.params, Image::to_tensor(images)?);
        (0..out.n)
            .map(|i| BranchedLatent::from_flat(&self.config, out.item(i)))
            .collect()
    }
}

fn check_param_shapes<N: Network>(net: &N) -> Result<()> {
    for op in net.ops() {
        for (key, shape, _) in op.param_specs() {
            match net.params().get(&key) {
                Some(p) if p.shape == shape && p.data.len() == shape.iter().product::<usize>() => {}
                Some(p) => {
                    return Err(Error::DimensionMismatch(format!(
                        "parameter {key} has shape {:?}, expected {shape:?}",
                        p.shape
                    )))
                }
                None => return Err(Error::DimensionMismatch(format!("missing parameter {key}"))),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::latent::{sample_latent, SamplePolicy};

    #[test]
    fn paper256_shapes_follow_tables() {
        let cfg = Profile::Paper256.net_config();
        let ops = generator_ops(&cfg, 5);
        let Op::Linear { inputs, outputs, .. } = &ops[0] else { panic!() };
        assert_eq!((*inputs, *outputs), (150, 32768));
        let ups: Vec<(usize, usize, (usize, usize))> = ops
            .iter()
            .filter_map(|op| match op {
                Op::ConvUp { cin, cout, geom, .. } => Some((*cin, *cout, geom.big)),
                _ => None,
            })
            .collect();
        assert_eq!(
            ups,
            vec![
                (512, 256, (16, 16)),
                (256, 128, (32, 32)),
                (128, 64, (64, 64)),
                (64, 64, (128, 128)),
                (64, 3, (256, 256)),
            ]
        );
        let downs: Vec<(usize, usize, (usize, usize))> = discriminator_ops(&cfg, 5)
            .iter()
            .filter_map(|op| match op {
                Op::ConvDown { cin, cout, geom, .. } => Some((*cin, *cout, geom.small)),
                _ => None,
            })
            .collect();
        assert_eq!(
            downs,
            vec![
                (3, 64, (128, 128)),
                (64, 64, (64, 64)),
                (64, 128, (32, 32)),
                (128, 256, (16, 16)),
                (256, 512, (8, 8)),
            ]
        );
        let Some(Op::Linear { inputs, outputs, .. }) = discriminator_ops(&cfg, 5).last().cloned() else {
            panic!()
        };
        assert_eq!((inputs, outputs), (32768, 1));
    }

    #[test]
    fn paper400x300_reshapes_to_5x7() {
        let cfg = Profile::Paper400x300.net_config();
        let ops = generator_ops(&cfg, 6);
        assert_eq!(ops[1], Op::Reshape { c: 512, h: 5, w: 7 });
        let Op::ConvUp { geom, cout, .. } = &ops[ops.len() - 2] else { panic!() };
        assert_eq!((geom.big, *cout), ((300, 400), 3));
    }

    #[test]
    fn desk_generator_outputs_32px_and_unit_range() {
        let cfg = NetConfig::desk();
        let g = Generator::build(&cfg, 3, 1).unwrap();
        let z = sample_latent(&cfg, &SamplePolicy::uniform(3), 4).unwrap();
        let im = g.generate(&z).unwrap();
        assert_eq!((im.channels, im.height, im.width), (3, 32, 32));
        assert!(im.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(Generator::build(&cfg, 0, 1).is_err());
        assert!(Generator::build(&cfg, 4, 1).is_err());
    }

    #[test]
    fn zero_latent_gives_flat_gray() {
        let cfg = NetConfig::desk();
        for stage in 1..=3 {
            let g = Generator::build(&cfg, stage, 9).unwrap();
            let im = g.generate(&BranchedLatent::zeros(&cfg)).unwrap();
            assert!(im.data.iter().all(|v| *v == 0.5), "stage {stage}");
        }
    }

    #[test]
    fn grow_preserves_and_extends() {
        let cfg = NetConfig::desk();
        let g1 = Generator::build(&cfg, 1, 2).unwrap();
        assert_eq!(g1.resolution(), (8, 8));
        let g2 = g1.grow(3).unwrap();
        assert_eq!(g2.resolution(), (16, 16));
        for (k, v) in &g1.params {
            assert_eq!(&g2.params[k], v, "{k}");
        }
        assert_eq!(
            g2.growth_unit(),
            ["g.block1.b", "g.block1.norm.offset", "g.block1.norm.scale", "g.block1.w", "g.head2.b", "g.head2.w"]
                .into_iter()
                .map(String::from)
                .collect()
        );
        let g3 = g2.grow(4).unwrap();
        assert!(g3.grow(5).is_err());

        // the retained prefix (linear + reshape) computes the same activation
        let z = sample_latent(&cfg, &SamplePolicy::uniform(3), 1).unwrap();
        let t2 = g2.forward(g2.latents_to_tensor(std::slice::from_ref(&z)).unwrap());
        let t3 = g3.forward(g3.latents_to_tensor(&[z]).unwrap());
        // ops: linear, reshape, block1 (conv, norm, lrelu) -> activation index 5 is block1 output
        assert_eq!(t2.activation(5).data, t3.activation(5).data);
    }

    #[test]
    fn discriminator_mirrors_generator_resolution() {
        let cfg = NetConfig::desk();
        for stage in 1..=3 {
            let g = Generator::build(&cfg, stage, 1).unwrap();
            let d = Discriminator::build(&cfg, stage, 1).unwrap();
            let zs: Vec<_> = (0..4)
                .map(|s| sample_latent(&cfg, &SamplePolicy::uniform(3), s).unwrap())
                .collect();
            let ims = g.generate_batch(&zs).unwrap();
            assert_eq!(d.discriminate(&ims).unwrap().len(), 4);
        }
        let d = Discriminator::build(&cfg, 2, 1).unwrap();
        let wrong = Image::filled(3, 8, 8, 0.5);
        assert!(matches!(d.discriminate(&[wrong]), Err(Error::ResolutionMismatch { .. })));
        let grown = d.grow(7).unwrap();
        for (k, v) in &d.params {
            assert_eq!(&grown.params[k], v);
        }
        assert!(grown.params.contains_key("d.from_rgb3.w"));
        assert!(grown.params.contains_key("d.block2.w"));
    }

    #[test]
    fn encoder_returns_boxed_latent_of_right_shape() {
        let cfg = NetConfig::desk();
        let g = Generator::build(&cfg, 3, 1).unwrap();
        let e = Encoder::build(&cfg, 3, 2).unwrap();
        let z = sample_latent(&cfg, &SamplePolicy::uniform(3), 5).unwrap();
        let back = e.encode(&g.generate(&z).unwrap()).unwrap();
        back.validate(&cfg).unwrap();
        assert_eq!(back.subvectors.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 8]);
        assert!(e.encode(&Image::filled(3, 16, 16, 0.1)).is_err());
    }

    #[test]
    fn from_params_rejects_missing_tensors() {
        let cfg = NetConfig::desk();
        let g = Generator::build(&cfg, 2, 1).unwrap();
        let mut params = g.params.clone();
        params.remove("g.head2.w");
        assert!(Generator::from_params(&cfg, 2, params).is_err());
        assert!(Generator::from_params(&cfg, 2, g.params.clone()).is_ok());
    }
}
