//! Residual 3D encoder-decoder for shape completion.
//!
//! Encoder: `levels` stages of residual blocks, with a stride-2 convolution
//! between stages. Decoder: nearest 2x upsample, 3^3 convolution, skip
//! concatenation, then residual block(s). Head: 1^3 convolution + sigmoid,
//! so outputs are probabilities and match the input extent. Channels double
//! per level from `base_channels`.
//!
//! Residual block: `y = lrelu(skip + conv(lrelu(conv(x))))` with a 1^3
//! projection on the skip path when channel counts differ.
//!
//! Parameters are stored flat, in construction order; that order (and the
//! `name` of each parameter) defines the checkpoint payload layout:
//! encoder level-major (`enc{l}.block{k}.conv1/conv2[/proj]`, then
//! `down{l}` after each non-final level), decoder from the deepest level
//! (`dec{l}.up`, `dec{l}.block{k}...`), and finally `out`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::tape::{NodeId, Tape};
use crate::net::tensor::{Element, Tensor};
use crate::seeds;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub blocks_per_level: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            blocks_per_level: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels < 1 || self.blocks_per_level < 1 {
            return Err(Error::InvalidConfig(format!(
                "model config fields must be >= 1: {self:?}"
            )));
        }
        if self.levels > 8 {
            return Err(Error::InvalidConfig(format!(
                "levels {} unreasonably deep",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims must be divisible by this.
    pub fn dims_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedParam<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

/// The reconstruction network.
#[derive(Debug, Clone)]
pub struct ResUnet3d<E: Element = f64> {
    cfg: ModelConfig,
    params: Vec<NamedParam<E>>,
}

struct ParamCursor(usize);

impl<E: Element> ResUnet3d<E> {
    /// Builds a model with seeded Kaiming-uniform weights and zero biases.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeds::rng(seed, &[seeds::tag::MODEL_INIT]);
        let mut params = Vec::new();
        let mut add_conv = |name: &str, ci: usize, co: usize, k: usize| {
            let fan_in = (ci * k * k * k) as f64;
            let limit = (6.0 / fan_in).sqrt();
            params.push(NamedParam {
                name: format!("{name}.w"),
                value: Tensor::rand_uniform([co, ci, k, k, k], -limit, limit, &mut rng),
            });
            params.push(NamedParam {
                name: format!("{name}.b"),
                value: Tensor::zeros([1, co, 1, 1, 1]),
            });
        };

        let mut walk = StructureWalk::new(cfg);
        while let Some(site) = walk.next_site() {
            add_conv(&site.name, site.ci, site.co, site.k);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[NamedParam<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<E>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        let [_, c, d, h, w] = shape;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "model expects 1 input channel, got {c}"
            )));
        }
        let div = self.cfg.dims_divisor();
        for (axis, &dim) in [d, h, w].iter().enumerate() {
            if dim == 0 || dim % div != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "spatial dim {dim} (axis {axis}) not divisible by {div} (levels {})",
                    self.cfg.levels
                )));
            }
        }
        Ok(())
    }

    /// Runs the network on a tape. Returns the output node (probabilities,
    /// same shape as the input) and the parameter leaf nodes in parameter
    /// order, for gradient extraction.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<E>,
        x: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let out = self.forward_with_param_nodes(tape, x, &param_nodes)?;
        Ok((out, param_nodes))
    }

    /// As [`Self::forward_on_tape`] but with caller-provided parameter leaf
    /// nodes (in parameter order); gradient checks perturb those leaves.
    pub fn forward_with_param_nodes(
        &self,
        tape: &mut Tape<E>,
        x: NodeId,
        param_nodes: &[NodeId],
    ) -> Result<NodeId> {
        self.check_input(tape.shape(x))?;
        if param_nodes.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                param_nodes.len()
            )));
        }
        let cfg = &self.cfg;
        let mut cursor = ParamCursor(0);
        let next_pair = |cur: &mut ParamCursor, expect: &str| -> (NodeId, NodeId) {
            let w = param_nodes[cur.0];
            let b = param_nodes[cur.0 + 1];
            debug_assert!(
                self.params[cur.0].name.starts_with(expect),
                "parameter order drift: expected {expect}, found {}",
                self.params[cur.0].name
            );
            cur.0 += 2;
            (w, b)
        };

        let block = |tape: &mut Tape<E>,
                         cur: &mut ParamCursor,
                         x: NodeId,
                         ci: usize,
                         co: usize,
                         prefix: &str|
         -> Result<NodeId> {
            let (w1, b1) = next_pair(cur, &format!("{prefix}.conv1"));
            let c1 = tape.conv3d(x, w1, b1, 1, 1)?;
            let a1 = tape.leaky_relu(c1, LEAKY_SLOPE);
            let (w2, b2) = next_pair(cur, &format!("{prefix}.conv2"));
            let c2 = tape.conv3d(a1, w2, b2, 1, 1)?;
            let skip = if ci == co {
                x
            } else {
                let (wp, bp) = next_pair(cur, &format!("{prefix}.proj"));
                tape.conv3d(x, wp, bp, 1, 0)?
            };
            let sum = tape.add(skip, c2)?;
            Ok(tape.leaky_relu(sum, LEAKY_SLOPE))
        };

        // Encoder.
        let mut h = x;
        let mut skips: Vec<NodeId> = Vec::with_capacity(cfg.levels - 1);
        for l in 0..cfg.levels {
            let ch = cfg.channels(l);
            for k in 0..cfg.blocks_per_level {
                let ci = if k == 0 {
                    if l == 0 {
                        1
                    } else {
                        ch
                    }
                } else {
                    ch
                };
                h = block(tape, &mut cursor, h, ci, ch, &format!("enc{l}.block{k}"))?;
            }
            if l + 1 < cfg.levels {
                skips.push(h);
                let (wd, bd) = next_pair(&mut cursor, &format!("down{l}"));
                h = tape.conv3d(h, wd, bd, 2, 1)?;
            }
        }

        // Decoder.
        for l in (0..cfg.levels - 1).rev() {
            let ch = cfg.channels(l);
            h = tape.upsample2x(h);
            let (wu, bu) = next_pair(&mut cursor, &format!("dec{l}.up"));
            h = tape.conv3d(h, wu, bu, 1, 1)?;
            h = tape.concat_channels(h, skips[l])?;
            for k in 0..cfg.blocks_per_level {
                let ci = if k == 0 { 2 * ch } else { ch };
                h = block(tape, &mut cursor, h, ci, ch, &format!("dec{l}.block{k}"))?;
            }
        }

        let (wo, bo) = next_pair(&mut cursor, "out");
        let logits = tape.conv3d(h, wo, bo, 1, 0)?;
        let out = tape.sigmoid(logits);
        debug_assert_eq!(cursor.0, param_nodes.len());
        Ok(out)
    }

    /// Inference convenience: forward pass on a private tape.
    pub fn predict(&self, x: Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let (out, _) = self.forward_on_tape(&mut tape, xid, false)?;
        Ok(tape.value(out).clone())
    }
}

/// Canonical enumeration of every convolution site in the network; `new` and
/// `forward_on_tape` both follow this order, which fixes the checkpoint
/// layout.
struct StructureWalk<'c> {
    cfg: &'c ModelConfig,
    sites: Vec<ConvSite>,
    next: usize,
}

struct ConvSite {
    name: String,
    ci: usize,
    co: usize,
    k: usize,
}

impl<'c> StructureWalk<'c> {
    fn new(cfg: &'c ModelConfig) -> Self {
        fn push_block(sites: &mut Vec<ConvSite>, prefix: String, ci: usize, co: usize) {
            sites.push(ConvSite {
                name: format!("{prefix}.conv1"),
                ci,
                co,
                k: 3,
            });
            sites.push(ConvSite {
                name: format!("{prefix}.conv2"),
                ci: co,
                co,
                k: 3,
            });
            if ci != co {
                sites.push(ConvSite {
                    name: format!("{prefix}.proj"),
                    ci,
                    co,
                    k: 1,
                });
            }
        }
        let mut sites = Vec::new();
        for l in 0..cfg.levels {
            let ch = cfg.channels(l);
            for k in 0..cfg.blocks_per_level {
                let ci = if k == 0 {
                    if l == 0 {
                        1
                    } else {
                        ch
                    }
                } else {
                    ch
                };
                push_block(&mut sites, format!("enc{l}.block{k}"), ci, ch);
            }
            if l + 1 < cfg.levels {
                sites.push(ConvSite {
                    name: format!("down{l}"),
                    ci: ch,
                    co: cfg.channels(l + 1),
                    k: 3,
                });
            }
        }
        for l in (0..cfg.levels - 1).rev() {
            let ch = cfg.channels(l);
            sites.push(ConvSite {
                name: format!("dec{l}.up"),
                ci: cfg.channels(l + 1),
                co: ch,
                k: 3,
            });
            for k in 0..cfg.blocks_per_level {
                let ci = if k == 0 { 2 * ch } else { ch };
                push_block(&mut sites, format!("dec{l}.block{k}"), ci, ch);
            }
        }
        sites.push(ConvSite {
            name: "out".into(),
            ci: cfg.base_channels,
            co: 1,
            k: 1,
        });
        Self {
            cfg,
            sites,
            next: 0,
        }
    }

    fn next_site(&mut self) -> Option<&ConvSite> {
        let _ = self.cfg;
        let i = self.next;
        self.next += 1;
        self.sites.get(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_matches_input_shape_and_range() {
        let cfg = ModelConfig::default();
        let model = ResUnet3d::<f64>::new(&cfg, 1).unwrap();
        let mut rng = seeds::rng(0, &[]);
        let x = Tensor::<f64>::rand_uniform([1, 1, 8, 8, 8], 0.0, 1.0, &mut rng);
        let y = model.predict(x.clone()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let cfg = ModelConfig::default(); // divisor 4
        let model = ResUnet3d::<f64>::new(&cfg, 1).unwrap();
        let x = Tensor::<f64>::zeros([1, 1, 6, 8, 8]);
        assert!(matches!(model.predict(x), Err(Error::ShapeMismatch(_))));
        let x2 = Tensor::<f64>::zeros([1, 2, 8, 8, 8]);
        assert!(model.predict(x2).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig::default();
        let a = ResUnet3d::<f64>::new(&cfg, 7).unwrap();
        let b = ResUnet3d::<f64>::new(&cfg, 7).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let c = ResUnet3d::<f64>::new(&cfg, 8).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(c.params())
            .any(|(pa, pc)| pa.value != pc.value));
    }

    #[test]
    fn zeroed_head_gives_one_half_everywhere() {
        let cfg = ModelConfig::default();
        let mut model = ResUnet3d::<f64>::new(&cfg, 3).unwrap();
        let n = model.params().len();
        for p in &mut model.params_mut()[n - 2..] {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::<f64>::filled([1, 1, 8, 8, 8], 1.0);
        let y = model.predict(x).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = ModelConfig::default();
        let model = ResUnet3d::<f64>::new(&cfg, 5).unwrap();
        let mut rng = seeds::rng(2, &[]);
        let x = Tensor::<f64>::rand_uniform([1, 1, 8, 8, 8], 0.0, 1.0, &mut rng);
        let y1 = model.predict(x.clone()).unwrap();
        let y2 = model.predict(x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn single_level_model_works() {
        let cfg = ModelConfig {
            levels: 1,
            base_channels: 4,
            blocks_per_level: 2,
        };
        let model = ResUnet3d::<f64>::new(&cfg, 1).unwrap();
        let x = Tensor::<f64>::filled([1, 1, 5, 5, 5], 0.5);
        let y = model.predict(x).unwrap();
        assert_eq!(y.shape(), [1, 1, 5, 5, 5]);
    }
}
