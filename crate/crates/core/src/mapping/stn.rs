//! Rigid and non-rigid spatial transformer networks.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::upsample::convex_upsample;
use crate::error::Result;
use crate::io_config::StnConfig;
use crate::nn::{Conv2d, ConvLayer, EqualLinear, FusedLeakyRelu, ParamStore, ResBlock};

/// Residual CNN that regresses four similarity logits from an image.
#[derive(Debug, Clone)]
pub struct RigidStn {
    stem: ConvLayer,
    blocks: Vec<ResBlock>,
    final_conv: ConvLayer,
    fc: EqualLinear,
    fc_act: FusedLeakyRelu,
    out: EqualLinear,
}

impl RigidStn {
    /// The output layer starts at zero, so a fresh network predicts the identity.
    pub fn new(store: &mut ParamStore, cfg: &StnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let slope = cfg.leaky_slope;
        let stem = ConvLayer::new(store, "stem", 3, cfg.rigid_stem, 1, false, true, slope, rng)?;
        let mut blocks = Vec::new();
        let mut c = cfg.rigid_stem;
        for (i, &w) in cfg.rigid_widths.iter().enumerate() {
            blocks.push(ResBlock::new(store, &format!("block{i}"), c, w, true, slope, rng)?);
            c = w;
        }
        let final_conv = ConvLayer::new(store, "final", c, c, 1, false, true, slope, rng)?;
        let fc = EqualLinear::new(store, "fc", c * 16, cfg.rigid_hidden, false, rng)?;
        let fc_act = FusedLeakyRelu::new(store, "fc_act", cfg.rigid_hidden, slope)?;
        let out = EqualLinear::new(store, "out", cfg.rigid_hidden, 4, true, rng)?;
        Ok(Self { stem, blocks, final_conv, fc, fc_act, out })
    }

    /// `(B, 3, R, R)` in `[-1, 1]` -> `(B, 4)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let h = self.final_conv.forward(&h)?.flatten_from(1)?;
        let h = self.fc_act.forward(&self.fc.forward(&h)?)?;
        self.out.forward(&h)
    }
}

/// Output of the non-rigid network.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    /// `(B, 2, G, G)`.
    pub coarse: Tensor,
    /// `(B, 9 f^2, G, G)`.
    pub weights: Tensor,
    /// `(B, 2, H_A, W_A)`, normalized offsets.
    pub dense: Tensor,
}

impl FlowOutput {
    /// Dense flow as `(B, H_A * W_A, 2)` points.
    pub fn points(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dense.dims4()?;
        Ok(self.dense.permute((0, 2, 3, 1))?.reshape((b, h * w, c))?)
    }
}

#[derive(Debug, Clone)]
struct Head {
    hidden: Conv2d,
    out: Conv2d,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(store, &format!("{name}.hidden"), cin, hidden, 3, false, rng)?,
            out: Conv2d::new(store, &format!("{name}.out"), hidden, cout, 3, true, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

/// Residual CNN predicting a coarse flow and its convex upsampling weights.
#[derive(Debug, Clone)]
pub struct NonRigidStn {
    stem: ConvLayer,
    blocks: Vec<ResBlock>,
    flat_block: ResBlock,
    trunk: ConvLayer,
    flow_head: Head,
    weight_head: Head,
    factor: usize,
}

impl NonRigidStn {
    /// Both head outputs start at zero: zero flow, uniform upsampling weights.
    pub fn new(store: &mut ParamStore, cfg: &StnConfig, atlas_res: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let slope = cfg.leaky_slope;
        let factor = atlas_res / cfg.coarse_grid;
        let stem = ConvLayer::new(store, "stem", 3, cfg.nonrigid_stem, 1, false, true, slope, rng)?;
        let mut blocks = Vec::new();
        let mut c = cfg.nonrigid_stem;
        for (i, &w) in cfg.nonrigid_widths.iter().enumerate() {
            blocks.push(ResBlock::new(store, &format!("block{i}"), c, w, true, slope, rng)?);
            c = w;
        }
        let flat_block = ResBlock::new(store, "flat", c, c, false, slope, rng)?;
        let trunk = ConvLayer::new(store, "trunk", c, cfg.nonrigid_trunk, 3, false, true, slope, rng)?;
        let flow_head = Head::new(store, "flow", cfg.nonrigid_trunk, cfg.head_hidden, 2, rng)?;
        let weight_head = Head::new(store, "upw", cfg.nonrigid_trunk, cfg.head_hidden, 9 * factor * factor, rng)?;
        Ok(Self { stem, blocks, flat_block, trunk, flow_head, weight_head, factor })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// `(B, 3, R, R)` congealed images in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<FlowOutput> {
        let mut h = self.stem.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let h = self.trunk.forward(&self.flat_block.forward(&h)?)?;
        let coarse = self.flow_head.forward(&h)?;
        let weights = self.weight_head.forward(&h)?;
        let dense = convex_upsample(&coarse, &weights, self.factor)?;
        Ok(FlowOutput { coarse, weights, dense })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn small_cfg() -> StnConfig {
        StnConfig {
            input_res: 32,
            coarse_grid: 8,
            rigid_stem: 4,
            rigid_widths: vec![4, 8, 8],
            rigid_hidden: 8,
            nonrigid_stem: 4,
            nonrigid_widths: vec![8, 8],
            nonrigid_trunk: 8,
            head_hidden: 8,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn fresh_networks_start_at_identity() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rs = ParamStore::new();
        let rigid = RigidStn::new(&mut rs, &cfg, &mut rng).unwrap();
        let mut ns = ParamStore::new();
        let nonrigid = NonRigidStn::new(&mut ns, &cfg, 32, &mut rng).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let logits = rigid.forward(&x).unwrap();
        assert_eq!(logits.dims(), &[2, 4]);
        assert_eq!(logits.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let out = nonrigid.forward(&x).unwrap();
        assert_eq!(out.coarse.dims(), &[2, 2, 8, 8]);
        assert_eq!(out.weights.dims(), &[2, 144, 8, 8]);
        assert_eq!(out.dense.dims(), &[2, 2, 32, 32]);
        assert_eq!(out.points().unwrap().dims(), &[2, 1024, 2]);
        assert_eq!(out.dense.to_dtype(DType::F64).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }
}
