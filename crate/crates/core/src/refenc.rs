//! Reference encoding: the lossless latent codec, the frozen global feature
//! encoder, and the multi-scale reference feature pyramid.
//!
//! The codec is a space-to-depth rearrangement followed by a fixed signed,
//! power-of-two-scaled channel permutation. Multiplying by powers of two is
//! exact in floating point, so decode(encode(x)) round-trips bit for bit.

use crate::error::{Error, Result};
use crate::layers::{
    conv_block_forward, conv_forward, create_attention, create_conv, create_conv_block,
    create_linear, linear_forward, semantic_cross_attention, spatial_self_attention,
    ConvBlockSpec,
};
use crate::modelcfg::{ModelConfig, NUM_LEVELS};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{avg_pool, avg_pool_2x2, silu, Tensor};

/// Space-to-depth codec with a fixed invertible channel mixer.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    block: usize,
    /// out[i] = sign[i] * 2^exp[i] * pre[perm[i]]
    perm: Vec<usize>,
    sign: Vec<f64>,
    exp: Vec<i32>,
}

impl LatentCodec {
    /// Codec for RGB images with the given space-to-depth factor. The mixer
    /// is derived from a fixed internal seed, not the run seed: the codec is
    /// a constant of the artifact.
    pub fn new(block: usize) -> LatentCodec {
        let channels = 3 * block * block;
        let mut rng = Rng::new(0x50524F46).split("latent_codec");
        let mut perm: Vec<usize> = (0..channels).collect();
        // Fisher-Yates with the pinned stream.
        for i in (1..channels).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        let sign: Vec<f64> = (0..channels).map(|_| rng.sign()).collect();
        let exp: Vec<i32> = (0..channels)
            .map(|_| [-1, 0, 1][rng.below(3)])
            .collect();
        LatentCodec {
            block,
            perm,
            sign,
            exp,
        }
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn channels(&self) -> usize {
        3 * self.block * self.block
    }

    /// `[3, H, W] -> [3*b*b, H/b, W/b]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(Error::Dim("codec expects [3, H, W]".into()));
        }
        let b = self.block;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % b != 0 || w % b != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by block {}",
                h, w, b
            )));
        }
        let (lh, lw) = (h / b, w / b);
        let c_out = self.channels();
        let mut out = Tensor::zeros(&[c_out, lh, lw]);
        for oc in 0..c_out {
            let src = self.perm[oc];
            let scale = self.sign[oc] * (self.exp[oc] as f64).exp2();
            // Source channel layout: c * b*b + by * b + bx.
            let c = src / (b * b);
            let by = (src / b) % b;
            let bx = src % b;
            for y in 0..lh {
                for x in 0..lw {
                    let v = image.at(&[c, y * b + by, x * b + bx]);
                    out.data_mut()[(oc * lh + y) * lw + x] = scale * v;
                }
            }
        }
        Ok(out)
    }

    /// Exact inverse of [`Self::encode`].
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let b = self.block;
        let c_out = self.channels();
        if latent.shape().len() != 3 || latent.shape()[0] != c_out {
            return Err(Error::Dim(format!(
                "codec decode expects [{}, h, w], got {:?}",
                c_out,
                latent.shape()
            )));
        }
        let (lh, lw) = (latent.shape()[1], latent.shape()[2]);
        let mut out = Tensor::zeros(&[3, lh * b, lw * b]);
        for oc in 0..c_out {
            let src = self.perm[oc];
            let inv_scale = self.sign[oc] * (-(self.exp[oc]) as f64).exp2();
            let c = src / (b * b);
            let by = (src / b) % b;
            let bx = src % b;
            for y in 0..lh {
                for x in 0..lw {
                    let v = latent.data()[(oc * lh + y) * lw + x];
                    *out.at_mut(&[c, y * b + by, x * b + bx]) = inv_scale * v;
                }
            }
        }
        Ok(out)
    }
}

/// Create the frozen global-feature encoder under `global_enc.`.
pub fn create_global_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &Rng) -> Result<()> {
    create_conv(store, "global_enc.conv0", 3, 8, 3, rng)?;
    create_conv(store, "global_enc.conv1", 8, 16, 3, rng)?;
    create_conv(store, "global_enc.conv2", 16, 32, 3, rng)?;
    create_linear(store, "global_enc.proj", 32, cfg.global_dim, rng)
}

/// Global feature of an image: 3 stride-2 convs, global average pool,
/// linear projection to `global_dim`. Frozen at init (CLIP stand-in).
pub fn encode_global(store: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let h = conv_forward(store, "global_enc.conv0", image, 2, 1)?;
    let h = conv_forward(store, "global_enc.conv1", &silu(&h), 2, 1)?;
    let h = conv_forward(store, "global_enc.conv2", &silu(&h), 2, 1)?;
    let pooled = avg_pool(&h, &[1, 2])?;
    let row = pooled.reshape(&[1, 32])?;
    let g = linear_forward(store, "global_enc.proj", &row)?;
    g.reshape(&[store.get("global_enc.proj.bias")?.len()])
}

/// Multi-scale fine-grained features of one reference: one tensor per block,
/// spatial dims halving and channels widening per the model config.
pub type RefPyramid = Vec<Tensor>;

/// Create reference encoder parameters under `refenc.block{j}.`.
pub fn create_reference_encoder(store: &mut ParamStore, cfg: &ModelConfig, rng: &Rng) -> Result<()> {
    let chans = cfg.level_channels();
    let mut c_in = cfg.latent_channels();
    for (j, &c_out) in chans.iter().enumerate() {
        let prefix = format!("refenc.block{j}");
        create_conv_block(
            store,
            &format!("{prefix}.conv"),
            &ConvBlockSpec {
                c_in,
                c_out,
                groups: cfg.groups,
            },
            rng,
        )?;
        create_attention(store, &format!("{prefix}.self_attn"), c_out, c_out, rng)?;
        create_attention(
            store,
            &format!("{prefix}.cross_attn"),
            c_out,
            cfg.global_dim,
            rng,
        )?;
        c_in = c_out;
    }
    Ok(())
}

/// Run one reference latent through the encoder: per block, conv block ->
/// spatial self-attention -> semantic cross-attention against the global
/// feature, downsampling between blocks.
pub fn reference_forward_single(
    store: &ParamStore,
    cfg: &ModelConfig,
    z_r: &Tensor,
    x_r: &Tensor,
) -> Result<RefPyramid> {
    let chans = cfg.level_channels();
    let plan = cfg.downsample_plan();
    let mut pyramid = Vec::with_capacity(NUM_LEVELS);
    let mut h = z_r.clone();
    let mut c_in = cfg.latent_channels();
    for (j, &c_out) in chans.iter().enumerate() {
        let prefix = format!("refenc.block{j}");
        let spec = ConvBlockSpec {
            c_in,
            c_out,
            groups: cfg.groups,
        };
        let mut z = conv_block_forward(store, &format!("{prefix}.conv"), &h, &spec, None)?;
        z = spatial_self_attention(store, &format!("{prefix}.self_attn"), &z, cfg.heads)?;
        z = semantic_cross_attention(store, &format!("{prefix}.cross_attn"), &z, x_r, cfg.heads)?;
        pyramid.push(z.clone());
        if j + 1 < NUM_LEVELS {
            h = if plan[j] { avg_pool_2x2(&z)? } else { z };
        }
        c_in = c_out;
    }
    Ok(pyramid)
}

/// Pyramids for all references; references are processed independently.
pub fn reference_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    z_refs: &[Tensor],
    x_refs: &[Tensor],
) -> Result<Vec<RefPyramid>> {
    if z_refs.len() != x_refs.len() {
        return Err(Error::Dim("reference latent/global count mismatch".into()));
    }
    z_refs
        .iter()
        .zip(x_refs.iter())
        .map(|(z, x)| reference_forward_single(store, cfg, z, x))
        .collect()
}
