//! Convolutional autoencoder mapping 32x32 RGB images to a 4-channel 8x8
//! latent grid and back. The denoiser operates entirely in this latent
//! space; reconstruction quality therefore upper-bounds everything the
//! sampler can produce.

use crate::error::{Error, Result};
use crate::nn::{self, init_conv, Ctx, ParamStore};
use crate::tensor::rng::{Rng, StreamKind};
use crate::tensor::tape::{Graph, NodeId};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_SIDE: usize = 8;

const ENC_MID: [usize; 2] = [16, 32];

/// Fixed-architecture autoencoder; all state lives in the parameter store
/// under the `ae.` prefix.
#[derive(Debug, Clone, Copy, Default)]
pub struct Autoencoder;

impl Autoencoder {
    pub fn init_params(seed: u64) -> ParamStore {
        let mut rng = Rng::stream(seed, StreamKind::Init, 2);
        let mut s = ParamStore::new();
        init_conv(&mut s, "ae.enc.conv1", 3, ENC_MID[0], 3, &mut rng);
        init_conv(&mut s, "ae.enc.conv2", ENC_MID[0], ENC_MID[1], 3, &mut rng);
        init_conv(&mut s, "ae.enc.conv3", ENC_MID[1], LATENT_CHANNELS, 3, &mut rng);
        init_conv(&mut s, "ae.dec.conv1", LATENT_CHANNELS, ENC_MID[1], 3, &mut rng);
        init_conv(&mut s, "ae.dec.conv2", ENC_MID[1], ENC_MID[0], 3, &mut rng);
        init_conv(&mut s, "ae.dec.conv3", ENC_MID[0], 3, 3, &mut rng);
        s
    }

    /// [3, 32, 32] -> [4, 8, 8].
    pub fn encode(ctx: &mut Ctx, image: NodeId) -> Result<NodeId> {
        let shape = ctx.g.shape(image).to_vec();
        if shape != [3, IMAGE_SIDE, IMAGE_SIDE] {
            return Err(Error::shape(format!(
                "encode expects [3, {IMAGE_SIDE}, {IMAGE_SIDE}], got {shape:?}"
            )));
        }
        let c1 = nn::conv2d(ctx, "ae.enc.conv1", image, 2, 1)?;
        let a1 = ctx.g.gelu(c1);
        let c2 = nn::conv2d(ctx, "ae.enc.conv2", a1, 2, 1)?;
        let a2 = ctx.g.gelu(c2);
        nn::conv2d(ctx, "ae.enc.conv3", a2, 1, 1)
    }

    /// [4, 8, 8] -> [3, 32, 32], unclamped (training compares raw values).
    pub fn decode(ctx: &mut Ctx, latent: NodeId) -> Result<NodeId> {
        let shape = ctx.g.shape(latent).to_vec();
        if shape != [LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE] {
            return Err(Error::shape(format!(
                "decode expects [{LATENT_CHANNELS}, {LATENT_SIDE}, {LATENT_SIDE}], got {shape:?}"
            )));
        }
        let c1 = nn::conv2d(ctx, "ae.dec.conv1", latent, 1, 1)?;
        let a1 = ctx.g.gelu(c1);
        let u1 = ctx.g.upsample2x(a1)?;
        let c2 = nn::conv2d(ctx, "ae.dec.conv2", u1, 1, 1)?;
        let a2 = ctx.g.gelu(c2);
        let u2 = ctx.g.upsample2x(a2)?;
        nn::conv2d(ctx, "ae.dec.conv3", u2, 1, 1)
    }

    /// Mean squared reconstruction error for one image.
    pub fn recon_loss(ctx: &mut Ctx, image: &Tensor) -> Result<NodeId> {
        let mounted = ctx.g.constant(image.clone());
        let z = Self::encode(ctx, mounted)?;
        let out = Self::decode(ctx, z)?;
        ctx.g.mse(out, mounted)
    }

    /// Encode one image under frozen parameters.
    pub fn encode_image(store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let mounted = ctx.g.constant(image.clone());
        let z = Self::encode(&mut ctx, mounted)?;
        Ok(g.value(z).clone())
    }

    /// Decode one latent under frozen parameters, clamped into [0, 1] for
    /// image output.
    pub fn decode_latent(store: &ParamStore, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::frozen(&mut g, store);
        let mounted = ctx.g.constant(latent.clone());
        let out = Self::decode(&mut ctx, mounted)?;
        Ok(g.value(out).map(|v| v.clamp(0.0, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Bindings;

    fn toy_image(seed: u64) -> Tensor {
        let mut rng = Rng::seeded(seed);
        let mut t = Tensor::zeros(&[3, IMAGE_SIDE, IMAGE_SIDE]);
        for v in t.data.iter_mut() {
            *v = rng.uniform();
        }
        t
    }

    #[test]
    fn shapes_roundtrip_and_outputs_stay_in_range() {
        let store = Autoencoder::init_params(3);
        let img = toy_image(1);
        let z = Autoencoder::encode_image(&store, &img).unwrap();
        assert_eq!(z.shape, [LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE]);
        let back = Autoencoder::decode_latent(&store, &z).unwrap();
        assert_eq!(back.shape, [3, IMAGE_SIDE, IMAGE_SIDE]);
        assert!(back.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn reconstruction_improves_under_gradient_steps() {
        // A handful of plain SGD steps on a single image must cut the error;
        // this exercises the full encoder/decoder backward path.
        let mut store = Autoencoder::init_params(4);
        let img = toy_image(2);
        let mut first = None;
        let mut last = 0.0f32;
        for _ in 0..10 {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store);
            let loss = Autoencoder::recon_loss(&mut ctx, &img).unwrap();
            let bindings: Bindings = ctx.into_bindings();
            last = g.value(loss).item();
            first.get_or_insert(last);
            g.backward(loss).unwrap();
            store.zero_grads();
            bindings.absorb(&g, &mut store).unwrap();
            let names: Vec<String> = store.names().map(String::from).collect();
            for name in names {
                if let Some(grad) = store.grad(&name) {
                    let grad = grad.to_vec();
                    let t = store.get_mut(&name).unwrap();
                    for (v, gr) in t.data.iter_mut().zip(&grad) {
                        *v -= 2.0 * gr;
                    }
                }
            }
        }
        let start = first.unwrap();
        assert!(last < 0.8 * start, "loss did not improve: {start} -> {last}");
    }

    #[test]
    fn encode_rejects_wrong_shapes() {
        let store = Autoencoder::init_params(5);
        let bad = Tensor::zeros(&[3, 16, 16]);
        assert!(Autoencoder::encode_image(&store, &bad).is_err());
        let bad_latent = Tensor::zeros(&[4, 4, 4]);
        assert!(Autoencoder::decode_latent(&store, &bad_latent).is_err());
    }
}
