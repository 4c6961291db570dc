//! Real/fake UNet discriminator and the collocation discriminator.

mod collocation;
mod unet;

pub use collocation::{
    collocation_dis_loss, collocation_g_loss, gather_items, outfit_embedding, sample_negative_batch,
    sample_negative_outfit, sample_negative_sources, CollocationDims, CollocationDis,
};
pub use unet::{dis_loss, gan_loss_g, softplus, DisOutput, UnetDims, UnetDis};
