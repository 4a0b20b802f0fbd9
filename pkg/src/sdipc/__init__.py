"""Image-to-prompt conversion for latent text-to-image diffusion models."""
