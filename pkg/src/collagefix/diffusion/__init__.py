"""Dual-denoiser diffusion model at toy scale."""
