"""Discrete image tokenizer with a latent-diffusion decoder, few-step
consistency decoding and a guided autoregressive token generator, at toy scale."""

__version__ = "0.1.0"
