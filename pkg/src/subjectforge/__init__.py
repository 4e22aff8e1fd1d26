"""subjectforge: desk-scale subject-driven image generation on a synthetic shape world.

A causal multimodal LM is aligned to a frozen toy latent-diffusion image
decoder through a transformer aligner, then instruction-tuned with the
frozen decoder acting as a score signal.
"""

__version__ = "0.1.0"
