"""Subject-agnostic decoding of synthetic cortical surface maps.

A universal patch autoencoder compresses masked surface maps into a few
latent tokens; a factorization-composition module splits those latents into
a stimulus code and a nuisance code under subject and dataset conditioning,
and zero-shot inference decodes maps of unseen subjects through a surrogate
sweep over the training subjects.
"""
__version__ = "0.1.0"

from .lfcm import DEFAULT

__all__ = ["DEFAULT", "__version__"]
