"""ccdm: a desk-scale lab for studying how fine-tuning capacity controls
training-data memorization in tiny text-conditional diffusion models."""

__version__ = "0.1.0"
