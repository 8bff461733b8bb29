"""Multi-agent trajectory prediction with a two-level group-consensus
latent hierarchy, plus synthetic scenario generators, a deterministic
training engine, and an ablation/evaluation harness."""

__version__ = "0.1.0"
