"""Policy learning from trajectory optimization: DDP, projected DDP and ADMM-based training."""
__version__ = "0.1.0"
