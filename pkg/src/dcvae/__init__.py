"""VAE with instance-level contrastive and set-level adversarial objectives: model, training and evaluation."""

__version__ = "0.1.0"
