"""FedCPC - federated contrastive predictive coding for speech-based cognitive screening."""

__version__ = "0.1.0"
