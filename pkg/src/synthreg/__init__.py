"""Self-supervised pretraining of registration encoders on random image pairs."""

__version__ = "1.0.0"
