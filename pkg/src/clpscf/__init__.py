"""Two-stage anomalous sound detection: machine-ID contrastive pretraining
followed by ArcFace ID-classifier fine-tuning."""

__version__ = "0.1.0"
