"""Token-interaction distillation for toy multimodal sequence models."""

__version__ = "0.1.0"
