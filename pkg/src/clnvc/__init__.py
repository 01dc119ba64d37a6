"""Voice conversion from mel spectrograms with a quantized content code, a reference style encoder
and contrastive speaker learning on fused hard negatives."""

__version__ = "0.1.0"
