"""Volumetric semantic segmentation of gray-level volumes, from scratch on numpy.

Subpackages: layer primitives with hand-written backward passes (`layers`),
the modular U-Net builder (`modunet`), the Jaccard-surrogate loss (`losses`),
evaluation metrics and theoretical baselines (`metrics`), the AdaBelief
optimizer and training harnesses (`optim`, `data`, `train`), raw-volume I/O
and tiled inference (`volume_io`), synthetic fixtures (`synthetic`), and the
command-line interface (`cli`).
"""

__version__ = "0.1.0"
