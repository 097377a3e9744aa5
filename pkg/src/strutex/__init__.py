"""Structure/texture disentanglement for cross-domain semantic segmentation.

The package trains a segmenter on a labeled source domain and adapts it to an
unlabeled target domain by splitting every image into a spatial structure code
and a small texture code, aligning segmentation outputs adversarially, and
transferring source labels to source-to-target translated images. Ships with a
procedural two-domain toy corpus so the whole pipeline runs on a desktop.
"""

__version__ = "0.1.0"
