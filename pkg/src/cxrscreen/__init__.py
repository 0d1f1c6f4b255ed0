"""Chest X-ray screening pipeline: dataset catalog, stratified cross-validation,
rotation/translation augmentation, transfer-learning backbones, confusion-matrix
metrics with ROC curves, and convolutional activation panels."""

__version__ = "0.1.0"
