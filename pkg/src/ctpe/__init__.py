"""Non-contrast CT pulmonary embolism classification toolkit.

End-to-end pipeline: DICOM series ingestion, NIfTI storage, Hounsfield
windowing and normalization, volume resizing and rotation augmentation,
a from-scratch trainable 3D convolutional network, stratified 5-fold
cross-validated training, and confusion-matrix / ROC evaluation — plus a
deterministic synthetic phantom generator so the whole pipeline runs and
verifies at desk scale.
"""

__version__ = "0.1.0"
