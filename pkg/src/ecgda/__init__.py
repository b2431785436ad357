"""Unsupervised domain adaptation for ECG heartbeat classification.

Modules: ``records`` (record format, AAMI mapping, augmentation), ``prep``
(filtering, resampling, segmentation), ``autodiff`` (tape-based reverse-mode
engine and Adam), ``net`` (residual CNN with two heads), ``losses``,
``clusters`` (centroids and confident selection), ``trainer`` (three-stage
pipeline), ``evaluate`` and ``cli``.
"""
from .records import BeatClass, EcgRecord, LabeledDataset, augment, augment_counts, load_record, write_record

__version__ = "0.1.0"

__all__ = ["BeatClass", "EcgRecord", "LabeledDataset", "augment", "augment_counts", "load_record", "write_record",
           "__version__"]
