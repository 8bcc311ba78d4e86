"""Synthetic pedestrian datasets from a chain of three GANs.

Stages: :mod:`semgan` draws a semantic map, :mod:`instafill` inserts persons,
:mod:`pixsynth` renders the image. :mod:`pipeline` chains them and exports
annotated datasets; :mod:`bench` scores detections against ground truth.
"""

__version__ = "0.1.0"
