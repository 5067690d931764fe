"""Progressive video salient object detection from image labels and unlabeled video."""

__version__ = "0.1.0"
