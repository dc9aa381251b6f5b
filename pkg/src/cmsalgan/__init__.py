"""Two-stream RGB-D salient object detection with cross-modality adversarial
feature learning, built on a small numpy autodiff core."""

__version__ = "0.1.0"
