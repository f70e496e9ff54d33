"""Multi-scale feature-pyramid CNN classifier for retinal OCT B-scans, built on
a small numpy reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .backbone import MICRO, VGG16, BackboneConfig  # noqa: E402
from .fusion import FusionConfig, build_model  # noqa: E402

__all__ = ["BackboneConfig", "FusionConfig", "MICRO", "VGG16", "build_model", "__version__"]
