"""Line-JSON embedding bridge: loopback scorer and CLIP-style backends."""

from .loopback import LoopbackBackend
from .protocol import PROTOCOL_VERSION, serve

__version__ = "0.1.0"

__all__ = ["LoopbackBackend", "PROTOCOL_VERSION", "serve", "__version__"]
