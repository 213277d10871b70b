"""Multi-view inverse rendering in numpy: network, losses, scenes, geometry and relighting."""

__version__ = "0.1.0"
