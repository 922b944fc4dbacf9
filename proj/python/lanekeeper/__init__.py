"""Python bindings for the lanekeeper core."""

from ._lanekeeper import *  # noqa: F401,F403
from ._lanekeeper import __doc__  # noqa: F401

__version__ = "0.1.0"
