"""Radar BEV object detection with recurrent attention-gated temporal fusion.

Built on a small numpy autodiff core; see the submodules for the pieces:
``tensor``/``ops``/``conv`` (differentiable ops), ``sim`` (synthetic radar),
``bev`` (pillar projection), ``backbone``, ``fusion``, ``head``, ``metrics``,
``train`` and ``cli``.
"""

from .config import RunConfig, desk_config
from .model import Detector
from .tensor import Tensor, backward_pass

__all__ = ["Detector", "RunConfig", "Tensor", "backward_pass", "desk_config"]
__version__ = "0.1.0"
