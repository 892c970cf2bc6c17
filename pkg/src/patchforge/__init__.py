"""Patch-level histopathology classification with atrous dense networks and
reversed active learning, built on a small numpy autodiff engine."""
from patchforge.errors import PatchforgeError
from patchforge.models import build_adn, build_refinenet
from patchforge.tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["PatchforgeError", "Tensor", "backward", "no_grad", "build_adn", "build_refinenet",
           "__version__"]
