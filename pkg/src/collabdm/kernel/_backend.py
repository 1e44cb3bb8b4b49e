"""Pick the kernel implementation at import time.

The compiled extension is used when it imports cleanly, unless the
environment variable ``COLLABDM_PURE_PYTHON`` is set to a non-empty value.
The conv weight gradient always comes from numpy: it is one BLAS
contraction there and beats the compiled loop (see benchmarks/).
"""
import os
from types import SimpleNamespace

from . import _pykernels as python

compiled = None
if not os.environ.get("COLLABDM_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

KERNELS = ("conv2d_forward", "conv2d_backward_input", "conv2d_backward_weight",
           "splitmix_fill", "box_muller")
NUMPY_ALWAYS = ("conv2d_backward_weight",)

if compiled is not None:
    impl = SimpleNamespace(**{name: getattr(python if name in NUMPY_ALWAYS else compiled, name)
                              for name in KERNELS})
else:
    impl = python
NAME = "cython" if compiled is not None else "python"
