"""Every kernel's backward pass against central finite differences.

The engine is small enough that one wrong sign would silently train garbage;
this demo runs the same suite as ``fairfader grad-check``, then breaks tanh
on purpose to show what a failure looks like.
"""

import numpy as np

from fairfader import functional as F
from fairfader import gradcheck
from fairfader.tensor import _record

print("intact engine")
gradcheck.main(instances=5)


def broken_tanh(x):
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (-g * (1 - y * y),))


print("\nwith a sign error in tanh's adjoint")
F.tanh = broken_tanh
gradcheck.main(instances=5)
