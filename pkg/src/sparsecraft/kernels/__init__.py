"""Hot kernels behind the field evaluation.

The compiled Cython extension is used when present; a vectorized numpy
fallback with the identical interface is selected otherwise.  Set
SPARSECRAFT_NO_EXT=1 to force the fallback (used by the benchmark and by
tests that compare the two paths).
"""

import os
import warnings

from . import _reference

if os.environ.get("SPARSECRAFT_NO_EXT"):
    _impl = _reference
    BACKEND = "reference"
else:
    try:
        from . import _hashgrid as _impl

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build
        warnings.warn(
            "sparsecraft compiled kernels not built; falling back to numpy "
            "(build with `pip install -e . --no-build-isolation`)"
        )
        _impl = _reference
        BACKEND = "reference"

hash_encode_forward = _impl.hash_encode_forward
hash_encode_backward = _impl.hash_encode_backward
softplus_forward = _impl.softplus_forward

reference = _reference
