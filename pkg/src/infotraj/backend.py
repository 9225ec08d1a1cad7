"""Backend selection for the kernel hot ops.

The compiled extension (`_ckernels`) is used when importable; otherwise
the pure NumPy twin (`_pykernels`) takes over. Selection can be forced:

* ``INFOTRAJ_BACKEND=pure`` or ``INFOTRAJ_BACKEND=fast`` pins a backend
  (``fast`` raises if the extension is missing).
* ``INFOTRAJ_FP_PROFILE=strict`` selects the pure backend so that all
  floating-point reductions go through NumPy's fixed op ordering; the
  compiled path is built with FMA contraction disabled but strict mode
  removes the compiler from the picture entirely.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None


def _select():
    forced = os.environ.get("INFOTRAJ_BACKEND", "").strip().lower()
    strict = os.environ.get("INFOTRAJ_FP_PROFILE", "").strip().lower() == "strict"
    if forced == "pure":
        return _pykernels, "pure"
    if forced == "fast":
        if _ckernels is None:
            raise ImportError(
                "INFOTRAJ_BACKEND=fast but the compiled extension is not "
                "available; reinstall with a C compiler or unset the variable"
            )
        return _ckernels, "fast"
    if forced not in ("", "pure", "fast"):
        raise ValueError(f"unknown INFOTRAJ_BACKEND value: {forced!r}")
    if strict or _ckernels is None:
        return _pykernels, "pure"
    return _ckernels, "fast"


ops, name = _select()

se_gram = ops.se_gram
se_cross = ops.se_cross
se_vec = ops.se_vec
mean_one = ops.mean_one
mean_quad_one = ops.mean_quad_one
mean_multi = ops.mean_multi


def available_backends():
    """Names of importable backends, fastest first."""
    out = []
    if _ckernels is not None:
        out.append("fast")
    out.append("pure")
    return out
