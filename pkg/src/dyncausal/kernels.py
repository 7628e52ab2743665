"""Backend selection for the latent RK4 kernels.

The compiled extension is used when it imports; otherwise the NumPy
reference is used. Set ``DYNCAUSAL_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from dyncausal import _rk4_py

python_backend = _rk4_py
compiled_backend = None

if os.environ.get("DYNCAUSAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dyncausal import _rk4 as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if backend is compiled_backend else "python"

rk4_rollout = backend.rk4_rollout
rk4_rollout_vjp = backend.rk4_rollout_vjp
