"""Backend selection for the stepping loops.

The compiled core covers the hot path (diagonal quartic potential with a
scalar memory profile); everything else always runs through numpy. Set
MORSEFLOW_FORCE_PYTHON=1 to skip the compiled core even when present.
"""

from __future__ import annotations

import os

from . import _stepcore_py

run_steps_generic = _stepcore_py.run_steps_generic
run_var_steps = _stepcore_py.run_var_steps

if os.environ.get("MORSEFLOW_FORCE_PYTHON", "") == "1":
    _core = _stepcore_py
    HAVE_COMPILED = False
else:
    try:
        from . import _stepcore as _core  # type: ignore[attr-defined]

        HAVE_COMPILED = True
    except ImportError:
        _core = _stepcore_py
        HAVE_COMPILED = False

run_steps = _core.run_steps
BACKEND = "compiled" if HAVE_COMPILED else "python"
