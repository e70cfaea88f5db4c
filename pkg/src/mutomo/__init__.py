"""Muon scattering tomography: simulation, classical reconstruction and a
learned two-stage reconstructor."""

import os

# quiet, portable default; must be set before numba loads
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
