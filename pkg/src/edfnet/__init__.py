"""Fluid models and discrete-event simulation of EDF queueing networks.

Subpackages by concern:

- :mod:`edfnet.grids` -- gridded cumulative measure paths, distances, CSV io
- :mod:`edfnet.reflection` -- Skorokhod maps and the soft-EDF fluid solver
- :mod:`edfnet.hard_fluid` -- hard-EDF (reneging) fluid solvers and checks
- :mod:`edfnet.simulator` -- event-driven prelimit network simulator
- :mod:`edfnet.experiments` -- convergence, martingale and tightness harnesses
- :mod:`edfnet.scenario` -- scenario files, validation and derived inputs
- :mod:`edfnet.cli` -- batch command-line interface
"""

__version__ = "0.1.0"

from .grids import Grid, MeasurePath  # noqa: F401
