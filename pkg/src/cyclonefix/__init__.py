"""Sub-grid tropical-cyclone centre refinement and region-aware intensity tools.

Modules:

``gridstore``    grids, field cubes, BGC1 files, best-track CSV
``tracker``      kinematic steering-flow tracker
``density``      truncated-Gaussian centre densities, KL, decoding
``correction``   numpy conv net that corrects prior densities
``intensity``    patch-merged region partition and per-region max wind
``synth``        parametric synthetic vortex world
``evalharness``  track/wind error metrics, tables and comparisons
``benchmark``    seeded synthetic benchmarks used by tests and demos
``cli``          ``cyclonefix`` command line
"""

__version__ = "0.1.0"
