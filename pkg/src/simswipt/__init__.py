"""Cell-free massive MIMO SWIPT with stacked-metasurface transceivers.

Library layout:

- channel: wave-optics coupling matrices, phase cascades, large-scale fading,
  Ricean link statistics and sampling.
- estimation: pilot plans and linear MMSE channel estimation under
  contamination.
- precoding: protective zero-forcing / maximum-ratio precoders and their
  normalization factors (exact and approximate).
- performance: closed-form spectral efficiency and harvested energy, the
  nonlinear harvester model, and independent Monte Carlo oracles.
- heuristics: layer-by-layer phase search and the random / equal-phase /
  random-allocation baselines.
- jappa: successive convex programming for joint AP mode selection and power
  allocation, with a self-contained interior-point subproblem solver.
- drl: centralized and decentralized actor-critic learners on a dependency-free
  MLP substrate.
- harness: configs, seeding, topology generation, sweeps, CSV emission, CLI.
"""

__version__ = "0.1.0"
