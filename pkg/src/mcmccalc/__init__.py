"""mcmccalc — calculus for Markov transition maps viewed as functions of
their target distribution, on truncated uniform grids.

The package provides:

* grid measures and weighted norms (:mod:`mcmccalc.measures`),
* accept/reject and two-stage transition kernels (:mod:`mcmccalc.kernels`),
* directional derivatives of the transition map in its target argument,
  with a finite-difference oracle (:mod:`mcmccalc.derivative`),
* line-integral identities and mean-value bounds (:mod:`mcmccalc.calculus`),
* geometric-ergodicity certificates, solutions of the Poisson equation and
  asymptotic variances (:mod:`mcmccalc.ergodicity`),
* reweight/mutate flows for sequential targets (:mod:`mcmccalc.feynman_kac`),
* chain simulators for limiting, sequential and interacting schemes with CLT
  experiments (:mod:`mcmccalc.samplers`),
* a command line driver (:mod:`mcmccalc.cli`).
"""

__version__ = "0.1.0"
