"""Tube-guided imitation learning of robust MPC experts for multirotors.

Subpackages and modules:

* ``sim``: rigid-body multirotor simulator with a geometric attitude loop
* ``sets``: axis-aligned boxes, polytopes and Monte-Carlo tube estimation
* ``qp``: operator-splitting convex QP solver with a polishing step
* ``linear_rtmpc``: linear tube MPC expert
* ``nonlinear``: SQP/RTI ancillary NMPC, flip planner and tangential predictors
* ``policy``, ``imitation``: MLP policies, BC/DAgger/DR/SA learning loops
* ``linear_env``, ``flip_env``, ``suite``, ``cli``: tasks, experiments and the CLI
"""
__version__ = "0.1.0"
