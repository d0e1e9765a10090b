"""Workbench for evolving domain generalization: synthetic drifting-domain
benchmarks, a directional prototypical network trained on consecutive-domain
episodes, ERM baselines, exact discrete certification of JS-divergence risk
bounds, and a deterministic experiment harness."""

__version__ = "0.1.0"
