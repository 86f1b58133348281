"""Matching estimation, permutation testing and sensitivity analysis for the
average causal derivative effect of a continuous exposure."""

__version__ = "0.1.0"
