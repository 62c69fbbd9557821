"""Closed-form policies, constraint solvers, brute-force oracles and toy trainers for
quality-constrained entropy maximization (QEMPO / QEMPO-KL) on finite candidate sets."""

__version__ = "0.1.0"
