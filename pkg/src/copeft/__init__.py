"""Desk-scale multi-agent BEV detection with parameter-efficient adaptation.

The package is organised around a small float64 autodiff core (`nn_core`),
the fixed collaborative-perception architecture (`pipeline`), the adaptation
modules and freeze policy (`peft`), a synthetic scene generator (`scenes`),
detection metrics (`evaluation`), and an experiment harness with a CLI
(`harness`, `cli`).
"""

__version__ = "0.1.0"
