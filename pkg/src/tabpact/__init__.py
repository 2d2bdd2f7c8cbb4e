"""Tabular deep learning with a proximity-aware contextual transformer.

The library provides, from the ground up:

- ``tensor``: float64 tensors with reverse-mode autodiff and a
  finite-difference gradient checker,
- ``tokenizer``: per-feature embedding of numerical, categorical, and
  round-context features into a token sequence,
- ``encoder``: a multi-head self-attention encoder with a CLS readout,
- ``models``: a zoo of five architectures behind one interface,
- ``data``: schemas, CSV ingestion, preprocessing, splits, and a
  synthetic round-spends generator with a planted context signal,
- ``training``: losses, Adam, early-stopped training, multi-seed runs,
  random hyperparameter search, scaling curves, and comparison reports,
- ``cli``: the ``tabpact`` command tying the pipeline together.
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, grad_check  # noqa: F401
