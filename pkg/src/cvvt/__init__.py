"""cvvt: a hybrid 3D-CNN + factorized spatiotemporal attention video
classifier, small enough to train and verify on a single CPU.

The package is self-contained: tensors and reverse-mode autodiff live in
:mod:`cvvt.tensor`, neural-net layers in :mod:`cvvt.nn`, the classifier in
:mod:`cvvt.model`, synthetic video data and file formats in
:mod:`cvvt.data`, training/evaluation/gradient-checking in
:mod:`cvvt.train`, arithmetic cost accounting in :mod:`cvvt.flops`, and the
command-line interface in :mod:`cvvt.cli`.
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
