"""Locally elastic stability: sensitivity estimates, leave-one-out oracles and bounds."""

from .data import Dataset, Example, gen_blobs, gen_linear_gaussian, gen_two_cluster
from .errors import InvalidArgument, NumericError, ParseError, UnsupportedOperation
from .models import LossSpec, KernelSpec, TrainedModel

__version__ = "0.1.0"
