from . import tensor, linalg, model, surrogate, budget, compressor, realize, io, config, experiments, utils
from ._version import __version__
