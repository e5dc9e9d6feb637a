import hashlib

import numpy as np
from ._version import __version__

__all__ = ["print_warning", "print_failure", "print_success", "print_version", "weights_digest",
           "format_record", "parse_record"]


_dfc_name = r"""     _  __
  __| |/ _| ___
 / _` | |_ / __|
| (_| |  _| (__
 \__,_|_|  \___| """

""" ANSI color codes """
RED = "\033[0;31m"
GREEN = "\033[0;32m"
YELLOW = "\033[1;33m"
END = "\033[0m"


def print_warning(*args):
    """Print a warning in yellow, prefixed by WARNING"""
    print(f"{YELLOW}WARNING:{END}", *args)


def print_failure(*args):
    """Print something in red"""
    print(RED, end="")
    print(*args, END)


def print_success(*args):
    """Print something in green"""
    print(GREEN, end="")
    print(*args, END)


def print_version():
    """Print out the current version of `dfc` in a fancy way"""
    print(f'{_dfc_name}version {__version__}')


def weights_digest(weights):
    """Hash a nested dictionary of weight arrays

    Parameters
    ----------
    weights : `dict`
        Mapping of layer id to a dictionary of tensor name to :class:`~numpy.ndarray`

    Returns
    -------
    digest : `str`
        Hex SHA-256 digest that changes if any bit of any tensor changes
    """
    h = hashlib.sha256()
    for layer_id in sorted(weights):
        for name in sorted(weights[layer_id]):
            arr = np.ascontiguousarray(weights[layer_id][name])
            h.update(f"{layer_id}/{name}/{arr.dtype.str}/{arr.shape}".encode())
            h.update(arr.tobytes())
    return h.hexdigest()


def _format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def format_record(tag, **fields):
    """Format a line-delimited log record as ``tag key=value key=value ...``

    Floats are written with 6 decimals so that identical runs give identical lines.
    """
    return " ".join([tag] + [f"{k}={_format_value(v)}" for k, v in fields.items()])


def parse_record(line):
    """Parse a line written by :func:`format_record`

    Parameters
    ----------
    line : `str`
        One line of a run log

    Returns
    -------
    tag : `str` or None
        Record tag, None if the line is malformed
    fields : `dict`
        Mapping of key to string value
    """
    parts = line.strip().split()
    if len(parts) == 0:
        return None, {}
    fields = {}
    for part in parts[1:]:
        if "=" not in part:
            return None, {}
        k, v = part.split("=", 1)
        fields[k] = v
    return parts[0], fields
