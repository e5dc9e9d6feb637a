"""Model containers, dataset files, synthetic data, selection states and run logs"""
import json
import os
import struct

import numpy as np
from astropy.table import Table

from .model import LayerGeometry, LayerKind, ModelGraph
from .surrogate import SelectionState, SteepnessSchedule
from .utils import parse_record

__all__ = ["FormatError", "Dataset", "model_to_bytes", "model_from_bytes", "save_model", "load_model",
           "save_dataset", "load_dataset", "synth_dataset", "save_state", "load_state", "read_run_log",
           "run_log_table", "MAGIC"]

MAGIC = b"DFC1"
_HEADER = struct.Struct("<4sI")
_META_KEYS = ("width", "height", "channels", "classes", "count")
_GEOMETRY_FIELDS = ("layer_id", "kind", "c_in", "c_out", "kernel", "stride", "padding", "in_hw", "out_hw",
                    "fan", "rank", "scheme")


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        """Raised when a file does not follow its format

        Parameters
        ----------
        message : `str`
            What is wrong
        offset : `int`, optional
            Byte offset at which the problem was found, by default None
        """
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


def model_to_bytes(model):
    """Serialise a network into the container format

    The layout is the magic ``DFC1``, the little-endian u32 length of a UTF-8 JSON manifest, the manifest and
    then every tensor as little-endian float32 in row-major order, in manifest order.
    """
    layers = []
    for layer in model.layers:
        d = {name: getattr(layer, name) for name in _GEOMETRY_FIELDS}
        d["kind"] = layer.kind.value
        d["in_hw"], d["out_hw"] = list(layer.in_hw), list(layer.out_hw)
        layers.append(d)
    tensors, blobs, offset = [], [], 0
    for layer in model.layers:
        for name, w in model.weights.get(layer.layer_id, {}).items():
            blob = np.ascontiguousarray(w, dtype="<f4").tobytes()
            tensors.append({"layer": layer.layer_id, "name": name, "shape": list(w.shape), "offset": offset,
                            "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    manifest = json.dumps({"input_shape": list(model.input_shape), "n_classes": model.n_classes,
                           "layers": layers, "tensors": tensors}).encode("utf-8")
    return _HEADER.pack(MAGIC, len(manifest)) + manifest + b"".join(blobs)


def model_from_bytes(data):
    """Parse the container format, see :func:`model_to_bytes`

    Raises
    ------
    FormatError
        On any inconsistency, never reading out of bounds
    """
    if len(data) < _HEADER.size:
        raise FormatError(f"File too short for a header ({len(data)} bytes)", offset=0)
    magic, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"Unknown magic {magic!r}, expected {MAGIC!r}", offset=0)
    start = _HEADER.size
    if start + length > len(data):
        raise FormatError(f"Manifest of {length} bytes runs past the end of the file ({len(data)} bytes)",
                          offset=4)
    try:
        manifest = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as e:
        raise FormatError(f"Unreadable manifest: {e}", offset=start) from None
    payload = start + length

    try:
        layers = []
        for d in manifest["layers"]:
            fields = {name: d[name] for name in _GEOMETRY_FIELDS}
            fields["kind"] = LayerKind(fields["kind"])
            fields["in_hw"], fields["out_hw"] = tuple(fields["in_hw"]), tuple(fields["out_hw"])
            for name in ("c_in", "c_out", "kernel", "stride", "padding", "fan", "scheme"):
                fields[name] = _int(fields[name], name)
            fields["rank"] = None if fields["rank"] is None else _int(fields["rank"], "rank")
            layers.append(LayerGeometry(**fields))

        weights, expected = {}, 0
        for t in manifest["tensors"]:
            shape = tuple(_int(n, "shape") for n in t["shape"])
            offset, nbytes = _int(t["offset"], "offset"), _int(t["nbytes"], "nbytes")
            where = f"Tensor '{t['layer']}/{t['name']}'"
            if offset != expected:
                raise FormatError(f"{where} starts at {offset}, expected {expected}",
                                  offset=payload + expected)
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or min(shape, default=1) < 0:
                raise FormatError(f"{where} of shape {shape} cannot span {nbytes} bytes",
                                  offset=payload + offset)
            if payload + offset + nbytes > len(data):
                raise FormatError(f"{where} runs past the end of the file",
                                  offset=payload + offset)
            array = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=payload + offset)
            weights.setdefault(str(t["layer"]), {})[str(t["name"])] = array.reshape(shape).astype(np.float32)
            expected += nbytes
        if payload + expected != len(data):
            raise FormatError(f"Payload holds {len(data) - payload} bytes, the manifest describes {expected}",
                              offset=payload + expected)
        return ModelGraph(layers, weights, manifest["input_shape"], manifest["n_classes"])
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, IndexError, ZeroDivisionError,
            OverflowError) as e:
        raise FormatError(f"Invalid manifest: {e!r}", offset=start) from None


def _int(value, name):
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(f"Field '{name}' must be an integer, got {value!r}")
    return value


def save_model(model, path):
    """Write a network to ``path`` in the container format"""
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path):
    """Read a network written by :func:`save_model`"""
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


class Dataset():
    def __init__(self, pixels, labels, n_classes):
        """A labelled image dataset stored as bytes

        Parameters
        ----------
        pixels : :class:`numpy.ndarray`
            uint8 array of shape (N, C, H, W)
        labels : :class:`numpy.ndarray`
            Integer labels of shape (N,)
        n_classes : `int`
            Number of classes
        """
        self.pixels = np.asarray(pixels, dtype=np.uint8)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.n_classes = int(n_classes)
        if self.pixels.ndim != 4 or self.labels.shape != (len(self.pixels),):
            raise ValueError(f"Pixels {self.pixels.shape} and labels {self.labels.shape} do not conform")
        if len(self.labels) > 0 and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"Labels must lie in [0, {self.n_classes})")
        self._images = None

    def __repr__(self):
        return (f"<{self.__class__.__name__}: {len(self)} samples of shape {self.shape}, "
                f"{self.n_classes} classes>")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        """Shape of a single image (C, H, W)"""
        return self.pixels.shape[1:]

    @property
    def images(self):
        """Images as float32 in [0, 1]"""
        if self._images is None:
            self._images = self.pixels.astype(np.float32) / 255
        return self._images

    def subset(self, indices):
        return Dataset(self.pixels[indices], self.labels[indices], self.n_classes)

    def split(self, fraction, seed=0):
        """Randomly split into two datasets, the first holding ``fraction`` of the samples"""
        assert 0 < fraction < 1, "fraction must lie strictly between 0 and 1"
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(order[:cut]), self.subset(order[cut:])

    def batches(self, batch_size, rng=None, flip=False, crop=0):
        """Iterate over minibatches

        Parameters
        ----------
        batch_size : `int`
            Samples per batch (the last batch may be smaller)
        rng : :class:`numpy.random.Generator`, optional
            Source of randomness for shuffling and augmentation, by default None (fixed order and no
            augmentation)
        flip : `bool`, optional
            Randomly mirror images horizontally, by default False
        crop : `int`, optional
            Zero-pad by this many pixels and randomly crop back to size, by default 0

        Yields
        ------
        images : :class:`numpy.ndarray`
            float32 batch of shape (B, C, H, W)
        labels : :class:`numpy.ndarray`
            int64 labels of shape (B,)
        """
        assert batch_size >= 1, "batch_size must be at least 1"
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            x, y = self.images[idx], self.labels[idx]
            if rng is not None and flip:
                mirror = rng.random(len(idx)) < 0.5
                x = np.where(mirror[:, None, None, None], x[..., ::-1], x)
            if rng is not None and crop > 0:
                h, w = x.shape[2:]
                padded = np.pad(x, ((0, 0), (0, 0), (crop, crop), (crop, crop)))
                dy = rng.integers(0, 2 * crop + 1, size=len(idx))
                dx = rng.integers(0, 2 * crop + 1, size=len(idx))
                x = np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(len(idx))])
            yield x, y


def _meta_path(path):
    return f"{path}.meta"


def save_dataset(dataset, path):
    """Write ``path`` (records of one label byte and C*H*W pixel bytes) and its ``path.meta`` sidecar"""
    c, h, w = dataset.shape
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None],
                              dataset.pixels.reshape(len(dataset), -1)], axis=1)
    with open(path, "wb") as f:
        f.write(records.tobytes())
    with open(_meta_path(path), "w") as f:
        for key, value in zip(_META_KEYS, (w, h, c, dataset.n_classes, len(dataset))):
            f.write(f"{key}={value}\n")


def load_dataset(path):
    """Read a dataset written by :func:`save_dataset`

    Raises
    ------
    FormatError
        If the sidecar is incomplete, the file length disagrees with it or a label is out of range
    """
    meta = {}
    if not os.path.exists(_meta_path(path)):
        raise FormatError(f"Missing sidecar file {_meta_path(path)}")
    with open(_meta_path(path), "r", errors="replace") as f:
        for number, line in enumerate(f):
            line = line.strip()
            if line == "" or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if sep == "" or key.strip() not in _META_KEYS:
                raise FormatError(f"{_meta_path(path)}: unexpected line {number + 1}: {line!r}")
            try:
                meta[key.strip()] = int(value)
            except ValueError:
                raise FormatError(f"{_meta_path(path)}: '{key.strip()}' must be an integer, "
                                  f"got {value!r}") from None
    missing = [key for key in _META_KEYS if key not in meta]
    if missing:
        raise FormatError(f"{_meta_path(path)}: missing keys {missing}")
    if min(meta.values()) < 0 or min(meta["width"], meta["height"], meta["channels"], meta["classes"]) < 1:
        raise FormatError(f"{_meta_path(path)}: sizes must be positive, got {meta}")
    if meta["classes"] > 256:
        raise FormatError(f"{_meta_path(path)}: at most 256 classes fit in a label byte, "
                          f"got {meta['classes']}")

    with open(path, "rb") as f:
        data = f.read()
    record = 1 + meta["channels"] * meta["height"] * meta["width"]
    if len(data) != meta["count"] * record:
        raise FormatError(f"{path}: {len(data)} bytes do not hold {meta['count']} records of {record} bytes",
                          offset=min(len(data), meta["count"] * record))
    records = np.frombuffer(data, dtype=np.uint8).reshape(meta["count"], record)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= meta["classes"])
    if len(bad) > 0:
        raise FormatError(f"{path}: label {labels[bad[0]]} of record {bad[0]} is not below {meta['classes']}",
                          offset=int(bad[0]) * record)
    pixels = records[:, 1:].reshape(meta["count"], meta["channels"], meta["height"], meta["width"])
    return Dataset(pixels.copy(), labels, meta["classes"])


def synth_dataset(seed, shape=(3, 16, 16), n_classes=10, n=2000, noise=24.0, min_separation=6.0,
                  max_tries=100):
    """Generate a separable dataset of noisy class prototypes

    Every class has a prototype image made of a per-channel colour offset and a smooth random pattern;
    samples are the prototype plus Gaussian pixel noise, rounded to bytes. Labels are balanced.

    Parameters
    ----------
    seed : `int`
        Random seed, the output is a deterministic function of it
    shape : `tuple`, optional
        (C, H, W) of an image, by default (3, 16, 16)
    n_classes : `int`, optional
        Number of classes, by default 10
    n : `int`, optional
        Number of samples, must be at least ``n_classes``, by default 2000
    noise : `float`, optional
        Standard deviation of the pixel noise, by default 24
    min_separation : `float`, optional
        Minimum L2 distance between prototypes in units of ``noise``, by default 6
    max_tries : `int`, optional
        How many times to redraw prototypes that are too close, by default 100

    Returns
    -------
    dataset : :class:`Dataset`
    """
    if n < n_classes:
        raise ValueError(f"Need at least one sample per class ({n} < {n_classes})")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    block = max(1, min(h, w) // 4)
    for _ in range(max_tries):
        colour = rng.normal(0, 30, size=(n_classes, c, 1, 1))
        coarse = rng.normal(0, 40, size=(n_classes, c, -(-h // block), -(-w // block)))
        pattern = np.kron(coarse, np.ones((1, 1, block, block)))[:, :, :h, :w]
        prototypes = 128 + colour + pattern
        flat = prototypes.reshape(n_classes, -1)
        distances = np.sqrt(((flat[:, None] - flat[None, :]) ** 2).sum(axis=-1))
        distances[np.diag_indices(n_classes)] = np.inf
        if distances.min() >= min_separation * noise:
            break
    else:
        raise RuntimeError(f"Could not draw prototypes separated by {min_separation} sigma "
                           f"in {max_tries} tries")

    labels = rng.permutation(np.arange(n) % n_classes)
    images = prototypes[labels] + rng.normal(0, noise, size=(n, c, h, w))
    pixels = np.clip(np.rint(images), 0, 255).astype(np.uint8)
    return Dataset(pixels, labels, n_classes)


def save_state(state, path):
    """Write a :class:`~dfc.surrogate.SelectionState` to a ``.npz`` file"""
    arrays = {"scheme": np.array(state.scheme), "mode": np.array(state.mode),
              "schedule": np.array([state.schedule.mu0, state.schedule.alpha, state.schedule.beta,
                                    float(state.schedule.enabled), state.schedule.iteration])}
    for lid, m in state.masks.items():
        arrays[f"mask/{lid}"] = m
    for lid in state.thresholds:
        arrays[f"threshold/{lid}"] = np.array(state.thresholds[lid])
        arrays[f"tau/{lid}"] = np.array(state.tau[lid])
        arrays[f"sigma_max/{lid}"] = np.array(state.sigma_max[lid])
        arrays[f"spectrum/{lid}"] = state.spectra[lid]
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_state(path):
    """Read a selection state written by :func:`save_state`"""
    try:
        with np.load(path, allow_pickle=False) as data:
            mu0, alpha, beta, enabled, iteration = data["schedule"]
            schedule = SteepnessSchedule(mu0, alpha, beta, bool(enabled))
            schedule.iteration = int(iteration)
            fields = {"masks": {}, "thresholds": {}, "tau": {}, "sigma_max": {}, "spectra": {}}
            for key in data.files:
                kind, _, lid = key.partition("/")
                if kind == "mask":
                    fields["masks"][lid] = data[key].astype(np.float64)
                elif kind == "threshold":
                    fields["thresholds"][lid] = float(data[key])
                elif kind in ("tau", "sigma_max"):
                    fields[kind][lid] = float(data[key])
                elif kind == "spectrum":
                    fields["spectra"][lid] = data[key].astype(np.float64)
            return SelectionState(schedule=schedule, scheme=int(data["scheme"]), mode=str(data["mode"]),
                                  **fields)
    except (KeyError, ValueError, OSError) as e:
        raise FormatError(f"{path}: not a selection state ({e})") from None


def read_run_log(path):
    """Parse a run log, skipping malformed lines and an unterminated final line

    Returns
    -------
    records : `list` of `tuple`
        (tag, fields) for every complete record
    """
    records = []
    with open(path, "r", errors="replace") as f:
        for line in f:
            if not line.endswith("\n"):
                break
            tag, fields = parse_record(line)
            if tag is not None:
                records.append((tag, fields))
    return records


def run_log_table(path, columns=("iteration", "loss", "penalty", "flop_ratio", "mu")):
    """The per-iteration records of a run log as an :class:`~astropy.table.Table`"""
    types = [int if c in ("iteration", "epoch") else float for c in columns]
    rows = []
    for tag, fields in read_run_log(path):
        if tag != "iter":
            continue
        try:
            rows.append([t(fields[c]) for c, t in zip(columns, types)])
        except (KeyError, ValueError):
            continue
    return Table({c: np.array([row[i] for row in rows], dtype=t)
                  for i, (c, t) in enumerate(zip(columns, types))})
