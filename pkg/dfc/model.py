"""Feedforward network description, forward execution and exact FLOP/parameter accounting"""
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import tensor as T

__all__ = ["LayerKind", "LayerGeometry", "ModelGraph", "forward", "layer_flops", "max_rank", "dense_flops",
           "hard_flops", "param_count", "build_sequential", "build_toy_cnn", "build_mlp", "BN_EPS"]

BN_EPS = 1e-5

# weights that are updated by training (running statistics of batchnorm are not)
TRAINABLE_NAMES = ("weight", "bias", "weight1", "weight2", "gamma", "beta")


class LayerKind(str, Enum):
    CONV = "conv"
    LINEAR = "linear"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    POOL = "pool"
    FLATTEN = "flatten"


@dataclass
class LayerGeometry():
    """Shape metadata of a single layer

    Attributes
    ----------
    layer_id : `str`
        Unique name of the layer
    kind : :class:`LayerKind`
        What the layer computes
    c_in, c_out : `int`
        Input and output channel (or feature) counts
    kernel : `int`
        Square kernel size for convolutions, window size for pooling (0 means global pooling)
    stride, padding : `int`
        Convolution stride and zero padding
    in_hw, out_hw : `tuple`
        Spatial size of the input and output
    fan : `int`
        Number of weights per (input channel, output channel) pair: ``kernel**2`` for convolutions and the
        number of features per input channel for linear layers (``H*W`` after a flatten, otherwise 1)
    rank : `int` or None
        Rank of a factorized conv/linear layer, None when the layer is dense
    scheme : `int`
        Matricization scheme (1 or 2) of a factorized layer
    """
    layer_id: str
    kind: LayerKind
    c_in: int = 0
    c_out: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_hw: tuple = (1, 1)
    out_hw: tuple = (1, 1)
    fan: int = 1
    rank: int = None
    scheme: int = 1

    @property
    def is_compute(self):
        return self.kind in (LayerKind.CONV, LayerKind.LINEAR)

    @property
    def area(self):
        """Output spatial area A (1 for linear layers)"""
        return self.out_hw[0] * self.out_hw[1] if self.kind == LayerKind.CONV else 1

    @property
    def factorized(self):
        return self.rank is not None


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


class ModelGraph():
    def __init__(self, layers, weights, input_shape, n_classes):
        """An ordered chain of layers together with their weights

        Parameters
        ----------
        layers : `list` of :class:`LayerGeometry`
            Layers in execution order
        weights : `dict`
            Map from layer id to a dict of named arrays ("weight"/"bias" for dense layers,
            "weight1"/"weight2"/"bias" for factorized ones, "gamma"/"beta"/"running_mean"/"running_var" for
            batchnorm)
        input_shape : `tuple`
            Shape of a single input, (C, H, W) for images or (F,) for vectors
        n_classes : `int`
            Number of output logits
        """
        self.layers = list(layers)
        self.weights = {lid: {name: np.asarray(w, dtype=np.float32) for name, w in ws.items()}
                        for lid, ws in weights.items()}
        self.input_shape = tuple(int(d) for d in input_shape)
        self.n_classes = int(n_classes)
        self._index = {layer.layer_id: i for i, layer in enumerate(self.layers)}
        if len(self._index) != len(self.layers):
            raise ValueError("Layer ids must be unique")
        self._validate()

    def __repr__(self):
        return (f"<{self.__class__.__name__}: {len(self.compute_layers())} compute layers, "
                f"input {self.input_shape}, {self.n_classes} classes>")

    def __getitem__(self, layer_id):
        return self.layers[self._index[layer_id]]

    def _validate(self):
        flat = len(self.input_shape) == 1
        c = self.input_shape[0]
        hw = (1, 1) if flat else self.input_shape[1:]
        fan = 1
        for layer in self.layers:
            ws = self.weights.get(layer.layer_id, {})
            where = f"layer '{layer.layer_id}'"
            if layer.kind == LayerKind.CONV:
                if flat or c != layer.c_in or tuple(hw) != tuple(layer.in_hw):
                    raise ValueError(f"{where}: expects {layer.c_in} channels at {tuple(layer.in_hw)}, "
                                     f"receives {c} at {tuple(hw)}{' (flattened)' if flat else ''}")
                out = tuple(_conv_out(s, layer.kernel, layer.stride, layer.padding) for s in hw)
                if out != tuple(layer.out_hw) or min(out) < 1:
                    raise ValueError(f"{where}: output size {tuple(layer.out_hw)} inconsistent with {out}")
                if layer.fan != layer.kernel ** 2:
                    raise ValueError(f"{where}: fan {layer.fan} must equal kernel**2")
                c, hw = layer.c_out, out
            elif layer.kind == LayerKind.LINEAR:
                if not flat or c != layer.c_in or fan != layer.fan:
                    raise ValueError(f"{where}: expects {layer.c_in}x{layer.fan} features, "
                                     f"receives {c}x{fan}")
                c, fan = layer.c_out, 1
            elif layer.kind == LayerKind.BATCHNORM:
                if layer.c_in != c or layer.c_out != c:
                    raise ValueError(f"{where}: normalises {layer.c_out} channels but receives {c}")
            elif layer.kind == LayerKind.POOL:
                if flat:
                    raise ValueError(f"{where}: cannot pool a flattened input")
                if layer.kernel == 0:
                    flat, fan, hw = True, 1, (1, 1)
                elif hw[0] % layer.kernel != 0 or hw[1] % layer.kernel != 0:
                    raise ValueError(f"{where}: spatial size {tuple(hw)} not divisible by {layer.kernel}")
                else:
                    hw = (hw[0] // layer.kernel, hw[1] // layer.kernel)
            elif layer.kind == LayerKind.FLATTEN:
                if not flat:
                    flat, fan, hw = True, hw[0] * hw[1], (1, 1)
            self._validate_weights(layer, ws)
        if not flat or c != self.n_classes or fan != 1:
            raise ValueError(f"The network must end in {self.n_classes} logits, "
                             f"it produces {c}x{fan} features")

    def _validate_weights(self, layer, ws):
        where = f"layer '{layer.layer_id}'"
        if layer.kind == LayerKind.CONV or layer.kind == LayerKind.LINEAR:
            k = layer.kernel
            conv = layer.kind == LayerKind.CONV
            if layer.factorized:
                r = layer.rank
                if conv and layer.scheme == 2:
                    expected = {"weight1": (r, layer.c_in, k, 1), "weight2": (layer.c_out, r, 1, k)}
                elif conv:
                    expected = {"weight1": (r, layer.c_in, k, k), "weight2": (layer.c_out, r, 1, 1)}
                else:
                    expected = {"weight1": (r, layer.c_in * layer.fan), "weight2": (layer.c_out, r)}
            else:
                expected = {"weight": (layer.c_out, layer.c_in, k, k) if conv
                            else (layer.c_out, layer.c_in * layer.fan)}
            if "bias" in ws:
                expected["bias"] = (layer.c_out,)
        elif layer.kind == LayerKind.BATCHNORM:
            expected = {name: (layer.c_out,) for name in ("gamma", "beta", "running_mean", "running_var")}
        else:
            expected = {}
        if set(ws) != set(expected):
            raise ValueError(f"{where}: expected weights {sorted(expected)}, got {sorted(ws)}")
        for name, shape in expected.items():
            if ws[name].shape != shape:
                raise ValueError(f"{where}: weight '{name}' has shape {ws[name].shape}, expected {shape}")

    def copy(self):
        """A deep copy of the graph"""
        return ModelGraph([replace(layer) for layer in self.layers],
                          {lid: {name: w.copy() for name, w in ws.items()}
                           for lid, ws in self.weights.items()},
                          self.input_shape, self.n_classes)

    def compute_layers(self):
        """Conv and linear layers in order"""
        return [layer for layer in self.layers if layer.is_compute]

    def prunable_layers(self):
        """Compute layers whose filters may be removed (every one but the classifier)"""
        return self.compute_layers()[:-1]

    def upstream(self, layer_id):
        """The compute layer feeding ``layer_id``, or None for the first one"""
        previous = None
        for layer in self.compute_layers():
            if layer.layer_id == layer_id:
                return previous
            previous = layer
        raise KeyError(f"'{layer_id}' is not a compute layer")

    def following_batchnorm(self, layer_id):
        """The batchnorm layer normalising the output of ``layer_id``, if any"""
        i = self._index[layer_id] + 1
        while i < len(self.layers) and not self.layers[i].is_compute:
            if self.layers[i].kind == LayerKind.BATCHNORM:
                return self.layers[i]
            i += 1
        return None

    def as_tensors(self, trainable=False, dtype=None):
        """Wrap the trainable weights in :class:`~dfc.tensor.Tensor` objects

        Returns
        -------
        tensors : `dict`
            Map from layer id to a dict of named tensors (batchnorm running statistics are left out)
        """
        return {lid: {name: T.Tensor(w, trainable=trainable, name=f"{lid}/{name}", dtype=dtype)
                      for name, w in ws.items() if name in TRAINABLE_NAMES}
                for lid, ws in self.weights.items()}


def _dense(x, layer, weight, bias):
    if layer.kind == LayerKind.CONV:
        out = T.conv2d(x, weight, stride=layer.stride, padding=layer.padding)
        return out if bias is None else out + T.reshape(bias, (1, -1, 1, 1))
    out = T.matmul(x, T.transpose(weight, (1, 0)))
    return out if bias is None else out + bias


def _factorized(x, layer, w1, w2, bias):
    s, p = layer.stride, layer.padding
    if layer.kind == LayerKind.LINEAR:
        out = T.matmul(T.matmul(x, T.transpose(w1, (1, 0))), T.transpose(w2, (1, 0)))
        return out if bias is None else out + bias
    if layer.scheme == 2:
        out = T.conv2d(T.conv2d(x, w1, stride=(s, 1), padding=(p, 0)), w2, stride=(1, s), padding=(0, p))
    else:
        out = T.conv2d(T.conv2d(x, w1, stride=s, padding=p), w2)
    return out if bias is None else out + T.reshape(bias, (1, -1, 1, 1))


def forward(model, batch, weight_override=None, tensors=None):
    """Run a batch through the network

    Parameters
    ----------
    model : :class:`ModelGraph`
        Network to evaluate
    batch : :class:`~dfc.tensor.Tensor` or :class:`numpy.ndarray`
        Inputs of shape (N,) + ``model.input_shape``
    weight_override : `dict`, optional
        Map from the id of a dense conv/linear layer to a replacement weight, by default None
    tensors : `dict`, optional
        Tensors to use in place of the stored weights (see :meth:`ModelGraph.as_tensors`), by default None

    Returns
    -------
    logits : :class:`~dfc.tensor.Tensor`
        Output of shape (N, ``model.n_classes``)
    """
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    if tuple(x.shape[1:]) != model.input_shape:
        raise T.ShapeError(f"Input batch of shape {tuple(x.shape)} does not match the model input "
                           f"{model.input_shape}")
    weight_override = {} if weight_override is None else weight_override
    tensors = model.as_tensors() if tensors is None else tensors

    for layer in model.layers:
        lid = layer.layer_id
        ws = tensors.get(lid, {})
        try:
            if layer.kind == LayerKind.CONV or layer.kind == LayerKind.LINEAR:
                bias = ws.get("bias")
                if lid in weight_override:
                    if layer.factorized:
                        raise ValueError(f"layer '{lid}': cannot override the weight of a factorized layer")
                    w = weight_override[lid]
                    w = w if isinstance(w, T.Tensor) else T.Tensor(w, dtype=x.dtype)
                    x = _dense(x, layer, w, bias)
                elif layer.factorized:
                    x = _factorized(x, layer, ws["weight1"], ws["weight2"], bias)
                else:
                    x = _dense(x, layer, ws["weight"], bias)
            elif layer.kind == LayerKind.BATCHNORM:
                stats = model.weights[lid]
                x = T.batchnorm(x, ws["gamma"], ws["beta"], stats["running_mean"], stats["running_var"],
                                eps=BN_EPS)
            elif layer.kind == LayerKind.RELU:
                x = T.relu(x)
            elif layer.kind == LayerKind.POOL:
                x = T.mean_pool(x, layer.kernel)
            elif layer.kind == LayerKind.FLATTEN:
                x = T.flatten(x)
        except T.ShapeError as e:
            raise T.ShapeError(f"layer '{lid}': {e}") from e
    return x


def _scheme_of(layer, scheme):
    return layer.scheme if scheme is None or layer.factorized else scheme


def layer_flops(layer, c_in=None, c_out=None, rank=None, scheme=None):
    """Multiply-accumulate count of one conv/linear layer

    Parameters
    ----------
    layer : :class:`LayerGeometry`
        Geometry of the layer
    c_in, c_out : `int`, optional
        Channel counts to use instead of the layer's own (e.g. after masking), by default None
    rank : `int`, optional
        Rank of a factorization, by default None (dense)
    scheme : `int`, optional
        Matricization scheme of the factorization, by default the layer's own

    Returns
    -------
    flops : `int`
        ``A r (fan c_in + c_out)`` when factorized (``A r k (c_in + c_out)`` for scheme 2 convolutions),
        ``A fan c_in c_out`` when dense
    """
    c_in = layer.c_in if c_in is None else int(c_in)
    c_out = layer.c_out if c_out is None else int(c_out)
    if rank is None:
        return layer.area * layer.fan * c_in * c_out
    if layer.kind == LayerKind.CONV and _scheme_of(layer, scheme) == 2:
        return layer.area * int(rank) * layer.kernel * (c_in + c_out)
    return layer.area * int(rank) * (layer.fan * c_in + c_out)


def max_rank(layer, c_in=None, c_out=None, scheme=None):
    """Largest feasible rank of a layer's matricized weight"""
    c_in = layer.c_in if c_in is None else int(c_in)
    c_out = layer.c_out if c_out is None else int(c_out)
    if layer.kind == LayerKind.CONV and _scheme_of(layer, scheme) == 2:
        return min(c_out * layer.kernel, c_in * layer.kernel)
    return min(c_out, layer.fan * c_in)


def dense_flops(model):
    """Multiply-accumulate count of the network with every layer dense at its nominal width"""
    return sum(layer.area * layer.fan * layer.c_in * layer.c_out for layer in model.compute_layers())


def hard_flops(model, masks=None, ranks=None, baseline=None, scheme=None):
    """Exact FLOP count for a binary filter selection and integer ranks

    Parameters
    ----------
    model : :class:`ModelGraph`
        Network whose geometry is counted
    masks : `dict`, optional
        Map from layer id to a binary keep vector of length ``c_out``; missing layers keep every filter, by
        default None
    ranks : `dict`, optional
        Map from layer id to an integer rank, or None to count the layer dense. By default each layer's own
        rank is used (None for unfactorized layers)
    baseline : `int`, optional
        Denominator of the ratio, by default :func:`dense_flops` of ``model``
    scheme : `int`, optional
        Matricization scheme assumed for unfactorized layers given a rank, by default their own

    Returns
    -------
    flops : `int`
        Total multiply-accumulate count
    ratio : `float`
        ``flops / baseline``
    """
    masks = {} if masks is None else masks
    total = 0
    previous = None
    for layer in model.compute_layers():
        lid = layer.layer_id
        if lid in masks:
            keep = np.asarray(masks[lid])
            if keep.shape != (layer.c_out,):
                raise ValueError(f"layer '{lid}': mask of shape {keep.shape} for {layer.c_out} filters")
            c_out = int(np.count_nonzero(keep))
        else:
            c_out = layer.c_out
        c_in = layer.c_in if previous is None else previous
        rank = layer.rank if ranks is None else ranks.get(lid)
        if rank is not None:
            bound = max_rank(layer, c_in, c_out, scheme)
            if rank < 0 or rank > bound:
                raise ValueError(f"layer '{lid}': rank {rank} outside [0, {bound}]")
        total += layer_flops(layer, c_in, c_out, rank, scheme)
        previous = c_out
    baseline = dense_flops(model) if baseline is None else baseline
    return int(total), total / baseline


def param_count(model):
    """Number of trainable parameters (weights, biases and batchnorm affine parameters)"""
    return int(sum(w.size for ws in model.weights.values()
                   for name, w in ws.items() if name in TRAINABLE_NAMES))


def build_sequential(input_shape, n_classes, blocks, seed=0, bias=True):
    """Build a randomly initialised feedforward network from a list of blocks

    Parameters
    ----------
    input_shape : `tuple`
        (C, H, W) for images or (F,) for vectors
    n_classes : `int`
        Number of logits, must equal the width of the last block
    blocks : `list` of `tuple`
        Each block is one of ``("conv", c_out, kernel, stride, padding)``, ``("linear", c_out)``,
        ``("bn",)``, ``("relu",)``, ``("pool", kernel)`` (0 for global pooling) or ``("flatten",)``
    seed : `int`, optional
        Seed of the He-normal initialisation, by default 0
    bias : `bool`, optional
        Whether conv/linear layers get a (zero-initialised) bias, by default True

    Returns
    -------
    model : :class:`ModelGraph`
        The network
    """
    rng = np.random.default_rng(seed)
    layers, weights = [], {}
    flat = len(input_shape) == 1
    c = input_shape[0]
    hw = (1, 1) if flat else tuple(input_shape[1:])
    fan = 1
    for i, block in enumerate(blocks):
        kind = block[0]
        if kind == "conv":
            _, c_out, k, stride, pad = block
            out = tuple(_conv_out(s, k, stride, pad) for s in hw)
            lid = f"conv{i}"
            layers.append(LayerGeometry(lid, LayerKind.CONV, c, c_out, k, stride, pad, hw, out, k * k))
            weights[lid] = {"weight": rng.normal(0, np.sqrt(2 / (c * k * k)), size=(c_out, c, k, k))}
            c, hw = c_out, out
        elif kind == "linear":
            c_out = block[1]
            lid = f"linear{i}"
            layers.append(LayerGeometry(lid, LayerKind.LINEAR, c, c_out, fan=fan))
            weights[lid] = {"weight": rng.normal(0, np.sqrt(2 / (c * fan)), size=(c_out, c * fan))}
            c, fan = c_out, 1
        elif kind == "bn":
            lid = f"bn{i}"
            layers.append(LayerGeometry(lid, LayerKind.BATCHNORM, c, c, in_hw=hw, out_hw=hw))
            weights[lid] = {"gamma": np.ones(c), "beta": np.zeros(c),
                            "running_mean": np.zeros(c), "running_var": np.ones(c)}
        elif kind == "relu":
            layers.append(LayerGeometry(f"relu{i}", LayerKind.RELU, c, c, in_hw=hw, out_hw=hw))
        elif kind == "pool":
            k = block[1]
            out = (1, 1) if k == 0 else (hw[0] // k, hw[1] // k)
            layers.append(LayerGeometry(f"pool{i}", LayerKind.POOL, c, c, k, in_hw=hw, out_hw=out))
            if k == 0:
                flat, fan = True, 1
            hw = out
        elif kind == "flatten":
            layers.append(LayerGeometry(f"flatten{i}", LayerKind.FLATTEN, c, c, in_hw=hw, out_hw=(1, 1)))
            if not flat:
                flat, fan, hw = True, hw[0] * hw[1], (1, 1)
        else:
            raise ValueError(f"Unknown block kind '{kind}'")
        if bias and kind in ("conv", "linear"):
            weights[lid]["bias"] = np.zeros(block[1])
    return ModelGraph(layers, weights, input_shape, n_classes)


def build_toy_cnn(input_shape=(3, 16, 16), n_classes=10, channels=(32, 64, 64, 128), batchnorm=True,
                  bias=True, seed=0):
    """A plain VGG-like CNN: 3x3 conv blocks with a 2x2 pool after the second, global pooling and a classifier

    Parameters
    ----------
    input_shape : `tuple`, optional
        (C, H, W), by default (3, 16, 16)
    n_classes : `int`, optional
        Number of classes, by default 10
    channels : `tuple`, optional
        Width of each conv block, by default (32, 64, 64, 128)
    batchnorm : `bool`, optional
        Whether each conv is followed by batchnorm, by default True
    bias : `bool`, optional
        Whether conv/linear layers have a bias, by default True
    seed : `int`, optional
        Initialisation seed, by default 0
    """
    blocks = []
    for i, c_out in enumerate(channels):
        blocks.append(("conv", c_out, 3, 1, 1))
        if batchnorm:
            blocks.append(("bn",))
        blocks.append(("relu",))
        if i == 1:
            blocks.append(("pool", 2))
    blocks += [("pool", 0), ("linear", n_classes)]
    return build_sequential(input_shape, n_classes, blocks, seed=seed, bias=bias)


def build_mlp(n_features, n_classes, hidden=(64,), bias=True, seed=0):
    """A multi-layer perceptron with ReLU activations"""
    blocks = []
    for width in hidden:
        blocks += [("linear", width), ("relu",)]
    blocks.append(("linear", n_classes))
    return build_sequential((n_features,), n_classes, blocks, seed=seed, bias=bias)
