"""Model persistence: every parameter array plus a JSON description.

Checkpoints are npz archives; float64 arrays round-trip bit-exactly. The
`meta` entry is a JSON document describing the model kind, layer shapes and
the configuration fingerprint of the run that produced it.
"""

import json

import numpy as np

from .dgp import DgpNetwork
from .errors import ContractError
from .kernels import RbfArdKernel
from .mgp import AttributeOrdering, MgpNetwork, _selector
from .svgp import LinearMean, SparseGPLayer, ZeroMean


def _layer_arrays(prefix, layer, arrays, meta):
    arrays[f"{prefix}.inducing"] = layer.inducing.value
    arrays[f"{prefix}.q_mean"] = layer.q_mean.value
    for h, raw in enumerate(layer.q_scale_raw):
        arrays[f"{prefix}.q_scale_{h}"] = raw.value
    if layer.log_noise is not None:
        arrays[f"{prefix}.log_noise"] = layer.log_noise.value
    arrays[f"{prefix}.log_lengthscales"] = layer.kernel.log_lengthscales.value
    arrays[f"{prefix}.log_amplitude"] = layer.kernel.log_amplitude.value
    spec = {
        "n_outputs": layer.n_outputs,
        "input_dim": layer.input_dim,
        "has_noise": layer.log_noise is not None,
        "mean": "zero",
    }
    if isinstance(layer.mean_fn, LinearMean):
        spec["mean"] = "linear"
        arrays[f"{prefix}.mean_weights"] = layer.mean_fn.weights
    meta[prefix] = spec


def _restore_layer(prefix, arrays, spec):
    kernel = RbfArdKernel(spec["input_dim"])
    kernel.log_lengthscales.value[...] = arrays[f"{prefix}.log_lengthscales"]
    kernel.log_amplitude.value[...] = arrays[f"{prefix}.log_amplitude"]
    mean_fn = ZeroMean()
    if spec["mean"] == "linear":
        mean_fn = LinearMean(arrays[f"{prefix}.mean_weights"])
    layer = SparseGPLayer(
        kernel,
        arrays[f"{prefix}.inducing"],
        spec["n_outputs"],
        mean_fn=mean_fn,
        noise_variance=1e-2 if spec["has_noise"] else None,
    )
    layer.inducing.value[...] = arrays[f"{prefix}.inducing"]
    layer.q_mean.value[...] = arrays[f"{prefix}.q_mean"]
    for h in range(spec["n_outputs"]):
        layer.q_scale_raw[h].value[...] = arrays[f"{prefix}.q_scale_{h}"]
    if spec["has_noise"]:
        layer.log_noise.value[...] = arrays[f"{prefix}.log_noise"]
    return layer


def save_model(path, model, config_fingerprint=""):
    """Write a layer, DGP network or MGP network to an npz checkpoint."""
    arrays = {}
    meta = {"fingerprint": config_fingerprint}
    if isinstance(model, SparseGPLayer):
        meta["kind"] = "svgp"
        _layer_arrays("layer0", model, arrays, meta)
        meta["n_layers"] = 1
    elif isinstance(model, DgpNetwork):
        meta["kind"] = "dgp"
        meta["n_layers"] = len(model.layers)
        meta["k_train"] = model.k_train
        meta["k_test"] = model.k_test
        for i, layer in enumerate(model.layers):
            _layer_arrays(f"layer{i}", layer, arrays, meta)
    elif isinstance(model, MgpNetwork):
        meta["kind"] = "mgp"
        meta["n_layers"] = len(model.layers)
        meta["permutation"] = [int(c) for c in model.ordering.permutation]
        meta["has_target"] = model.target_layer is not None
        arrays["ordering_stds"] = model.ordering.stds
        arrays["fill_values"] = model.fill_values
        for i, layer in enumerate(model.layers):
            _layer_arrays(f"layer{i}", layer, arrays, meta)
        if model.target_layer is not None:
            _layer_arrays("target", model.target_layer, arrays, meta)
    else:
        raise ContractError(f"cannot checkpoint {type(model).__name__}")
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_model(path):
    """Inverse of :func:`save_model`; returns (model, fingerprint)."""
    with np.load(path) as payload:
        arrays = {key: payload[key] for key in payload.files}
    meta = json.loads(bytes(arrays.pop("meta")).decode())
    kind = meta["kind"]
    if kind == "svgp":
        model = _restore_layer("layer0", arrays, meta["layer0"])
    elif kind == "dgp":
        layers = [_restore_layer(f"layer{i}", arrays, meta[f"layer{i}"]) for i in range(meta["n_layers"])]
        model = DgpNetwork(layers, k_train=meta["k_train"], k_test=meta["k_test"])
    elif kind == "mgp":
        layers = [_restore_layer(f"layer{i}", arrays, meta[f"layer{i}"]) for i in range(meta["n_layers"])]
        permutation = [int(c) for c in meta["permutation"]]
        ordering = AttributeOrdering(permutation=permutation, stds=arrays["ordering_stds"])
        fill = arrays["fill_values"]
        selectors = [_selector(fill.shape[0], attr) for attr in permutation]
        target = _restore_layer("target", arrays, meta["target"]) if meta.get("has_target") else None
        model = MgpNetwork(ordering, layers, selectors, fill, target_layer=target)
    else:
        raise ContractError(f"unknown checkpoint kind {kind!r}")
    return model, meta.get("fingerprint", "")
