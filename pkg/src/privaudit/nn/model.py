"""Model construction, forward evaluation, accuracy, and persistence.

A ``ModelSpec`` is an ordered list of layer specs plus the per-example
input shape.  Building a ``Model`` resolves every layer's shapes, so any
inconsistent composition fails at construction, never during a forward
pass.  Persistence is a JSON document: the spec and shapes in the header,
parameter arrays as base64 little-endian float64 payloads.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from privaudit.errors import ConfigError, DataError
from privaudit.seeding import derive_rng

from .layers import (
    BuiltLayer,
    Conv2D,
    Dense,
    Embedding,
    GlobalAvgPool1D,
    LayerSpec,
    build_layer,
    layer_spec_from_dict,
    layer_spec_to_dict,
)
from .losses import LossKind, predict_proba

MODEL_FORMAT = "privaudit-model/1"


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        if any(s < 1 for s in self.input_shape):
            raise ConfigError(f"input shape must be positive, got {self.input_shape}")
        for i, spec in enumerate(self.layers):
            if isinstance(spec, Embedding) and i != 0:
                raise ConfigError(f"layer {i}: embedding may only appear as the first layer")
            if isinstance(spec, GlobalAvgPool1D) and (
                i == 0 or not isinstance(self.layers[i - 1], Embedding)
            ):
                raise ConfigError(
                    f"layer {i}: global_avg_pool1d may only follow an embedding layer"
                )

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer_spec_to_dict(s) for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"input_shape", "layers"}
        if unknown:
            raise ConfigError(f"model spec got unknown keys {sorted(unknown)}")
        try:
            layers = tuple(layer_spec_from_dict(ld) for ld in d["layers"])
            return cls(input_shape=tuple(d["input_shape"]), layers=layers)
        except KeyError as exc:
            raise ConfigError(f"model spec missing key {exc}") from exc


class Model:
    """A built network: resolved layers and their parameter arrays.

    Parameters are only mutated through the optimizer update operations;
    everything else treats a model as a read-only value.
    """

    def __init__(self, spec: ModelSpec, params: list[list[np.ndarray]]):
        self.spec = spec
        self.layers: list[BuiltLayer] = []
        shape = spec.input_shape
        for i, layer_spec in enumerate(spec.layers):
            try:
                built = build_layer(layer_spec, shape)
            except ConfigError as exc:
                raise ConfigError(f"layer {i}: {exc}") from exc
            self.layers.append(built)
            shape = built.out_shape
        self.output_shape = shape
        if len(params) != len(self.layers):
            raise ConfigError(
                f"expected parameters for {len(self.layers)} layers, got {len(params)}"
            )
        for i, (layer, plist) in enumerate(zip(self.layers, params)):
            expected = [p.shape for p in layer.init_params(derive_rng("shape-probe"))]
            got = [p.shape for p in plist]
            if expected != got:
                raise ConfigError(
                    f"layer {i} ({type(layer.spec).__name__}): parameter shapes {got} "
                    f"do not match spec shapes {expected}"
                )
        self.params = params

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.spec.input_shape

    def num_params(self) -> int:
        return sum(p.size for plist in self.params for p in plist)

    def copy(self) -> "Model":
        return Model(self.spec, [[p.copy() for p in plist] for plist in self.params])

    def check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != len(self.input_shape) + 1 or batch.shape[1:] != self.input_shape:
            raise DataError(
                f"batch shape {batch.shape} does not match model input "
                f"(N, {', '.join(map(str, self.input_shape))})"
            )
        return batch

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Pre-loss logits for a batch; deterministic given parameters."""
        x = self.check_batch(batch)
        for layer, plist in zip(self.layers, self.params):
            x, _ = layer.forward(x, plist)
        return x

    def predict_proba(self, batch: np.ndarray, loss: LossKind) -> np.ndarray:
        return predict_proba(self.forward(batch), loss)

    # -- persistence ---------------------------------------------------

    def to_doc(self) -> dict:
        doc = {"format": MODEL_FORMAT, "spec": self.spec.to_dict(), "params": []}
        for plist in self.params:
            doc["params"].append(
                [
                    {
                        "shape": list(p.shape),
                        "dtype": "float64",
                        "data": base64.b64encode(
                            np.ascontiguousarray(p, dtype="<f8").tobytes()
                        ).decode("ascii"),
                    }
                    for p in plist
                ]
            )
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_doc(cls, doc: dict) -> "Model":
        if doc.get("format") != MODEL_FORMAT:
            raise ConfigError(
                f"unsupported model format {doc.get('format')!r}, expected {MODEL_FORMAT!r}"
            )
        spec = ModelSpec.from_dict(doc["spec"])
        params = []
        for plist in doc["params"]:
            arrays = []
            for entry in plist:
                raw = base64.b64decode(entry["data"])
                arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
                arrays.append(arr.reshape(tuple(entry["shape"])))
            params.append(arrays)
        return cls(spec, params)

    @classmethod
    def from_json(cls, text: str) -> "Model":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file is not valid JSON: {exc}") from exc
        return cls.from_doc(doc)


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Glorot-uniform weights, zero biases and embedding padding row.

    Parameters come from one PCG64 stream derived from ``seed``, drawn in
    layer order, so the same seed always yields bit-identical parameters.
    """
    rng = derive_rng("model-init", seed)
    shape = spec.input_shape
    params = []
    for i, layer_spec in enumerate(spec.layers):
        try:
            built = build_layer(layer_spec, shape)
        except ConfigError as exc:
            raise ConfigError(f"layer {i}: {exc}") from exc
        params.append(built.init_params(rng))
        shape = built.out_shape
    return Model(spec, params)


def accuracy(model: Model, features: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> float:
    """Fraction of samples predicted correctly.

    Multi-class models predict the argmax logit (ties go to the lowest
    class index); single-output models predict class 1 when the sigmoid
    probability is >= 0.5, i.e. when the logit is >= 0.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    binary = int(np.prod(model.output_shape)) == 1
    correct = 0
    for start in range(0, n, batch_size):
        logits = model.forward(features[start : start + batch_size])
        if binary:
            pred = (logits.reshape(-1) >= 0.0).astype(np.int64)
        else:
            pred = np.argmax(logits, axis=1)
        correct += int((pred == labels[start : start + batch_size]).sum())
    return correct / n


# convenience for dense-layer unit math: y = act(W x + b) on a single vector
def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str = "identity") -> np.ndarray:
    from .layers import _activate

    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or x.shape != (w.shape[1],):
        raise DataError(f"dense_forward: x shape {x.shape} does not match W shape {w.shape}")
    if b.shape != (w.shape[0],):
        raise DataError(f"dense_forward: b shape {b.shape} does not match W shape {w.shape}")
    return _activate(w @ x + b, activation)
