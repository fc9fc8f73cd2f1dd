"""Model definition, training, persistence, and threshold profiling.

A model is an ordered list of layer specs plus the weight tensors of its
parametric layers. Inference and gradients are composed from the layer
functions in :mod:`stochdet.nn`. The reference pass (``predict``) never
applies masks; noisy passes supply per-layer weight masks or activation
noise factors through ``forward_trace``.

The container format is a JSON manifest (architecture, shapes, byte
offsets) followed by a little-endian float64 weight blob.

Filter granularity for profiling and sparsification: one output channel's
3-d kernel for conv layers, one output row for dense layers.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset
from .rng import substream

PARAMETRIC_KINDS = ("conv2d", "dense")
LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "dense", "softmax")

RATE_GRID_STEPS = 32
RATE_GRID = np.arange(RATE_GRID_STEPS) / RATE_GRID_STEPS

_MAGIC = b"SDMODEL1"


class ModelFormatError(ValueError):
    """Corrupt or inconsistent model container."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class LayerSpec:
    kind: str
    out_channels: int = 0  # conv2d
    kernel: int = 0  # conv2d (square kernels)
    stride: int = 1  # conv2d
    out_features: int = 0  # dense
    noise_eligible: bool = True

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ModelFormatError(f"unknown layer kind {self.kind!r}")


def conv_pool_arch(channels: tuple[int, ...] = (8, 16), kernel: int = 3, class_count: int = 4) -> list[LayerSpec]:
    """conv/relu/pool blocks followed by dense+softmax.

    The first conv is excluded from noise by default: it feeds every later
    feature, and keeping it intact holds benign false positives down. The
    flag stays configurable per layer.
    """
    layers: list[LayerSpec] = []
    for i, ch in enumerate(channels):
        layers.append(LayerSpec("conv2d", out_channels=ch, kernel=kernel, noise_eligible=(i > 0)))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool2d"))
    layers.append(LayerSpec("dense", out_features=class_count))
    layers.append(LayerSpec("softmax"))
    return layers


@dataclass
class Model:
    layers: list[LayerSpec]
    params: dict[int, dict[str, np.ndarray]]  # layer index -> {"w":..., "b":...}
    class_count: int
    input_shape: tuple[int, int, int]
    layer_input_shapes: list[tuple] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.layer_input_shapes:
            self.layer_input_shapes = _propagate_shapes(self.layers, self.params, self.input_shape)

    # ---- inference -------------------------------------------------

    def forward_trace(
        self,
        x: np.ndarray,
        masks: dict[int, np.ndarray] | None = None,
        act_factors: dict[int, np.ndarray] | None = None,
    ) -> "Trace":
        """Run the network, keeping per-layer inputs and caches for backward.

        masks: optional per-layer 0/1 arrays over conv/dense weights.
        act_factors: optional per-layer multiplicative factors applied to
        relu outputs (the activation-noise study mode).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_shape:
            raise nn.ShapeError(f"input shape {x.shape} does not match model input {self.input_shape}")
        inputs: list[np.ndarray] = []
        caches: list[dict] = []
        out = x
        logits: np.ndarray | None = None
        for idx, spec in enumerate(self.layers):
            inputs.append(out)
            cache: dict = {}
            mask = masks.get(idx) if masks else None
            if spec.kind == "conv2d":
                p = self.params[idx]
                out = nn.conv2d_forward(out, p["w"], p["b"], spec.stride, mask=mask, cache=cache)
            elif spec.kind == "relu":
                out = nn.relu_forward(out)
                if act_factors and idx in act_factors:
                    out = out * act_factors[idx]
            elif spec.kind == "maxpool2d":
                out = nn.maxpool2d_forward(out, cache=cache)
            elif spec.kind == "dense":
                p = self.params[idx]
                out = nn.dense_forward(out, p["w"], p["b"], mask=mask)
            elif spec.kind == "softmax":
                logits = out.ravel()
                out = nn.softmax(logits).probs
            caches.append(cache)
        assert logits is not None, "architecture must end in softmax"
        return Trace(model=self, inputs=inputs, caches=caches, masks=masks or {}, logits=logits, probs=out)

    def predict(self, x: np.ndarray) -> nn.ProbVector:
        """Mask-free reference pass; repeated calls agree bitwise."""
        trace = self.forward_trace(x)
        return nn.ProbVector(probs=trace.probs, logits=trace.logits)

    # ---- structure helpers ------------------------------------------

    def parametric_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind in PARAMETRIC_KINDS]

    def filter_matrix(self, layer_idx: int) -> np.ndarray:
        """Weights of one layer as (n_filters, weights_per_filter)."""
        w = self.params[layer_idx]["w"]
        if self.layers[layer_idx].kind == "conv2d":
            return w.reshape(w.shape[0], -1)
        return w

    def output_positions(self, layer_idx: int) -> int:
        """Spatial output positions a filter is applied at (1 for dense)."""
        spec = self.layers[layer_idx]
        if spec.kind == "dense":
            return 1
        c, h, w = self.layer_input_shapes[layer_idx]
        h_out = (h - spec.kernel) // spec.stride + 1
        w_out = (w - spec.kernel) // spec.stride + 1
        return h_out * w_out

    def fingerprint(self) -> str:
        # models are immutable once trained or loaded, so cache after first use
        cached = getattr(self, "_fingerprint", None)
        if cached is not None:
            return cached
        h = hashlib.sha256()
        h.update(json.dumps(_arch_manifest(self.layers), sort_keys=True).encode())
        for idx in self.parametric_layers():
            h.update(self.params[idx]["w"].astype("<f8").tobytes())
            h.update(self.params[idx]["b"].astype("<f8").tobytes())
        object.__setattr__(self, "_fingerprint", h.hexdigest())
        return self._fingerprint

    def clone_with_zeroed(self, masks: dict[int, np.ndarray]) -> "Model":
        """Copy of the model with masked weights physically set to zero."""
        params = {
            i: {"w": p["w"].copy(), "b": p["b"].copy()} for i, p in self.params.items()
        }
        for idx, mask in masks.items():
            params[idx]["w"] = params[idx]["w"] * np.asarray(mask, dtype=np.float64).reshape(
                params[idx]["w"].shape
            )
        return Model(
            layers=[replace(s) for s in self.layers],
            params=params,
            class_count=self.class_count,
            input_shape=self.input_shape,
        )


@dataclass
class Trace:
    model: Model
    inputs: list[np.ndarray]
    caches: list[dict]
    masks: dict[int, np.ndarray]
    logits: np.ndarray
    probs: np.ndarray

    def backward(self, dlogits: np.ndarray, want_param_grads: bool = False):
        """Propagate a gradient seeded at the logits back to the input.

        Returns (dx, param_grads); param_grads is None unless requested.
        """
        grads: dict[int, dict[str, np.ndarray]] | None = {} if want_param_grads else None
        d = np.asarray(dlogits, dtype=np.float64)
        for idx in range(len(self.model.layers) - 1, -1, -1):
            spec = self.model.layers[idx]
            x_in = self.inputs[idx]
            mask = self.masks.get(idx)
            if spec.kind == "softmax":
                continue  # losses are seeded at the logits
            if spec.kind == "conv2d":
                p = self.model.params[idx]
                c, h, w = x_in.shape
                h_out = (h - spec.kernel) // spec.stride + 1
                w_out = (w - spec.kernel) // spec.stride + 1
                d = d.reshape(p["w"].shape[0], h_out, w_out)
                dx, dw, db = nn.conv2d_backward(d, x_in, p["w"], spec.stride, mask=mask, cache=self.caches[idx])
                if grads is not None:
                    grads[idx] = {"w": dw, "b": db}
                d = dx
            elif spec.kind == "relu":
                d = nn.relu_backward(d.reshape(x_in.shape), x_in)
            elif spec.kind == "maxpool2d":
                c, h, w = x_in.shape
                d = nn.maxpool2d_backward(d.reshape(c, h // 2, w // 2), x_in, cache=self.caches[idx])
            elif spec.kind == "dense":
                p = self.model.params[idx]
                dx, dw, db = nn.dense_backward(d.ravel(), x_in, p["w"], mask=mask)
                if grads is not None:
                    grads[idx] = {"w": dw, "b": db}
                d = dx
        return d, grads


def input_gradient(model: Model, x: np.ndarray, loss) -> np.ndarray:
    """d(loss)/d(input) for the dense (mask-free) model."""
    trace = model.forward_trace(x)
    _, dlogits, dx_direct = loss.value_and_grads(trace.logits, trace.probs, x)
    dx, _ = trace.backward(dlogits)
    if dx_direct is not None:
        dx = dx + dx_direct
    return dx


def loss_value(model: Model, x: np.ndarray, loss) -> float:
    trace = model.forward_trace(x)
    value, _, _ = loss.value_and_grads(trace.logits, trace.probs, x)
    return float(value)


# ---------------------------------------------------------------------------
# construction / training


def _propagate_shapes(layers, params, input_shape) -> list[tuple]:
    shapes = []
    shape: tuple = tuple(input_shape)
    for idx, spec in enumerate(layers):
        shapes.append(shape)
        if spec.kind == "conv2d":
            c, h, w = shape
            if h < spec.kernel or w < spec.kernel:
                raise nn.ShapeError(f"layer {idx}: conv kernel {spec.kernel} does not fit input {h}x{w}")
            shape = (
                spec.out_channels,
                (h - spec.kernel) // spec.stride + 1,
                (w - spec.kernel) // spec.stride + 1,
            )
        elif spec.kind == "maxpool2d":
            c, h, w = shape
            if h % 2 or w % 2:
                raise nn.ShapeError(f"layer {idx}: maxpool2d needs even extents, got {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif spec.kind == "dense":
            shape = (spec.out_features,)
    return shapes


def init_model(
    arch: list[LayerSpec], input_shape: tuple[int, int, int], class_count: int, seed: int
) -> Model:
    """He-initialized weights, deterministic in the seed."""
    if arch[-1].kind != "softmax":
        raise ModelFormatError("architecture must end in softmax")
    params: dict[int, dict[str, np.ndarray]] = {}
    shape: tuple = tuple(input_shape)
    for idx, spec in enumerate(arch):
        if spec.kind == "conv2d":
            c_in = shape[0]
            fan_in = c_in * spec.kernel * spec.kernel
            w = substream(seed, "init", idx).normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, c_in, spec.kernel, spec.kernel))
            params[idx] = {"w": w, "b": np.zeros(spec.out_channels)}
            shape = (
                spec.out_channels,
                (shape[1] - spec.kernel) // spec.stride + 1,
                (shape[2] - spec.kernel) // spec.stride + 1,
            )
        elif spec.kind == "maxpool2d":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "dense":
            n_in = int(np.prod(shape))
            w = substream(seed, "init", idx).normal(0.0, np.sqrt(1.0 / n_in), size=(spec.out_features, n_in))
            params[idx] = {"w": w, "b": np.zeros(spec.out_features)}
            shape = (spec.out_features,)
    return Model(layers=arch, params=params, class_count=class_count, input_shape=tuple(input_shape))


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    seed: int = 0
    batch_size: int = 16
    weight_decay: float = 0.0  # L2 on weights only; biases stay unregularized


@dataclass
class TrainResult:
    model: Model
    train_accuracy: float
    test_accuracy: float | None
    epoch_losses: list[float]


def train(
    dataset: Dataset,
    arch: list[LayerSpec],
    hyper: TrainConfig,
    test_dataset: Dataset | None = None,
) -> TrainResult:
    """Minibatch SGD on cross-entropy; deterministic given hyper.seed."""
    model = init_model(arch, dataset.images[0].shape, dataset.class_count, hyper.seed)
    n = len(dataset)
    epoch_losses: list[float] = []
    for epoch in range(hyper.epochs):
        order = substream(hyper.seed, "shuffle", epoch).permutation(n)
        total_loss = 0.0
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            acc_grads: dict[int, dict[str, np.ndarray]] = {}
            batch_loss = 0.0
            try:
                for i in batch:
                    trace = model.forward_trace(dataset.images[i])
                    loss = nn.CrossEntropyLoss(dataset.labels[i])
                    value, dlogits, _ = loss.value_and_grads(trace.logits, trace.probs, dataset.images[i])
                    batch_loss += value
                    _, grads = trace.backward(dlogits, want_param_grads=True)
                    for idx, g in grads.items():
                        if idx not in acc_grads:
                            acc_grads[idx] = {"w": g["w"], "b": g["b"]}
                        else:
                            acc_grads[idx]["w"] += g["w"]
                            acc_grads[idx]["b"] += g["b"]
            except ValueError as exc:  # non-finite logits surface in softmax
                raise TrainingDiverged(
                    f"forward pass diverged at epoch {epoch}, batch starting {start}: {exc}"
                ) from exc
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"loss became {batch_loss!r} at epoch {epoch}, batch starting {start}"
                )
            scale = hyper.lr / len(batch)
            for idx, g in acc_grads.items():
                model.params[idx]["w"] -= scale * g["w"]
                if hyper.weight_decay:
                    model.params[idx]["w"] -= hyper.lr * hyper.weight_decay * model.params[idx]["w"]
                model.params[idx]["b"] -= scale * g["b"]
            total_loss += batch_loss
        epoch_losses.append(total_loss / n)
    return TrainResult(
        model=model,
        train_accuracy=accuracy(model, dataset),
        test_accuracy=accuracy(model, test_dataset) if test_dataset is not None else None,
        epoch_losses=epoch_losses,
    )


def accuracy(model: Model, dataset: Dataset) -> float:
    hits = sum(
        1 for img, lab in zip(dataset.images, dataset.labels) if model.predict(img).top_class == lab
    )
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# persistence


def _arch_manifest(layers: list[LayerSpec]) -> list[dict]:
    out = []
    for spec in layers:
        entry: dict = {"kind": spec.kind, "noise_eligible": spec.noise_eligible}
        if spec.kind == "conv2d":
            entry.update(out_channels=spec.out_channels, kernel=spec.kernel, stride=spec.stride)
        elif spec.kind == "dense":
            entry.update(out_features=spec.out_features)
        out.append(entry)
    return out


def save_model(model: Model, provenance: dict | None = None) -> bytes:
    blob = bytearray()
    layer_entries = _arch_manifest(model.layers)
    for idx in model.parametric_layers():
        p = model.params[idx]
        entry = layer_entries[idx]
        entry["w_shape"] = list(p["w"].shape)
        entry["w_offset"] = len(blob)
        blob.extend(p["w"].astype("<f8").tobytes())
        entry["b_shape"] = list(p["b"].shape)
        entry["b_offset"] = len(blob)
        blob.extend(p["b"].astype("<f8").tobytes())
    manifest = {
        "format": "stochdet-model",
        "version": 1,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "layers": layer_entries,
        "blob_bytes": len(blob),
    }
    if provenance:
        manifest["provenance"] = provenance
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<Q", len(manifest_bytes)) + manifest_bytes + bytes(blob)


def load_model(data: bytes) -> Model:
    if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
        raise ModelFormatError("not a model container (bad magic)")
    (manifest_len,) = struct.unpack_from("<Q", data, len(_MAGIC))
    header_end = len(_MAGIC) + 8
    if len(data) < header_end + manifest_len:
        raise ModelFormatError("truncated manifest")
    try:
        manifest = json.loads(data[header_end : header_end + manifest_len])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"manifest is not valid JSON: {exc}") from exc
    blob = data[header_end + manifest_len :]
    if len(blob) != manifest["blob_bytes"]:
        raise ModelFormatError(
            f"weight blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}"
        )
    layers: list[LayerSpec] = []
    params: dict[int, dict[str, np.ndarray]] = {}
    for idx, entry in enumerate(manifest["layers"]):
        kind = entry["kind"]
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"layer {idx}: unknown layer kind {kind!r}")
        spec = LayerSpec(
            kind,
            out_channels=entry.get("out_channels", 0),
            kernel=entry.get("kernel", 0),
            stride=entry.get("stride", 1),
            out_features=entry.get("out_features", 0),
            noise_eligible=entry.get("noise_eligible", True),
        )
        layers.append(spec)
        if kind in PARAMETRIC_KINDS:
            params[idx] = {
                "w": _read_blob_array(blob, entry["w_offset"], entry["w_shape"], idx, kind),
                "b": _read_blob_array(blob, entry["b_offset"], entry["b_shape"], idx, kind),
            }
    return Model(
        layers=layers,
        params=params,
        class_count=manifest["class_count"],
        input_shape=tuple(manifest["input_shape"]),
    )


def _read_blob_array(blob: bytes, offset: int, shape: list[int], idx: int, kind: str) -> np.ndarray:
    count = int(np.prod(shape))
    end = offset + count * 8
    if offset < 0 or end > len(blob):
        raise ModelFormatError(
            f"layer {idx} ({kind}): declared shape {shape} needs bytes [{offset}, {end}) "
            f"but the blob has only {len(blob)}"
        )
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()


# ---------------------------------------------------------------------------
# threshold profiling


@dataclass
class ThresholdTable:
    """Per-filter magnitude thresholds for each grid sparsification rate.

    thresholds[layer][f, i] is the cut tau such that dropping |w| < tau
    removes the largest achievable fraction of filter f's weights that is
    <= RATE_GRID[i]. Equal-magnitude ties are kept, never dropped, so tau
    sits strictly between the largest dropped and smallest kept magnitude
    (0 when nothing can be dropped).
    """

    rate_grid: np.ndarray
    thresholds: dict[int, np.ndarray]
    model_fingerprint: str

    def to_json(self) -> dict:
        return {
            "rate_grid": self.rate_grid.tolist(),
            "thresholds": {str(k): v.tolist() for k, v in self.thresholds.items()},
            "model_fingerprint": self.model_fingerprint,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ThresholdTable":
        return cls(
            rate_grid=np.asarray(obj["rate_grid"], dtype=np.float64),
            thresholds={int(k): np.asarray(v, dtype=np.float64) for k, v in obj["thresholds"].items()},
            model_fingerprint=obj["model_fingerprint"],
        )


def filter_thresholds(magnitudes: np.ndarray, rate_grid: np.ndarray = RATE_GRID) -> np.ndarray:
    """Threshold per grid rate for one filter's weight magnitudes."""
    mags = np.sort(np.abs(np.asarray(magnitudes, dtype=np.float64).ravel()))
    n = mags.size
    # achievable[k] is true when exactly k weights can be dropped under a
    # strict |w| < tau rule (no tie straddles the cut)
    achievable = np.empty(n, dtype=bool)
    achievable[0] = True
    achievable[1:] = mags[1:] > mags[:-1]
    out = np.empty(rate_grid.size, dtype=np.float64)
    for i, r in enumerate(rate_grid):
        k = int(np.floor(r * n + 1e-12))
        k = min(k, n - 1)
        while k > 0 and not achievable[k]:
            k -= 1
        out[i] = 0.0 if k == 0 else 0.5 * (mags[k - 1] + mags[k])
    return out


def profile_thresholds(model: Model) -> ThresholdTable:
    thresholds: dict[int, np.ndarray] = {}
    for idx in model.parametric_layers():
        filters = model.filter_matrix(idx)
        thresholds[idx] = np.stack([filter_thresholds(f) for f in filters])
    return ThresholdTable(
        rate_grid=RATE_GRID.copy(), thresholds=thresholds, model_fingerprint=model.fingerprint()
    )
