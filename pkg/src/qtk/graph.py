"""Layered inference graph, quantized forward evaluation, loss and accuracy.

A model is an ordered list of layers; dense and conv2d layers carry
weights, the rest are shape/activation plumbing. Quantization is driven
entirely by a StepVector: each entry names a layer and a kind (weight or
activation) and supplies the step size and bitwidth for that point.
Weight tensors are snapped to their grid before use (signed); activations
are snapped right after each ReLU (unsigned). Biases and network inputs
are never quantized.

Evaluation is deterministic: per-sample losses are computed independently
and accumulated in sorted order, so the total is bit-identical for any
batch size, sample order, or worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tc
from .bias import bias_correct
from .errors import DegenerateInputError, FormatError, ShapeError
from .quantizer import QuantParams, quantize
from .tensor import Tensor, load_qtn, save_qtn

__all__ = [
    "Layer",
    "Model",
    "CalibSet",
    "StepEntry",
    "StepVector",
    "forward",
    "loss",
    "accuracy",
    "collect_activations",
    "load_model",
    "save_model",
    "subset",
]

WEIGHT_KINDS = ("dense", "conv2d")
LAYER_KINDS = ("dense", "conv2d", "relu", "avgpool", "flatten", "residual_add")


@dataclass(frozen=True)
class Layer:
    kind: str
    weight: Tensor | None = None
    bias: Tensor | None = None
    stride: int = 1
    pad: int = 0
    pool: int = 2
    quantize_weights: bool = False
    quantize_activations: bool = False
    residual_from: int | None = None


@dataclass(frozen=True)
class StepEntry:
    """One quantization point: which layer, which tensor kind, its grid."""

    layer: int
    kind: str  # "weight" | "activation"
    delta: float
    bits: int

    def params(self) -> QuantParams:
        return QuantParams(delta=self.delta, bits=self.bits, signed=self.kind == "weight")


class StepVector:
    """Ordered step sizes for every active quantization point of a model.

    Order is fixed: weight entries in layer order, then activation entries
    in layer order. The float vector view (`deltas`) is what the joint
    optimizer manipulates; `with_deltas` rebuilds an equivalent StepVector
    around a new vector.
    """

    __slots__ = ("entries",)

    def __init__(self, entries):
        entries = tuple(entries)
        seen = set()
        for e in entries:
            key = (e.kind, e.layer)
            if e.kind not in ("weight", "activation"):
                raise FormatError(f"unknown step kind {e.kind!r}")
            if key in seen:
                raise FormatError(f"duplicate step entry for {key}")
            seen.add(key)
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        return isinstance(other, StepVector) and self.entries == other.entries

    @property
    def deltas(self) -> np.ndarray:
        return np.array([e.delta for e in self.entries], dtype=np.float64)

    def with_deltas(self, deltas) -> "StepVector":
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.shape != (len(self.entries),):
            raise ShapeError(f"expected {len(self.entries)} step sizes, got {deltas.shape}")
        return StepVector(
            replace(e, delta=float(d)) for e, d in zip(self.entries, deltas)
        )

    def to_json(self) -> list[dict]:
        return [
            {"layer": e.layer, "kind": e.kind, "delta": e.delta, "bits": e.bits}
            for e in self.entries
        ]

    @classmethod
    def from_json(cls, items) -> "StepVector":
        try:
            return cls(
                StepEntry(
                    layer=int(it["layer"]),
                    kind=str(it["kind"]),
                    delta=float(it["delta"]),
                    bits=int(it["bits"]),
                )
                for it in items
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed step vector: {exc}") from exc


class Model:
    """Immutable layer stack plus quantization-point bookkeeping."""

    def __init__(self, name: str, layers, num_classes: int, skip_first_last: bool = True):
        layers = tuple(layers)
        if num_classes < 2:
            raise FormatError(f"num_classes must be >= 2, got {num_classes}")
        for idx, layer in enumerate(layers):
            if layer.kind not in LAYER_KINDS:
                raise FormatError(f"layer {idx}: unknown kind {layer.kind!r}")
            if layer.kind in WEIGHT_KINDS:
                if layer.weight is None:
                    raise FormatError(f"layer {idx} ({layer.kind}) has no weights")
            else:
                if layer.weight is not None or layer.bias is not None:
                    raise FormatError(f"layer {idx} ({layer.kind}) must not carry weights")
            if layer.kind == "residual_add":
                if layer.residual_from is None or not 0 <= layer.residual_from < idx:
                    raise FormatError(
                        f"layer {idx}: residual_from must reference an earlier layer"
                    )
        if skip_first_last:
            widx = [i for i, l in enumerate(layers) if l.kind in WEIGHT_KINDS]
            if widx:
                layers = tuple(
                    replace(l, quantize_weights=False) if i in (widx[0], widx[-1]) else l
                    for i, l in enumerate(layers)
                )
        self.name = name
        self.layers = layers
        self.num_classes = num_classes
        self.skip_first_last = skip_first_last

    def weight_points(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in WEIGHT_KINDS and l.quantize_weights]

    def activation_points(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "relu" and l.quantize_activations]


@dataclass(frozen=True)
class CalibSet:
    """Inputs plus integer labels, evaluated in batches of batch_size."""

    inputs: Tensor
    labels: np.ndarray
    batch_size: int = 256

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise FormatError(f"labels must be 1-d, got shape {labels.shape}")
        if self.inputs.shape[0] != labels.shape[0]:
            raise FormatError(
                f"{self.inputs.shape[0]} inputs but {labels.shape[0]} labels"
            )
        if labels.shape[0] < 1:
            raise DegenerateInputError("calibration set is empty")
        if labels.dtype.kind == "f":
            rounded = np.rint(labels)
            if np.max(np.abs(labels - rounded)) > 1e-6:
                raise FormatError("labels are not integral")
            labels = rounded
        labels = labels.astype(np.int64)
        if np.min(labels) < 0:
            raise FormatError("labels must be non-negative")
        object.__setattr__(self, "labels", labels)
        if self.batch_size < 1:
            raise FormatError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_files(cls, inputs_path, labels_path, batch_size: int = 256) -> "CalibSet":
        inputs = load_qtn(inputs_path)
        labels = load_qtn(labels_path)
        return cls(inputs=inputs, labels=labels.data, batch_size=batch_size)


def subset(calib: CalibSet, size: int, seed: int = 0) -> CalibSet:
    """Seeded sample without replacement, kept in ascending index order."""
    if size >= calib.n:
        return calib
    if size < 1:
        raise FormatError(f"subset size must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(calib.n, size=size, replace=False))
    return CalibSet(
        inputs=Tensor(calib.inputs.data[idx], _trusted=True),
        labels=calib.labels[idx],
        batch_size=calib.batch_size,
    )


def _quant_map(model: Model, steps: StepVector | None) -> dict[tuple[str, int], QuantParams]:
    if steps is None:
        return {}
    weight_pts = set(model.weight_points())
    act_pts = set(model.activation_points())
    qmap: dict[tuple[str, int], QuantParams] = {}
    for e in steps.entries:
        if e.kind == "weight" and e.layer not in weight_pts:
            raise ShapeError(f"step entry (weight, layer {e.layer}) has no matching model point")
        if e.kind == "activation" and e.layer not in act_pts:
            raise ShapeError(
                f"step entry (activation, layer {e.layer}) has no matching model point"
            )
        qmap[(e.kind, e.layer)] = e.params()
    return qmap


def _effective_weight(layer: Layer, idx: int, qmap, bias_correction: str) -> Tensor:
    params = qmap.get(("weight", idx))
    if params is None:
        return layer.weight
    wq = quantize(layer.weight, params)
    if bias_correction != "none":
        wq = bias_correct(layer.weight, wq, axis=0, mode=bias_correction)
    return wq


def _forward_batch(
    model: Model,
    x: Tensor,
    qmap,
    bias_correction: str = "none",
    collect_relu: list[int] | None = None,
):
    """Run all layers on one batch; optionally capture post-ReLU activations."""
    outputs: list[Tensor] = []
    captured: dict[int, np.ndarray] = {}
    cur = x
    for idx, layer in enumerate(model.layers):
        if layer.kind == "dense":
            w = _effective_weight(layer, idx, qmap, bias_correction)
            wt = Tensor(w.data.T, _trusted=True)
            cur = tc.matmul(cur, wt)
            if layer.bias is not None:
                cur = Tensor(cur.data + layer.bias.data, _trusted=True)
        elif layer.kind == "conv2d":
            w = _effective_weight(layer, idx, qmap, bias_correction)
            cur = tc.conv2d(cur, w, stride=layer.stride, pad=layer.pad)
            if layer.bias is not None:
                cur = Tensor(cur.data + layer.bias.data.reshape(1, -1, 1, 1), _trusted=True)
        elif layer.kind == "relu":
            cur = tc.relu(cur)
            if collect_relu is not None and idx in collect_relu:
                captured[idx] = cur.data.ravel()
            params = qmap.get(("activation", idx))
            if params is not None:
                cur = quantize(cur, params)
        elif layer.kind == "avgpool":
            cur = tc.avgpool2d(cur, layer.pool)
        elif layer.kind == "flatten":
            cur = tc.flatten(cur)
        elif layer.kind == "residual_add":
            cur = tc.add(cur, outputs[layer.residual_from])
        outputs.append(cur)
    return cur, captured


def forward(
    model: Model,
    x: Tensor,
    steps: StepVector | None = None,
    bias_correction: str = "none",
) -> Tensor:
    """Logits for a batch of inputs under the given quantization steps.

    steps=None runs the plain FP32 path, bit-identical to a fully disabled
    quantization configuration.
    """
    qmap = _quant_map(model, steps)
    logits, _ = _forward_batch(model, x, qmap, bias_correction)
    return logits


def _batch_ranges(n: int, batch_size: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]


def _map_batches(fn, ranges, threads: int):
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, ranges))
    return [fn(r) for r in ranges]


def _per_sample_losses(model, calib, qmap, bias_correction, threads) -> np.ndarray:
    if np.max(calib.labels) >= model.num_classes:
        raise FormatError(
            f"label {int(np.max(calib.labels))} out of range for {model.num_classes} classes"
        )

    def run(rng: tuple[int, int]) -> np.ndarray:
        lo, hi = rng
        batch = Tensor(calib.inputs.data[lo:hi], _trusted=True)
        logits, _ = _forward_batch(model, batch, qmap, bias_correction)
        z = logits.data
        if z.ndim != 2 or z.shape[1] != model.num_classes:
            raise ShapeError(f"model emitted logits of shape {z.shape}")
        m = z.max(axis=1)
        lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
        return lse - z[np.arange(hi - lo), calib.labels[lo:hi]]

    parts = _map_batches(run, _batch_ranges(calib.n, calib.batch_size), threads)
    return np.concatenate(parts)


def loss(
    model: Model,
    calib: CalibSet,
    steps: StepVector | None = None,
    bias_correction: str = "none",
    threads: int = 1,
) -> float:
    """Mean cross-entropy (natural log) over the calibration set.

    Per-sample losses are summed in ascending value order, which makes the
    result independent of batch partitioning, sample order, and threads.
    """
    qmap = _quant_map(model, steps)
    per_sample = _per_sample_losses(model, calib, qmap, bias_correction, threads)
    return float(np.sort(per_sample, kind="stable").sum() / per_sample.shape[0])


def accuracy(
    model: Model,
    calib: CalibSet,
    steps: StepVector | None = None,
    bias_correction: str = "none",
    threads: int = 1,
) -> float:
    """Top-1 accuracy; argmax ties resolve to the lower class index."""
    qmap = _quant_map(model, steps)
    if np.max(calib.labels) >= model.num_classes:
        raise FormatError(
            f"label {int(np.max(calib.labels))} out of range for {model.num_classes} classes"
        )

    def run(rng: tuple[int, int]) -> int:
        lo, hi = rng
        batch = Tensor(calib.inputs.data[lo:hi], _trusted=True)
        logits, _ = _forward_batch(model, batch, qmap, bias_correction)
        preds = np.argmax(logits.data, axis=1)
        return int(np.sum(preds == calib.labels[lo:hi]))

    hits = _map_batches(run, _batch_ranges(calib.n, calib.batch_size), threads)
    return float(sum(hits) / calib.n)


def collect_activations(model: Model, calib: CalibSet, threads: int = 1) -> dict[int, np.ndarray]:
    """Full-precision post-ReLU activations at every activation point.

    One FP32 pass over the whole calibration set; per point, the batch
    results are concatenated into a single flat array (pooled statistics,
    independent of batch size).
    """
    points = model.activation_points()
    if not points:
        return {}

    def run(rng: tuple[int, int]) -> dict[int, np.ndarray]:
        lo, hi = rng
        batch = Tensor(calib.inputs.data[lo:hi], _trusted=True)
        _, captured = _forward_batch(model, batch, {}, "none", collect_relu=points)
        return captured

    parts = _map_batches(run, _batch_ranges(calib.n, calib.batch_size), threads)
    return {p: np.concatenate([part[p] for part in parts]) for p in points}


# --- manifest I/O ---------------------------------------------------------


def load_model(manifest_path, skip_first_last: bool = True) -> Model:
    """Load a model manifest (JSON) and its .qtn weight files."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        name = str(doc["name"])
        num_classes = int(doc["num_classes"])
        raw_layers = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {manifest_path} missing required field: {exc}") from exc

    layers = []
    for idx, spec in enumerate(raw_layers):
        kind = spec.get("kind")
        weight = bias = None
        if spec.get("weight_file"):
            weight = load_qtn(os.path.join(base, spec["weight_file"]))
        if spec.get("bias_file"):
            bias = load_qtn(os.path.join(base, spec["bias_file"]))
        layers.append(
            Layer(
                kind=kind,
                weight=weight,
                bias=bias,
                stride=int(spec.get("stride", 1)),
                pad=int(spec.get("pad", 0)),
                pool=int(spec.get("pool", 2)),
                quantize_weights=bool(spec.get("quantize_weights", kind in WEIGHT_KINDS)),
                quantize_activations=bool(spec.get("quantize_activations", kind == "relu")),
                residual_from=spec.get("residual_from"),
            )
        )
    return Model(name=name, layers=layers, num_classes=num_classes, skip_first_last=skip_first_last)


def save_model(model: Model, out_dir, weights_override: dict[int, Tensor] | None = None,
               quantize_flags: bool = True) -> str:
    """Write a manifest plus .qtn tensors into out_dir; returns manifest path.

    weights_override replaces the stored weight of selected layers (used to
    export grid-snapped weights). When quantize_flags is False the emitted
    manifest marks every weight as already baked (quantize_weights=false).
    """
    os.makedirs(out_dir, exist_ok=True)
    weights_override = weights_override or {}
    layer_docs = []
    for idx, layer in enumerate(model.layers):
        doc: dict = {"kind": layer.kind}
        if layer.kind in WEIGHT_KINDS:
            w = weights_override.get(idx, layer.weight)
            wfile = f"layer{idx:02d}_weight.qtn"
            save_qtn(os.path.join(out_dir, wfile), w)
            doc["weight_file"] = wfile
            if layer.bias is not None:
                bfile = f"layer{idx:02d}_bias.qtn"
                save_qtn(os.path.join(out_dir, bfile), layer.bias)
                doc["bias_file"] = bfile
            doc["stride"] = layer.stride
            doc["pad"] = layer.pad
            doc["quantize_weights"] = layer.quantize_weights if quantize_flags else False
        if layer.kind == "relu":
            doc["quantize_activations"] = layer.quantize_activations
        if layer.kind == "avgpool":
            doc["pool"] = layer.pool
        if layer.kind == "residual_add":
            doc["residual_from"] = layer.residual_from
        layer_docs.append(doc)
    manifest = {"name": model.name, "num_classes": model.num_classes, "layers": layer_docs}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path
