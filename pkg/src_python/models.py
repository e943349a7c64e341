"""
Classifier architectures, inference over windows and full recordings, and the
model bundle file that carries a linear predictor and CNN weights together.
"""

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dsp import Preprocessing, make_windows, preprocess, stack_windows
from errors import BundleFormatError, DataError, RecordingTooShort, ShapeMismatch
from gait_data import N_CHANNELS, Label, Recording
from linpred import LinearPredictor, residual
from logger import logger
from nn import (
    FLAT,
    Activation,
    BatchNorm1d,
    Conv1d,
    Dense,
    DepthwiseConv1d,
    Dropout,
    GlobalAvgPool1d,
    MaxPool1d,
    Network,
    PointwiseConv1d,
    SpatialDropout,
    output_shape,
    param_count,
    spec_from_dict,
    spec_to_dict,
    validate_spec,
)

BUNDLE_MAGIC = "# gait-bundle"
BUNDLE_FORMAT_VERSION = 1
PROB_FLOOR = 1e-7
SINGLE_PASS = "single_pass"
WINDOW_MEAN = "window_mean"
_MAX_PROBE_LENGTH = 1 << 24


# 1. ARCHITECTURES
# ---------------------------------------------------
def _propagate(layers: Sequence, channels: int, length: int) -> Tuple[int, int]:
    for spec in layers:
        channels, length = output_shape(spec, channels, length)
    return channels, length


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: Tuple
    input_channels: int = N_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeMismatch(f"Model {self.name} has no layers")
        for spec in self.layers:
            validate_spec(spec)
        tail = self.layers[-2:]
        if (len(tail) != 2 or not isinstance(tail[0], Dense) or tail[0].out_features != 1
                or tail[1] != Activation("Sigmoid")):
            raise ShapeMismatch(f"Model {self.name} must end in Dense(->1) followed by Sigmoid")
        # Structural compatibility does not depend on length once it is large enough.
        channels, length = _propagate(self.layers, self.input_channels, _MAX_PROBE_LENGTH)
        if (channels, length) != (1, FLAT):
            raise ShapeMismatch(f"Model {self.name} does not reduce to a single output")

    @property
    def head_start(self) -> int:
        """Index of the first layer after global pooling (the dense head)."""
        for i, spec in enumerate(self.layers):
            if isinstance(spec, GlobalAvgPool1d):
                return i + 1
        raise ShapeMismatch(f"Model {self.name} has no global pooling layer")

    @property
    def min_input_length(self) -> int:
        lo, hi = 1, _MAX_PROBE_LENGTH
        while lo < hi:
            mid = (lo + hi) // 2
            try:
                _propagate(self.layers, self.input_channels, mid)
                hi = mid
            except ShapeMismatch:
                lo = mid + 1
        return lo

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "layers": [spec_to_dict(s) for s in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelSpec":
        try:
            layers = [spec_from_dict(d) for d in data["layers"]]
            return cls(data["name"], tuple(layers), int(data.get("input_channels", N_CHANNELS)))
        except (KeyError, TypeError) as e:
            raise ShapeMismatch(f"Invalid model spec document: {e}") from e


def build_baseline(widths: Sequence[int] = (32, 40, 48), kernels: Sequence[int] = (7, 5, 3), pool: int = 2,
                   input_channels: int = N_CHANNELS) -> ModelSpec:
    """Three Conv+ReLU+MaxPool blocks, global pooling and a sigmoid unit."""
    if len(widths) != len(kernels):
        raise ShapeMismatch("baseline widths and kernels must have the same length")
    layers = []
    in_ch = input_channels
    for width, kernel in zip(widths, kernels):
        layers += [Conv1d(in_ch, int(width), int(kernel)), Activation("ReLU"), MaxPool1d(pool)]
        in_ch = int(width)
    layers += [GlobalAvgPool1d(), Dense(in_ch, 1), Activation("Sigmoid")]
    return ModelSpec("baseline", tuple(layers), input_channels)


def build_lpgnet(widths: Sequence[int] = (32, 40, 44), kernel: int = 7, pool: int = 2,
                 spatial_dropout: float = 0.1, dropout: float = 0.3, bn_momentum: float = 0.9,
                 bn_epsilon: float = 1e-3, input_channels: int = N_CHANNELS) -> ModelSpec:
    """
    Three depthwise-separable blocks: Depthwise -> Pointwise -> BatchNorm -> ELU -> MaxPool.

    Spatial dropout sits in front of the first block only; the head is
    GlobalAvgPool -> Dropout -> Dense(1) -> Sigmoid, so any input at least
    `min_input_length` long yields one probability.
    """
    if len(widths) != 3:
        raise ShapeMismatch(f"LPGNet has exactly 3 separable blocks, got widths {list(widths)}")
    layers: List = [SpatialDropout(spatial_dropout)]
    in_ch = input_channels
    for width in widths:
        layers += [
            DepthwiseConv1d(in_ch, kernel),
            PointwiseConv1d(in_ch, int(width)),
            BatchNorm1d(int(width), bn_momentum, bn_epsilon),
            Activation("ELU"),
            MaxPool1d(pool),
        ]
        in_ch = int(width)
    layers += [GlobalAvgPool1d(), Dropout(dropout), Dense(in_ch, 1), Activation("Sigmoid")]
    return ModelSpec("lpgnet", tuple(layers), input_channels)


def spec_from_settings(name: str, architecture: Dict[str, Dict[str, Any]]) -> ModelSpec:
    if name == "baseline":
        dims = architecture["baseline"]
        return build_baseline(dims["widths"], dims["kernels"], dims["pool"])
    dims = architecture["lpgnet"]
    return build_lpgnet(dims["widths"], dims["kernel"], dims["pool"], dims["spatial_dropout"],
                        dims["dropout"], dims["bn_momentum"], dims["bn_epsilon"])


# 2. BUNDLE
# ---------------------------------------------------
@dataclass(frozen=True, eq=False)
class ModelBundle:
    preprocessing: Preprocessing
    cnn_spec: Optional[ModelSpec] = None
    cnn_weights: Optional[Dict[str, np.ndarray]] = None
    predictor: Optional[LinearPredictor] = None
    config_hash: str = ""
    aggregation: str = SINGLE_PASS
    window_len: Optional[int] = None
    stride: Optional[int] = None
    zero_mean: bool = False
    format_version: int = BUNDLE_FORMAT_VERSION

    def __post_init__(self):
        has_lp = self.predictor is not None
        if (self.preprocessing is Preprocessing.FILTERED_50HZ) != has_lp:
            raise BundleFormatError(
                f"Preprocessing {self.preprocessing.value} "
                + ("requires" if not has_lp else "does not take") + " a linear predictor"
            )
        if (self.cnn_spec is None) != (self.cnn_weights is None):
            raise BundleFormatError("CNN spec and weights must be given together")
        if self.cnn_spec is None and not has_lp:
            raise BundleFormatError("Bundle holds neither a predictor nor a CNN")
        if self.aggregation not in (SINGLE_PASS, WINDOW_MEAN):
            raise BundleFormatError(f"Unknown aggregation {self.aggregation}")
        if self.aggregation == WINDOW_MEAN:
            if not self.window_len or not self.stride:
                raise BundleFormatError("window_mean aggregation needs window_len and stride")
            if self.cnn_spec is not None and self.window_len < self.cnn_spec.min_input_length:
                raise BundleFormatError(f"window_len {self.window_len} is below the model's minimum input length")
        if self.cnn_spec is not None:
            # Raises ShapeMismatch when a weight array does not fit the spec.
            Network(self.cnn_spec.layers).load_state_dict(self.cnn_weights)

    @property
    def kind(self) -> str:
        return "model" if self.cnn_spec is not None else "predictor"


def count_params(obj: Union[ModelSpec, LinearPredictor, ModelBundle]) -> int:
    """Trainable CNN parameters, LP coefficients, or both for a bundle."""
    if isinstance(obj, ModelSpec):
        return sum(param_count(s) for s in obj.layers)
    if isinstance(obj, LinearPredictor):
        return obj.total_coefficients
    if isinstance(obj, ModelBundle):
        total = count_params(obj.cnn_spec) if obj.cnn_spec is not None else 0
        return total + (obj.predictor.total_coefficients if obj.predictor is not None else 0)
    raise TypeError(f"Cannot count parameters of {type(obj).__name__}")


def parameter_report(bundle: ModelBundle) -> Dict[str, int]:
    cnn = count_params(bundle.cnn_spec) if bundle.cnn_spec is not None else 0
    lp = count_params(bundle.predictor) if bundle.predictor is not None else 0
    return {"cnn_parameters": cnn, "lp_coefficients": lp, "total": cnn + lp}


def make_bundle(preprocessing: Preprocessing, spec: Optional[ModelSpec] = None, network: Optional[Network] = None,
                predictor: Optional[LinearPredictor] = None, config_hash: str = "", aggregation: str = SINGLE_PASS,
                window_len: Optional[int] = None, stride: Optional[int] = None,
                zero_mean: bool = False) -> ModelBundle:
    weights = network.state_dict() if network is not None else None
    return ModelBundle(preprocessing, spec, weights, predictor, config_hash, aggregation, window_len, stride, zero_mean)


def _arrays(bundle: ModelBundle) -> List[Tuple[str, str, np.ndarray]]:
    out = []
    if bundle.predictor is not None:
        out.append(("lp.coeffs", "<f8", bundle.predictor.coeffs))
    if bundle.cnn_weights is not None:
        for name, arr in bundle.cnn_weights.items():
            out.append((name, "<f4", arr))
    return out


def save_bundle(bundle: ModelBundle, path) -> Path:
    """Magic line, one-line JSON header, then each array as <u8 element count + little-endian data."""
    path = Path(path)
    arrays = _arrays(bundle)
    header = {
        "format_version": bundle.format_version,
        "kind": bundle.kind,
        "spec": bundle.cnn_spec.to_dict() if bundle.cnn_spec is not None else None,
        "preprocessing": bundle.preprocessing.value,
        "config_hash": bundle.config_hash,
        "inference": {
            "aggregation": bundle.aggregation,
            "window_len": bundle.window_len,
            "stride": bundle.stride,
            "zero_mean": bundle.zero_mean,
        },
        "arrays": [{"name": n, "dtype": d, "shape": list(a.shape)} for n, d, a in arrays],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write((BUNDLE_MAGIC + "\n").encode("utf-8"))
        f.write((json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8"))
        for _, dtype, arr in arrays:
            data = np.ascontiguousarray(arr, dtype=dtype)
            f.write(struct.pack("<Q", data.size))
            f.write(data.tobytes())
    logger.info(f"Saved {bundle.kind} bundle to {path} ({parameter_report(bundle)['total']} values)")
    return path


def _read_arrays(blob: bytes, offset: int, entries: List[Dict[str, Any]]) -> Dict[str, np.ndarray]:
    out = {}
    for entry in entries:
        if entry.get("dtype") not in ("<f4", "<f8"):
            raise BundleFormatError(f"Unsupported array dtype {entry.get('dtype')}")
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        if offset + 8 > len(blob):
            raise BundleFormatError(f"Truncated bundle before array {entry['name']}")
        (count,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if count != int(np.prod(shape, dtype=np.int64)):
            raise BundleFormatError(f"Array {entry['name']} holds {count} values, header says {shape}")
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise BundleFormatError(f"Truncated bundle inside array {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise BundleFormatError(f"{len(blob) - offset} unexpected trailing bytes in bundle")
    return out


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Bundle file not found: {path}")
    blob = path.read_bytes()
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1) if first >= 0 else -1
    if first < 0 or second < 0 or blob[:first].decode("utf-8", "replace") != BUNDLE_MAGIC:
        raise BundleFormatError(f"{path} is not a gait bundle")
    try:
        header = json.loads(blob[first + 1:second].decode("utf-8"))
        version = int(header["format_version"])
        entries = header["arrays"]
        inference = header["inference"]
        preprocessing = Preprocessing(header["preprocessing"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BundleFormatError(f"Unreadable bundle header in {path}: {e}") from e
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleFormatError(f"Unsupported bundle format version {version}")

    try:
        arrays = _read_arrays(blob, second + 1, entries)
    except (KeyError, TypeError, ValueError) as e:
        raise BundleFormatError(f"Malformed array table in {path}: {e}") from e
    coeffs = arrays.pop("lp.coeffs", None)
    try:
        predictor = LinearPredictor(coeffs) if coeffs is not None else None
        spec = ModelSpec.from_dict(header["spec"]) if header.get("spec") is not None else None
        return ModelBundle(
            preprocessing=preprocessing,
            cnn_spec=spec,
            cnn_weights=arrays if spec is not None else None,
            predictor=predictor,
            config_hash=str(header.get("config_hash", "")),
            aggregation=inference.get("aggregation", SINGLE_PASS),
            window_len=inference.get("window_len"),
            stride=inference.get("stride"),
            zero_mean=bool(inference.get("zero_mean", False)),
            format_version=version,
        )
    except (ShapeMismatch, ValueError) as e:
        raise BundleFormatError(f"Bundle {path} is inconsistent: {e}") from e


def save_predictor(predictor: LinearPredictor, path, config_hash: str = "", zero_mean: bool = False) -> Path:
    return save_bundle(ModelBundle(Preprocessing.FILTERED_50HZ, predictor=predictor,
                                   config_hash=config_hash, zero_mean=zero_mean), path)


def load_predictor(path) -> LinearPredictor:
    bundle = load_bundle(path)
    if bundle.predictor is None:
        raise BundleFormatError(f"Bundle {path} carries no linear predictor")
    return bundle.predictor


# 3. INFERENCE
# ---------------------------------------------------
@dataclass
class RecordingPrediction:
    recording: str
    probability: float
    window_probs: List[float] = field(default_factory=list)
    lpr_channel_mean_abs: Optional[np.ndarray] = None
    prepare_ms: float = 0.0
    forward_ms: float = 0.0

    @property
    def diagnosis(self) -> Label:
        return Label.PD if self.probability >= 0.5 else Label.CONTROL


class GaitClassifier:
    """
    Eval-mode wrapper around a bundle.

    Each instance owns its network; forward calls update layer caches and a call
    counter, so threads should each build their own classifier.
    """

    def __init__(self, bundle: ModelBundle):
        if bundle.cnn_spec is None:
            raise BundleFormatError("Bundle carries no CNN, cannot classify")
        self.bundle = bundle
        self.spec = bundle.cnn_spec
        self.network = Network(self.spec.layers)
        self.network.load_state_dict(bundle.cnn_weights)
        self.min_length = self.spec.min_input_length

    @classmethod
    def from_network(cls, spec: ModelSpec, network: Network, **bundle_fields) -> "GaitClassifier":
        return cls(make_bundle(spec=spec, network=network, **bundle_fields))

    def prepare(self, rec: Recording) -> Recording:
        """Preprocess a raw recording and, with a predictor, turn it into its residual."""
        prepared = preprocess(rec, self.bundle.preprocessing, zero_mean=self.bundle.zero_mean)
        if self.bundle.predictor is not None:
            prepared = residual(self.bundle.predictor, prepared)
        return prepared

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Probabilities for a (batch, channels, time) array."""
        if x.ndim != 3 or x.shape[1] != self.spec.input_channels:
            raise ShapeMismatch(f"Expected (batch, {self.spec.input_channels}, time), got {x.shape}")
        if x.shape[2] < self.min_length:
            raise ShapeMismatch(f"Input length {x.shape[2]} is below the minimum {self.min_length}")
        probs = self.network.forward(x, training=False).reshape(-1)
        return np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)

    def predict_window(self, window: np.ndarray) -> float:
        window = np.asarray(window)
        if window.ndim != 2:
            raise ShapeMismatch(f"A window is (channels, time), got {window.shape}")
        return float(self.forward(window[None])[0])

    def predict_prepared(self, prepared: Recording) -> Tuple[float, List[float]]:
        if self.bundle.aggregation == WINDOW_MEAN:
            windows = make_windows(prepared, self.bundle.window_len, self.bundle.stride)
            x, _ = stack_windows(windows)
            probs = self.forward(x)
            return float(np.mean(probs, dtype=np.float64)), [float(p) for p in probs]
        if prepared.length < self.min_length:
            raise RecordingTooShort(prepared.length, self.min_length)
        return float(self.forward(prepared.channels[None].astype(np.float32))[0]), []

    def predict_recording(self, rec: Recording) -> RecordingPrediction:
        t0 = time.perf_counter()
        prepared = self.prepare(rec)
        t1 = time.perf_counter()
        probability, window_probs = self.predict_prepared(prepared)
        t2 = time.perf_counter()
        lpr_mean = None
        if self.bundle.predictor is not None:
            lpr_mean = np.mean(np.abs(prepared.channels), axis=1)
        return RecordingPrediction(rec.key_str, probability, window_probs, lpr_mean,
                                   (t1 - t0) * 1e3, (t2 - t1) * 1e3)


def predict_window(model: GaitClassifier, window: np.ndarray) -> float:
    return model.predict_window(window)


def predict_recording(bundle: Union[ModelBundle, GaitClassifier], rec: Recording) -> RecordingPrediction:
    model = bundle if isinstance(bundle, GaitClassifier) else GaitClassifier(bundle)
    return model.predict_recording(rec)


def pooled_features(network: Network, spec: ModelSpec, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Eval-mode backbone output (global-pooled features) of each full-length input, shape (N, F)."""
    stop = spec.head_start
    rows = [network.forward(np.asarray(x)[None], training=False, stop=stop)[0] for x in inputs]
    return np.stack(rows)
