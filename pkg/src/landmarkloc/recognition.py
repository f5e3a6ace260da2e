"""Sparse landmark recognition.

Two interchangeable recognizers map keypoints to per-landmark confidence
rows (class 0 is the outlier class):

* ``TransformerRecognizer``: tokens (projected descriptor + encoded pixel
  position) through pre-norm self-attention blocks and a per-token
  classifier head. Inference only; weights come from a container file.
* ``CentroidRecognizer``: cosine scores against per-landmark descriptor
  centroids with a learned outlier bias, softmax over a temperature.

Both are exactly permutation-equivariant: the transformer evaluates
attention in a content-canonical token order, so the arithmetic (and hence
the output bits) cannot depend on input ordering.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    ShapeMismatch,
    UnsupportedVersion,
)
from .mapmodel import SceneMap

_LN_EPS = 1e-5
_LOG_CLAMP = 1e-12

WEIGHTS_MAGIC = b"PRAMWTS1"
WEIGHTS_VERSION = 1

_POS_MLP_DIMS = (32, 64, 128)    # hidden widths before the final projection


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _snap32(value: float) -> float:
    """Round-trip a scalar through float32 so saved models reload equal."""
    return float(np.float32(value))


@dataclass(eq=False)
class CentroidRecognizer:
    """Nearest-centroid scoring: score_l = <d, c_l> / tau for landmarks,
    score_0 = null_bias / tau for the outlier class."""

    centroids: np.ndarray       # (lambda_l, D) float32, unit rows
    temperature: float = 0.07
    null_bias: float = 0.5

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a (lambda_l, D) matrix")
        self.temperature = _snap32(self.temperature)
        self.null_bias = _snap32(self.null_bias)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def descriptor_dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0] + 1


@dataclass(frozen=True)
class TransformerConfig:
    descriptor_dim: int
    num_classes: int
    hidden_dim: int = 256
    num_heads: int = 4
    num_blocks: int = 15
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must divide evenly into heads")
        for name in ("descriptor_dim", "num_classes", "hidden_dim",
                     "num_heads", "num_blocks", "image_width", "image_height"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def _expected_tensor_shapes(cfg: TransformerConfig) -> dict[str, tuple]:
    h = cfg.hidden_dim
    shapes: dict[str, tuple] = {
        "input_projection": (h, cfg.descriptor_dim),
        "classifier.weight": (cfg.num_classes, h),
        "classifier.bias": (cfg.num_classes,),
        "final_norm.gamma": (h,),
        "final_norm.beta": (h,),
    }
    dims = list(_POS_MLP_DIMS) + [h]
    prev = 2
    for i, width in enumerate(dims):
        shapes[f"pos_mlp.w{i}"] = (width, prev)
        shapes[f"pos_mlp.b{i}"] = (width,)
        prev = width
    for b in range(cfg.num_blocks):
        p = f"block{b}"
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{nm}"] = (h, h)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{nm}"] = (h,)
        for nm in ("ln1", "ln2"):
            shapes[f"{p}.{nm}.gamma"] = (h,)
            shapes[f"{p}.{nm}.beta"] = (h,)
        shapes[f"{p}.ffn.w1"] = (2 * h, h)
        shapes[f"{p}.ffn.b1"] = (2 * h,)
        shapes[f"{p}.ffn.w2"] = (h, 2 * h)
        shapes[f"{p}.ffn.b2"] = (h,)
    return shapes


@dataclass(eq=False)
class TransformerRecognizer:
    """Per-token classifier over pre-norm self-attention blocks."""

    config: TransformerConfig
    weights: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _expected_tensor_shapes(self.config)
        weights = {}
        for name, shape in expected.items():
            if name not in self.weights:
                raise ShapeMismatch(f"missing tensor '{name}'")
            arr = np.asarray(self.weights[name], dtype=np.float32)
            if arr.shape != shape:
                raise ShapeMismatch(
                    f"tensor '{name}' has shape {arr.shape}, expected {shape}")
            weights[name] = arr
        extra = set(self.weights) - set(expected)
        if extra:
            raise ShapeMismatch(f"unexpected tensors {sorted(extra)}")
        self.weights = weights

    @property
    def descriptor_dim(self) -> int:
        return self.config.descriptor_dim

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @classmethod
    def random(cls, config: TransformerConfig, seed: int = 0,
               scale: float = 0.05) -> "TransformerRecognizer":
        """Gaussian-initialized weights; unit layer-norm gains, zero biases."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in _expected_tensor_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                weights[name] = np.ones(shape, dtype=np.float32)
            elif leaf.startswith("b"):
                weights[name] = np.zeros(shape, dtype=np.float32)
            else:
                weights[name] = rng.normal(0.0, scale, size=shape).astype(np.float32)
        return cls(config=config, weights=weights)


@dataclass(eq=False)
class RecognitionOutput:
    """Per-keypoint class confidences; rows sum to one. ``labels`` holds the
    row argmax (ties resolve to the lowest class)."""

    confidences: np.ndarray     # (n, num_classes) float64
    labels: np.ndarray          # (n,) int64


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def positional_encode(u: float, v: float, image_size: tuple[int, int],
                      weights: dict[str, np.ndarray]) -> np.ndarray:
    """Encode a pixel position: normalize to [-1, 1] per axis, then a 4-layer
    ReLU MLP (widths 32, 64, 128, hidden)."""
    uv = np.array([[float(u), float(v)]])
    return _positional_encode_batch(uv, image_size, weights)[0]


def _positional_encode_batch(uv: np.ndarray, image_size: tuple[int, int],
                             weights: dict[str, np.ndarray]) -> np.ndarray:
    w, h = image_size
    x = np.empty_like(uv, dtype=np.float64)
    x[:, 0] = (2.0 * uv[:, 0] - w) / w
    x[:, 1] = (2.0 * uv[:, 1] - h) / h
    n_layers = 1 + len(_POS_MLP_DIMS)
    for i in range(n_layers):
        wm = np.asarray(weights[f"pos_mlp.w{i}"], dtype=np.float64)
        bm = np.asarray(weights[f"pos_mlp.b{i}"], dtype=np.float64)
        x = x @ wm.T + bm
        if i < n_layers - 1:
            np.maximum(x, 0.0, out=x)
    return x


def tokenize(keypoints, model: TransformerRecognizer) -> np.ndarray:
    """Input tokens: projected descriptor plus encoded pixel position."""
    if len(keypoints) == 0:
        return np.zeros((0, model.config.hidden_dim))
    desc = np.stack([kp.descriptor for kp in keypoints]).astype(np.float64)
    if desc.shape[1] != model.config.descriptor_dim:
        raise ShapeMismatch(
            f"keypoint descriptors have dim {desc.shape[1]}, model expects "
            f"{model.config.descriptor_dim}")
    uv = np.array([[kp.u, kp.v] for kp in keypoints], dtype=np.float64)
    w_in = np.asarray(model.weights["input_projection"], dtype=np.float64)
    pos = _positional_encode_batch(
        uv, (model.config.image_width, model.config.image_height),
        model.weights)
    return desc @ w_in.T + pos


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * gamma + beta


def transformer_forward(tokens: np.ndarray,
                        model: TransformerRecognizer) -> RecognitionOutput:
    """Run the block stack and classify every token.

    Attention mixes rows, so the tokens are first brought into a canonical
    (lexicographic) order and the outputs scattered back; any permutation of
    the input therefore produces bit-identical per-token rows.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError("tokens must be a non-empty (n, hidden) matrix")
    cfg = model.config
    if tokens.shape[1] != cfg.hidden_dim:
        raise ShapeMismatch(
            f"tokens have width {tokens.shape[1]}, model expects "
            f"{cfg.hidden_dim}")

    order = np.lexsort(tokens.T[::-1])
    x = tokens[order]
    wt = {k: np.asarray(v, dtype=np.float64) for k, v in model.weights.items()}

    n = x.shape[0]
    heads = cfg.num_heads
    dh = cfg.hidden_dim // heads
    scale = 1.0 / np.sqrt(dh)

    for b in range(cfg.num_blocks):
        p = f"block{b}"
        y = _layer_norm(x, wt[f"{p}.ln1.gamma"], wt[f"{p}.ln1.beta"])
        q = y @ wt[f"{p}.attn.wq"].T + wt[f"{p}.attn.bq"]
        k = y @ wt[f"{p}.attn.wk"].T + wt[f"{p}.attn.bk"]
        v = y @ wt[f"{p}.attn.wv"].T + wt[f"{p}.attn.bv"]
        q = q.reshape(n, heads, dh).transpose(1, 0, 2)
        k = k.reshape(n, heads, dh).transpose(1, 0, 2)
        v = v.reshape(n, heads, dh).transpose(1, 0, 2)
        att = np.matmul(q, k.transpose(0, 2, 1)) * scale        # (heads,n,n)
        att -= att.max(axis=2, keepdims=True)
        np.exp(att, out=att)
        att /= att.sum(axis=2, keepdims=True)
        ctx = np.matmul(att, v)                                 # (heads,n,dh)
        ctx = ctx.transpose(1, 0, 2).reshape(n, cfg.hidden_dim)
        x = x + ctx @ wt[f"{p}.attn.wo"].T + wt[f"{p}.attn.bo"]

        y = _layer_norm(x, wt[f"{p}.ln2.gamma"], wt[f"{p}.ln2.beta"])
        y = y @ wt[f"{p}.ffn.w1"].T + wt[f"{p}.ffn.b1"]
        np.maximum(y, 0.0, out=y)
        x = x + y @ wt[f"{p}.ffn.w2"].T + wt[f"{p}.ffn.b2"]

    x = _layer_norm(x, wt["final_norm.gamma"], wt["final_norm.beta"])
    logits = x @ wt["classifier.weight"].T + wt["classifier.bias"]
    conf_sorted = _softmax_rows(logits)

    confidences = np.empty_like(conf_sorted)
    confidences[order] = conf_sorted
    labels = confidences.argmax(axis=1).astype(np.int64)
    return RecognitionOutput(confidences=confidences, labels=labels)


def _centroid_forward(keypoints, model: CentroidRecognizer) -> RecognitionOutput:
    n = len(keypoints)
    c = model.num_classes
    if n == 0:
        return RecognitionOutput(confidences=np.zeros((0, c)),
                                 labels=np.zeros(0, dtype=np.int64))
    desc = np.stack([kp.descriptor for kp in keypoints]).astype(np.float64)
    if desc.shape[1] != model.descriptor_dim:
        raise ShapeMismatch(
            f"keypoint descriptors have dim {desc.shape[1]}, model expects "
            f"{model.descriptor_dim}")
    scores = np.empty((n, c))
    scores[:, 0] = model.null_bias / model.temperature
    scores[:, 1:] = (desc @ model.centroids.T.astype(np.float64)) / model.temperature
    conf = _softmax_rows(scores)
    labels = conf.argmax(axis=1).astype(np.int64)
    return RecognitionOutput(confidences=conf, labels=labels)


def recognize(keypoints, model) -> RecognitionOutput:
    """Classify keypoints with either recognizer kind. Empty input yields an
    empty output."""
    if isinstance(model, CentroidRecognizer):
        return _centroid_forward(keypoints, model)
    if isinstance(model, TransformerRecognizer):
        if len(keypoints) == 0:
            return RecognitionOutput(
                confidences=np.zeros((0, model.num_classes)),
                labels=np.zeros(0, dtype=np.int64))
        return transformer_forward(tokenize(keypoints, model), model)
    raise TypeError(f"unknown recognizer model {type(model)!r}")


# ---------------------------------------------------------------------------
# training pieces
# ---------------------------------------------------------------------------

def weighted_ce_loss(confidences: np.ndarray, labels: np.ndarray) -> float:
    """Outlier-balanced cross entropy.

    With m keypoints of which m0 carry label 0, labeled keypoints weigh
    m0 / m and outliers 1 - m0 / m; the per-row log is taken on the
    ground-truth class probability, clamped at 1e-12.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if conf.ndim != 2 or conf.shape[0] != labels.shape[0]:
        raise ValueError("confidences and labels must align")
    m = conf.shape[0]
    if m == 0:
        raise ValueError("loss needs at least one keypoint")
    if labels.min() < 0 or labels.max() >= conf.shape[1]:
        raise ValueError("labels out of range")
    m0 = int((labels == 0).sum())
    w = np.where(labels > 0, m0 / m, 1.0 - m0 / m)
    p = np.maximum(conf[np.arange(m), labels], _LOG_CLAMP)
    return float(-(w * np.log(p)).sum() / m)


def weight_vector(labels: np.ndarray) -> np.ndarray:
    """Per-keypoint weights of the balanced loss (shared with the gradient)."""
    labels = np.asarray(labels, dtype=np.int64)
    m = len(labels)
    m0 = int((labels == 0).sum())
    return np.where(labels > 0, m0 / m, 1.0 - m0 / m)


def linear_head_gradient(features: np.ndarray, labels: np.ndarray,
                         weight: np.ndarray,
                         bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the balanced loss through softmax(f @ W.T + b)
    with respect to (W, b)."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    w_mat = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    m = f.shape[0]
    if m == 0:
        raise ValueError("gradient needs at least one keypoint")
    s = _softmax_rows(f @ w_mat.T + b)
    s[np.arange(m), labels] -= 1.0
    s *= (weight_vector(labels) / m)[:, None]
    return s.T @ f, s.sum(axis=0)


def train_centroid_recognizer(scene_map: SceneMap, temperature: float = 0.07,
                              null_bias: float = 0.5) -> CentroidRecognizer:
    """Renormalized mean descriptor per landmark."""
    centroids = np.empty((len(scene_map.landmarks), scene_map.descriptor_dim),
                         dtype=np.float32)
    for lm in scene_map.landmarks:
        descs = np.stack([scene_map.points[pid].descriptor
                          for pid in lm.point_ids]).astype(np.float64)
        mean = descs.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            raise ValueError(
                f"landmark {lm.label} descriptors cancel out; centroid "
                f"undefined")
        centroids[lm.label - 1] = (mean / norm).astype(np.float32)
    return CentroidRecognizer(centroids=centroids, temperature=temperature,
                              null_bias=null_bias)


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------

_U64 = struct.Struct("<Q")


def _model_tensors(model) -> dict[str, np.ndarray]:
    if isinstance(model, CentroidRecognizer):
        return {
            "centroids": model.centroids,
            "temperature": np.array([model.temperature], dtype=np.float32),
            "null_bias": np.array([model.null_bias], dtype=np.float32),
        }
    if isinstance(model, TransformerRecognizer):
        tensors = dict(model.weights)
        cfg = model.config
        tensors["num_heads"] = np.array([cfg.num_heads], dtype=np.float32)
        tensors["image_size"] = np.array(
            [cfg.image_width, cfg.image_height], dtype=np.float32)
        return tensors
    raise TypeError(f"unknown recognizer model {type(model)!r}")


def serialize_weights(model) -> bytes:
    """Encode a recognizer into the weight container (float32 tensors,
    trailing CRC-32 over the payload)."""
    tensors = _model_tensors(model)
    out = bytearray()
    out += _U64.pack(WEIGHTS_VERSION)
    out += _U64.pack(len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        out += _U64.pack(len(encoded))
        out += encoded
        out += _U64.pack(0)                      # dtype code 0 = float32
        out += _U64.pack(arr.ndim)
        for dim in arr.shape:
            out += _U64.pack(dim)
        out += arr.tobytes()
    crc = zlib.crc32(bytes(out)) & 0xFFFFFFFF
    return WEIGHTS_MAGIC + bytes(out) + _U64.pack(crc)


def deserialize_weights(data: bytes):
    """Decode a weight container into the recognizer it stores."""
    if len(data) < len(WEIGHTS_MAGIC) or data[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise BadMagic("not a weight container")
    if len(data) < len(WEIGHTS_MAGIC) + 16 + 8:
        raise ChecksumMismatch("container truncated")
    payload = data[len(WEIGHTS_MAGIC):-8]
    stored = _U64.unpack(data[-8:])[0]
    if (zlib.crc32(payload) & 0xFFFFFFFF) != stored:
        raise ChecksumMismatch("payload CRC-32 does not match")

    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(payload):
            raise ShapeMismatch("tensor data ends prematurely")
        chunk = payload[pos:pos + nbytes]
        pos += nbytes
        return chunk

    def u64() -> int:
        return _U64.unpack(take(8))[0]

    version = u64()
    if version != WEIGHTS_VERSION:
        raise UnsupportedVersion(f"weight container version {version}")
    count = u64()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = u64()
        name = take(name_len).decode("utf-8")
        dtype_code = u64()
        if dtype_code != 0:
            raise ShapeMismatch(f"tensor '{name}' has unsupported dtype code "
                                f"{dtype_code}")
        ndim = u64()
        if ndim > 8:
            raise ShapeMismatch(f"tensor '{name}' has implausible rank {ndim}")
        shape = tuple(u64() for _ in range(ndim))
        numel = 1
        for dim in shape:
            numel *= dim
        if numel * 4 > len(payload) - pos:
            raise ShapeMismatch(f"tensor '{name}' exceeds container bounds")
        arr = np.frombuffer(take(numel * 4), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32, copy=True)

    if "centroids" in tensors:
        for required in ("temperature", "null_bias"):
            if required not in tensors:
                raise ShapeMismatch(f"missing tensor '{required}'")
            if tensors[required].shape != (1,):
                raise ShapeMismatch(f"tensor '{required}' must have shape (1,)")
        extra = set(tensors) - {"centroids", "temperature", "null_bias"}
        if extra:
            raise ShapeMismatch(f"unexpected tensors {sorted(extra)}")
        if tensors["centroids"].ndim != 2:
            raise ShapeMismatch("tensor 'centroids' must be 2-dimensional")
        try:
            return CentroidRecognizer(
                centroids=tensors["centroids"],
                temperature=float(tensors["temperature"][0]),
                null_bias=float(tensors["null_bias"][0]))
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc

    if "input_projection" in tensors:
        for required in ("num_heads", "image_size", "classifier.weight"):
            if required not in tensors:
                raise ShapeMismatch(f"missing tensor '{required}'")
        if tensors["num_heads"].shape != (1,):
            raise ShapeMismatch("tensor 'num_heads' must have shape (1,)")
        if tensors["image_size"].shape != (2,):
            raise ShapeMismatch("tensor 'image_size' must have shape (2,)")
        if tensors["input_projection"].ndim != 2:
            raise ShapeMismatch("tensor 'input_projection' must be 2-dimensional")
        if tensors["classifier.weight"].ndim != 2:
            raise ShapeMismatch("tensor 'classifier.weight' must be 2-dimensional")
        blocks = set()
        for name in tensors:
            if name.startswith("block"):
                head = name.split(".", 1)[0]
                try:
                    blocks.add(int(head[len("block"):]))
                except ValueError:
                    raise ShapeMismatch(f"unrecognized tensor '{name}'")
        num_blocks = (max(blocks) + 1) if blocks else 0
        if num_blocks == 0 or sorted(blocks) != list(range(num_blocks)):
            raise ShapeMismatch("block tensors are missing or non-contiguous")
        try:
            cfg = TransformerConfig(
                descriptor_dim=tensors["input_projection"].shape[1],
                num_classes=tensors["classifier.weight"].shape[0],
                hidden_dim=tensors["input_projection"].shape[0],
                num_heads=int(tensors["num_heads"][0]),
                num_blocks=num_blocks,
                image_width=int(tensors["image_size"][0]),
                image_height=int(tensors["image_size"][1]),
            )
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from exc
        weights = {k: v for k, v in tensors.items()
                   if k not in ("num_heads", "image_size")}
        return TransformerRecognizer(config=cfg, weights=weights)

    raise ShapeMismatch("container holds neither recognizer kind")


def save_weights(model, path):
    with open(path, "wb") as fh:
        fh.write(serialize_weights(model))


def load_weights(path):
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())
