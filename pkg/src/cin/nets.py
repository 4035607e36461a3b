"""Base classifier and examiner network with channel-attention taps.

The base network is a small CNN classifier split into a feature
extractor and a linear head; the head is held fixed while adapting to
an unlabeled target domain. The examiner shares the same encoder
architecture (independent weights) and answers, for a triplet of
images (anchor, b, c), which candidate is closer to the anchor.

Both encoders expose the per-channel attention vector produced by an
efficient-channel-attention block placed after the last conv stage, so
the two networks' attention can be compared on the same image.
"""
from __future__ import annotations

import math
import struct
from typing import Iterable

import numpy as np

from .seeding import derive_rng
from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    conv1d_channels,
    conv2d,
    global_avg_pool,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
)

__all__ = [
    "EcaBlock",
    "BaseNetwork",
    "ExaminerNetwork",
    "base_forward",
    "examiner_forward",
    "eca_attention",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CKPT_MAGIC = b"CINCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


def _he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype) -> Tensor:
    limit = math.sqrt(6.0 / fan_in)
    data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class EcaBlock:
    """Efficient channel attention: a 1-D conv over the pooled channel
    descriptor, squashed through a sigmoid, gates each channel.
    """

    def __init__(self, channels: int, k: int = 3, *, rng: np.random.Generator, dtype=np.float32):
        if k % 2 == 0:
            raise ValueError(f"EcaBlock: kernel size k={k} must be odd")
        if not 1 <= k <= channels:
            raise ValueError(f"EcaBlock: need 1 <= k <= channels, got k={k}, C={channels}")
        self.channels = channels
        self.k = k
        self.weight = _he_uniform((k,), fan_in=k, rng=rng, dtype=dtype)

    def __call__(self, fmap: Tensor) -> tuple[Tensor, Tensor]:
        """Return (gated feature map, attention[M,C]); entries of A in (0,1)."""
        m, c = fmap.shape[0], fmap.shape[1]
        if c != self.channels:
            raise ShapeError(f"EcaBlock: expected {self.channels} channels, got {c}")
        attention = sigmoid(conv1d_channels(global_avg_pool(fmap), self.weight))
        gated = mul(fmap, reshape(attention, (m, c, 1, 1)))
        return gated, attention

    def parameters(self) -> dict[str, Tensor]:
        return {"eca.w": self.weight}


class _ConvEncoder:
    """Two strided conv layers, ECA gate, global average pool, linear map
    to the feature space. Shared by the base network and the examiner.
    """

    def __init__(
        self,
        *,
        in_channels: int,
        conv_channels: tuple[int, int],
        feature_dim: int,
        eca_k: int,
        rng: np.random.Generator,
        dtype,
    ):
        c1, c2 = conv_channels
        self.conv1_w = _he_uniform((c1, in_channels, 3, 3), in_channels * 9, rng, dtype)
        self.conv1_b = _zeros((c1,), dtype)
        self.conv2_w = _he_uniform((c2, c1, 3, 3), c1 * 9, rng, dtype)
        self.conv2_b = _zeros((c2,), dtype)
        self.eca = EcaBlock(c2, eca_k, rng=rng, dtype=dtype)
        self.fc_w = _he_uniform((c2, feature_dim), c2, rng, dtype)
        self.fc_b = _zeros((feature_dim,), dtype)
        self.channels = c2
        self.feature_dim = feature_dim

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """images [M,C_in,H,W] -> (features [M,d], attention [M,C])."""
        h = relu(add(conv2d(x, self.conv1_w, stride=2, pad=1),
                     reshape(self.conv1_b, (1, -1, 1, 1))))
        h = relu(add(conv2d(h, self.conv2_w, stride=2, pad=1),
                     reshape(self.conv2_b, (1, -1, 1, 1))))
        h, attention = self.eca(h)
        pooled = global_avg_pool(h)
        features = add(matmul(pooled, self.fc_w), self.fc_b)
        return features, attention

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {
            f"{prefix}conv1.w": self.conv1_w,
            f"{prefix}conv1.b": self.conv1_b,
            f"{prefix}conv2.w": self.conv2_w,
            f"{prefix}conv2.b": self.conv2_b,
        }
        params.update({f"{prefix}{k}": v for k, v in self.eca.parameters().items()})
        params[f"{prefix}fc.w"] = self.fc_w
        params[f"{prefix}fc.b"] = self.fc_b
        return params


class BaseNetwork:
    """Image classifier: conv feature extractor plus a linear class head.

    ``frozen_head`` gates whether the head appears in
    ``trainable_parameters()``; adaptation runs set it so the head
    stays bit-identical while only the extractor moves.
    """

    def __init__(
        self,
        num_classes: int,
        *,
        in_channels: int = 1,
        conv_channels: tuple[int, int] = (16, 32),
        feature_dim: int = 64,
        eca_k: int = 3,
        frozen_head: bool = False,
        seed: int = 0,
        dtype=np.float32,
    ):
        if num_classes < 2:
            raise ValueError(f"BaseNetwork: need at least 2 classes, got {num_classes}")
        rng = derive_rng(seed, "base-init")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.conv_channels = tuple(conv_channels)
        self.feature_dim = feature_dim
        self.eca_k = eca_k
        self.frozen_head = frozen_head
        self.dtype = np.dtype(dtype)
        self.encoder = _ConvEncoder(
            in_channels=in_channels,
            conv_channels=self.conv_channels,
            feature_dim=feature_dim,
            eca_k=eca_k,
            rng=rng,
            dtype=self.dtype,
        )
        self.head_w = _he_uniform((feature_dim, num_classes), feature_dim, rng, self.dtype)
        self.head_b = _zeros((num_classes,), self.dtype)

    @property
    def attention_channels(self) -> int:
        return self.encoder.channels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """images [M,C_in,H,W] -> (features [M,d], logits [M,K], attention [M,C])."""
        features, attention = self.encoder(x)
        logits = add(matmul(features, self.head_w), self.head_b)
        return features, logits, attention

    def __call__(self, x: Tensor):
        return self.forward(x)

    def parameters(self) -> dict[str, Tensor]:
        params = self.encoder.parameters("")
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def trainable_parameters(self) -> list[Tensor]:
        params = self.parameters()
        if self.frozen_head:
            params.pop("head.w")
            params.pop("head.b")
        return list(params.values())

    def head_snapshot(self) -> dict[str, np.ndarray]:
        return {"head.w": self.head_w.data.copy(), "head.b": self.head_b.data.copy()}

    def arch_config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "feature_dim": self.feature_dim,
            "eca_k": self.eca_k,
        }

    @classmethod
    def from_config(cls, config: dict, *, seed: int = 0, dtype=np.float32) -> "BaseNetwork":
        return cls(
            config["num_classes"],
            in_channels=config.get("in_channels", 1),
            conv_channels=tuple(config.get("conv_channels", (16, 32))),
            feature_dim=config.get("feature_dim", 64),
            eca_k=config.get("eca_k", 3),
            seed=seed,
            dtype=dtype,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        _load_into(self.parameters(), state, self.dtype)

    def clone(self) -> "BaseNetwork":
        other = BaseNetwork.from_config(self.arch_config(), dtype=self.dtype)
        other.frozen_head = self.frozen_head
        other.load_state_dict(self.state_dict())
        return other


class ExaminerNetwork:
    """Relative-ordering network over image triplets.

    One encoder (same family as the base network's, independent
    weights) maps each triplet member to features; the concatenated
    (anchor, b, c) features feed a 256-unit hidden layer and a 2-way
    softmax over {0: b is closer to the anchor, 1: c is closer}.
    """

    def __init__(
        self,
        *,
        in_channels: int = 1,
        conv_channels: tuple[int, int] = (16, 32),
        feature_dim: int = 64,
        eca_k: int = 3,
        hidden_dim: int = 256,
        seed: int = 0,
        dtype=np.float32,
    ):
        rng = derive_rng(seed, "examiner-init")
        self.in_channels = in_channels
        self.conv_channels = tuple(conv_channels)
        self.feature_dim = feature_dim
        self.eca_k = eca_k
        self.hidden_dim = hidden_dim
        self.dtype = np.dtype(dtype)
        self.encoder = _ConvEncoder(
            in_channels=in_channels,
            conv_channels=self.conv_channels,
            feature_dim=feature_dim,
            eca_k=eca_k,
            rng=rng,
            dtype=self.dtype,
        )
        self.head1_w = _he_uniform((3 * feature_dim, hidden_dim), 3 * feature_dim, rng, self.dtype)
        self.head1_b = _zeros((hidden_dim,), self.dtype)
        self.head2_w = _he_uniform((hidden_dim, 2), hidden_dim, rng, self.dtype)
        self.head2_b = _zeros((2,), self.dtype)

    @property
    def attention_channels(self) -> int:
        return self.encoder.channels

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """images [M,C_in,H,W] -> (features [M,d], attention [M,C])."""
        return self.encoder(x)

    def head(self, fused: Tensor) -> Tensor:
        """fused [T,3d] -> ordering logits [T,2]."""
        h = relu(add(matmul(fused, self.head1_w), self.head1_b))
        return add(matmul(h, self.head2_w), self.head2_b)

    def forward_triplets(
        self, anchors: Tensor, bs: Tensor, cs: Tensor
    ) -> tuple[Tensor, tuple[Tensor, Tensor, Tensor]]:
        """Encode a triplet batch and return (logits [T,2], attentions).

        The same encoder weights are applied to all three members.
        """
        if not (anchors.shape == bs.shape == cs.shape):
            raise ShapeError(
                "forward_triplets: members must share one shape, got "
                f"{anchors.shape} / {bs.shape} / {cs.shape}"
            )
        f_a, att_a = self.encode(anchors)
        f_b, att_b = self.encode(bs)
        f_c, att_c = self.encode(cs)
        logits = self.head(concat([f_a, f_b, f_c], axis=1))
        return logits, (att_a, att_b, att_c)

    def parameters(self) -> dict[str, Tensor]:
        params = self.encoder.parameters("")
        params["head1.w"] = self.head1_w
        params["head1.b"] = self.head1_b
        params["head2.w"] = self.head2_w
        params["head2.b"] = self.head2_b
        return params

    def trainable_parameters(self) -> list[Tensor]:
        return list(self.parameters().values())

    def arch_config(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "feature_dim": self.feature_dim,
            "eca_k": self.eca_k,
            "hidden_dim": self.hidden_dim,
        }

    @classmethod
    def from_config(cls, config: dict, *, seed: int = 0, dtype=np.float32) -> "ExaminerNetwork":
        return cls(
            in_channels=config.get("in_channels", 1),
            conv_channels=tuple(config.get("conv_channels", (16, 32))),
            feature_dim=config.get("feature_dim", 64),
            eca_k=config.get("eca_k", 3),
            hidden_dim=config.get("hidden_dim", 256),
            seed=seed,
            dtype=dtype,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        _load_into(self.parameters(), state, self.dtype)

    def clone(self) -> "ExaminerNetwork":
        other = ExaminerNetwork.from_config(self.arch_config(), dtype=self.dtype)
        other.load_state_dict(self.state_dict())
        return other


def _load_into(params: dict[str, Tensor], state: dict[str, np.ndarray], dtype) -> None:
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names mismatch: missing={missing} extra={extra}")
    for name, tensor in params.items():
        arr = np.asarray(state[name], dtype=dtype)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: shape {arr.shape} != expected {tensor.data.shape}"
            )
        tensor.data = arr.copy()
        tensor.grad = None


# -- free-function views of the network ops ------------------------------


def base_forward(net: BaseNetwork, batch: Tensor):
    """(features, logits, attention) for an image batch."""
    return net.forward(batch)


def examiner_forward(net: ExaminerNetwork, triplets):
    """triplets = (anchors, bs, cs) image tensors -> (logits, attentions)."""
    if len(triplets) != 3:
        raise ShapeError(f"examiner_forward: expected 3 image stacks, got {len(triplets)}")
    return net.forward_triplets(*triplets)


def eca_attention(fmap: Tensor, k: int, weight: Tensor | None = None):
    """Stand-alone ECA gate for a feature map; returns (gated, attention).

    When ``weight`` is omitted a zero kernel is used, which makes the
    attention exactly 0.5 everywhere.
    """
    if k % 2 == 0:
        raise ValueError(f"eca_attention: kernel size k={k} must be odd")
    if weight is None:
        weight = Tensor(np.zeros(k, dtype=fmap.dtype))
    m, c = fmap.shape[0], fmap.shape[1]
    attention = sigmoid(conv1d_channels(global_avg_pool(fmap), weight))
    return mul(fmap, reshape(attention, (m, c, 1, 1))), attention


# -- checkpoint container -------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor] | dict[str, np.ndarray]) -> None:
    """Write named parameters as little-endian float32, bit-exact round trip."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name in params:
            value = params[name]
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f4"
            )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(CKPT_MAGIC)

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        params[name] = arr.copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameter list")
    return params
