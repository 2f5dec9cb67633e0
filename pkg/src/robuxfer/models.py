"""Small classifiers built as ordered, named blocks.

A :class:`ModelGraph` is a list of :class:`Block` objects ending in a single
fully connected ``fc`` block. Everything before ``fc`` is the feature
extractor; ``features(x)`` is the tensor that enters ``fc``. Each block
carries a ``trainable`` flag. Frozen blocks always run in eval mode and never
have their parameters or running statistics touched.
"""
from __future__ import annotations

import copy
import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, UsageError


@dataclass
class Block:
    """One named unit of a model.

    ``kind`` is one of ``conv``, ``residual``, ``bn_pool``, ``linear``, ``bn``,
    ``relu``, ``dropout``, ``pool_adapter`` or ``fc``; ``config`` holds the
    structural settings needed to rebuild it and ``params``/``buffers`` the
    learned values and BN running statistics.
    """

    name: str
    kind: str
    config: dict
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    trainable: bool = True

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for k, p in self.params.items():
            yield f"{self.name}.{k}", p

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for k, b in self.buffers.items():
            yield f"{self.name}.{k}", b

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    # -- init ------------------------------------------------------------

    def reinit(self, rng: np.random.Generator, dtype=np.float32) -> None:
        c = self.config
        p: dict[str, Tensor] = {}
        b: dict[str, np.ndarray] = {}

        def he(shape, fan_in):
            return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))

        def bn(prefix, n):
            p[f"{prefix}gamma"] = Tensor(np.ones(n, dtype=dtype))
            p[f"{prefix}beta"] = Tensor(np.zeros(n, dtype=dtype))
            b[f"{prefix}mean"] = np.zeros(n, dtype=dtype)
            b[f"{prefix}var"] = np.ones(n, dtype=dtype)

        if self.kind == "conv":
            cin, cout, r = c["in_ch"], c["out_ch"], c["kernel"]
            p["weight"] = he((cout, cin, r, r), cin * r * r)
        elif self.kind == "residual":
            cin, cout = c["in_ch"], c["out_ch"]
            bn("bn1_", cin)
            k1, ks = c.get("kernel", 3), c.get("shortcut_kernel", 1)
            p["conv1"] = he((cout, cin, k1, k1), cin * k1 * k1)
            bn("bn2_", cout)
            p["conv2"] = he((cout, cout, 3, 3), cout * 9)
            if c["stride"] != 1 or cin != cout:
                p["shortcut"] = he((cout, cin, ks, ks), cin * ks * ks)
        elif self.kind == "bn_pool":
            bn("", c["channels"])
        elif self.kind == "bn":
            bn("", c["features"])
        elif self.kind in ("linear", "fc"):
            fin, fout = c["in_features"], c["out_features"]
            p["weight"] = he((fout, fin), fin)
            p["bias"] = Tensor(np.zeros(fout, dtype=dtype))
        for t in p.values():
            t.requires_grad = self.trainable
        self.params, self.buffers = p, b

    # -- forward ---------------------------------------------------------

    def _bn(self, x, prefix: str, training: bool) -> Tensor:
        return ad.batchnorm(x, self.params[f"{prefix}gamma"], self.params[f"{prefix}beta"],
                            self.buffers[f"{prefix}mean"], self.buffers[f"{prefix}var"],
                            training=training)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        training = training and self.trainable and not self.config.get("frozen_bn", False)
        k, c, p = self.kind, self.config, self.params
        if k == "conv":
            return ad.conv2d(x, p["weight"], stride=c["stride"], pad=(c["kernel"] - 1) // 2)
        if k == "residual":
            h = ad.relu(self._bn(x, "bn1_", training))
            shortcut = ad.conv2d(h, p["shortcut"], stride=c["stride"]) if "shortcut" in p else x
            h = ad.conv2d(h, p["conv1"], stride=c["stride"], pad=(p["conv1"].shape[-1] - 1) // 2)
            h = ad.relu(self._bn(h, "bn2_", training))
            h = ad.conv2d(h, p["conv2"], stride=1, pad=1)
            return ad.add(h, shortcut)
        if k == "bn_pool":
            return ad.global_avgpool(ad.relu(self._bn(x, "", training)))
        if k == "bn":
            return self._bn(x, "", training)
        if k in ("linear", "fc"):
            if x.ndim != 2:
                x = ad.flatten(x)
            return ad.linear(x, p["weight"], p["bias"])
        if k == "relu":
            return ad.relu(x)
        if k == "dropout":
            return ad.dropout(x, c["p"], training=training)
        if k == "pool_adapter":
            return ad.global_avgpool(x) if x.ndim == 4 else x
        raise UsageError(f"unknown block kind {k!r}")


class ModelGraph:
    """Ordered named blocks with exactly one terminal ``fc`` block."""

    def __init__(self, blocks: list[Block], num_classes: int, feature_dim: int,
                 in_shape: tuple[int, ...] | None = None, meta: dict | None = None):
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise UsageError(f"block names must be distinct: {names}")
        if not blocks or blocks[-1].kind != "fc" or sum(b.kind == "fc" for b in blocks) != 1:
            raise UsageError("a ModelGraph needs exactly one fc block, in last position")
        if blocks[-1].config["in_features"] != feature_dim:
            raise UsageError("fc input width must equal feature_dim")
        self.blocks = blocks
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.in_shape = tuple(in_shape) if in_shape else None
        self.meta = dict(meta or {})

    # -- structure -------------------------------------------------------

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def block_names(self) -> list[str]:
        return [b.name for b in self.blocks]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def fc(self) -> Block:
        return self.blocks[-1]

    @property
    def extractor(self) -> list[Block]:
        return self.blocks[:-1]

    def named_params(self, trainable_only: bool = False) -> list[tuple[str, Tensor]]:
        out = []
        for b in self.blocks:
            if trainable_only and not b.trainable:
                continue
            out.extend(b.named_params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for b in self.blocks:
            out.extend(b.named_buffers())
        return out

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def set_trainable(self, flags: dict[str, bool] | bool) -> None:
        for b in self.blocks:
            if isinstance(flags, bool):
                b.trainable = flags
            elif b.name in flags:
                b.trainable = flags[b.name]
            for p in b.params.values():
                p.requires_grad = b.trainable

    @contextmanager
    def param_grads(self, enabled: bool):
        """Temporarily force ``requires_grad`` on every parameter (attacks use ``False``)."""
        saved = [(p, p.requires_grad) for _, p in self.named_params()]
        for p, _ in saved:
            p.requires_grad = enabled
        try:
            yield self
        finally:
            for p, flag in saved:
                p.requires_grad = flag

    def trainable_blocks(self) -> list[str]:
        return [b.name for b in self.blocks if b.trainable and b.has_params]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "ModelGraph":
        m = self.copy()
        for b in m.blocks:
            for p in b.params.values():
                p.data = p.data.astype(dtype)
            for k in b.buffers:
                b.buffers[k] = b.buffers[k].astype(dtype)
        return m

    # -- evaluation ------------------------------------------------------

    def features(self, x, training: bool = False) -> Tensor:
        h = ad.as_tensor(x)
        for b in self.extractor:
            h = b.forward(h, training)
        return h

    def head(self, z, training: bool = False) -> Tensor:
        return self.fc.forward(ad.as_tensor(z), training)

    def forward(self, x, training: bool = False) -> Tensor:
        return self.head(self.features(x, training), training)

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        return self.logits(x, batch_size).argmax(axis=1)

    def logits(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))

    def feature_array(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = [self.features(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))

    # -- persistence -----------------------------------------------------

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(n, p.data) for n, p in self.named_params()] + self.named_buffers()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for b in self.blocks:
            for k, p in b.params.items():
                p.data = np.asarray(state[f"{b.name}.{k}"], dtype=p.dtype).reshape(p.shape)
            for k, buf in b.buffers.items():
                b.buffers[k] = np.asarray(state[f"{b.name}.{k}"], dtype=buf.dtype).reshape(buf.shape)

    def digest(self) -> bytes:
        """SHA-256 of the RXF1 encoding of parameters and running statistics."""
        return hashlib.sha256(ad.encode_checkpoint(self.state())).digest()

    def sidecar(self) -> dict:
        return {
            "blocks": [{"name": b.name, "kind": b.kind, "trainable": b.trainable, "config": b.config}
                       for b in self.blocks],
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "in_shape": list(self.in_shape) if self.in_shape else None,
            "meta": self.meta,
        }

    def save(self, path, optimizer: ad.SGDMomentum | None = None) -> None:
        """Write ``path`` (RXF1) and ``path + '.json'`` (block layout)."""
        named = self.state()
        if optimizer is not None:
            named = named + [(f"momentum.{k}", v) for k, v in sorted(optimizer.state.items())]
        ad.save_checkpoint(path, named)
        with open(f"{path}.json", "w") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ModelGraph":
        with open(f"{path}.json") as fh:
            side = json.load(fh)
        blocks = [Block(d["name"], d["kind"], d["config"], trainable=d["trainable"])
                  for d in side["blocks"]]
        rng = np.random.default_rng(0)
        for b in blocks:
            b.reinit(rng, dtype)
        m = cls(blocks, side["num_classes"], side["feature_dim"], side.get("in_shape"), side.get("meta"))
        m.load_state(ad.load_checkpoint(path))
        return m


# --------------------------------------------------------------------------
# builders

def _init_blocks(blocks: list[Block], seed: int, dtype) -> None:
    for i, b in enumerate(blocks):
        b.reinit(ad.make_rng(seed, f"init/{b.name}", i), dtype)


def build_cnn_lite(width: int = 8, depth: int = 14, num_classes: int = 10,
                   in_shape: tuple[int, int, int] = (1, 28, 28), seed: int = 0,
                   init_stride: int = 2, dtype=np.float32) -> ModelGraph:
    """Miniature pre-activation wide-ResNet.

    ``depth`` follows the WRN convention ``depth = 6 n + 2`` with ``n``
    residual units per group; the default ``depth=14`` gives two units per
    group and nine blocks in total. Group widths are ``width``, ``2 width``
    and ``4 width``.
    """
    if depth < 8 or (depth - 2) % 6:
        raise UsageError(f"depth must be 6n+2 with n >= 1, got {depth}")
    n = (depth - 2) // 6
    cin, size = in_shape[0], in_shape[1]

    def down(extent, stride):
        # stride-2 kernels are chosen by parity so the output extent is integral
        if stride == 1:
            return 3, 1, extent
        if extent % 2 == 0:
            return 4, 2, extent // 2
        return 3, 1, (extent - 1) // 2 + 1

    k0, _, size = down(size, init_stride)
    blocks = [Block("conv_init", "conv", {"in_ch": cin, "out_ch": width, "kernel": k0, "stride": init_stride})]
    ch = width
    for g, mult in enumerate((1, 2, 4), start=1):
        out = width * mult
        for i in range(1, n + 1):
            stride = 2 if (g > 1 and i == 1) else 1
            k1, ks, size = down(size, stride)
            blocks.append(Block(f"g{g}b{i}", "residual", {"in_ch": ch, "out_ch": out, "stride": stride,
                                                          "kernel": k1, "shortcut_kernel": ks}))
            ch = out
    blocks.append(Block("bn_final", "bn_pool", {"channels": ch}))
    blocks.append(Block("fc", "fc", {"in_features": ch, "out_features": num_classes}))
    _init_blocks(blocks, seed, dtype)
    return ModelGraph(blocks, num_classes, ch, in_shape,
                      meta={"builder": "cnn_lite", "width": width, "depth": depth, "seed": seed})


def build_mlp_head(feature_dim: int, hidden_layers: int = 0, hidden_width: int = 64,
                   num_classes: int = 10, dropout: bool = False, bn: bool = False,
                   dropout_p: float = 0.25, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """MLP classifier on feature vectors; ``hidden_layers=0`` is a single affine map.

    Each hidden layer is linear, then optional BN, ReLU, then optional dropout.
    """
    if hidden_layers < 0:
        raise UsageError("hidden_layers must be >= 0")
    blocks: list[Block] = []
    fin = feature_dim
    for i in range(1, hidden_layers + 1):
        blocks.append(Block(f"h{i}", "linear", {"in_features": fin, "out_features": hidden_width}))
        if bn:
            blocks.append(Block(f"h{i}_bn", "bn", {"features": hidden_width}))
        blocks.append(Block(f"h{i}_relu", "relu", {}))
        if dropout:
            blocks.append(Block(f"h{i}_drop", "dropout", {"p": dropout_p}))
        fin = hidden_width
    blocks.append(Block("fc", "fc", {"in_features": fin, "out_features": num_classes}))
    _init_blocks(blocks, seed, dtype)
    return ModelGraph(blocks, num_classes, fin, (feature_dim,),
                      meta={"builder": "mlp_head", "hidden_layers": hidden_layers,
                            "hidden_width": hidden_width, "seed": seed})


def compose(extractor: ModelGraph | list[Block], head: ModelGraph,
            extractor_dim: int | None = None) -> ModelGraph:
    """Stack a feature extractor (a model's non-fc blocks) under ``head``.

    ``extractor`` may be a ModelGraph (its ``fc`` is dropped) or a block list
    whose output width is ``extractor_dim``. A global average-pool adapter is
    inserted when the extractor emits spatial maps.
    """
    if isinstance(extractor, ModelGraph):
        ex_blocks = copy.deepcopy(extractor.extractor)
        dim = extractor.feature_dim
        in_shape = extractor.in_shape
    else:
        ex_blocks = copy.deepcopy(list(extractor))
        dim = extractor_dim if extractor_dim is not None else head.in_shape[0]
        in_shape = None
    head_in = head.in_shape[0] if head.in_shape else head.blocks[0].config.get("in_features")
    if dim != head_in:
        raise UsageError(f"head expects width {head_in} but extractor provides {dim}")
    if ex_blocks and ex_blocks[-1].kind in ("conv", "residual"):
        ex_blocks.append(Block("pool_adapter", "pool_adapter", {}))
    hb = copy.deepcopy(head.blocks)
    clash = {b.name for b in ex_blocks} & {b.name for b in hb}
    if clash:
        raise UsageError(f"block names collide when composing: {sorted(clash)}")
    return ModelGraph(ex_blocks + hb, head.num_classes, head.feature_dim, in_shape,
                      meta={"composed": True, "head": head.meta})


def reinit_blocks(m: ModelGraph, k: int, seed: int = 0) -> ModelGraph:
    """Fresh init for the ``k`` deepest blocks (1 = fc); freeze the rest."""
    if not 1 <= k <= len(m):
        raise UsageError(f"block index k must lie in [1, {len(m)}], got {k}")
    out = m.copy()
    cut = len(out) - k
    for i, b in enumerate(out.blocks):
        if i >= cut:
            b.trainable = True
            dtype = next(iter(b.params.values())).dtype if b.params else np.float32
            b.reinit(ad.make_rng(seed, f"reinit/{b.name}", i), dtype)
        else:
            b.trainable = False
            for p in b.params.values():
                p.requires_grad = False
    return out


def features(m: ModelGraph, x, training: bool = False) -> Tensor:
    return m.features(x, training)
