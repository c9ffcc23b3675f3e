"""A miniature deformable-attention detection transformer.

Layout: a patch embedding plus self-attention encoder turns the image into a
feature grid; a decoder refines ``P`` learned proposal slots with self
attention and deformable cross attention; a class head (one logit per class
plus a shared background logit) and a box head read the slots out.

Cross attention always reserves ``memory_length // 2`` prefix key/value
slots. Without a memory pool those slots hold zeros, so running with an
all-zero memory readout is exactly the memory-free model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import ShapeError
from .memory import MemoryPool
from .query import RankingHead, localized_query, rank, uniform_ranking
from .tensor import (
    Tensor,
    bilinear_sample,
    concat,
    layer_norm,
    linear,
    masked_fill,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
    tsum,
)


@dataclass(frozen=True)
class DetectorConfig:
    n_classes: int
    image_size: int = 32
    patch: int = 4
    dim: int = 32
    n_heads: int = 2
    n_points: int = 4
    n_proposals: int = 12
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    memory_length: int = 10

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def background(self) -> int:
        return self.n_classes


@dataclass
class AttentionProjections:
    """Per-layer deformable attention weights, heads stacked along rows.

    ``query``, ``key`` and ``value`` are (D, D) with head m owning rows
    ``m*C:(m+1)*C``; ``output`` is (D, D) with head m owning the matching
    columns. Offsets are produced in feature-grid cells.
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    offset_weight: Tensor
    offset_bias: Tensor
    n_heads: int
    n_points: int


@dataclass
class Prediction:
    scores: np.ndarray  # (C+1,) probabilities, background last
    box: np.ndarray  # (cx, cy, w, h)


@dataclass
class DetectorOutput:
    logits: Tensor  # (B, P, C+1), masked entries -inf
    probs: Tensor
    boxes: Tensor  # (B, P, 4)
    alpha: Tensor | None = None
    readout: Tensor | None = None

    def predictions(self, b: int) -> list[Prediction]:
        return [Prediction(s.copy(), bx.copy()) for s, bx in zip(self.probs.data[b], self.boxes.data[b])]


# deformable attention ---------------------------------------------------------


def _deformable_core(z, ref, fmap, proj: AttentionProjections, m_read=None, return_attention=False):
    B, P, D = z.shape
    _, H, W, Df = fmap.shape
    M, K = proj.n_heads, proj.n_points
    if D % M or Df != D:
        raise ShapeError(f"feature width {Df} / query width {D} incompatible with {M} heads")
    C = D // M
    keys = reshape(linear(fmap, proj.key), (B, H, W, M, C))
    vals = reshape(linear(fmap, proj.value), (B, H, W, M, C))
    kv = transpose(concat([keys, vals], axis=-1), (0, 3, 1, 2, 4))
    kv = reshape(kv, (B * M, H, W, 2 * C))

    offsets = reshape(linear(z, proj.offset_weight, proj.offset_bias), (B, P, M, K, 2))
    ref = ref if isinstance(ref, Tensor) else Tensor(ref)
    scale = np.array([W - 1.0, H - 1.0])
    ref_pix = reshape(ref * scale, (ref.shape[:-2] + (P, 1, 1, 2)) if ref.ndim == 3 else (1, P, 1, 1, 2))
    pix = transpose(ref_pix + offsets, (0, 2, 1, 3, 4))
    pix = reshape(pix, (B * M, P * K, 2))
    sampled = reshape(bilinear_sample(kv, pix), (B, M, P, K, 2 * C))
    sk, sv = sampled[..., :C], sampled[..., C:]

    q = transpose(reshape(linear(z, proj.query), (B, P, M, C)), (0, 2, 1, 3))  # (B, M, P, C)
    inv = 1.0 / np.sqrt(C)
    logits = tsum(reshape(q, (B, M, P, 1, C)) * sk, axis=-1) * inv  # (B, M, P, K)
    if m_read is not None:
        L = m_read.shape[1]
        if m_read.shape[2] != D:
            raise ShapeError(f"memory rows have width {m_read.shape[2]}, expected {D}")
        half = L // 2
        mk = transpose(reshape(m_read[:, :half], (B, half, M, C)), (0, 2, 3, 1))  # (B, M, C, half)
        mv = transpose(reshape(m_read[:, half:], (B, L - half, M, C)), (0, 2, 1, 3))  # (B, M, half, C)
        attn = softmax(concat([logits, matmul(q, mk) * inv], axis=-1), axis=-1)
        out = tsum(reshape(attn[..., :K], (B, M, P, K, 1)) * sv, axis=-2) + matmul(attn[..., K:], mv)
    else:
        attn = softmax(logits, axis=-1)
        out = tsum(reshape(attn, (B, M, P, K, 1)) * sv, axis=-2)
    out = linear(reshape(transpose(out, (0, 2, 1, 3)), (B, P, D)), proj.output)
    return (out, attn) if return_attention else out


def _batched_call(z, ref, fmap, proj, m_read, return_attention):
    z = z if isinstance(z, Tensor) else Tensor(z)
    fmap = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    single = z.ndim == 1
    if single:
        z = reshape(z, (1, 1, -1))
        ref = reshape(ref if isinstance(ref, Tensor) else Tensor(ref), (1, 2))
        fmap = reshape(fmap, (1,) + fmap.shape)
        if m_read is not None:
            m_read = reshape(m_read if isinstance(m_read, Tensor) else Tensor(m_read), (1,) + tuple(m_read.shape))
    elif m_read is not None and not isinstance(m_read, Tensor):
        m_read = Tensor(m_read)
    res = _deformable_core(z, ref, fmap, proj, m_read, return_attention)
    if not single:
        return res
    out, attn = res if return_attention else (res, None)
    out = reshape(out, (out.shape[-1],))
    return (out, reshape(attn, (attn.shape[1], attn.shape[-1]))) if return_attention else out


def deformable_attention(z, ref, fmap, proj: AttentionProjections, return_attention: bool = False):
    """Attend from each query to K sampled points around its reference point.

    Batched: z (B, P, D), ref (P, 2) in [0, 1]^2, fmap (B, H, W, D).
    Unbatched: z (D,), ref (2,), fmap (H, W, D) gives a (D,) output.
    """
    return _batched_call(z, ref, fmap, proj, None, return_attention)


def memory_deformable_attention(z, ref, fmap, m_read, proj: AttentionProjections, return_attention: bool = False):
    """Deformable attention with retrieved memory rows as prefix slots.

    The first half of ``m_read`` rows joins the sampled keys and the second
    half joins the sampled values; one softmax spans all K + L/2 slots.
    """
    return _batched_call(z, ref, fmap, proj, m_read, return_attention)


# detector ---------------------------------------------------------------------


def _sinusoid_2d(grid: int, dim: int) -> np.ndarray:
    quarter = dim // 4
    freq = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for coord in (xs.ravel(), ys.ravel()):
        ang = coord[:, None] * freq[None]
        parts += [np.sin(ang), np.cos(ang)]
    pos = np.concatenate(parts, axis=1)
    return np.pad(pos, ((0, 0), (0, dim - pos.shape[1])))


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


class Detector:
    """Parameters live in ``params`` keyed by dotted names."""

    BBOX_PREFIX = "bbox_embed."
    CLASS_PREFIX = "class_embed."

    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._pos = _sinusoid_2d(config.grid, config.dim)
        self._init_params(np.random.default_rng(seed))

    # construction -------------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _add_linear(self, rng, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
        self._add(f"{name}.weight", rng.normal(0.0, np.sqrt(1.0 / n_in), (n_out, n_in)))
        if bias:
            self._add(f"{name}.bias", np.zeros(n_out))

    def _add_norm(self, name: str) -> None:
        self._add(f"{name}.weight", np.ones(self.config.dim))
        self._add(f"{name}.bias", np.zeros(self.config.dim))

    def _add_mha(self, rng, name: str) -> None:
        D = self.config.dim
        for part in ("q", "k", "v", "o"):
            self._add_linear(rng, f"{name}.{part}", D, D)

    def _init_params(self, rng) -> None:
        c = self.config
        D, M, K, P = c.dim, c.n_heads, c.n_points, c.n_proposals
        self._add_linear(rng, "patch_embed", c.patch * c.patch * 3, D)
        for i in range(c.enc_layers):
            pre = f"encoder.{i}"
            self._add_mha(rng, f"{pre}.attn")
            self._add_norm(f"{pre}.norm1")
            self._add_linear(rng, f"{pre}.ffn1", D, c.ffn_dim)
            self._add_linear(rng, f"{pre}.ffn2", c.ffn_dim, D)
            self._add_norm(f"{pre}.norm2")
        self._add("query_embed", rng.normal(0.0, 1.0, (P, D)))
        cols = int(np.ceil(np.sqrt(P)))
        rows = int(np.ceil(P / cols))
        centers = [((j + 0.5) / cols, (i + 0.5) / rows) for i in range(rows) for j in range(cols)][:P]
        self._add("reference_points", _logit(np.array(centers)))
        angles = 2 * np.pi * np.arange(M * K) / (M * K)
        ring = np.stack([np.cos(angles), np.sin(angles)], axis=1) * (1.0 + np.arange(M * K)[:, None] % K // 2)
        for i in range(c.dec_layers):
            pre = f"decoder.{i}"
            self._add_mha(rng, f"{pre}.self_attn")
            self._add_norm(f"{pre}.norm1")
            for part in ("query", "key", "value", "output"):
                self._add_linear(rng, f"{pre}.cross.{part}", D, D, bias=False)
            self._add(f"{pre}.cross.offset.weight", np.zeros((M * K * 2, D)))
            self._add(f"{pre}.cross.offset.bias", ring.ravel().copy())
            self._add_norm(f"{pre}.norm2")
            self._add_linear(rng, f"{pre}.ffn1", D, c.ffn_dim)
            self._add_linear(rng, f"{pre}.ffn2", c.ffn_dim, D)
            self._add_norm(f"{pre}.norm3")
        self._add("class_embed.weight", rng.normal(0.0, 0.01, (c.n_classes + 1, D)))
        self._add("class_embed.bias", np.zeros(c.n_classes + 1))
        self._add_linear(rng, "bbox_embed.0", D, D)
        self._add("bbox_embed.1.weight", np.zeros((4, D)))
        self._add("bbox_embed.1.bias", np.array([0.0, 0.0, _logit(0.3), _logit(0.3)]))

    # parameter groups ---------------------------------------------------------
    def head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith((self.CLASS_PREFIX, self.BBOX_PREFIX))]

    def backbone_names(self) -> list[str]:
        heads = set(self.head_names())
        return [n for n in self.params if n not in heads]

    def freeze_backbone(self) -> None:
        for n in self.backbone_names():
            self.params[n].requires_grad = False

    def projections(self, layer: int) -> AttentionProjections:
        p, pre = self.params, f"decoder.{layer}.cross"
        return AttentionProjections(
            query=p[f"{pre}.query.weight"],
            key=p[f"{pre}.key.weight"],
            value=p[f"{pre}.value.weight"],
            output=p[f"{pre}.output.weight"],
            offset_weight=p[f"{pre}.offset.weight"],
            offset_bias=p[f"{pre}.offset.bias"],
            n_heads=self.config.n_heads,
            n_points=self.config.n_points,
        )

    # building blocks ----------------------------------------------------------
    def _lin(self, x, name):
        return linear(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"))

    def _norm(self, x, name):
        return layer_norm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _mha(self, x, name):
        B, N, D = x.shape
        M = self.config.n_heads
        C = D // M

        def heads(t):
            return transpose(reshape(t, (B, N, M, C)), (0, 2, 1, 3))

        q, k, v = heads(self._lin(x, f"{name}.q")), heads(self._lin(x, f"{name}.k")), heads(self._lin(x, f"{name}.v"))
        attn = softmax(matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(C)), axis=-1)
        out = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, N, D))
        return self._lin(out, f"{name}.o")

    def _ffn(self, x, name):
        return self._lin(relu(self._lin(x, f"{name}.ffn1")), f"{name}.ffn2")

    # passes -------------------------------------------------------------------
    def _patches(self, images: np.ndarray) -> np.ndarray:
        c = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        B = images.shape[0]
        if images.shape[1:] != (c.image_size, c.image_size, 3):
            raise ShapeError(f"expected images of shape ({c.image_size}, {c.image_size}, 3), got {images.shape[1:]}")
        g, s = c.grid, c.patch
        x = images.reshape(B, g, s, g, s, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, s * s * 3)

    def encode(self, images: np.ndarray) -> Tensor:
        """Images (B, H0, W0, 3) -> feature grid (B, g, g, D)."""
        c = self.config
        x = self._lin(Tensor(self._patches(images)), "patch_embed") + self._pos
        for i in range(c.enc_layers):
            pre = f"encoder.{i}"
            x = self._norm(x + self._mha(x, f"{pre}.attn"), f"{pre}.norm1")
            x = self._norm(x + self._ffn(x, pre), f"{pre}.norm2")
        return reshape(x, (x.shape[0], c.grid, c.grid, c.dim))

    def reference_points(self) -> Tensor:
        return sigmoid(self.params["reference_points"])

    def decode(self, fmap: Tensor, readout: Tensor | None = None) -> Tensor:
        """Decoder slots (B, P, D); ``readout`` (B, L_m, D) or None for zeros."""
        c = self.config
        B = fmap.shape[0]
        if readout is None and c.memory_length:
            readout = Tensor(np.zeros((B, c.memory_length, c.dim)))
        if readout is not None and readout.shape[1:] != (c.memory_length, c.dim):
            raise ShapeError(f"memory readout {readout.shape} does not fit ({c.memory_length}, {c.dim}) slots")
        z = reshape(self.params["query_embed"], (1, c.n_proposals, c.dim)) * np.ones((B, 1, 1))
        ref = self.reference_points()
        for i in range(c.dec_layers):
            pre = f"decoder.{i}"
            z = self._norm(z + self._mha(z, f"{pre}.self_attn"), f"{pre}.norm1")
            z = self._norm(z + _deformable_core(z, ref, fmap, self.projections(i), readout), f"{pre}.norm2")
            z = self._norm(z + self._ffn(z, pre), f"{pre}.norm3")
        return z

    def heads(self, hidden: Tensor, visible: Iterable[int] | None = None) -> tuple[Tensor, Tensor]:
        """Masked class logits (B, P, C+1) and boxes (B, P, 4)."""
        c = self.config
        logits = self._lin(hidden, "class_embed")
        if visible is not None:
            mask = np.ones(c.n_classes + 1, dtype=bool)
            mask[list(visible)] = False
            mask[c.background] = False
            if mask.any():
                logits = masked_fill(logits, mask, -np.inf)
        raw = self._lin(relu(self._lin(hidden, "bbox_embed.0")), "bbox_embed.1")
        anchor = concat([self.params["reference_points"], Tensor(np.zeros((c.n_proposals, 2)))], axis=-1)
        return logits, sigmoid(raw + anchor)

    def extract_proposals(self, images: np.ndarray) -> Tensor:
        """Memory-free decoder slots (B, P, D) from the current weights, no graph."""
        with no_grad():
            return self.decode(self.encode(images))

    def forward(
        self,
        images: np.ndarray,
        pool: MemoryPool | None = None,
        visible: Iterable[int] | None = None,
        ranker: RankingHead | None = None,
    ) -> DetectorOutput:
        fmap = self.encode(images)
        return self.forward_features(fmap, self.extract_proposals(images) if pool is not None else None,
                                     pool, visible, ranker)

    def forward_features(
        self,
        fmap: Tensor,
        proposals: Tensor | None,
        pool: MemoryPool | None,
        visible: Iterable[int] | None,
        ranker: RankingHead | None = None,
    ) -> DetectorOutput:
        """Forward from cached encoder features and memory-free proposals."""
        alpha = readout = None
        if pool is not None:
            alpha = rank(ranker, proposals) if ranker is not None else uniform_ranking(proposals)
            readout = pool.retrieve(localized_query(proposals, alpha)).memory
        hidden = self.decode(fmap, readout)
        logits, boxes = self.heads(hidden, visible)
        return DetectorOutput(logits, softmax(logits, axis=-1), boxes, alpha, readout)

    def config_dict(self) -> dict:
        return asdict(self.config)
