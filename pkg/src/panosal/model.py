"""Full encoder/decoder model and checkpoint I/O.

Encoder: three overlapping soft splits shrink the image grid by 4, 2, 2;
token transformers squeeze window dims down to c after the first two splits,
a linear projection lifts the third to the embedding dim d; positional
embedding (plus the regulated latitude prior when enabled) is added before a
stack of transformer blocks.

Decoder: optional distortion gate on the encoder output, then three fold
stages grow the grid back (2, 2, 4), with projected low-level tokens added
as skips and a deformable attention block after each of the first two
folds; two per-pixel linear heads emit saliency and edge logits at input
resolution.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import (
    DeformableAttentionBlock,
    MultiHeadSelfAttention,
    TokenTransformer,
    TransformerBlock,
)
from .distortion import DistortionGate, ScaleRegulator
from .geometry import PRIOR_KINDS, init_relation_matrix
from .nn import Ctx, Linear, Module, ModuleList, Param, sigmoid
from .tokenizer import (
    SoftSplitSpec,
    TokenSequence,
    map_to_tokens,
    out_length,
    overlap_count,
    soft_split,
    token_fold,
    tokens_to_map,
)

CHECKPOINT_MAGIC = b"PANOSAL1"


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural hyperparameter of the network."""

    height: int = 224
    width: int = 448
    token_dim: int = 64          # c: low-level token dim
    embed_dim: int = 384         # d: transformer embedding dim
    depth: int = 14              # encoder transformer blocks
    heads: int = 6
    mlp_ratio: float = 4.0
    token_mlp_ratio: float = 1.0
    fold_channels: int = 64      # channels carried through each fold stage
    regulator_hidden: tuple[int, int] = (64, 192)
    split_kernels: tuple[int, int, int] = (7, 3, 3)
    split_overlaps: tuple[int, int, int] = (3, 1, 1)
    split_pads: tuple[int, int, int] = (2, 1, 1)
    use_dm: bool = True
    use_da: bool = True
    use_rm: bool = True
    use_pe: bool = True
    use_skips: bool = True
    prior: str = "cosine"
    normalized_fold: bool = False
    dropout: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        strides = [k - o for k, o in zip(self.split_kernels, self.split_overlaps)]
        total = int(np.prod(strides))
        if self.height % total != 0 or self.width % total != 0:
            raise ValueError(
                f"input {self.height}x{self.width} must be divisible by {total}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.prior not in PRIOR_KINDS:
            raise ValueError(f"prior must be one of {PRIOR_KINDS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for k, o, p in zip(self.split_kernels, self.split_overlaps, self.split_pads):
            SoftSplitSpec(k, o, p)  # validates

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def split_specs(self) -> tuple[SoftSplitSpec, ...]:
        return tuple(
            SoftSplitSpec(k, o, p)
            for k, o, p in zip(self.split_kernels, self.split_overlaps, self.split_pads)
        )

    def grid_sizes(self) -> list[tuple[int, int]]:
        """Token grids after each split: [(H/4,W/4), (H/8,W/8), (H/16,W/16)]."""
        h, w = self.height, self.width
        grids = []
        for spec in self.split_specs:
            h = out_length(h, spec)
            w = out_length(w, spec)
            grids.append((h, w))
        return grids

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("regulator_hidden", "split_kernels", "split_overlaps",
                    "split_pads"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelOutput:
    saliency_logits: np.ndarray  # (B, 1, H, W)
    edge_logits: np.ndarray      # (B, 1, H, W)

    @property
    def saliency(self) -> np.ndarray:
        return sigmoid(self.saliency_logits)

    @property
    def edge(self) -> np.ndarray:
        return sigmoid(self.edge_logits)


class FoldStage(Module):
    """Project d -> fc*k^2, fold onto the larger grid, project fc -> d."""

    def __init__(self, embed_dim: int, fold_channels: int, spec: SoftSplitSpec,
                 out_h: int, out_w: int, normalized: bool, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.out_h = out_h
        self.out_w = out_w
        k2 = spec.kernel * spec.kernel
        self.proj_in = Linear(embed_dim, fold_channels * k2, dtype=dtype)
        self.proj_out = Linear(fold_channels, embed_dim, dtype=dtype)
        self._counts = None
        if normalized:
            self._counts = overlap_count(spec, out_h, out_w).astype(dtype)

    def forward(self, t: TokenSequence, ctx: Ctx) -> TokenSequence:
        u = self.proj_in.forward(t.data, ctx)
        m = token_fold(t.with_data(u), self.spec, self.out_h, self.out_w)
        if self._counts is not None:
            m = m / self._counts
        tok = map_to_tokens(m)
        return tok.with_data(self.proj_out.forward(tok.data, ctx))

    def backward(self, g: np.ndarray) -> np.ndarray:
        g_tok = self.proj_out.backward(g)
        g_map = tokens_to_map(TokenSequence(g_tok, self.out_h, self.out_w))
        if self._counts is not None:
            g_map = g_map / self._counts
        g_cols = soft_split(g_map, self.spec)
        return self.proj_in.backward(g_cols.data)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.np_dtype
        specs = cfg.split_specs
        c, d = cfg.token_dim, cfg.embed_dim
        self.cfg = cfg
        self.attn1 = TokenTransformer(3 * specs[0].kernel ** 2, c,
                                      cfg.token_mlp_ratio, dtype=dt)
        self.attn2 = TokenTransformer(c * specs[1].kernel ** 2, c,
                                      cfg.token_mlp_ratio, dtype=dt)
        self.project = Linear(c * specs[2].kernel ** 2, d, dtype=dt)
        (g1, g2, g3) = cfg.grid_sizes()
        if cfg.use_pe:
            self.pos_embed = Param((1, g3[0] * g3[1], d), dtype=dt)
        if cfg.use_rm:
            self.regulator = ScaleRegulator(d, cfg.regulator_hidden, dtype=dt)
        self.blocks = ModuleList([
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio, cfg.dropout, dtype=dt)
            for _ in range(cfg.depth)
        ])
        self._rm = init_relation_matrix(cfg.height, cfg.width, cfg.prior)
        self._grids = (g1, g2, g3)
        self._batch = None

    def forward(self, image: np.ndarray, ctx: Ctx):
        cfg = self.cfg
        b = image.shape[0]
        if image.shape[1:] != (3, cfg.height, cfg.width):
            raise ValueError(
                f"expected (B, 3, {cfg.height}, {cfg.width}), got {image.shape}"
            )
        specs = cfg.split_specs
        (g1, g2, g3) = self._grids

        t = soft_split(image, specs[0])
        t1 = t.with_data(self.attn1.forward(t.data, ctx))
        t = soft_split(tokens_to_map(t1), specs[1])
        t2 = t.with_data(self.attn2.forward(t.data, ctx))
        t = soft_split(tokens_to_map(t2), specs[2])
        e = self.project.forward(t.data, ctx)
        if cfg.use_pe:
            e = e + self.pos_embed.data
        if cfg.use_rm:
            e = e + self.regulator.forward(self._rm, ctx).data
        eseq = TokenSequence(e, g3[0], g3[1])
        for blk in self.blocks:
            eseq = blk.forward(eseq, ctx)
        if ctx.train:
            self._batch = b
        return t1, t2, eseq

    def backward(self, g_e: np.ndarray, g_t1: Optional[np.ndarray],
                 g_t2: Optional[np.ndarray]) -> np.ndarray:
        cfg = self.cfg
        specs = cfg.split_specs
        (g1, g2, g3) = self._grids
        for blk in reversed(list(self.blocks)):
            g_e = blk.backward(g_e)
        if cfg.use_rm:
            self.regulator.backward(g_e.sum(axis=0, keepdims=True))
        if cfg.use_pe:
            self.pos_embed.grad += g_e.sum(axis=0, keepdims=True)
        g_cols = self.project.backward(g_e)
        g_map = token_fold(TokenSequence(g_cols, g3[0], g3[1]), specs[2],
                           g2[0], g2[1])
        g_tok2 = map_to_tokens(g_map).data
        if g_t2 is not None:
            g_tok2 = g_tok2 + g_t2
        g_cols = self.attn2.backward(g_tok2)
        g_map = token_fold(TokenSequence(g_cols, g2[0], g2[1]), specs[1],
                           g1[0], g1[1])
        g_tok1 = map_to_tokens(g_map).data
        if g_t1 is not None:
            g_tok1 = g_tok1 + g_t1
        g_cols = self.attn1.backward(g_tok1)
        return token_fold(TokenSequence(g_cols, g1[0], g1[1]), specs[0],
                          cfg.height, cfg.width)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.np_dtype
        c, d = cfg.token_dim, cfg.embed_dim
        self.cfg = cfg
        (g1, g2, g3) = cfg.grid_sizes()
        specs = cfg.split_specs
        if cfg.use_dm:
            self.gate = DistortionGate(d, dtype=dt)
        self.fold1 = FoldStage(d, cfg.fold_channels, specs[2], g2[0], g2[1],
                               cfg.normalized_fold, dtype=dt)
        self.fold2 = FoldStage(d, cfg.fold_channels, specs[1], g1[0], g1[1],
                               cfg.normalized_fold, dtype=dt)
        self.fold3 = FoldStage(d, cfg.fold_channels, specs[0], cfg.height,
                               cfg.width, cfg.normalized_fold, dtype=dt)
        if cfg.use_skips:
            self.skip2 = Linear(c, d, dtype=dt)
            self.skip1 = Linear(c, d, dtype=dt)
        block = DeformableAttentionBlock if cfg.use_da else TransformerBlock
        self.block1 = block(d, cfg.heads, cfg.mlp_ratio, cfg.dropout, dtype=dt)
        self.block2 = block(d, cfg.heads, cfg.mlp_ratio, cfg.dropout, dtype=dt)
        self.saliency_head = Linear(d, 1, dtype=dt)
        self.edge_head = Linear(d, 1, dtype=dt)

    def forward(self, e: TokenSequence, t1: TokenSequence, t2: TokenSequence,
                ctx: Ctx) -> ModelOutput:
        cfg = self.cfg
        b = e.batch
        if cfg.use_dm:
            m = self.gate.forward(tokens_to_map(e), ctx)
            e = map_to_tokens(m)
        x = self.fold1.forward(e, ctx)
        if cfg.use_skips:
            x = x.with_data(x.data + self.skip2.forward(t2.data, ctx))
        x = self.block1.forward(x, ctx)
        x = self.fold2.forward(x, ctx)
        if cfg.use_skips:
            x = x.with_data(x.data + self.skip1.forward(t1.data, ctx))
        x = self.block2.forward(x, ctx)
        x = self.fold3.forward(x, ctx)
        sal = self.saliency_head.forward(x.data, ctx)
        edge = self.edge_head.forward(x.data, ctx)
        shape = (b, 1, cfg.height, cfg.width)
        return ModelOutput(sal.reshape(shape), edge.reshape(shape))

    def backward(self, g_sal: np.ndarray, g_edge: np.ndarray):
        cfg = self.cfg
        b = g_sal.shape[0]
        hw = cfg.height * cfg.width
        g_x = self.saliency_head.backward(g_sal.reshape(b, hw, 1))
        g_x = g_x + self.edge_head.backward(g_edge.reshape(b, hw, 1))
        g_x = self.fold3.backward(g_x)
        g_x = self.block2.backward(g_x)
        g_t1 = self.skip1.backward(g_x) if cfg.use_skips else None
        g_x = self.fold2.backward(g_x)
        g_x = self.block1.backward(g_x)
        g_t2 = self.skip2.backward(g_x) if cfg.use_skips else None
        g_e = self.fold1.backward(g_x)
        if cfg.use_dm:
            (g3h, g3w) = cfg.grid_sizes()[2]
            g_map = self.gate.backward(
                tokens_to_map(TokenSequence(g_e, g3h, g3w))
            )
            g_e = map_to_tokens(g_map).data
        return g_e, g_t1, g_t2


class Model(Module):
    """Assembled network; the module tree doubles as the parameter store."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def encode(self, image: np.ndarray, ctx: Optional[Ctx] = None):
        ctx = ctx or Ctx()
        return self.encoder.forward(np.asarray(image, self.cfg.np_dtype), ctx)

    def decode(self, e: TokenSequence, t1: TokenSequence, t2: TokenSequence,
               ctx: Optional[Ctx] = None) -> ModelOutput:
        return self.decoder.forward(e, t1, t2, ctx or Ctx())

    def forward(self, image: np.ndarray, ctx: Optional[Ctx] = None) -> ModelOutput:
        ctx = ctx or Ctx()
        t1, t2, e = self.encode(image, ctx)
        return self.decode(e, t1, t2, ctx)

    def backward(self, g_sal: np.ndarray, g_edge: np.ndarray) -> np.ndarray:
        """Backprop logits gradients; returns the input-image gradient."""
        g_e, g_t1, g_t2 = self.decoder.backward(g_sal, g_edge)
        return self.encoder.backward(g_e, g_t1, g_t2)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Construct and deterministically initialize the model.

    Truncated normal (std 0.02) for every projection weight and the
    positional embedding; zeros for biases and all deformable offset
    predictors, so deformable convs start as standard convs.
    """
    model = Model(cfg)
    model.initialize(seed)
    return model


# --- checkpoint container -----------------------------------------------------
#
# Layout: 8-byte magic, u64 little-endian header length, JSON header, then the
# raw little-endian array payloads back to back in header order.

def _array_entries(groups: dict[str, dict[str, np.ndarray]]):
    entries = []
    offset = 0
    for group, arrays in groups.items():
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            entries.append({
                "group": group,
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": arr.nbytes,
            })
            offset += arr.nbytes
    return entries


def save_checkpoint(path, model: Model, step: int = 0,
                    moments: Optional[dict[str, dict[str, np.ndarray]]] = None,
                    extra: Optional[dict] = None):
    """Write params (and optionally Adam moments) to a self-describing file."""
    groups: dict[str, dict[str, np.ndarray]] = {
        "param": dict(model.state_arrays())
    }
    if moments:
        groups["adam_m"] = moments["m"]
        groups["adam_v"] = moments["v"]
    entries = _array_entries(groups)
    header = {
        "format_version": 1,
        "config": model.cfg.to_dict(),
        "step": step,
        "extra": extra or {},
        "entries": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for group, arrays in groups.items():
            for name, arr in arrays.items():
                f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Return (header dict, {group: {name: array}})."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["entries"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).copy()
        groups.setdefault(entry["group"], {})[entry["name"]] = arr
    return header, groups


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, header, groups)."""
    header, groups = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = Model(cfg)
    params = dict(model.named_parameters())
    stored = groups.get("param", {})
    missing = set(params) - set(stored)
    unknown = set(stored) - set(params)
    if missing or unknown:
        raise ValueError(
            f"checkpoint/config mismatch: missing={sorted(missing)[:3]} "
            f"unknown={sorted(unknown)[:3]}"
        )
    for name, p in params.items():
        arr = stored[name]
        if tuple(arr.shape) != p.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
            )
        p.data[...] = arr.astype(p.data.dtype)
    return model, header, groups
