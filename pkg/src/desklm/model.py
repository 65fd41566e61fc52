"""Transformer encoder with disentangled attention plus a mask decoder.

Layout decisions, fixed across the package:

  * No absolute positions at the encoder input.  Token embeddings go
    through a layer norm and dropout, then L post-norm blocks.  The
    encoder's only notion of position is the shared relative table.
    (A config flag can re-enable input-side absolute embeddings for
    comparison runs; it is off by default.)
  * The decode head is a stack of n_emd transformer blocks whose query
    stream starts as H + absolute-position rows while keys and values
    stay pinned to the encoder output H.  Absolute positions therefore
    enter exactly once, next to the output, where word order ties like
    identical local contexts must be broken.  With the head ablated the
    same block runs once with query = H and no position rows, which is
    the ordinary single-block decode.
  * Logits tie the token embedding: logits = X E^T + b.

Parameters live in a flat name -> Tensor dict.  Shapes come from one
registry function so init, counting, checkpoint validation and the
audit can never disagree.  Initialisation is per-name seeded, so adding
or removing one parameter (say, the decoder's position table) never
shifts the draws of any other.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attend
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
)
from .relpos import build_delta_matrix
from .seeding import rng_for, truncated_normal
from .tensor import MASK_SENTINEL, Tensor

MODES = ("mlm", "arlm", "joint")


@dataclass
class AblationFlags:
    """Component switches.  True means the component is active."""

    emd: bool = True
    c2p: bool = True
    p2c: bool = True


@dataclass
class ModelConfig:
    vocab_size: int
    max_len: int = 64
    L: int = 2
    d: int = 32
    heads: int = 2
    ffn: int = 64
    k: int = 8
    n_emd: int = 2
    emd_shared: bool = True
    share_projection: bool = False
    dropout: float = 0.1
    mode: str = "mlm"
    abs_pos_at_input: bool = False
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.ablations, dict):
            self.ablations = AblationFlags(**self.ablations)
        if self.vocab_size < 2:
            # The data pipeline needs room past its reserved ids and
            # checks that itself; the model only needs a distribution.
            raise ConfigError(f"vocab_size {self.vocab_size} too small")
        if self.max_len < 3:
            raise ConfigError(f"max_len {self.max_len} cannot hold CLS + token + SEP")
        if self.L < 0:
            raise ConfigError("L must be >= 0")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible into {self.heads} heads")
        if self.ffn < 1:
            raise ConfigError("ffn width must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_emd < 1:
            raise ConfigError("n_emd must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode {self.mode!r} not one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def uses_position_terms(self) -> bool:
        return self.ablations.c2p or self.ablations.p2c

    @property
    def decoder_sets(self) -> int:
        if not self.ablations.emd or self.emd_shared:
            return 1
        return self.n_emd


def _block_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d, cfg.ffn
    shapes = {
        f"{prefix}_att_wqc": (d, d),
        f"{prefix}_att_wkc": (d, d),
        f"{prefix}_att_wvc": (d, d),
        f"{prefix}_att_wo": (d, d),
    }
    if cfg.uses_position_terms and not cfg.share_projection:
        shapes[f"{prefix}_att_wqr"] = (d, d)
        shapes[f"{prefix}_att_wkr"] = (d, d)
    shapes.update({
        f"{prefix}_ln1_g": (d,),
        f"{prefix}_ln1_b": (d,),
        f"{prefix}_ffn_w1": (d, f),
        f"{prefix}_ffn_b1": (f,),
        f"{prefix}_ffn_w2": (f, d),
        f"{prefix}_ffn_b2": (d,),
        f"{prefix}_ln2_g": (d,),
        f"{prefix}_ln2_b": (d,),
    })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Single source of truth for the parameter set and its shapes."""
    shapes: dict[str, tuple] = {
        "tok_emb": (cfg.vocab_size, cfg.d),
        "emb_ln_g": (cfg.d,),
        "emb_ln_b": (cfg.d,),
    }
    if cfg.abs_pos_at_input:
        shapes["abs_in"] = (cfg.max_len, cfg.d)
    if cfg.uses_position_terms:
        shapes["pos_table"] = (2 * cfg.k, cfg.d)
    for i in range(cfg.L):
        shapes.update(_block_shapes(f"enc{i}", cfg))
    if cfg.ablations.emd:
        shapes["dec_abs"] = (cfg.max_len, cfg.d)
    for j in range(cfg.decoder_sets):
        shapes.update(_block_shapes(f"dec{j}", cfg))
    shapes["out_bias"] = (cfg.vocab_size,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Truncated-normal weights, unit gains, zero biases; per-name rngs."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_g"):
            data = np.ones(shape)
        elif name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2") \
                or name == "out_bias":
            data = np.zeros(shape)
        else:
            data = truncated_normal(rng_for(seed, f"init/{name}"), shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def build_mask(n: int, real: np.ndarray | None, causal: bool) -> Tensor | None:
    """(n, n) additive mask or None when nothing is blocked.

    Padding blocks columns only: a PAD position may still attend out,
    so its own softmax row stays well defined, but nothing real ever
    attends into PAD.
    """
    if real is None and not causal:
        return None
    m = np.zeros((n, n))
    if real is not None:
        if real.shape != (n,):
            raise ContractError(f"real mask shape {real.shape} != ({n},)")
        m[:, ~np.asarray(real, dtype=bool)] = MASK_SENTINEL
    if causal:
        m[np.triu_indices(n, k=1)] = MASK_SENTINEL
    return T.constant(m)


class Model:
    """Parameter container plus the forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None) -> None:
        self.cfg = cfg
        self.seed = seed
        self._zero_table = None
        self.params = init_params(cfg, seed) if params is None else params
        expected = param_shapes(cfg)
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            wrong = sorted(k for k in set(got) & set(expected)
                           if got[k] != expected[k])
            raise CheckpointShapeError(
                f"parameter set mismatch: missing={missing} extra={extra} "
                f"wrong_shape={wrong}"
            )

    # -- plumbing -------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _attn_params(self, prefix: str) -> AttentionParams:
        cfg = self.cfg
        kwargs = {}
        if cfg.uses_position_terms and not cfg.share_projection:
            kwargs["_w_qr"] = self.params[f"{prefix}_att_wqr"]
            kwargs["_w_kr"] = self.params[f"{prefix}_att_wkr"]
        return AttentionParams(
            heads=cfg.heads,
            w_qc=self.params[f"{prefix}_att_wqc"],
            w_kc=self.params[f"{prefix}_att_wkc"],
            w_vc=self.params[f"{prefix}_att_wvc"],
            w_o=self.params[f"{prefix}_att_wo"],
            enable_c2p=cfg.ablations.c2p,
            enable_p2c=cfg.ablations.p2c,
            share_projection=cfg.share_projection,
            **kwargs,
        )

    def _pos_table(self) -> Tensor:
        if self.cfg.uses_position_terms:
            return self.params["pos_table"]
        # Both position terms ablated: the kernels never touch the table,
        # but the call signature still wants an array of the right shape.
        if self._zero_table is None:
            self._zero_table = T.constant(np.zeros((2 * self.cfg.k, self.cfg.d)))
        return self._zero_table

    def _block(self, prefix: str, query: Tensor, content: Tensor, dm, mask,
               training: bool, rng, collect: dict | None = None) -> Tensor:
        p = self.params
        drop = self.cfg.dropout if training else 0.0
        heads_out: list | None = [] if collect is not None else None
        a = attend(content, self._attn_params(prefix), self._pos_table(), dm,
                   mask=mask, query=query, dropout_p=drop, rng=rng,
                   collect=heads_out)
        if collect is not None:
            collect[prefix] = heads_out
        if drop > 0.0:
            a = T.dropout(a, drop, rng)
        x = T.layer_norm(T.add(query, a), p[f"{prefix}_ln1_g"], p[f"{prefix}_ln1_b"])
        hidden = T.gelu(T.add(T.matmul(x, p[f"{prefix}_ffn_w1"]), p[f"{prefix}_ffn_b1"]))
        f = T.add(T.matmul(hidden, p[f"{prefix}_ffn_w2"]), p[f"{prefix}_ffn_b2"])
        if drop > 0.0:
            f = T.dropout(f, drop, rng)
        return T.layer_norm(T.add(x, f), p[f"{prefix}_ln2_g"], p[f"{prefix}_ln2_b"])

    # -- forward passes ---------------------------------------------------

    def encode(self, ids: np.ndarray, real: np.ndarray | None = None,
               causal: bool = False, training: bool = False, rng=None,
               perturb: Tensor | None = None,
               collect: dict | None = None) -> Tensor:
        """Token ids (n,) to hidden states (n, d)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ContractError(f"encode wants a 1-d id row, got shape {ids.shape}")
        n = ids.shape[0]
        if n > self.cfg.max_len:
            raise ContractError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        if training and self.cfg.dropout > 0.0 and rng is None:
            raise ContractError("training forward with dropout needs an rng")
        p = self.params
        e = T.gather_rows(p["tok_emb"], ids)
        if self.cfg.abs_pos_at_input:
            e = T.add(e, T.gather_rows(p["abs_in"], np.arange(n)))
        h = T.layer_norm(e, p["emb_ln_g"], p["emb_ln_b"])
        if perturb is not None:
            if perturb.shape != (n, self.cfg.d):
                raise ContractError(
                    f"perturbation shape {perturb.shape} != ({n}, {self.cfg.d})"
                )
            h = T.add(h, perturb)
        drop = self.cfg.dropout if training else 0.0
        if drop > 0.0:
            h = T.dropout(h, drop, rng)
        dm = build_delta_matrix(n, self.cfg.k)
        mask = build_mask(n, real, causal)
        for i in range(self.cfg.L):
            h = self._block(f"enc{i}", h, h, dm, mask, training, rng,
                            collect=collect)
        return h

    def decode(self, h: Tensor, real: np.ndarray | None = None,
               causal: bool = False, training: bool = False, rng=None,
               collect: dict | None = None) -> Tensor:
        """Hidden states (n, d) to logits (n, vocab)."""
        cfg = self.cfg
        n = h.shape[0]
        dm = build_delta_matrix(n, cfg.k)
        mask = build_mask(n, real, causal)
        if cfg.ablations.emd:
            abs_rows = T.gather_rows(self.params["dec_abs"], np.arange(n))
            x = T.add(h, abs_rows)
            for j in range(cfg.n_emd):
                prefix = "dec0" if cfg.emd_shared else f"dec{j}"
                x = self._block(prefix, x, h, dm, mask, training, rng,
                                collect=collect)
        else:
            x = self._block("dec0", h, h, dm, mask, training, rng,
                            collect=collect)
        logits = T.matmul(x, T.transpose(self.params["tok_emb"]))
        return T.add(logits, self.params["out_bias"])

    def mlm_row(self, x_row: np.ndarray, xt_row: np.ndarray,
                positions: list[int], real: np.ndarray,
                training: bool = False, rng=None, perturb: Tensor | None = None,
                collect: dict | None = None):
        """One row's masked-prediction pieces.

        Returns (nll_sum, count, picked_logits) where picked_logits is
        the (len(positions), vocab) logit rows at the predicted slots;
        the consistency regulariser needs them as tensors.
        """
        if not positions:
            raise ContractError("mlm_row needs at least one masked position")
        h = self.encode(xt_row, real=real, causal=False, training=training,
                        rng=rng, perturb=perturb, collect=collect)
        logits = self.decode(h, real=real, causal=False, training=training,
                             rng=rng, collect=collect)
        pos = np.asarray(positions, dtype=np.int64)
        picked = T.gather_rows(logits, pos)
        logp = T.log_softmax_rows(picked)
        targets = np.asarray(x_row, dtype=np.int64)[pos]
        chosen = T.gather_elements(logp, targets[:, None])
        nll_sum = T.neg(T.sum_all(chosen))
        return nll_sum, len(positions), picked

    def forward_mlm(self, batch, training: bool = False, rng=None,
                    perturbs: list | None = None) -> Tensor:
        """Mean masked-token negative log likelihood over the batch."""
        total = None
        count = 0
        for r in range(batch.x.shape[0]):
            pert = None if perturbs is None else perturbs[r]
            nll, c, _ = self.mlm_row(batch.x[r], batch.x_tilde[r],
                                     batch.positions[r], batch.real[r],
                                     training=training, rng=rng, perturb=pert)
            total = nll if total is None else T.add(total, nll)
            count += c
        return T.mul(total, 1.0 / count)

    def arlm_row(self, tokens: np.ndarray, training: bool = False, rng=None,
                 perturb: Tensor | None = None, collect: dict | None = None):
        """Causal next-token pieces: (nll_sum, count, next_token_logits)."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 2:
            raise ContractError("causal prediction needs at least two tokens")
        h = self.encode(ids, real=None, causal=True, training=training,
                        rng=rng, perturb=perturb, collect=collect)
        logits = self.decode(h, real=None, causal=True, training=training,
                             rng=rng, collect=collect)
        n = ids.shape[0]
        ctx = T.gather_rows(logits, np.arange(n - 1))
        logp = T.log_softmax_rows(ctx)
        chosen = T.gather_elements(logp, ids[1:][:, None])
        nll_sum = T.neg(T.sum_all(chosen))
        return nll_sum, n - 1, ctx

    def forward_arlm(self, tokens, training: bool = False, rng=None,
                     perturb: Tensor | None = None) -> Tensor:
        """Mean next-token negative log likelihood for one sequence."""
        nll, c, _ = self.arlm_row(tokens, training=training, rng=rng,
                                  perturb=perturb)
        return T.mul(nll, 1.0 / c)


# ---------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------

_MAGIC = b"DAL1"


def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> None:
    """Binary format: magic, canonical JSON metadata, named raw tensors.

    Tensors are written sorted by name with explicit rank and extents,
    little-endian float64.  Everything is deterministic, so saving the
    same state twice yields byte-identical files.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        t = params[name]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.ndim))
        for extent in t.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointTruncatedError(
            f"expected {n} more bytes, file ended after {len(b)}"
        )
    return b


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays by name, metadata).  Strict about every byte."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise CheckpointTruncatedError("file shorter than the magic")
        if magic != _MAGIC:
            if magic[:3] == _MAGIC[:3]:
                raise CheckpointVersionError(
                    f"unsupported checkpoint version {magic!r}"
                )
            raise CheckpointFormatError(f"bad magic {magic!r}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"metadata is not valid JSON: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
            )
            n_elems = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, n_elems * 8)
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointFormatError("trailing bytes after the last tensor")
    return arrays, meta


def load_model(path) -> tuple[Model, dict]:
    """Rebuild a Model from a checkpoint written by save_checkpoint."""
    arrays, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointFormatError("metadata lacks a config block")
    cfg = ModelConfig(**meta["config"])
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name}")
        if arrays[name].shape != shape:
            raise CheckpointShapeError(
                f"tensor {name} has shape {arrays[name].shape}, expected {shape}"
            )
    extra = set(arrays) - set(expected)
    if extra:
        raise CheckpointShapeError(f"checkpoint has unexpected tensors {sorted(extra)}")
    params = {name: Tensor(arrays[name], requires_grad=True) for name in expected}
    model = Model(cfg, seed=int(meta.get("seed", 0)), params=params)
    return model, meta
