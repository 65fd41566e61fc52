"""Disentangled content/position attention, two interchangeable kernels.

Each token is represented by a content vector; relative positions get a
separate shared embedding table P with 2k rows.  The pre-softmax score
between query position i and key position j is the sum of three terms:

    content-to-content    Q_c[i] . K_c[j]
    content-to-position   Q_c[i] . K_r[delta(i, j)]
    position-to-content   K_c[j] . Q_r[delta(j, i)]

where K_r = P W_kr and Q_r = P W_qr are the position keys and queries.
Position-to-position carries no signal for relative encodings and is
omitted.  The orientation of the third term matters: it uses the
distance from j to i, not i to j.  Swapping the two is a plausible and
quietly wrong implementation, which is exactly what the fault-injection
hook in the equivalence suite simulates.

Scores are scaled by 1 / sqrt(tau * head_size) where tau counts the
enabled terms (3 when both position terms are on), then masked and
row-softmaxed.

Two kernels produce the same scores:

  * scores_naive materialises, for every query/key pair, the gathered
    relative embedding rows: an (n*n, d) intermediate per term.  It is
    the transcription of the definition above and exists as the oracle
    and allocation baseline.
  * scores_efficient never builds an (n*n, d) object.  For the c2p term
    it computes Q_c K_r^T once, an (n, 2k) matrix, and gathers element
    [i, delta[i, j]].  For p2c it computes K_c Q_r^T, gathers element
    [j, delta[j, i]] and transposes.  Peak extra storage is O(k d) for
    the projected tables plus one (n, 2k) reuse buffer.

Both kernels take an optional meter that tracks position-path
allocations so the asymptotic claim is auditable rather than folklore.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .relpos import DeltaMatrix
from .tensor import Tensor


@dataclass
class AttentionParams:
    """Projection weights for one disentangled attention layer.

    w_qr is the position-query projection.  Under share_projection it is
    an alias of w_qc (same Tensor object, single gradient accumulator),
    trading a little accuracy for 2 L d^2 fewer parameters; w_kr
    likewise aliases w_kc.
    """

    heads: int
    w_qc: Tensor
    w_kc: Tensor
    w_vc: Tensor
    w_o: Tensor
    enable_c2p: bool = True
    enable_p2c: bool = True
    share_projection: bool = False
    _w_qr: Tensor | None = None
    _w_kr: Tensor | None = None

    def __post_init__(self):
        d = self.w_qc.shape[0]
        for name in ("w_qc", "w_kc", "w_vc", "w_o"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {w.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigError(f"width {d} not divisible into {self.heads} heads")
        if self.share_projection:
            if self._w_qr is not None or self._w_kr is not None:
                raise ConfigError("share_projection forbids separate w_qr/w_kr")
        else:
            needs_pos = self.enable_c2p or self.enable_p2c
            if needs_pos and (self._w_qr is None or self._w_kr is None):
                raise ConfigError("unshared position terms need w_qr and w_kr")

    @property
    def d(self) -> int:
        return self.w_qc.shape[0]

    @property
    def head_size(self) -> int:
        return self.d // self.heads

    @property
    def w_qr(self) -> Tensor:
        return self.w_qc if self.share_projection else self._w_qr

    @property
    def w_kr(self) -> Tensor:
        return self.w_kc if self.share_projection else self._w_kr

    @property
    def scale(self) -> float:
        tau = 1 + int(self.enable_c2p) + int(self.enable_p2c)
        return 1.0 / np.sqrt(tau * self.head_size)


@dataclass
class AttentionScores:
    """Unscaled per-head score components.  Disabled terms are zero."""

    heads: int
    c2c: list[Tensor]
    c2p: list[Tensor]
    p2c: list[Tensor]
    combined: list[Tensor]
    scale: float


def _head_slices(m: Tensor, heads: int) -> list[Tensor]:
    hs = m.shape[1] // heads
    if heads == 1:
        return [m]
    return [T.slice_cols(m, h * hs, (h + 1) * hs) for h in range(heads)]


def _meter_alloc(meter, t: Tensor) -> None:
    if meter is not None:
        meter.alloc(t.size)


def _meter_release(meter, t: Tensor) -> None:
    if meter is not None:
        meter.release(t.size)


def _check_inputs(h: Tensor, params: AttentionParams, table, dm: DeltaMatrix,
                  query: Tensor | None) -> Tensor:
    q_in = h if query is None else query
    if h.ndim != 2 or h.shape[1] != params.d:
        raise ShapeError(f"content input must be (n, {params.d}), got {h.shape}")
    if q_in.ndim != 2 or q_in.shape[1] != params.d:
        raise ShapeError(f"query input must be (m, {params.d}), got {q_in.shape}")
    if dm.n != h.shape[0]:
        raise ShapeError(f"delta matrix is for n={dm.n}, content has n={h.shape[0]}")
    if (params.enable_c2p or params.enable_p2c) and table.shape != (2 * dm.k, params.d):
        raise ShapeError(
            f"position table must be ({2 * dm.k}, {params.d}), got {table.shape}"
        )
    return q_in


def scores_naive(h: Tensor, params: AttentionParams, table: Tensor, dm: DeltaMatrix,
                 query: Tensor | None = None, meter=None) -> AttentionScores:
    """Reference kernel: per-pair gathered embeddings, O(n^2 d) space.

    Kept deliberately close to the defining equations.  The (n*n, d)
    gathers are the cost being audited; do not "optimise" them away
    here, that is what scores_efficient is for.
    """
    q_in = _check_inputs(h, params, table, dm, query)
    n = dm.n
    m = q_in.shape[0]
    if m != n:
        raise ShapeError("naive kernel requires square attention (query rows == n)")

    qc = T.matmul(q_in, params.w_qc)
    kc = T.matmul(h, params.w_kc)
    qc_h = _head_slices(qc, params.heads)
    kc_h = _head_slices(kc, params.heads)

    need_pos = params.enable_c2p or params.enable_p2c
    kr = qr = None
    kr_h = qr_h = None
    if need_pos:
        kr = T.matmul(table, params.w_kr)
        qr = T.matmul(table, params.w_qr)
        _meter_alloc(meter, kr)
        _meter_alloc(meter, qr)
        kr_h = _head_slices(kr, params.heads)
        qr_h = _head_slices(qr, params.heads)

    flat_ij = dm.values.reshape(-1)          # delta(i, j) in row-major (i, j) order
    flat_ji = dm.values.T.reshape(-1)        # delta(j, i) in row-major (i, j) order
    rep = np.repeat(np.arange(n), n)         # query index for each (i, j) pair
    tile = np.tile(np.arange(n), n)          # key index for each (i, j) pair

    c2c, c2p, p2c, combined = [], [], [], []
    for hd in range(params.heads):
        a = T.matmul(qc_h[hd], T.transpose(kc_h[hd]))
        c2c.append(a)
        total = a

        if params.enable_c2p:
            # Row for pair (i, j) holds K_r[delta(i, j)]: an (n*n, hs) object.
            kr_pairs = T.gather_rows(kr_h[hd], flat_ij)
            _meter_alloc(meter, kr_pairs)
            q_rep = T.gather_rows(qc_h[hd], rep)
            prod = T.mul(q_rep, kr_pairs)
            term = T.reshape(T.row_sum(prod), (n, n))
            _meter_release(meter, kr_pairs)
            c2p.append(term)
            total = T.add(total, term)
        else:
            c2p.append(T.zeros((n, n)))

        if params.enable_p2c:
            # Row for pair (i, j) holds Q_r[delta(j, i)]: orientation flipped.
            qr_pairs = T.gather_rows(qr_h[hd], flat_ji)
            _meter_alloc(meter, qr_pairs)
            k_tile = T.gather_rows(kc_h[hd], tile)
            prod = T.mul(k_tile, qr_pairs)
            term = T.reshape(T.row_sum(prod), (n, n))
            _meter_release(meter, qr_pairs)
            p2c.append(term)
            total = T.add(total, term)
        else:
            p2c.append(T.zeros((n, n)))

        combined.append(total)

    if need_pos:
        _meter_release(meter, kr)
        _meter_release(meter, qr)
    return AttentionScores(params.heads, c2c, c2p, p2c, combined, params.scale)


def scores_efficient(h: Tensor, params: AttentionParams, table: Tensor, dm: DeltaMatrix,
                     query: Tensor | None = None, meter=None,
                     fault: str | None = None) -> AttentionScores:
    """Gather-based kernel: O(k d) extra space, no (n^2, d) intermediate.

    fault="swap-delta" deliberately gathers the p2c term with the
    forward-oriented distances.  It exists so the equivalence suite can
    prove it would catch the classic orientation bug; never set it in
    real use.
    """
    if fault not in (None, "swap-delta"):
        raise ConfigError(f"unknown fault {fault!r}")
    q_in = _check_inputs(h, params, table, dm, query)
    n = dm.n
    if q_in.shape[0] != n:
        raise ShapeError("efficient kernel requires square attention (query rows == n)")

    qc = T.matmul(q_in, params.w_qc)
    kc = T.matmul(h, params.w_kc)
    qc_h = _head_slices(qc, params.heads)
    kc_h = _head_slices(kc, params.heads)

    need_pos = params.enable_c2p or params.enable_p2c
    kr_h = qr_h = None
    kr = qr = None
    if need_pos:
        kr = T.matmul(table, params.w_kr)
        qr = T.matmul(table, params.w_qr)
        _meter_alloc(meter, kr)
        _meter_alloc(meter, qr)
        kr_h = _head_slices(kr, params.heads)
        qr_h = _head_slices(qr, params.heads)

    # gather_elements(prod, cols)[a, b] = prod[a, cols[a, b]].  For p2c we
    # need G[j, i] = prod[j, delta(j, i)] = prod[j, dm[j, i]], so the
    # gather uses dm itself and the transpose happens afterwards.  The
    # swap-delta fault gathers with dm transposed, which lands on
    # prod[j, delta(i, j)]: the orientation bug.
    dm_fwd = dm.values
    dm_rev = dm.values if fault is None else dm.values.T

    c2c, c2p, p2c, combined = [], [], [], []
    for hd in range(params.heads):
        a = T.matmul(qc_h[hd], T.transpose(kc_h[hd]))
        c2c.append(a)
        total = a

        if params.enable_c2p:
            # All n * 2k query/position-key products, then pick column
            # delta(i, j) in row i.
            prod = T.matmul(qc_h[hd], T.transpose(kr_h[hd]))
            _meter_alloc(meter, prod)
            term = T.gather_elements(prod, dm_fwd)
            _meter_release(meter, prod)
            c2p.append(term)
            total = T.add(total, term)
        else:
            c2p.append(T.zeros((n, n)))

        if params.enable_p2c:
            # Row j of the product holds K_c[j] . Q_r[*]; entry (j, i)
            # of the gathered matrix is K_c[j] . Q_r[delta(j, i)], and
            # the transpose places it at (i, j).
            prod = T.matmul(kc_h[hd], T.transpose(qr_h[hd]))
            _meter_alloc(meter, prod)
            term = T.transpose(T.gather_elements(prod, dm_rev))
            _meter_release(meter, prod)
            p2c.append(term)
            total = T.add(total, term)
        else:
            p2c.append(T.zeros((n, n)))

        combined.append(total)

    if need_pos:
        _meter_release(meter, kr)
        _meter_release(meter, qr)
    return AttentionScores(params.heads, c2c, c2p, p2c, combined, params.scale)


_KERNELS = {"naive": scores_naive, "efficient": scores_efficient}


def attend(h: Tensor, params: AttentionParams, table: Tensor, dm: DeltaMatrix,
           mask: Tensor | None = None, query: Tensor | None = None,
           dropout_p: float = 0.0, rng: np.random.Generator | None = None,
           kernel: str = "efficient", collect: list | None = None,
           fault: str | None = None) -> Tensor:
    """Full multi-head attention: scores, mask, softmax, value mix.

    mask, when given, is an (n, n) additive tensor using the -1e30
    sentinel for blocked pairs.  collect, when given, receives one
    (n, n) numpy array of post-softmax probabilities per head.
    """
    if kernel not in _KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")
    if dropout_p > 0.0 and rng is None:
        raise ConfigError("dropout needs an rng")
    if kernel == "naive" and fault is not None:
        raise ConfigError("fault injection only applies to the efficient kernel")

    extra = {"fault": fault} if kernel == "efficient" else {}
    scores = _KERNELS[kernel](h, params, table, dm, query=query, **extra)

    v = T.matmul(h, params.w_vc)
    v_h = _head_slices(v, params.heads)

    outs = []
    for hd in range(params.heads):
        logits = T.mul(scores.combined[hd], scores.scale)
        if mask is not None:
            logits = T.add(logits, mask)
        probs = T.softmax_rows(logits)
        if collect is not None:
            collect.append(probs.data.copy())
        if dropout_p > 0.0:
            probs = T.dropout(probs, dropout_p, rng)
        outs.append(T.matmul(probs, v_h[hd]))

    mixed = outs[0] if params.heads == 1 else T.concat_cols(outs)
    return T.matmul(mixed, params.w_o)


def extra_param_count(config) -> int:
    """Parameters added by the position pathway, from config dimensions.

    Needs config.L (layers), config.d (width), config.k (window
    half-width) and config.share_projection.  The position table itself
    contributes 2 k d; unshared projections add 2 d^2 per layer.
    """
    L, d, k = int(config.L), int(config.d), int(config.k)
    if min(L, d, k) < 1:
        raise ConfigError("extra_param_count needs positive L, d, k")
    table = 2 * k * d
    if getattr(config, "share_projection", False):
        return table
    return 2 * L * d * d + table
