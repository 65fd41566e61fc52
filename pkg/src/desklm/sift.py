"""Perturbation-consistency regularisation on normalised embeddings.

Word-embedding norms vary wildly between frequent and rare tokens, so a
fixed-radius perturbation means different things at different tokens.
The fix: perturb after the embedding layer norm, where every token row
has unit variance, and ask the model to produce the same predictive
distribution with and without the perturbation.

The regulariser is the symmetric KL between the clean and perturbed
output distributions at the predicted positions.  The perturbation is
found by a few steps of projected gradient ascent on that same
divergence, run on a short-lived inner tape whose gradients flow only
into the perturbation; model parameters see nothing of the search.
Both the clean-versus-perturbed pairing and the ascent reuse identical
dropout draws, so the divergence measures the perturbation and not the
noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .seeding import rng_for
from .tensor import Tape, Tensor

# Standardisation guard.  Small enough that rescaling the input by any
# sane factor moves the output by less than 1e-9.
_NORM_EPS = 1e-12


@dataclass
class SiftConfig:
    enabled: bool = False
    epsilon: float = 1e-2
    ascent_steps: int = 1
    ascent_lr: float = 1e-3
    lam: float = 1.0  # weight of the consistency term ("lambda" in configs)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.ascent_steps < 0:
            raise ConfigError("ascent_steps must be >= 0")
        if self.ascent_lr < 0:
            raise ConfigError("ascent_lr must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


def normalize_embeddings(e: Tensor) -> Tensor:
    """Per-row standardisation: mean 0, variance 1 across the width.

    Applied twice: one additive-eps pass is not scale-invariant under
    strong down-scaling (eps/s^2 swamps a shrunken row variance), but
    its output is exactly collinear with the unscaled result, so a
    second pass cancels the leftover length difference while keeping
    bounded gradients and the constant-row -> zero-vector behaviour.
    """
    d = e.shape[1]
    gain, bias = T.ones((d,)), T.zeros((d,))
    once = T.layer_norm(e, gain, bias, eps=_NORM_EPS)
    return T.layer_norm(once, gain, bias, eps=_NORM_EPS)


def symmetric_kl(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Sum over rows of KL(p||q) + KL(q||p), from logits.

    Uses the identity sum((p - q) * (log p - log q)), which is
    non-negative term by term since log is monotone.
    """
    p = T.softmax_rows(p_logits)
    q = T.softmax_rows(q_logits)
    lp = T.log_softmax_rows(p_logits)
    lq = T.log_softmax_rows(q_logits)
    return T.sum_all(T.mul(T.sub(p, q), T.sub(lp, lq)))


def _project_rows(delta: np.ndarray, epsilon: float) -> None:
    """Clip each row into the epsilon ball, in place."""
    norms = np.sqrt((delta * delta).sum(axis=1, keepdims=True))
    over = norms > epsilon
    if over.any():
        scale = np.where(over, epsilon / np.maximum(norms, 1e-300), 1.0)
        delta *= scale


def _row_cases(model, batch, mode: str):
    """Normalise both objectives into per-row closures.

    Each case is (forward, count, seq_len) where forward(perturb, rng)
    returns (nll_sum, picked_logits).
    """
    cases = []
    if mode == "mlm":
        for r in range(batch.x.shape[0]):
            def fwd(perturb, rng, r=r):
                nll, _, picked = model.mlm_row(
                    batch.x[r], batch.x_tilde[r], batch.positions[r],
                    batch.real[r], training=True, rng=rng, perturb=perturb)
                return nll, picked
            cases.append((fwd, len(batch.positions[r]), batch.x.shape[1]))
    elif mode == "arlm":
        for tokens in batch:
            tokens = np.asarray(tokens)

            def fwd(perturb, rng, tokens=tokens):
                nll, _, picked = model.arlm_row(
                    tokens, training=True, rng=rng, perturb=perturb)
                return nll, picked
            cases.append((fwd, tokens.size - 1, tokens.size))
    else:
        raise ConfigError(f"sift mode {mode!r} not one of ('mlm', 'arlm')")
    return cases


def sift_loss(batch, model, cfg: SiftConfig, mode: str = "mlm",
              seed: int = 0, return_parts: bool = False):
    """Task loss plus lambda times the adversarial consistency term.

    batch is a MaskedBatch for mode="mlm" or a list of token rows for
    mode="arlm".  seed pins the perturbation draws and the paired
    dropout streams.  Disabled (or lambda = 0) reduces to exactly the
    plain task loss: same ops, same rng consumption, bitwise identical.
    """
    cases = _row_cases(model, batch, mode)
    total_count = sum(c for _, c, _ in cases)

    def drop_rng(r: int):
        # fresh generator per use: clean, ascent and perturbed forwards
        # all see the same dropout masks
        return rng_for(seed, f"sift/dropout/{r}")

    plain = not cfg.enabled or cfg.lam == 0.0

    task_total = None
    kl_total = None
    for r, (fwd, _, seq_len) in enumerate(cases):
        nll, clean_logits = fwd(None, drop_rng(r))
        task_total = nll if task_total is None else T.add(task_total, nll)
        if plain:
            continue

        # Frozen copies of the clean distribution drive both the ascent
        # and the outer divergence; gradients only ever flow through the
        # perturbed branch.
        clean_const = T.constant(clean_logits.data.copy())

        delta0 = rng_for(seed, f"sift/init/{r}").normal(
            0.0, 1.0, (seq_len, model.cfg.d))
        init_norms = np.sqrt((delta0 * delta0).sum(axis=1, keepdims=True))
        delta0 *= (cfg.epsilon / 10.0) / np.maximum(init_norms, 1e-300)
        delta = Tensor(delta0, requires_grad=True)

        for _step in range(cfg.ascent_steps):
            with Tape() as inner:
                _, pert_logits = fwd(delta, drop_rng(r))
                divergence = symmetric_kl(clean_const, pert_logits)
            inner.backward(divergence, targets=[delta])
            g = delta.grad
            delta.grad = None
            gnorm = float(np.sqrt((g * g).sum()))
            if gnorm < 1e-30:
                break
            delta.data += cfg.ascent_lr * g / gnorm
            _project_rows(delta.data, cfg.epsilon)

        frozen = T.constant(delta.data.copy())
        _, pert_logits = fwd(frozen, drop_rng(r))
        kl = symmetric_kl(clean_const, pert_logits)
        kl_total = kl if kl_total is None else T.add(kl_total, kl)

    task = T.mul(task_total, 1.0 / total_count)
    if plain:
        if return_parts:
            return task, task, None
        return task

    r_adv = T.mul(kl_total, 1.0 / total_count)
    loss = T.add(task, T.mul(r_adv, cfg.lam))
    if return_parts:
        return loss, task, r_adv
    return loss
