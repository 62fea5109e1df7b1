"""Attention-based cross-domain recommender with hand-derived gradients.

Per target domain the model runs two identical towers ("sides"): one over
the account's own-domain history and one over the sequence transferred from
the other domain. Each tower embeds items plus shared positional rows,
clusters the history into K latent users with a ReLU map, and aggregates
the latent users with an attention network whose query is the supervision
item (the training target, or the most recent history item at evaluation
time when the true target is hidden). The two tower outputs are fused by a
learned projection and matched against candidate item embeddings through a
sigmoid.

The attention normalizer is a smoothed softmax
``alpha_i = exp(f_i - f_max) / (sum_j exp(f_j - f_max))**smoothing``
which under-normalizes for smoothing < 1 so that accounts with many latent
users are not over-punished; at smoothing = 1 it is exactly softmax.

All gradients are derived and accumulated by hand into a flat
``name -> array`` dict that mirrors the parameter dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import PAD, Catalog, TrainingInstance
from .numerics import DimensionError, relu, sigmoid, xavier_uniform

PROB_CLIP = 1e-10

# (own tower, transferred tower, own embedding table, transferred table)
SIDES = {
    "A": ("A", "BtoA", "emb.A", "emb.B"),
    "B": ("B", "AtoB", "emb.B", "emb.A"),
}


@dataclass
class ModelParams:
    """All trainable tensors plus the structural hyperparameters needed to
    interpret them. Row 0 of each embedding table is the padding item: it
    stays all-zero for the lifetime of the model."""

    tensors: dict[str, np.ndarray]
    embed_dim: int
    attn_hidden: int
    max_seq_len: int
    n_latent: dict[str, int]
    attn_smoothing: float
    l2_reg: float
    n_items: dict[str, int]

    @classmethod
    def init(cls, rng: np.random.Generator, catalog: Catalog,
             cfg: TrainConfig) -> "ModelParams":
        d, da, ml = cfg.embed_dim, cfg.attn_hidden, cfg.max_seq_len
        n_latent = {"A": cfg.n_users_a, "B": cfg.n_users_b,
                    "BtoA": cfg.n_users_b, "AtoB": cfg.n_users_a}
        t: dict[str, np.ndarray] = {}
        t["emb.A"] = xavier_uniform(rng, (catalog.n_items_a + 1, d))
        t["emb.B"] = xavier_uniform(rng, (catalog.n_items_b + 1, d))
        t["emb.A"][PAD] = 0.0
        t["emb.B"][PAD] = 0.0
        t["pos"] = xavier_uniform(rng, (2 * ml, d))
        # weights get Xavier fan-balanced ranges; biases start at zero so the
        # ReLU layers begin data-dominated (a large random bias would leave
        # many units dead from the first step, with no gradient to revive them)
        for side, k in n_latent.items():
            t[f"uin.{side}.w"] = xavier_uniform(rng, (k, ml))
            t[f"uin.{side}.b"] = np.zeros((k, d))
            t[f"att.{side}.w1"] = xavier_uniform(rng, (da, 2 * d))
            t[f"att.{side}.b"] = np.zeros(da)
            t[f"att.{side}.h"] = xavier_uniform(rng, (da,))
        for dom in ("A", "B"):
            t[f"fuse.{dom}.w"] = xavier_uniform(rng, (2 * d, d))
            t[f"fuse.{dom}.b"] = np.zeros(1)
        return cls(tensors=t, embed_dim=d, attn_hidden=da, max_seq_len=ml,
                   n_latent=n_latent, attn_smoothing=cfg.attn_smoothing,
                   l2_reg=cfg.l2_reg,
                   n_items={"A": catalog.n_items_a, "B": catalog.n_items_b})

    def item_embedding(self, domain: str, item: int) -> np.ndarray:
        return self.tensors[f"emb.{domain}"][item]

    def clone(self) -> "ModelParams":
        return ModelParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            embed_dim=self.embed_dim, attn_hidden=self.attn_hidden,
            max_seq_len=self.max_seq_len, n_latent=dict(self.n_latent),
            attn_smoothing=self.attn_smoothing, l2_reg=self.l2_reg,
            n_items=dict(self.n_items))


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def embed_with_position(params: ModelParams, items, positions,
                        domain: str) -> np.ndarray:
    """Item embedding plus shared positional embedding, row per event.
    Padding slots (item 0) produce fully zero rows; their position ids are
    ignored so padding stays inert."""
    items = np.asarray(items, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    table = params.tensors[f"emb.{domain}"]
    if items.size and items.max() >= table.shape[0]:
        raise IndexError(f"item id {items.max()} outside domain {domain} catalog")
    H = np.zeros((len(items), params.embed_dim))
    mask = items != PAD
    H[mask] = table[items[mask]] + params.tensors["pos"][positions[mask]]
    return H


def latent_users(params: ModelParams, side: str, H: np.ndarray) -> np.ndarray:
    """ReLU(W H + b) with W column-sliced to the padded length, right-aligned
    so each weight column keeps its distance-from-present meaning."""
    L = H.shape[0]
    if L > params.max_seq_len:
        raise DimensionError(f"history length {L} exceeds max_seq_len")
    W = params.tensors[f"uin.{side}.w"][:, params.max_seq_len - L:]
    return relu(W @ H + params.tensors[f"uin.{side}.b"])


def attention_scores(params: ModelParams, side: str, query_emb: np.ndarray,
                     U: np.ndarray) -> np.ndarray:
    """MLP attention f_i = h . ReLU(W1 [query ; U_i] + b) for all i at once."""
    d = params.embed_dim
    W1 = params.tensors[f"att.{side}.w1"]
    z = U @ W1[:, d:].T + W1[:, :d] @ query_emb + params.tensors[f"att.{side}.b"]
    return relu(z) @ params.tensors[f"att.{side}.h"]


def attention_score(params: ModelParams, side: str, query_emb: np.ndarray,
                    user_vec: np.ndarray) -> float:
    return float(attention_scores(params, side, query_emb, user_vec[None, :])[0])


def smoothed_attention(f: np.ndarray, smoothing: float) -> np.ndarray:
    """Max-shifted smoothed softmax; exactly softmax at smoothing = 1."""
    shifted = f - f.max()
    e = np.exp(shifted)
    return e / (e.sum() ** smoothing)


def account_representation(params: ModelParams, side: str,
                           query_emb: np.ndarray, U: np.ndarray,
                           smoothing: float | None = None):
    """Attention-weighted sum of latent users; returns (G, alpha)."""
    if smoothing is None:
        smoothing = params.attn_smoothing
    f = attention_scores(params, side, query_emb, U)
    alpha = smoothed_attention(f, smoothing)
    return alpha @ U, alpha


def fuse_and_predict(params: ModelParams, domain: str, g_own: np.ndarray,
                     g_transferred: np.ndarray, item_emb: np.ndarray) -> float:
    """sigmoid(item . W_p [G_transferred ; G_own] + b)."""
    concat = np.concatenate([g_transferred, g_own])
    fused = concat @ params.tensors[f"fuse.{domain}.w"]
    return float(sigmoid(item_emb @ fused + params.tensors[f"fuse.{domain}.b"][0]))


@dataclass
class SideCache:
    items: np.ndarray
    positions: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    U: np.ndarray          # post-dropout latent users, as consumed downstream
    u_mask: np.ndarray | None
    z_att: np.ndarray
    R: np.ndarray          # post-dropout attention hidden
    r_mask: np.ndarray | None
    f: np.ndarray
    alpha: np.ndarray
    e: np.ndarray          # exp(f - max)
    e_sum: float
    argmax: int
    G: np.ndarray


@dataclass
class AccountState:
    """Cached activations of one instance forward pass."""
    domain: str
    query: int
    candidates: np.ndarray
    own: SideCache | None
    transferred: SideCache | None
    g_own: np.ndarray
    g_tr: np.ndarray
    concat: np.ndarray
    fused: np.ndarray
    logits: np.ndarray
    probs: np.ndarray = field(default=None)


def _dropout_mask(rng, shape, rate):
    if rate <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _side_forward(params: ModelParams, side: str, table: str, items, positions,
                  query_emb, dropout: float, rng) -> SideCache:
    items = np.asarray(items, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    d = params.embed_dim
    L = len(items)
    if L > params.max_seq_len:
        raise DimensionError(f"history length {L} exceeds max_seq_len")
    H = np.zeros((L, d))
    mask = items != PAD
    H[mask] = params.tensors[table][items[mask]] + \
        params.tensors["pos"][positions[mask]]
    W = params.tensors[f"uin.{side}.w"][:, params.max_seq_len - L:]
    Z = W @ H + params.tensors[f"uin.{side}.b"]
    U = relu(Z)
    u_mask = _dropout_mask(rng, U.shape, dropout)
    if u_mask is not None:
        U = U * u_mask
    W1 = params.tensors[f"att.{side}.w1"]
    z_att = U @ W1[:, d:].T + W1[:, :d] @ query_emb + params.tensors[f"att.{side}.b"]
    R = relu(z_att)
    r_mask = _dropout_mask(rng, R.shape, dropout)
    if r_mask is not None:
        R = R * r_mask
    f = R @ params.tensors[f"att.{side}.h"]
    argmax = int(np.argmax(f))
    e = np.exp(f - f[argmax])
    e_sum = float(e.sum())
    alpha = e / (e_sum ** params.attn_smoothing)
    G = alpha @ U
    return SideCache(items=items, positions=positions, H=H, Z=Z, U=U,
                     u_mask=u_mask, z_att=z_att, R=R, r_mask=r_mask, f=f,
                     alpha=alpha, e=e, e_sum=e_sum, argmax=argmax, G=G)


def forward_account(params: ModelParams, instance: TrainingInstance,
                    candidates, dropout: float = 0.0,
                    rng: np.random.Generator | None = None) -> AccountState:
    """Full forward pass for one instance: both towers supervised by the
    instance's query item, then one logit per candidate item. An empty
    transferred sequence skips its tower and contributes a zero vector."""
    domain = instance.domain
    own_side, tr_side, own_table, tr_table = SIDES[domain]
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0 or candidates.min() < 1:
        raise IndexError("candidates must be real item ids (>= 1)")
    d = params.embed_dim
    query_emb = params.tensors[own_table][instance.query]

    own = None
    if len(instance.history) > 0:
        own = _side_forward(params, own_side, own_table, instance.history,
                            instance.history_pos, query_emb, dropout, rng)
    tr = None
    if len(instance.transferred) > 0:
        tr = _side_forward(params, tr_side, tr_table, instance.transferred,
                           instance.transferred_pos, query_emb, dropout, rng)
    g_own = own.G if own is not None else np.zeros(d)
    g_tr = tr.G if tr is not None else np.zeros(d)
    concat = np.concatenate([g_tr, g_own])
    fused = concat @ params.tensors[f"fuse.{domain}.w"]
    logits = params.tensors[own_table][candidates] @ fused + \
        params.tensors[f"fuse.{domain}.b"][0]
    probs = sigmoid(np.atleast_1d(logits))
    return AccountState(domain=domain, query=instance.query,
                        candidates=candidates, own=own, transferred=tr,
                        g_own=g_own, g_tr=g_tr, concat=concat, fused=fused,
                        logits=np.atleast_1d(logits), probs=probs)


def score_candidates(params: ModelParams, instance: TrainingInstance,
                     candidates) -> np.ndarray:
    """Inference-mode candidate probabilities (no dropout, no cache reuse)."""
    return forward_account(params, instance, candidates).probs


def backward_account(params: ModelParams, state: AccountState,
                     dlogits: np.ndarray, grads: dict[str, np.ndarray],
                     query_emb: np.ndarray) -> None:
    """Accumulate d(loss)/d(tensors) for one instance given d(loss)/d(logits)."""
    domain = state.domain
    own_side, tr_side, own_table, tr_table = SIDES[domain]
    d = params.embed_dim
    cand_emb = params.tensors[own_table][state.candidates]
    grads[f"fuse.{domain}.b"][0] += dlogits.sum()
    dfused = cand_emb.T @ dlogits
    np.add.at(grads[own_table], state.candidates,
              np.outer(dlogits, state.fused))
    grads[f"fuse.{domain}.w"] += np.outer(state.concat, dfused)
    dconcat = params.tensors[f"fuse.{domain}.w"] @ dfused
    dG_tr, dG_own = dconcat[:d], dconcat[d:]
    dquery = np.zeros(d)
    if state.own is not None:
        dquery += _tower_backward(params, own_side, own_table, state.own,
                                  dG_own, grads, query_emb)
    if state.transferred is not None:
        dquery += _tower_backward(params, tr_side, tr_table, state.transferred,
                                  dG_tr, grads, query_emb)
    grads[own_table][state.query] += dquery


def _tower_backward(params: ModelParams, side: str, table: str, c: SideCache,
                    dG: np.ndarray, grads: dict[str, np.ndarray],
                    query_emb: np.ndarray) -> np.ndarray:
    d = params.embed_dim
    beta = params.attn_smoothing
    # G = sum_i alpha_i U_i
    dalpha = c.U @ dG
    dU = np.outer(c.alpha, dG)
    # alpha_i = e_i / e_sum^beta, e_i = exp(f_i - f_max); because the shift
    # f_max moves with its source coordinate, d(alpha_i)/d(f_k) =
    # alpha_i [delta_ik - beta e_k/e_sum - (1-beta) delta_{k,argmax}]
    s = dalpha * c.alpha
    s_sum = s.sum()
    df = s - beta * (c.e / c.e_sum) * s_sum
    df[c.argmax] -= (1.0 - beta) * s_sum
    h = params.tensors[f"att.{side}.h"]
    grads[f"att.{side}.h"] += c.R.T @ df
    dR = np.outer(df, h)
    if c.r_mask is not None:
        dR = dR * c.r_mask
    dz = dR * (c.z_att > 0)
    W1 = params.tensors[f"att.{side}.w1"]
    dz_sum = dz.sum(axis=0)
    grads[f"att.{side}.w1"][:, :d] += np.outer(dz_sum, query_emb)
    grads[f"att.{side}.w1"][:, d:] += dz.T @ c.U
    grads[f"att.{side}.b"] += dz_sum
    dquery = W1[:, :d].T @ dz_sum
    dU += dz @ W1[:, d:]
    if c.u_mask is not None:
        dU = dU * c.u_mask
    dZ = dU * (c.Z > 0)
    L = c.H.shape[0]
    lo = params.max_seq_len - L
    grads[f"uin.{side}.w"][:, lo:] += dZ @ c.H.T
    grads[f"uin.{side}.b"] += dZ
    dH = params.tensors[f"uin.{side}.w"][:, lo:].T @ dZ
    mask = c.items != PAD
    np.add.at(grads[table], c.items[mask], dH[mask])
    np.add.at(grads["pos"], c.positions[mask], dH[mask])
    return dquery


def loss_only(params: ModelParams, batch: list[TrainingInstance],
              domain: str) -> float:
    """Regularized log loss of a batch, forward only (no dropout)."""
    total = 0.0
    T = sum(1 + len(inst.negatives) for inst in batch)
    for inst in batch:
        if inst.domain != domain:
            raise ValueError("instance domain does not match batch domain")
        cands = [inst.target] + list(inst.negatives)
        p = np.clip(forward_account(params, inst, cands).probs,
                    PROB_CLIP, 1.0 - PROB_CLIP)
        total -= np.log(p[0]) + np.log(1.0 - p[1:]).sum()
    total /= T
    total += params.l2_reg * sum(
        float((v * v).sum()) for v in params.tensors.values())
    return float(total)


def loss_and_grads(params: ModelParams, batch: list[TrainingInstance],
                   domain: str, dropout: float = 0.0,
                   rng: np.random.Generator | None = None
                   ) -> tuple[float, dict[str, np.ndarray]]:
    """Batch loss and its gradient over every tensor.

    Loss = -(1/T) [sum log p(target) + sum log(1 - p(negative))] + l2 |theta|^2
    with T the number of scored (instance, item) pairs. Padding embedding
    rows receive exactly zero gradient.
    """
    grads = zero_grads(params)
    total = 0.0
    T = sum(1 + len(inst.negatives) for inst in batch)
    for inst in batch:
        if inst.domain != domain:
            raise ValueError("instance domain does not match batch domain")
        cands = [inst.target] + list(inst.negatives)
        query_emb = params.tensors[SIDES[domain][2]][inst.query].copy()
        state = forward_account(params, inst, cands, dropout=dropout, rng=rng)
        y = np.zeros(len(cands))
        y[0] = 1.0
        p = np.clip(state.probs, PROB_CLIP, 1.0 - PROB_CLIP)
        total -= np.log(p[0]) + np.log(1.0 - p[1:]).sum()
        backward_account(params, state, (p - y) / T, grads, query_emb)
    total /= T
    for name, v in params.tensors.items():
        total += params.l2_reg * float((v * v).sum())
        grads[name] += 2.0 * params.l2_reg * v
    grads["emb.A"][PAD] = 0.0
    grads["emb.B"][PAD] = 0.0
    return float(total), grads
