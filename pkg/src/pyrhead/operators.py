"""Feature-aggregation operators over point neighborhoods of a grid point.

The unified gated attention subsumes the graph, standard-attention and
point-transformer forms through four gate scalars; fixing the gates to
(1,0,0,0), (0,0,1,0) or (1,1,0,1) reproduces the corresponding operator.
A soft radius coefficient makes the aggregation radius differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import (Value, add, concat, mul, reshape, sigmoid, softmax,
                       take, vmax, vsum)
from .autodiff import _np_sigmoid as _np_sig
from .nn import LinearParams, MLPParams, init_linear
from .spatial import PointSet, SpatialIndex


class ContractViolationError(ValueError):
    """A neighbor bundle does not match the radius it claims to cover."""


@dataclass(frozen=True)
class GateOverride:
    """Fixed gate values (positional, key, cross-product, value mixing)."""

    pos: float
    key: float
    cross: float
    value: float

    def __post_init__(self):
        for name in ("pos", "key", "cross", "value"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"gate {name}={v} outside [0,1]")

    @classmethod
    def from_tuple(cls, t) -> "GateOverride":
        return cls(*[float(v) for v in t])


GRAPH_GATES = GateOverride(1.0, 0.0, 0.0, 0.0)
ATTENTION_GATES = GateOverride(0.0, 0.0, 1.0, 0.0)
TRANSFORMER_GATES = GateOverride(1.0, 1.0, 0.0, 1.0)


@dataclass
class AttentionParams:
    """All learnable tensors of the gated attention operator."""

    d_in: int
    d_model: int
    heads: int
    key: LinearParams          # features -> d_model
    value: LinearParams        # features -> d_model
    q_pos: LinearParams        # location offset -> d_model
    w_head: LinearParams       # d_model -> one logit per head
    gate_pos: LinearParams     # d_model -> 1, sigmoid
    gate_key: LinearParams
    gate_cross: LinearParams
    gate_value: LinearParams

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")

    @property
    def head_width(self) -> int:
        return self.d_model // self.heads

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Value]]:
        for name in ("key", "value", "q_pos", "w_head",
                     "gate_pos", "gate_key", "gate_cross", "gate_value"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite attention parameter {name}")


def init_attention_params(rng: np.random.Generator, d_in: int,
                          d_model: int = 64, heads: int = 4) -> AttentionParams:
    return AttentionParams(
        d_in=d_in, d_model=d_model, heads=heads,
        key=init_linear(rng, d_in, d_model),
        value=init_linear(rng, d_in, d_model),
        q_pos=init_linear(rng, 3, d_model),
        w_head=init_linear(rng, d_model, heads),
        gate_pos=init_linear(rng, d_model, 1),
        gate_key=init_linear(rng, d_model, 1),
        gate_cross=init_linear(rng, d_model, 1),
        gate_value=init_linear(rng, d_model, 1),
    )


@dataclass
class NeighborBundle:
    """Neighbors of one grid point: ids, offsets to the grid point, features."""

    grid_point: np.ndarray
    ids: np.ndarray
    offsets: np.ndarray                 # p_i - p_grid, shape [m,3]
    feats: np.ndarray | Value           # [m,d]
    coeff: np.ndarray | None = None     # optional fixed per-neighbor weights
    gather_radius: float | None = None  # radius the ids were collected at

    def __post_init__(self):
        self.grid_point = np.asarray(self.grid_point, dtype=np.float64).reshape(3)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        m = len(self.ids)
        if self.offsets.shape[0] != m or self.feats.shape[0] != m:
            raise ValueError("bundle arrays disagree on neighbor count")
        if self.coeff is not None and len(self.coeff) != m:
            raise ValueError("bundle coeff length mismatch")

    def __len__(self) -> int:
        return len(self.ids)

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)

    def sorted_by_id(self) -> "NeighborBundle":
        """Canonical neighbor order: ascending point id."""
        order = np.argsort(self.ids, kind="stable")
        if np.array_equal(order, np.arange(len(self.ids))):
            return self
        feats = take(self.feats, order) if isinstance(self.feats, Value) \
            else self.feats[order]
        coeff = None if self.coeff is None else np.asarray(self.coeff)[order]
        return NeighborBundle(self.grid_point, self.ids[order],
                              self.offsets[order], feats, coeff,
                              self.gather_radius)

    @classmethod
    def gather(cls, ps: PointSet, idx: SpatialIndex, grid_point,
               radius: float, max_k: int) -> "NeighborBundle":
        gp = np.asarray(grid_point, dtype=np.float64).reshape(3)
        ids, _ = idx.query(gp, radius, max_k)
        return cls(gp, ids, ps.coords[ids] - gp, ps.feats[ids],
                   gather_radius=radius)

    @classmethod
    def gather_extended(cls, ps: PointSet, idx: SpatialIndex, grid_point,
                        r: float, tau: float, max_k: int) -> "NeighborBundle":
        if tau <= 0:
            raise ValueError("tau must be positive")
        return cls.gather(ps, idx, grid_point, r + 5.0 * tau, max_k)


# -- radius membership ----------------------------------------------------

def soft_radius_coeff(d, r, tau):
    """Soft ball membership 1 - sigmoid((d - r) / tau).

    ``d`` may be a scalar or array of distances; ``r`` may be a plain float
    or a Value, in which case the result is differentiable in r (and d).
    """
    if isinstance(tau, Value):
        raise TypeError("tau is a schedule constant, not a learnable value")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if isinstance(d, Value) or isinstance(r, Value):
        z = mul(add(d, mul(r, -1.0) if isinstance(r, Value) else -np.asarray(r)),
                1.0 / tau)
        return add(1.0, mul(sigmoid(z), -1.0))
    s = 1.0 - sigmoid((np.asarray(d, dtype=np.float64) - r) / tau)
    return float(s) if np.ndim(d) == 0 else s


def hard_membership(d, r):
    """Indicator of the closed ball: 1 iff d <= r."""
    out = np.where(np.asarray(d, dtype=np.float64) <= r, 1.0, 0.0)
    return float(out) if np.ndim(d) == 0 else out


# -- standalone operators ---------------------------------------------------

def _zeros_feature(width: int) -> Value:
    return Value(np.zeros(width))


def _per_head_combine(weights: Value, values: Value, heads: int) -> Value:
    """Sum_i weights[i,h] * values[i, h-th slice]; concatenation over heads."""
    m, dm = values.shape
    dh = dm // heads
    w3 = reshape(weights, (m, heads, 1))
    v3 = reshape(values, (m, heads, dh))
    return reshape(vsum(mul(w3, v3), axis=0), (dm,))


def pool_feature(nb: NeighborBundle, mlp: MLPParams) -> Value:
    """Channelwise max over MLP([feature, offset]) of each neighbor."""
    nb = nb.sorted_by_id()
    if nb.feats.shape[1] + 3 != mlp.d_in:
        raise ValueError(
            f"pool MLP expects width {nb.feats.shape[1] + 3}, has {mlp.d_in}")
    if len(nb) == 0:
        return _zeros_feature(mlp.d_out)
    x = concat([nb.feats, nb.offsets], axis=1)
    return vmax(mlp(x), axis=0)


def graph_feature(nb: NeighborBundle, params: AttentionParams) -> Value:
    """Edge-weighted combination: weights from the positional embedding only."""
    nb = nb.sorted_by_id()
    if len(nb) == 0:
        return _zeros_feature(params.d_model)
    v = params.value(nb.feats)
    q = params.q_pos(nb.offsets)
    w = softmax(params.w_head(q), axis=0)
    return _per_head_combine(w, v, params.heads)


def attention_feature(nb: NeighborBundle, params: AttentionParams) -> Value:
    """Standard attention: weights from the query-key elementwise product."""
    nb = nb.sorted_by_id()
    if len(nb) == 0:
        return _zeros_feature(params.d_model)
    k = params.key(nb.feats)
    v = params.value(nb.feats)
    q = params.q_pos(nb.offsets)
    w = softmax(params.w_head(mul(q, k)), axis=0)
    return _per_head_combine(w, v, params.heads)


def point_transformer_feature(nb: NeighborBundle,
                              params: AttentionParams) -> Value:
    """Vector attention with the positional embedding added to key and value."""
    nb = nb.sorted_by_id()
    if len(nb) == 0:
        return _zeros_feature(params.d_model)
    k = params.key(nb.feats)
    v = params.value(nb.feats)
    q = params.q_pos(nb.offsets)
    w = softmax(params.w_head(add(k, q)), axis=0)
    return _per_head_combine(w, add(v, q), params.heads)


# -- unified gated operator -------------------------------------------------

def _gate_core(k: Value, q: Value, v: Value, params: AttentionParams,
               gates: GateOverride | None, coeff) -> Value:
    """Fused gating, per-head softmax and weighted combination.

    One tape node covers everything between the k/q/v projections and the
    [g, d_model] output; the backward below is the hand-derived adjoint of
    that computation.
    """
    kd, qd, vd = k.data, q.data, v.data
    g, m, dm = kd.shape
    heads, dh = params.heads, params.head_width
    qkd = qd * kd
    learned = gates is None
    if learned:
        wgk, bgk = params.gate_key.W.data, params.gate_key.b.data
        wgq, bgq = params.gate_pos.W.data, params.gate_pos.b.data
        wgc, bgc = params.gate_cross.W.data, params.gate_cross.b.data
        wgv, bgv = params.gate_value.W.data, params.gate_value.b.data
        gk = _np_sig(kd @ wgk + bgk)
        gq = _np_sig(qd @ wgq + bgq)
        gqk = _np_sig(qkd @ wgc + bgc)
        gv = _np_sig(qd @ wgv + bgv)
    else:
        gk, gq, gqk, gv = gates.key, gates.pos, gates.cross, gates.value
    a = gk * kd + gq * qd + gqk * qkd
    wwd, bwd = params.w_head.W.data, params.w_head.b.data
    logits = a @ wwd + bwd
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=1, keepdims=True)
    s_val = coeff if isinstance(coeff, Value) else None
    sd = None
    if coeff is not None:
        sd = (coeff.data if s_val is not None else np.asarray(coeff)).reshape(g, m)
        wc = w * sd[:, :, None]
    else:
        wc = w
    val = vd + gv * qd
    val4 = val.reshape(g, m, heads, dh)
    out_data = np.einsum("gmh,gmhd->ghd", wc, val4).reshape(g, dm)

    parents = [k, q, v, params.w_head.W, params.w_head.b]
    if learned:
        for lp in (params.gate_key, params.gate_pos, params.gate_cross,
                   params.gate_value):
            parents.extend((lp.W, lp.b))
    if s_val is not None:
        parents.append(s_val)
    out = Value(out_data, tuple(parents))

    def _bw():
        gh = out._grad.reshape(g, heads, dh)
        dwc = np.einsum("gmhd,ghd->gmh", val4, gh)
        dval = (wc[:, :, :, None] * gh[:, None, :, :]).reshape(g, m, dm)
        if sd is not None:
            dw = dwc * sd[:, :, None]
            if s_val is not None:
                s_val._accum_owned((dwc * w).sum(axis=2).reshape(s_val.shape))
        else:
            dw = dwc
        dlogits = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        da = dlogits @ wwd.T
        params.w_head.W._accum_owned(a.reshape(-1, dm).T @ dlogits.reshape(-1, heads))
        params.w_head.b._accum_owned(dlogits.sum(axis=(0, 1)))
        dqk = da * gqk if (learned or gqk != 0.0) else None
        dk = da * gk if (learned or gk != 0.0) else None
        dq = da * gq if (learned or gq != 0.0) else None
        dv = dval
        dq_v = dval * gv if (learned or gv != 0.0) else None
        if learned:
            for lp, gate, inp, grad_in in (
                    (params.gate_key, gk, kd, "k"),
                    (params.gate_pos, gq, qd, "q"),
                    (params.gate_cross, gqk, qkd, "qk"),
                    (params.gate_value, gv, qd, "v"),
            ):
                if grad_in == "k":
                    dgate = (da * kd).sum(axis=-1, keepdims=True)
                elif grad_in == "q":
                    dgate = (da * qd).sum(axis=-1, keepdims=True)
                elif grad_in == "qk":
                    dgate = (da * qkd).sum(axis=-1, keepdims=True)
                else:
                    dgate = (dval * qd).sum(axis=-1, keepdims=True)
                dz = dgate * gate * (1.0 - gate)
                lp.W._accum_owned(inp.reshape(-1, dm).T @ dz.reshape(-1, 1))
                lp.b._accum_owned(dz.sum(axis=(0, 1)))
                back = dz @ lp.W.data.T
                if grad_in == "k":
                    dk += back
                elif grad_in == "qk":
                    dqk += back
                else:
                    dq = back if dq is None else dq + back
        if dqk is not None:
            dk = dqk * qd if dk is None else dk + dqk * qd
            dq = dqk * kd if dq is None else dq + dqk * kd
        if dq_v is not None:
            dq = dq_v if dq is None else dq + dq_v
        if dk is not None:
            k._accum_owned(dk)
        if dq is not None:
            q._accum_owned(dq)
        v._accum_owned(dv)

    out._backward = _bw
    return out


def gated_attention_batched(offsets: np.ndarray, feats, params: AttentionParams,
                            gates: GateOverride | None = None, coeff=None) -> Value:
    """Unified operator over a batch of grid points sharing a neighbor count.

    offsets: [g,m,3] array; feats: [g,m,d] array or Value; coeff: optional
    [g,m] per-neighbor multiplier applied after the softmax (no
    renormalization). Returns the [g, d_model] grid features.
    """
    k = params.key(feats)
    q = params.q_pos(offsets)
    v = params.value(feats)
    return _gate_core(k, q, v, params, gates, coeff)


def roi_grid_attention(nb: NeighborBundle, params: AttentionParams,
                       gates: GateOverride | None = None) -> Value:
    """Gated attention over one grid point's neighbors (learned gates by default)."""
    params.check_finite()
    nb = nb.sorted_by_id()
    if len(nb) == 0:
        return _zeros_feature(params.d_model)
    m = len(nb)
    feats = nb.feats
    feats = reshape(feats, (1, m, feats.shape[1])) if isinstance(feats, Value) \
        else feats.reshape(1, m, -1)
    coeff = None if nb.coeff is None else np.asarray(nb.coeff).reshape(1, m)
    out = gated_attention_batched(nb.offsets.reshape(1, m, 3), feats, params,
                                  gates, coeff)
    return reshape(out, (params.d_model,))


def roi_grid_attention_darp(nb: NeighborBundle, params: AttentionParams,
                            r, tau: float,
                            gates: GateOverride | None = None) -> Value:
    """Gated attention with a differentiable soft-radius coefficient.

    The bundle must have been gathered over the widened range r + 5*tau;
    a mismatched gather radius raises ContractViolationError. The output
    is differentiable in r through the membership coefficient only.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    params.check_finite()
    r_now = r.item() if isinstance(r, Value) else float(r)
    cutoff = r_now + 5.0 * tau
    tol = 1e-9 * max(1.0, cutoff)
    if nb.gather_radius is not None and abs(nb.gather_radius - cutoff) > tol:
        raise ContractViolationError(
            f"bundle gathered at {nb.gather_radius}, operator expects {cutoff}")
    nb = nb.sorted_by_id()
    if len(nb) == 0:
        return _zeros_feature(params.d_model)
    dists = nb.distances()
    if dists.max() > cutoff + tol:
        raise ContractViolationError(
            f"neighbor at {dists.max():.6g} exceeds sampling range {cutoff:.6g}")
    m = len(nb)
    s = soft_radius_coeff(dists, r, tau)
    s = reshape(s, (1, m)) if isinstance(s, Value) else s.reshape(1, m)
    feats = nb.feats
    feats = reshape(feats, (1, m, feats.shape[1])) if isinstance(feats, Value) \
        else feats.reshape(1, m, -1)
    out = gated_attention_batched(nb.offsets.reshape(1, m, 3), feats, params,
                                  gates, s)
    return reshape(out, (params.d_model,))
