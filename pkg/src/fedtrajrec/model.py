"""Lightweight trajectory embedding model.

A GRU encoder summarises the observed grid tokens; a decoder of stacked
RNN-cell ST-blocks with an MLP multi-task head then emits, for every grid
timestamp, a distribution over road segments (restricted by a distance
mask) and a moving ratio.

Everything runs batched: a :class:`Batch` pads B trajectories to common
lengths and per-step weights zero out the padding.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from . import diffcore as dc
from .errors import (ConfigError, LengthMismatchError, NegativeLambdaError,
                     ShapeMismatchError, UnrecordedGraphError, VocabularyOverflowError)
from .roadnet import GridSpec, RoadNetwork
from .trajdata import (GridToken, IncompleteTrajectory, MapMatchedTrajectory, TrajPair,
                       to_grid_sequence)


@dataclass
class LteConfig:
    n_edges: int
    grid_cols: int
    grid_rows: int
    max_tid: int
    hidden_dim: int = 64
    seg_embed_dim: int = 32
    grid_embed_dim: int = 32
    dropout: float = 0.5
    mu: float = 1.0
    gamma: float = 125.0
    mask_radius: float = 300.0
    n_blocks: int = 1
    teacher_forcing: float = 1.0
    mask_mode: str = "observed"
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.seg_embed_dim < 1 or self.grid_embed_dim < 1:
            raise ConfigError("layer widths must be >= 1")
        if self.n_edges < 1 or self.grid_cols < 1 or self.grid_rows < 1 or self.max_tid < 0:
            raise ConfigError("vocabulary sizes must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if self.n_blocks < 1:
            raise ConfigError("need at least one ST-block")
        if not 0 <= self.teacher_forcing <= 1:
            raise ConfigError("teacher forcing ratio must be in [0, 1]")
        if self.mask_mode not in ("observed", "interpolate"):
            raise ConfigError(f"mask_mode must be 'observed' or 'interpolate', got {self.mask_mode!r}")

    @classmethod
    def for_network(cls, net: RoadNetwork, grid: GridSpec, max_steps: int, **kw) -> "LteConfig":
        return cls(n_edges=net.n_edges, grid_cols=grid.cols, grid_rows=grid.rows,
                   max_tid=max_steps - 1, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LteConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown model config key {bad[0]!r}")
        return cls(**d)


def model_layout(cfg: LteConfig) -> tuple[dc.Layout, dict]:
    """Parameter layout plus the fan-in used to initialise each segment."""
    D, S, G, L = cfg.hidden_dim, cfg.seg_embed_dim, cfg.grid_embed_dim, cfg.n_edges
    segs = [("emb_x", (cfg.grid_cols, G)), ("emb_y", (cfg.grid_rows, G)),
            ("emb_tid", (cfg.max_tid + 1, G))]
    fan = {"emb_x": 1, "emb_y": 1, "emb_tid": 1}
    for gate in ("r", "z", "h"):
        segs += [(f"enc_W{gate}", (D, D + G)), (f"enc_b{gate}", (D,))]
        fan[f"enc_W{gate}"] = fan[f"enc_b{gate}"] = D + G
    for j in range(cfg.n_blocks):
        width = D + (S + 1 if j == 0 else D)
        segs += [(f"dec{j}_W", (D, width)), (f"dec{j}_b", (D,))]
        fan[f"dec{j}_W"] = fan[f"dec{j}_b"] = width
    segs += [("head_Wd", (D, D)), ("head_bd", (D,)), ("head_wc", (L, D)),
             ("seg_emb", (L, S)), ("emb_Wq", (D, S)), ("emb_bq", (D,)),
             ("ratio_W", (1, D + S)), ("ratio_b", (1,))]
    fan.update(head_Wd=D, head_bd=D, head_wc=D, seg_emb=1, emb_Wq=S, emb_bq=S,
               ratio_W=D + S, ratio_b=D + S)
    return dc.Layout(tuple(segs)), fan


def parameter_count(cfg: LteConfig) -> int:
    """Closed form, independent of the layout builder."""
    D, S, G, L = cfg.hidden_dim, cfg.seg_embed_dim, cfg.grid_embed_dim, cfg.n_edges
    tables = (cfg.grid_cols + cfg.grid_rows + cfg.max_tid + 1) * G
    encoder = 3 * (D * (D + G) + D)
    decoder = (D * (D + S + 1) + D) + (cfg.n_blocks - 1) * (2 * D * D + D)
    head = D * D + D + L * D
    seg = L * S + D * S + D + (D + S) + 1
    return tables + encoder + decoder + head + seg


# --------------------------------------------------------------------------
# per-trajectory features
# --------------------------------------------------------------------------

def interpolate_anchors(net: RoadNetwork, icp: IncompleteTrajectory) -> np.ndarray:
    """(n_grid, 2) positions: observed where known, linear in time between."""
    xy = net.positions(icp.edges, icp.ratios)
    k = np.arange(icp.n_grid)
    return np.stack([np.interp(k, icp.index, xy[:, 0]), np.interp(k, icp.index, xy[:, 1])], axis=1)


def log_mask_rows(net: RoadNetwork, anchors: np.ndarray, gamma: float, radius: float) -> np.ndarray:
    """log of exp(-d^2/gamma) per (anchor, edge); -inf beyond ``radius``.

    Rows with no edge in range become all zeros (unmasked softmax).
    """
    dist, _ = net.project(anchors[:, 0], anchors[:, 1])
    out = np.where(dist <= radius, -(dist * dist) / gamma, -np.inf)
    empty = ~np.isfinite(out).any(axis=1)
    out[empty] = 0.0
    return out


def trajectory_log_mask(net: RoadNetwork, icp: IncompleteTrajectory, cfg: LteConfig) -> np.ndarray:
    """(n_grid, L) log-mask for every decode step of ``icp``.

    ``observed`` mode constrains only the steps that carry an observation
    and leaves the others unmasked; ``interpolate`` anchors every step at
    the time-interpolated position between its bracketing observations.
    """
    if cfg.mask_mode == "interpolate":
        return log_mask_rows(net, interpolate_anchors(net, icp), cfg.gamma, cfg.mask_radius)
    out = np.zeros((icp.n_grid, net.n_edges))
    xy = net.positions(icp.edges, icp.ratios)
    out[icp.index] = log_mask_rows(net, xy, cfg.gamma, cfg.mask_radius)
    return out


def constraint_mask(net: RoadNetwork, anchor, cfg: LteConfig) -> np.ndarray:
    """Per-edge weight exp(-d^2/gamma), exactly 0 beyond the mask radius."""
    a = np.asarray(anchor, dtype=np.float64).reshape(1, 2)
    dist, _ = net.project(a[:, 0], a[:, 1])
    d = dist[0]
    return np.where(d <= cfg.mask_radius, np.exp(-(d * d) / cfg.gamma), 0.0)


class Encoded(NamedTuple):
    tokens: np.ndarray       # (T, 3) x, y, tid
    n_steps: int
    log_mask: np.ndarray     # (K, L)
    obs_index: np.ndarray
    obs_edges: np.ndarray
    obs_ratios: np.ndarray
    tgt_edges: np.ndarray | None
    tgt_ratios: np.ndarray | None


class FeatureCache:
    """Memoises the parameter-independent inputs of each trajectory."""

    def __init__(self, net: RoadNetwork, grid: GridSpec, cfg: LteConfig):
        self.net, self.grid, self.cfg = net, grid, cfg
        self._store: dict[int, tuple[object, Encoded]] = {}

    def encode_icp(self, icp: IncompleteTrajectory, truth: MapMatchedTrajectory | None = None) -> Encoded:
        cfg = self.cfg
        tokens = np.array(to_grid_sequence(icp, self.net, self.grid), dtype=np.int64).reshape(-1, 3)
        check_vocabulary(cfg, tokens)
        lm = trajectory_log_mask(self.net, icp, cfg)
        if truth is not None and len(truth) != icp.n_grid:
            raise LengthMismatchError("ground truth and incomplete trajectory disagree on length")
        return Encoded(tokens, icp.n_grid, lm, icp.index, icp.edges, icp.ratios,
                       None if truth is None else truth.edges,
                       None if truth is None else truth.ratios)

    def get(self, pair) -> Encoded:
        key = id(pair)
        hit = self._store.get(key)
        if hit is not None and hit[0] is pair:
            return hit[1]
        if isinstance(pair, TrajPair):
            enc = self.encode_icp(pair.icp, pair.truth)
        else:
            enc = self.encode_icp(pair)
        self._store[key] = (pair, enc)
        return enc


def check_vocabulary(cfg: LteConfig, tokens: np.ndarray) -> None:
    if tokens.size == 0:
        raise LengthMismatchError("token sequence is empty")
    lim = (cfg.grid_cols, cfg.grid_rows, cfg.max_tid + 1)
    for col, name in enumerate(("x", "y", "tid")):
        if tokens[:, col].min() < 0 or tokens[:, col].max() >= lim[col]:
            raise VocabularyOverflowError(f"{name} index outside vocabulary of size {lim[col]}")


class Batch:
    """Padded stack of encoded trajectories."""

    def __init__(self, encs: Sequence[Encoded], dtype=np.float64):
        B = len(encs)
        T = max(len(e.tokens) for e in encs)
        K = max(e.n_steps for e in encs)
        L = encs[0].log_mask.shape[1]
        self.size, self.n_tok, self.n_steps = B, T, K
        self.tokens = np.zeros((B, T, 3), dtype=np.int64)
        self.tok_len = np.array([len(e.tokens) for e in encs])
        self.steps = np.array([e.n_steps for e in encs])
        self.log_mask = np.zeros((B, K, L), dtype=dtype)
        self.observed = np.zeros((B, K), dtype=bool)
        self.obs_e = np.zeros((B, K), dtype=np.int64)
        self.obs_r = np.zeros((B, K), dtype=dtype)
        self.has_truth = all(e.tgt_edges is not None for e in encs)
        self.tgt_e = np.zeros((B, K), dtype=np.int64)
        self.tgt_r = np.zeros((B, K), dtype=dtype)
        self.step_w = np.zeros((B, K))
        for b, e in enumerate(encs):
            self.tokens[b, :len(e.tokens)] = e.tokens
            self.log_mask[b, :e.n_steps] = e.log_mask
            self.observed[b, e.obs_index] = True
            self.obs_e[b, e.obs_index] = e.obs_edges
            self.obs_r[b, e.obs_index] = e.obs_ratios
            self.step_w[b, :e.n_steps] = 1.0 / e.n_steps
            if self.has_truth:
                self.tgt_e[b, :e.n_steps] = e.tgt_edges
                self.tgt_r[b, :e.n_steps] = e.tgt_ratios
        if self.has_truth:
            # teacher forcing: step k is fed the truth at k-1, step 0 the first point
            self.in_e = np.concatenate([self.tgt_e[:, :1], self.tgt_e[:, :-1]], axis=1)
            self.in_r = np.concatenate([self.tgt_r[:, :1], self.tgt_r[:, :-1]], axis=1)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class DecodeStepOutput(NamedTuple):
    probs: np.ndarray
    edge: int
    ratio: float
    hidden: np.ndarray | list
    logits: np.ndarray


class ForwardRecord:
    """Activations of one teacher-forced forward pass; consumed by backward."""

    def __init__(self, batch, enc_caches, dec_caches, logits, ratios, probs, hidden):
        self.batch = batch
        self.enc_caches = enc_caches
        self.dec_caches = dec_caches
        self.logits = logits
        self.ratios = ratios
        self.probs = probs
        self.hidden = hidden
        self.consumed = False

    def activation_pattern(self) -> bytes:
        """Signature of every ReLU / clamp branch taken; equal patterns mean
        the loss is smooth along the segment between two parameter points."""
        parts = []
        for c in self.dec_caches:
            pre, z = c[7], c[9]
            parts.append(np.packbits(pre > 0.0).tobytes())
            parts.append(np.packbits(np.stack([z > 0.0, z < 1.0])).tobytes())
        return b"".join(parts)


class LteModel:
    def __init__(self, cfg: LteConfig, seed: int = 0):
        self.cfg = cfg
        self.layout, fan = model_layout(cfg)
        self.params = dc.ParamStore(self.layout, np.dtype(cfg.dtype))
        self.params.init_uniform(seed, fan)

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def n_params(self) -> int:
        return self.layout.size

    def flatten(self) -> dc.ParameterVector:
        return self.params.flatten()

    def load(self, pv: dc.ParameterVector) -> None:
        self.params.load(pv)

    def copy(self) -> "LteModel":
        twin = LteModel.__new__(LteModel)
        twin.cfg, twin.layout = self.cfg, self.layout
        twin.params = dc.ParamStore(self.layout, self.dtype)
        twin.params.flat[:] = self.params.flat
        return twin

    def _gru(self):
        P = self.params.p
        return {k: P["enc_" + k] for k in ("Wr", "br", "Wz", "bz", "Wh", "bh")}

    # -- encoder -----------------------------------------------------------
    def _token_inputs(self, tok):
        P = self.params.p
        return P["emb_x"][tok[:, 0]] + P["emb_y"][tok[:, 1]] + P["emb_tid"][tok[:, 2]]

    def _encode(self, batch: Batch, train: bool, rng):
        B, D = batch.size, self.cfg.hidden_dim
        h = np.zeros((B, D), dtype=self.dtype)
        gates = self._gru()
        caches = []
        p = self.cfg.dropout
        for s in range(batch.n_tok):
            x = self._token_inputs(batch.tokens[:, s])
            keep = None
            if train and p > 0:
                keep = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(self.dtype)
                x = x * keep
            valid = (s < batch.tok_len)[:, None]
            hn, cache = dc.gru_cell_forward(gates, h, x)
            h = np.where(valid, hn, h)
            caches.append((cache, keep, valid))
        return h, caches

    def _encode_backward(self, batch, caches, dh, G):
        for s in range(len(caches) - 1, -1, -1):
            cache, keep, valid = caches[s]
            gp, dh_prev, dx = dc.gru_cell_backward(cache, dh * valid)
            for k, v in gp.items():
                G["enc_" + k] += v
            dh = dh_prev + dh * ~valid
            if keep is not None:
                dx = dx * keep
            tok = batch.tokens[:, s]
            np.add.at(G["emb_x"], tok[:, 0], dx)
            np.add.at(G["emb_y"], tok[:, 1], dx)
            np.add.at(G["emb_tid"], tok[:, 2], dx)

    # -- one decoder step --------------------------------------------------
    def _step(self, hs, e_prev, r_prev, log_mask, e_for_ratio=None, keep_cache=False):
        """Advance all blocks one step.

        ``e_for_ratio`` selects the segment fed to the ratio branch; None
        means the argmax of the masked distribution.
        """
        P = self.params.p
        u = np.concatenate([P["seg_emb"][e_prev], r_prev[:, None].astype(self.dtype)], axis=1)
        new_hs, block_caches = [], []
        for j, h in enumerate(hs):
            h2, c = dc.rnn_cell_forward(P[f"dec{j}_W"], P[f"dec{j}_b"], h, u)
            new_hs.append(h2)
            block_caches.append(c)
            u = h2
        hp = u
        hd = hp @ P["head_Wd"].T + P["head_bd"]
        logits = hd @ P["head_wc"].T
        probs = dc.log_masked_softmax(logits, log_mask)
        e_t = np.argmax(probs, axis=1) if e_for_ratio is None else e_for_ratio
        em = P["seg_emb"][e_t]
        q = np.tanh(em @ P["emb_Wq"].T + P["emb_bq"])
        pre = hd + q
        he = np.maximum(pre, 0.0)
        zin = np.concatenate([he, em], axis=1)
        z = (zin @ P["ratio_W"].T + P["ratio_b"])[:, 0]
        r = np.clip(z, 0.0, 1.0)
        cache = None
        if keep_cache:
            cache = (block_caches, e_prev, hp, hd, e_t, em, q, pre, zin, z)
        return new_hs, logits, probs, e_t, r, cache

    def _step_backward(self, cache, dlogits, dr, dhs, G):
        """Backprop one step; ``dhs`` holds gradients w.r.t. the new block states."""
        P = self.params.p
        block_caches, e_prev, hp, hd, e_t, em, q, pre, zin, z = cache
        D = self.cfg.hidden_dim
        dz = (dr * ((z > 0.0) & (z < 1.0)))[:, None]
        G["ratio_W"] += dz.T @ zin
        G["ratio_b"] += dz.sum(axis=0)
        dzin = dz @ P["ratio_W"]
        dpre = dzin[:, :D] * (pre > 0.0)
        dem = dzin[:, D:]
        dhd = dpre + dlogits @ P["head_wc"]
        G["head_wc"] += dlogits.T @ hd
        da = dpre * (1.0 - q * q)
        G["emb_Wq"] += da.T @ em
        G["emb_bq"] += da.sum(axis=0)
        dem = dem + da @ P["emb_Wq"]
        np.add.at(G["seg_emb"], e_t, dem)
        G["head_Wd"] += dhd.T @ hp
        G["head_bd"] += dhd.sum(axis=0)
        dout = dhd @ P["head_Wd"]
        prev = [None] * len(dhs)
        for j in range(len(dhs) - 1, -1, -1):
            gp, dh_prev, du = dc.rnn_cell_backward(block_caches[j], dhs[j] + dout)
            G[f"dec{j}_W"] += gp["W"]
            G[f"dec{j}_b"] += gp["b"]
            prev[j] = dh_prev
            dout = du
        S = self.cfg.seg_embed_dim
        np.add.at(G["seg_emb"], e_prev, dout[:, :S])
        return prev

    # -- teacher-forced pass -----------------------------------------------
    def forward(self, batch: Batch, train: bool = False, rng=None) -> ForwardRecord:
        if not batch.has_truth:
            raise ValueError("teacher-forced forward needs ground truth")
        rng = rng if rng is not None else np.random.default_rng(0)
        h, enc_caches = self._encode(batch, train, rng)
        hs = [h] * self.cfg.n_blocks
        B, K = batch.size, batch.n_steps
        logits = np.zeros((B, K, self.cfg.n_edges), dtype=self.dtype)
        probs = np.zeros_like(logits)
        ratios = np.zeros((B, K), dtype=self.dtype)
        dec_caches = []
        e_in, r_in = batch.in_e[:, 0], batch.in_r[:, 0]
        tf = self.cfg.teacher_forcing
        for k in range(K):
            if k > 0:
                e_in, r_in = batch.in_e[:, k], batch.in_r[:, k]
                if train and tf < 1.0:
                    own = rng.random(B) >= tf
                    e_in = np.where(own, np.argmax(probs[:, k - 1], axis=1), e_in)
                    r_in = np.where(own, ratios[:, k - 1], r_in)
            hs, lg, pr, _, r, cache = self._step(hs, e_in, r_in, batch.log_mask[:, k],
                                                 e_for_ratio=batch.tgt_e[:, k], keep_cache=True)
            logits[:, k], probs[:, k], ratios[:, k] = lg, pr, r
            dec_caches.append(cache)
        return ForwardRecord(batch, enc_caches, dec_caches, logits, ratios, probs, h)

    def backward(self, rec: ForwardRecord, dlogits: np.ndarray, dratios: np.ndarray) -> np.ndarray:
        """Flat gradient given d(loss)/d(logits) (B,K,L) and d(loss)/d(ratios) (B,K)."""
        if rec is None or rec.consumed:
            raise UnrecordedGraphError("backward needs a fresh forward record")
        rec.consumed = True
        flat, G = self.params.zeros_like()
        dhs = [np.zeros_like(rec.hidden, dtype=np.float64) for _ in range(self.cfg.n_blocks)]
        for k in range(len(rec.dec_caches) - 1, -1, -1):
            dhs = self._step_backward(rec.dec_caches[k], dlogits[:, k], dratios[:, k], dhs, G)
        self._encode_backward(rec.batch, rec.enc_caches, sum(dhs), G)
        return flat

    def _objective(self, rec: ForwardRecord, lam: float, teacher_out, with_grad: bool):
        batch = rec.batch
        mu = self.cfg.mu
        B = batch.size
        w = batch.step_w / B                              # (B, K)
        bi, ki = np.meshgrid(np.arange(B), np.arange(batch.n_steps), indexing="ij")
        py = rec.probs[bi, ki, batch.tgt_e].astype(np.float64)
        ce = -np.log(py + dc.LOG_EPS)
        rerr = rec.ratios.astype(np.float64) - batch.tgt_r
        local = float(np.sum(w * (ce + mu * rerr * rerr)))
        dist = 0.0
        if lam > 0:
            t_logits, t_ratios = teacher_out
            dl = rec.logits.astype(np.float64) - t_logits
            drr = rec.ratios.astype(np.float64) - t_ratios
            dist = float(np.sum(w * (np.sum(dl * dl, axis=2) + drr * drr)))
        if not with_grad:
            return local, dist, None, None
        dlogits = rec.probs.astype(np.float64)
        dlogits[bi, ki, batch.tgt_e] -= 1.0
        dlogits *= (w * py / (py + dc.LOG_EPS))[..., None]
        dratios = w * 2.0 * mu * rerr
        if lam > 0:
            dlogits += (2.0 * lam * w)[..., None] * dl
            dratios = dratios + 2.0 * lam * w * drr
        return local, dist, dlogits, dratios

    def loss(self, batch: Batch, lam: float = 0.0, teacher_out=None, train: bool = True, rng=None):
        """Mean total loss over the batch (no gradient) and the forward record."""
        if lam < 0:
            raise NegativeLambdaError("lambda must be non-negative")
        rec = self.forward(batch, train=train, rng=rng)
        local, dist, _, _ = self._objective(rec, lam, teacher_out, with_grad=False)
        return local + lam * dist, rec

    def loss_and_grad(self, batch: Batch, lam: float = 0.0, teacher_out=None,
                      train: bool = True, rng=None):
        """Mean total loss over the batch and its flat gradient.

        ``teacher_out`` is a (logits, ratios) pair from the frozen teacher on
        the same batch; it is required when ``lam`` > 0.
        """
        if lam < 0:
            raise NegativeLambdaError("lambda must be non-negative")
        rec = self.forward(batch, train=train, rng=rng)
        local, dist, dlogits, dratios = self._objective(rec, lam, teacher_out, with_grad=True)
        grad = self.backward(rec, dlogits, dratios)
        return local + lam * dist, grad, {"local": local, "dist": dist}

    def teacher_outputs(self, batch: Batch):
        rec = self.forward(batch, train=False)
        return rec.logits.astype(np.float64), rec.ratios.astype(np.float64)

    # -- free-running inference ---------------------------------------------
    def infer(self, batch: Batch):
        """Decode every grid step; observed steps are copied and fed back."""
        h, _ = self._encode(batch, False, None)
        hs = [h] * self.cfg.n_blocks
        B, K = batch.size, batch.n_steps
        out_e = np.zeros((B, K), dtype=np.int64)
        out_r = np.zeros((B, K))
        e_in, r_in = batch.obs_e[:, 0], batch.obs_r[:, 0]
        for k in range(K):
            hs, _, _, e_t, r, _ = self._step(hs, e_in, r_in, batch.log_mask[:, k])
            obs = batch.observed[:, k]
            e_in = np.where(obs, batch.obs_e[:, k], e_t)
            r_in = np.where(obs, batch.obs_r[:, k], r)
            out_e[:, k] = e_in
            out_r[:, k] = r_in
        return out_e, out_r


# --------------------------------------------------------------------------
# functional surface
# --------------------------------------------------------------------------

def embed_trajectory(m: LteModel, tokens: Sequence[GridToken], train: bool = False, rng=None) -> np.ndarray:
    tok = np.array([tuple(t) for t in tokens], dtype=np.int64).reshape(-1, 3)
    check_vocabulary(m.cfg, tok)
    enc = Encoded(tok, 1, np.zeros((1, m.cfg.n_edges)), np.array([0]), np.array([0]),
                  np.array([0.0]), None, None)
    h, _ = m._encode(Batch([enc], m.dtype), train, rng if rng is not None else np.random.default_rng(0))
    return h[0]


def decode_step(m: LteModel, h_prev, e_prev: int, r_prev: float, mask) -> DecodeStepOutput:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (m.cfg.n_edges,):
        raise ShapeMismatchError(f"mask length {mask.shape} does not match {m.cfg.n_edges} segments")
    hs = list(h_prev) if isinstance(h_prev, (list, tuple)) else [h_prev] * m.cfg.n_blocks
    hs = [np.asarray(h, dtype=m.dtype).reshape(1, -1) for h in hs]
    if any(h.shape[1] != m.cfg.hidden_dim for h in hs):
        raise ShapeMismatchError("hidden state width does not match the model")
    with np.errstate(divide="ignore"):
        logw = np.log(mask)
    if not np.any(mask > 0):
        logw = np.zeros_like(mask)
    new_hs, logits, probs, e_t, r, _ = m._step(hs, np.array([e_prev]), np.array([r_prev]), logw[None])
    hidden = new_hs[0][0] if m.cfg.n_blocks == 1 else [h[0] for h in new_hs]
    return DecodeStepOutput(probs[0], int(e_t[0]), float(r[0]), hidden, logits[0])


def recover_many(m: LteModel, icps: Sequence[IncompleteTrajectory], net: RoadNetwork,
                 grid: GridSpec, cache: FeatureCache | None = None,
                 batch_size: int = 256) -> list[MapMatchedTrajectory]:
    cache = cache or FeatureCache(net, grid, m.cfg)
    out = []
    for start in range(0, len(icps), batch_size):
        chunk = icps[start:start + batch_size]
        batch = Batch([cache.get(icp) for icp in chunk], m.dtype)
        e, r = m.infer(batch)
        for b, icp in enumerate(chunk):
            k = icp.n_grid
            edges = e[b, :k].copy()
            ratios = np.clip(r[b, :k].astype(np.float64), 0.0, 1.0)
            # observed points are echoed at full precision, not via the model dtype
            edges[icp.index] = icp.edges
            ratios[icp.index] = icp.ratios
            out.append(MapMatchedTrajectory(edges, ratios, icp.t0, icp.epsilon))
    return out


def recover(m: LteModel, icp: IncompleteTrajectory, net: RoadNetwork, grid: GridSpec) -> MapMatchedTrajectory:
    return recover_many(m, [icp], net, grid)[0]


def local_loss(steps: Sequence[DecodeStepOutput], truth: MapMatchedTrajectory, mu: float) -> float:
    if len(steps) != len(truth):
        raise LengthMismatchError(f"{len(steps)} steps for {len(truth)} truth points")
    l1 = float(np.mean([dc.cross_entropy(s.probs, int(e)) for s, e in zip(steps, truth.edges)]))
    l2 = dc.mse([s.ratio for s in steps], truth.ratios)
    return l1 + mu * l2


def step_representation(logits, ratios) -> np.ndarray:
    """Per-step distillation target: pre-mask logits followed by the ratio."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    return np.concatenate([logits, np.asarray(ratios, dtype=np.float64).reshape(-1, 1)], axis=1)


def distill_loss(teacher_out, student_out) -> float:
    t = np.atleast_2d(np.asarray(teacher_out, dtype=np.float64))
    s = np.atleast_2d(np.asarray(student_out, dtype=np.float64))
    if t.shape != s.shape:
        raise LengthMismatchError(f"teacher {t.shape} vs student {s.shape}")
    return float(np.mean(np.sum((t - s) ** 2, axis=1)))


def total_loss(local: float, dist: float, lam: float) -> float:
    if lam < 0:
        raise NegativeLambdaError("lambda must be non-negative")
    return local + lam * dist


def save_checkpoint(m: LteModel, path) -> None:
    dc.write_checkpoint(path, m.flatten())


def load_checkpoint(m: LteModel, path) -> None:
    m.load(dc.read_checkpoint(path))


def config_json(cfg: LteConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
