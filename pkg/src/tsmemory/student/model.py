"""Parametric memory module: numpy forward pass with a hand-written backward pass.

Every channel is processed as its own univariate sequence through shared
weights. The context is instance-normalized, cut into patches, encoded, read
out by H learned horizon queries and mapped to Q quantiles, and finally
mapped back through the normalization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..series import QuantileForecast, QuantileLevels, periodicity_features

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class StudentConfig:
    lookback: int = 96
    horizon: int = 24
    n_quantiles: int = 9
    patch: int = 8
    width: int = 32
    enc_layers: int = 2
    dec_layers: int = 1
    heads: int = 2
    ff_mult: int = 2
    family: str = "tiny_transformer"
    period: Optional[int] = None  # enables sin/cos features per patch when set
    norm_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("tiny_transformer", "linear_patch"):
            raise ValueError(f"unknown student family {self.family!r}")
        if not 1 <= self.patch <= self.lookback:
            raise ValueError("patch length must satisfy 1 <= p <= L")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.n_quantiles < 1 or self.horizon < 1:
            raise ValueError("Q and H must be >= 1")

    @property
    def n_patches(self) -> int:
        return -(-self.lookback // self.patch)

    @property
    def token_dim(self) -> int:
        return self.patch + (2 if self.period else 0)

    def to_dict(self) -> dict:
        return asdict(self)


class ParameterStore:
    """One flat float64 vector with named, disjoint views into it."""

    def __init__(self, specs: list[tuple[str, tuple[int, ...]]], seed: int = 0):
        self.specs = list(specs)
        self.slices: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0
        for name, shape in self.specs:
            self.slices[name] = (off, shape)
            off += int(np.prod(shape))
        self.flat = np.zeros(off)
        self.seed = seed
        self.version = 0

    @property
    def size(self) -> int:
        return self.flat.size

    def view(self, name: str, arr: Optional[np.ndarray] = None) -> np.ndarray:
        off, shape = self.slices[name]
        src = self.flat if arr is None else arr
        return src[off:off + int(np.prod(shape))].reshape(shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(name)

    def set_flat(self, flat: np.ndarray) -> None:
        if flat.shape != self.flat.shape:
            raise ValueError(f"expected {self.flat.shape[0]} parameters, got {flat.shape}")
        self.flat[:] = flat
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.specs, self.seed)
        out.flat[:] = self.flat
        return out


# layer primitives; each forward returns (out, cache) and each backward fills grads in place

def _linear(x, W, b):
    return x @ W + b


def _linear_back(x, W, dy, gW, gb):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    gW += x2.T @ d2
    gb += d2.sum(axis=0)
    return dy @ W.T


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def _ln_back(cache, g, dy, gg, gb):
    xh, rstd = cache
    gg += (dy * xh).reshape(-1, xh.shape[-1]).sum(axis=0)
    gb += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * g
    n = xh.shape[-1]
    return rstd / n * (n * dxh - dxh.sum(axis=-1, keepdims=True)
                       - xh * (dxh * xh).sum(axis=-1, keepdims=True))


def _gelu(x):
    u = GELU_C * x * (1.0 + 0.044715 * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_back(x, t, dy):
    du = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split(x, h):
    S, T, d = x.shape
    return x.reshape(S, T, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    S, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(S, T, h * dh)


def _attn(xq, xkv, p, h):
    q = _split(_linear(xq, p["Wq"], p["bq"]), h)
    k = _split(_linear(xkv, p["Wk"], p["bk"]), h)
    v = _split(_linear(xkv, p["Wv"], p["bv"]), h)
    scale = 1.0 / math.sqrt(q.shape[-1])
    s = q @ k.transpose(0, 1, 3, 2) * scale
    s = s - s.max(axis=-1, keepdims=True)
    P = np.exp(s)
    P /= P.sum(axis=-1, keepdims=True)
    o = _merge(P @ v)
    return _linear(o, p["Wo"], p["bo"]), (xq, xkv, q, k, v, P, o, scale)


def _attn_back(cache, p, g, dy, h):
    xq, xkv, q, k, v, P, o, scale = cache
    do = _split(_linear_back(o, p["Wo"], dy, g["Wo"], g["bo"]), h)
    dP = do @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ do
    ds = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dxq = _linear_back(xq, p["Wq"], _merge(dq), g["Wq"], g["bq"])
    dxkv = _linear_back(xkv, p["Wk"], _merge(dk), g["Wk"], g["bk"])
    dxkv = dxkv + _linear_back(xkv, p["Wv"], _merge(dv), g["Wv"], g["bv"])
    return dxq, dxkv


def _ffn(x, p):
    a = _linear(x, p["W1"], p["b1"])
    z, t = _gelu(a)
    return _linear(z, p["W2"], p["b2"]), (x, a, t, z)


def _ffn_back(cache, p, g, dy):
    x, a, t, z = cache
    dz = _linear_back(z, p["W2"], dy, g["W2"], g["b2"])
    return _linear_back(x, p["W1"], _gelu_back(a, t, dz), g["W1"], g["b1"])


@dataclass
class ForwardCache:
    version: int
    store_id: int
    scale: np.ndarray
    B: int
    C: int
    acts: dict = field(default_factory=dict)


class StudentModel:
    def __init__(self, config: StudentConfig, params: Optional[ParameterStore] = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self._keys: dict[str, list[str]] = {}

    # parameter groups as dicts of views, rebuilt on demand so they track params.flat
    def _block(self, prefix: str, arr=None) -> dict:
        keys = self._keys.get(prefix)
        if keys is None:
            keys = self._keys[prefix] = [n[len(prefix):] for n, _ in self.params.specs if n.startswith(prefix)]
        return {k: self.params.view(prefix + k, arr) for k in keys}

    def _tokens(self, Xn: np.ndarray, anchors) -> np.ndarray:
        cfg = self.config
        S, L = Xn.shape
        N, p = cfg.n_patches, cfg.patch
        pad = np.zeros((S, N * p))
        pad[:, :L] = Xn
        tok = pad.reshape(S, N, p)
        if cfg.period:
            if anchors is None:
                raise ValueError("periodic student needs window anchors")
            ends = np.minimum((np.arange(N) + 1) * p, L) - 1  # last row of each patch
            B = len(anchors)
            t = np.asarray(anchors)[:, None] - L + 1 + ends[None, :]  # B x N
            feats = periodicity_features(t.ravel(), cfg.period).reshape(B, 1, N, 2)
            feats = np.broadcast_to(feats, (B, S // B, N, 2)).reshape(S, N, 2)
            tok = np.concatenate([tok, feats], axis=-1)
        return tok

    def forward(self, contexts: np.ndarray, anchors=None) -> tuple[np.ndarray, ForwardCache]:
        """contexts: B x L x C (or L x C). Returns quantiles B x Q x H x C and a cache."""
        cfg = self.config
        X = np.asarray(contexts, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
            if anchors is not None and np.ndim(anchors) == 0:
                anchors = [anchors]
        if X.ndim != 3 or X.shape[1] != cfg.lookback:
            raise ValueError(f"context must be L x C with L={cfg.lookback}, got {np.shape(contexts)}")
        if not np.all(np.isfinite(X)):
            raise ValueError("context contains non-finite values")
        B, L, C = X.shape
        mu = X.mean(axis=1)
        scale = X.std(axis=1) + cfg.norm_eps
        Xn = ((X - mu[:, None]) / scale[:, None]).transpose(0, 2, 1).reshape(B * C, L)
        tok = self._tokens(Xn, anchors)
        cache = ForwardCache(self.params.version, id(self.params), scale, B, C)
        if cfg.family == "linear_patch":
            flat = tok.reshape(B * C, -1)
            out = _linear(flat, self.params["W"], self.params["b"])
            cache.acts["flat"] = flat
        else:
            out = self._transformer(tok, cache.acts)
        out = out.reshape(B, C, cfg.horizon, cfg.n_quantiles).transpose(0, 3, 2, 1)
        return out * scale[:, None, None, :] + mu[:, None, None, :], cache

    def _transformer(self, tok, acts):
        cfg, P = self.config, self.params
        h = cfg.heads
        z = _linear(tok, P["embed.W"], P["embed.b"]) + P["embed.pos"]
        acts["tok"] = tok
        for i in range(cfg.enc_layers):
            blk = self._block(f"enc{i}.")
            a, c1 = _ln(z, blk["ln1.g"], blk["ln1.b"])
            att, c2 = _attn(a, a, self._block(f"enc{i}.att."), h)
            z = z + att
            a2, c3 = _ln(z, blk["ln2.g"], blk["ln2.b"])
            f, c4 = _ffn(a2, self._block(f"enc{i}.ff."))
            z = z + f
            acts[f"enc{i}"] = (c1, c2, c3, c4)
        mem, acts["mem_ln"] = _ln(z, P["enc_ln.g"], P["enc_ln.b"])
        S = tok.shape[0]
        dq = np.broadcast_to(P["queries"], (S,) + P["queries"].shape).copy()
        for i in range(cfg.dec_layers):
            blk = self._block(f"dec{i}.")
            a, c1 = _ln(dq, blk["ln1.g"], blk["ln1.b"])
            att, c2 = _attn(a, mem, self._block(f"dec{i}.att."), h)
            dq = dq + att
            a2, c3 = _ln(dq, blk["ln2.g"], blk["ln2.b"])
            f, c4 = _ffn(a2, self._block(f"dec{i}.ff."))
            dq = dq + f
            acts[f"dec{i}"] = (c1, c2, c3, c4)
        fin, acts["out_ln"] = _ln(dq, P["out_ln.g"], P["out_ln.b"])
        acts["fin"] = fin
        return _linear(fin, P["head.W"], P["head.b"])

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
        """Parameter gradient of <upstream, forward(contexts)>; flat, aligned with params.flat."""
        if cache.store_id != id(self.params) or cache.version != self.params.version:
            raise StaleCacheError("activation cache was produced with different parameters")
        cfg = self.config
        G = np.asarray(upstream, dtype=np.float64)
        if G.ndim == 3:
            G = G[None]
        B, C = cache.B, cache.C
        if G.shape != (B, cfg.n_quantiles, cfg.horizon, C):
            raise ValueError(f"upstream gradient shape {G.shape} does not match output")
        Gn = (G * cache.scale[:, None, None, :]).transpose(0, 3, 2, 1).reshape(B * C, cfg.horizon,
                                                                               cfg.n_quantiles)
        grad = np.zeros_like(self.params.flat)
        if cfg.family == "linear_patch":
            flat = cache.acts["flat"]
            _linear_back(flat, self.params["W"], Gn.reshape(B * C, -1),
                         self.params.view("W", grad), self.params.view("b", grad))
            return grad
        self._transformer_back(cache.acts, Gn, grad)
        return grad

    def _transformer_back(self, acts, dout, grad):
        cfg, P = self.config, self.params
        h = cfg.heads
        gv = lambda name: P.view(name, grad)  # noqa: E731
        dfin = _linear_back(acts["fin"], P["head.W"], dout, gv("head.W"), gv("head.b"))
        ddq = _ln_back(acts["out_ln"], P["out_ln.g"], dfin, gv("out_ln.g"), gv("out_ln.b"))
        dmem = 0.0
        for i in reversed(range(cfg.dec_layers)):
            c1, c2, c3, c4 = acts[f"dec{i}"]
            blk, gblk = self._block(f"dec{i}."), self._block(f"dec{i}.", grad)
            da2 = _ffn_back(c4, self._block(f"dec{i}.ff."), self._block(f"dec{i}.ff.", grad), ddq)
            ddq = ddq + _ln_back(c3, blk["ln2.g"], da2, gblk["ln2.g"], gblk["ln2.b"])
            da, dm = _attn_back(c2, self._block(f"dec{i}.att."), self._block(f"dec{i}.att.", grad), ddq, h)
            dmem = dmem + dm
            ddq = ddq + _ln_back(c1, blk["ln1.g"], da, gblk["ln1.g"], gblk["ln1.b"])
        gv("queries")[...] += ddq.sum(axis=0)
        dz = _ln_back(acts["mem_ln"], P["enc_ln.g"], dmem, gv("enc_ln.g"), gv("enc_ln.b"))
        for i in reversed(range(cfg.enc_layers)):
            c1, c2, c3, c4 = acts[f"enc{i}"]
            blk, gblk = self._block(f"enc{i}."), self._block(f"enc{i}.", grad)
            da2 = _ffn_back(c4, self._block(f"enc{i}.ff."), self._block(f"enc{i}.ff.", grad), dz)
            dz = dz + _ln_back(c3, blk["ln2.g"], da2, gblk["ln2.g"], gblk["ln2.b"])
            dq_, dkv = _attn_back(c2, self._block(f"enc{i}.att."), self._block(f"enc{i}.att.", grad), dz, h)
            dz = dz + _ln_back(c1, blk["ln1.g"], dq_ + dkv, gblk["ln1.g"], gblk["ln1.b"])
        gv("embed.pos")[...] += dz.sum(axis=0)
        _linear_back(acts["tok"], P["embed.W"], dz, gv("embed.W"), gv("embed.b"))

    def predict(self, contexts, anchors=None, batch_size: int = 512) -> np.ndarray:
        X = np.asarray(contexts, dtype=np.float64)
        if X.ndim == 2:
            return self.forward(X, anchors)[0][0]
        outs = []
        for s in range(0, X.shape[0], batch_size):
            a = None if anchors is None else anchors[s:s + batch_size]
            outs.append(self.forward(X[s:s + batch_size], a)[0])
        return np.concatenate(outs, axis=0)


def _specs(cfg: StudentConfig) -> list[tuple[str, tuple[int, ...], str]]:
    N, d, Q, H = cfg.n_patches, cfg.width, cfg.n_quantiles, cfg.horizon
    if cfg.family == "linear_patch":
        return [("W", (N * cfg.token_dim, H * Q), "zero"), ("b", (H * Q,), "zero")]
    f = cfg.ff_mult * d
    out = [("embed.W", (cfg.token_dim, d), "uniform"), ("embed.b", (d,), "zero"),
           ("embed.pos", (N, d), "normal")]

    def block(pre):
        rows = [(pre + "ln1.g", (d,), "one"), (pre + "ln1.b", (d,), "zero")]
        for n in ("q", "k", "v", "o"):
            rows += [(pre + f"att.W{n}", (d, d), "uniform"), (pre + f"att.b{n}", (d,), "zero")]
        rows += [(pre + "ln2.g", (d,), "one"), (pre + "ln2.b", (d,), "zero"),
                 (pre + "ff.W1", (d, f), "uniform"), (pre + "ff.b1", (f,), "zero"),
                 (pre + "ff.W2", (f, d), "uniform"), (pre + "ff.b2", (d,), "zero")]
        return rows

    for i in range(cfg.enc_layers):
        out += block(f"enc{i}.")
    out += [("enc_ln.g", (d,), "one"), ("enc_ln.b", (d,), "zero"), ("queries", (H, d), "normal")]
    for i in range(cfg.dec_layers):
        out += block(f"dec{i}.")
    out += [("out_ln.g", (d,), "one"), ("out_ln.b", (d,), "zero"),
            ("head.W", (d, Q), "uniform"), ("head.b", (Q,), "zero")]
    return out


def init_params(cfg: StudentConfig) -> ParameterStore:
    specs = _specs(cfg)
    store = ParameterStore([(n, s) for n, s, _ in specs], cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    for name, shape, kind in specs:
        v = store.view(name)
        if kind == "uniform":
            lim = 1.0 / math.sqrt(shape[0])
            v[...] = rng.uniform(-lim, lim, size=shape)
        elif kind == "normal":
            v[...] = 0.02 * rng.standard_normal(shape)
        elif kind == "one":
            v[...] = 1.0
    return store


def student_forward(params: ParameterStore, config: StudentConfig, context: np.ndarray,
                    levels: Optional[QuantileLevels] = None, anchor=None) -> QuantileForecast:
    out = StudentModel(config, params).forward(context, anchor)[0][0]
    if levels is None:
        levels = QuantileLevels.default()
    return QuantileForecast(out, levels)


def student_backward(params: ParameterStore, config: StudentConfig, context: np.ndarray,
                     upstream: np.ndarray, anchor=None) -> np.ndarray:
    model = StudentModel(config, params)
    _, cache = model.forward(context, anchor)
    return model.backward(cache, upstream)


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(config: StudentConfig, tolerance: float, n_directions: int = 20, h: Optional[float] = None,
               seed: int = 0, backward=None, model: Optional[StudentModel] = None) -> GradCheckReport:
    """Compare directional derivatives from ``backward`` against central differences.

    ``backward(model, cache, upstream)`` defaults to the model's own pass; tests
    substitute a corrupted one to confirm the check can fail.
    """
    rng = np.random.default_rng(seed)
    if h is None:
        # the linear family is exactly linear in its parameters, so a wide step has no truncation error
        h = 1e-4 if config.family == "linear_patch" else 1e-6
    model = model or StudentModel(config)
    if config.family == "linear_patch" and not model.params.flat.any():
        # zero init makes the map trivially flat; probe a generic point instead
        model.params.set_flat(rng.standard_normal(model.params.size) * 0.1)
    B, C = 2, 2
    X = rng.standard_normal((B, config.lookback, C)).cumsum(axis=1)
    anchors = list(rng.integers(0, 1000, size=B)) if config.period else None
    out, cache = model.forward(X, anchors)
    G = rng.standard_normal(out.shape)
    bw = backward or (lambda m, c, g: m.backward(c, g))
    grad = bw(model, cache, G)
    theta = model.params.flat.copy()
    errors = []
    for _ in range(n_directions):
        v = rng.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        model.params.set_flat(theta + h * v)
        fp = np.sum(G * model.forward(X, anchors)[0])
        model.params.set_flat(theta - h * v)
        fm = np.sum(G * model.forward(X, anchors)[0])
        fd = (fp - fm) / (2 * h)
        an = float(grad @ v)
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))
    model.params.set_flat(theta)
    return GradCheckReport(max(errors), errors, tolerance)
