"""Minimal numpy transformer blocks with hand-written backward passes.

Everything runs in float64 on single (unbatched) sequences. The forward
functions return a cache consumed by the matching backward function; the
backward functions return gradients for every parameter they touched, which
lets the finite-difference checker sample any parameter. Low-rank adapters
(one (A, B) pair per projection role, shared across layers) are applied as
W_eff = W + A @ B.

Conventions: rows are sequence positions, y = x @ W + b, parameters live in
flat dicts keyed like "layers.0.attn.Wq" or "lora.q.A".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5

LORA_ROLES = ("q", "k", "v", "o", "ffn1", "ffn2")


@dataclass(frozen=True)
class TransformerConfig:
    hidden: int
    n_layers: int
    n_heads: int
    ffn_mult: int = 4
    causal: bool = False
    cross: bool = False  # queries attend over a separate kv sequence

    def __post_init__(self) -> None:
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")

    @property
    def ffn_dim(self) -> int:
        return self.hidden * self.ffn_mult


# --- primitives -----------------------------------------------------------------

def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def gelu(u: np.ndarray):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), (u, t)


def gelu_backward(dy: np.ndarray, cache):
    u, t = cache
    inner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * inner)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, h = x.shape
    return x.reshape(n, n_heads, h // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


# --- parameter initialisation ------------------------------------------------------

def init_transformer_params(cfg: TransformerConfig, rng: np.random.Generator,
                            std: float = 0.02) -> dict[str, np.ndarray]:
    h, f = cfg.hidden, cfg.ffn_dim
    params: dict[str, np.ndarray] = {}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params[p + f"attn.{name}"] = rng.normal(0.0, std, (h, h))
        for name in ("bq", "bk", "bv", "bo"):
            params[p + f"attn.{name}"] = np.zeros(h)
        params[p + "ln1.g"] = np.ones(h)
        params[p + "ln1.b"] = np.zeros(h)
        params[p + "ln2.g"] = np.ones(h)
        params[p + "ln2.b"] = np.zeros(h)
        params[p + "ffn.W1"] = rng.normal(0.0, std, (h, f))
        params[p + "ffn.b1"] = np.zeros(f)
        params[p + "ffn.W2"] = rng.normal(0.0, std, (f, h))
        params[p + "ffn.b2"] = np.zeros(h)
    params["ln_f.g"] = np.ones(h)
    params["ln_f.b"] = np.zeros(h)
    return params


def init_lora_params(cfg: TransformerConfig, rank: int,
                     rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One adapter per projection role, shared by every layer.

    B starts at zero so the adapted model initially equals the base model.
    """
    h, f = cfg.hidden, cfg.ffn_dim
    shapes = {"q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h),
              "ffn1": (h, f), "ffn2": (f, h)}
    params: dict[str, np.ndarray] = {}
    for role in LORA_ROLES:
        n_in, n_out = shapes[role]
        params[f"lora.{role}.A"] = rng.normal(0.0, 0.01, (n_in, rank))
        params[f"lora.{role}.B"] = np.zeros((rank, n_out))
    return params


# --- transformer stack ---------------------------------------------------------------

_ROLE_FOR = {"Wq": "q", "Wk": "k", "Wv": "v", "Wo": "o", "W1": "ffn1", "W2": "ffn2"}


def _effective(params: dict, lora: dict | None, key: str, short: str) -> np.ndarray:
    w = params[key]
    if lora is None:
        return w
    role = _ROLE_FOR[short]
    return w + lora[f"lora.{role}.A"] @ lora[f"lora.{role}.B"]


def transformer_forward(x: np.ndarray, params: dict, cfg: TransformerConfig,
                        kv: np.ndarray | None = None,
                        lora: dict | None = None):
    """Run the pre-LN stack; returns (hidden after final LN, cache).

    Self-attention when kv is None, cross-attention (x queries over kv)
    otherwise. With cfg.causal, position i attends to positions <= i.
    """
    if cfg.cross and kv is None:
        raise ValueError("cross-attention stack requires kv")
    scale = 1.0 / math.sqrt(cfg.hidden // cfg.n_heads)
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        x_in = x
        xn, ln1_cache = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        kv_src = kv if cfg.cross else xn
        Wq = _effective(params, lora, p + "attn.Wq", "Wq")
        Wk = _effective(params, lora, p + "attn.Wk", "Wk")
        Wv = _effective(params, lora, p + "attn.Wv", "Wv")
        Wo = _effective(params, lora, p + "attn.Wo", "Wo")
        q = xn @ Wq + params[p + "attn.bq"]
        k = kv_src @ Wk + params[p + "attn.bk"]
        v = kv_src @ Wv + params[p + "attn.bv"]
        qh, kh, vh = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        logits = qh @ kh.transpose(0, 2, 1) * scale
        if cfg.causal:
            nq, nk = logits.shape[1], logits.shape[2]
            mask = np.triu(np.ones((nq, nk), dtype=bool), k=1 + nk - nq)
            logits = np.where(mask, -1e30, logits)
        probs = softmax(logits)
        ctx = _merge_heads(probs @ vh)
        attn_out = ctx @ Wo + params[p + "attn.bo"]
        x = x_in + attn_out

        x_mid = x
        yn, ln2_cache = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        W1 = _effective(params, lora, p + "ffn.W1", "W1")
        W2 = _effective(params, lora, p + "ffn.W2", "W2")
        u = yn @ W1 + params[p + "ffn.b1"]
        a, gelu_cache = gelu(u)
        x = x_mid + a @ W2 + params[p + "ffn.b2"]

        layer_caches.append({
            "ln1": ln1_cache, "ln2": ln2_cache, "gelu": gelu_cache,
            "xn": xn, "kv_src": kv_src, "qh": qh, "kh": kh, "vh": vh,
            "probs": probs, "ctx": ctx, "yn": yn, "a": a,
            "Wq": Wq, "Wk": Wk, "Wv": Wv, "Wo": Wo, "W1": W1, "W2": W2,
        })
    out, lnf_cache = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    cache = {"layers": layer_caches, "ln_f": lnf_cache, "cfg": cfg,
             "scale": scale, "lora": lora, "params": params}
    return out, cache


def transformer_backward(dout: np.ndarray, cache):
    """Backprop through transformer_forward.

    Returns (dx, dkv, grads): gradient w.r.t. the query-side input, the kv
    input (None for self-attention), and every parameter including the base
    weights under the adapters.
    """
    cfg: TransformerConfig = cache["cfg"]
    params = cache["params"]
    lora = cache["lora"]
    scale = cache["scale"]
    grads: dict[str, np.ndarray] = {}

    def _add(name: str, g: np.ndarray) -> None:
        if name in grads:
            grads[name] = grads[name] + g
        else:
            grads[name] = g

    def _linear_back(x_src, w_eff, dy, wkey, short):
        dW = x_src.T @ dy
        _add(wkey, dW)
        if lora is not None:
            role = _ROLE_FOR[short]
            _add(f"lora.{role}.A", dW @ lora[f"lora.{role}.B"].T)
            _add(f"lora.{role}.B", lora[f"lora.{role}.A"].T @ dW)
        return dy @ w_eff.T

    dx, dg, db = layer_norm_backward(dout, cache["ln_f"])
    grads["ln_f.g"], grads["ln_f.b"] = dg, db
    dkv_total = None

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]

        # ffn sublayer: x = x_mid + gelu(yn @ W1 + b1) @ W2 + b2
        da = _linear_back(c["a"], c["W2"], dx, p + "ffn.W2", "W2")
        _add(p + "ffn.b2", dx.sum(axis=0))
        du = gelu_backward(da, c["gelu"])
        dyn = _linear_back(c["yn"], c["W1"], du, p + "ffn.W1", "W1")
        _add(p + "ffn.b1", du.sum(axis=0))
        dmid, dg, db = layer_norm_backward(dyn, c["ln2"])
        grads[p + "ln2.g"], grads[p + "ln2.b"] = dg, db
        dx = dx + dmid

        # attention sublayer: x = x_in + mha(xn, kv_src) @ Wo + bo
        dctx = _linear_back(c["ctx"], c["Wo"], dx, p + "attn.Wo", "Wo")
        _add(p + "attn.bo", dx.sum(axis=0))
        dctx_h = _split_heads(dctx, cfg.n_heads)
        probs, qh, kh, vh = c["probs"], c["qh"], c["kh"], c["vh"]
        dprobs = dctx_h @ vh.transpose(0, 2, 1)
        dvh = probs.transpose(0, 2, 1) @ dctx_h
        dlogits = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
        dqh = dlogits @ kh * scale
        dkh = dlogits.transpose(0, 2, 1) @ qh * scale
        dq, dk, dv = (_merge_heads(a) for a in (dqh, dkh, dvh))

        dxn = _linear_back(c["xn"], c["Wq"], dq, p + "attn.Wq", "Wq")
        _add(p + "attn.bq", dq.sum(axis=0))
        dkv_src = _linear_back(c["kv_src"], c["Wk"], dk, p + "attn.Wk", "Wk")
        _add(p + "attn.bk", dk.sum(axis=0))
        dkv_src = dkv_src + _linear_back(c["kv_src"], c["Wv"], dv, p + "attn.Wv", "Wv")
        _add(p + "attn.bv", dv.sum(axis=0))

        if cfg.cross:
            dkv_total = dkv_src if dkv_total is None else dkv_total + dkv_src
        else:
            dxn = dxn + dkv_src
        dres, dg, db = layer_norm_backward(dxn, c["ln1"])
        grads[p + "ln1.g"], grads[p + "ln1.b"] = dg, db
        dx = dx + dres

    return dx, dkv_total, grads


# --- losses -----------------------------------------------------------------------

def masked_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                         mask: np.ndarray):
    """Mean next-token cross-entropy over masked positions.

    logits: (T, V) where row t scores the token at position t; targets: (T,)
    token ids; mask: (T,) booleans selecting the positions that count.
    Returns (loss, dlogits).
    """
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross-entropy mask selects no positions")
    z = logits - logits.max(-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(len(targets))
    loss = float(-(logp[rows, targets] * mask).sum() / n)
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits *= (mask / n)[:, None]
    return loss, dlogits


# --- optimiser ----------------------------------------------------------------------

class Adam:
    """Standard Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}
        self._t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(int(np.prod(v.shape)) for v in params.values())
