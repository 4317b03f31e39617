"""Small causal transformer with hand-written exact backpropagation.

Pre-norm GPT block layout in pure numpy, double precision throughout. The
backward pass is derived analytically and verified against central finite
differences in the test suite; correctness there is what qualifies this model
as a fine-tuning substrate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .base import DifferentiableLM, ParamLayout

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def _layernorm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layernorm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_window: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


class TinyTransformer(DifferentiableLM):
    supports_batched_grad = True

    def __init__(self, config: TransformerConfig):
        self.config = config
        d, v = config.d_model, config.vocab_size
        shapes: list[tuple[str, tuple[int, ...]]] = [
            ("tok_emb", (v, d)),
            ("pos_emb", (config.context_window, d)),
        ]
        for layer in range(config.n_layers):
            shapes += [
                (f"l{layer}.ln1_g", (d,)),
                (f"l{layer}.ln1_b", (d,)),
                (f"l{layer}.w_qkv", (d, 3 * d)),
                (f"l{layer}.b_qkv", (3 * d,)),
                (f"l{layer}.w_out", (d, d)),
                (f"l{layer}.b_out", (d,)),
                (f"l{layer}.ln2_g", (d,)),
                (f"l{layer}.ln2_b", (d,)),
                (f"l{layer}.w_mlp1", (d, 4 * d)),
                (f"l{layer}.b_mlp1", (4 * d,)),
                (f"l{layer}.w_mlp2", (4 * d, d)),
                (f"l{layer}.b_mlp2", (d,)),
            ]
        shapes += [("ln_f_g", (d,)), ("ln_f_b", (d,)), ("w_head", (d, v)), ("b_head", (v,))]
        self.layout = ParamLayout(shapes)
        self.params = np.zeros(self.layout.size, dtype=np.float64)
        self._init_params()

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        for name in self.layout.names():
            view = self.param_view(name)
            if name.endswith(("ln1_g", "ln2_g")) or name == "ln_f_g":
                view[:] = 1.0
            elif name.endswith("_b") or name.startswith("b_") or ".b_" in name:
                view[:] = 0.0
            else:
                view[:] = rng.normal(0.0, 0.02, size=view.shape)

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def context_window(self) -> int:
        return self.config.context_window

    # -- forward ------------------------------------------------------------

    def _forward(self, ids: np.ndarray, want_cache: bool):
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        batch, seq = ids.shape
        if seq > cfg.context_window:
            raise ValueError(
                f"sequence length {seq} exceeds context window {cfg.context_window}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError("token id out of range")

        head_dim = cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(head_dim)
        mask = np.triu(np.full((seq, seq), -np.inf), k=1)

        x = self.param_view("tok_emb")[ids] + self.param_view("pos_emb")[:seq]
        layer_caches = []
        for layer in range(cfg.n_layers):
            p = lambda n: self.param_view(f"l{layer}.{n}")  # noqa: E731
            a_in, ln1_cache = _layernorm(x, p("ln1_g"), p("ln1_b"))
            qkv = a_in @ p("w_qkv") + p("b_qkv")
            q, k, v = np.split(qkv, 3, axis=-1)
            # (B, T, d) -> (B, H, T, dh)
            def heads(m):
                return m.reshape(batch, seq, cfg.n_heads, head_dim).transpose(0, 2, 1, 3)

            qh, kh, vh = heads(q), heads(k), heads(v)
            scores = qh @ kh.transpose(0, 1, 3, 2) * scale + mask
            scores -= scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            attn = probs @ vh  # (B, H, T, dh)
            merged = attn.transpose(0, 2, 1, 3).reshape(batch, seq, cfg.d_model)
            attn_out = merged @ p("w_out") + p("b_out")
            x_mid = x + attn_out
            m_in, ln2_cache = _layernorm(x_mid, p("ln2_g"), p("ln2_b"))
            pre_act = m_in @ p("w_mlp1") + p("b_mlp1")
            act = _gelu(pre_act)
            x = x_mid + act @ p("w_mlp2") + p("b_mlp2")
            if want_cache:
                layer_caches.append(
                    dict(
                        ln1=ln1_cache, a_in=a_in, qh=qh, kh=kh, vh=vh, probs=probs,
                        merged=merged, ln2=ln2_cache, m_in=m_in, pre_act=pre_act,
                        act=act,
                    )
                )
        final, ln_f_cache = _layernorm(x, self.param_view("ln_f_g"), self.param_view("ln_f_b"))
        logits = final @ self.param_view("w_head") + self.param_view("b_head")
        cache = None
        if want_cache:
            cache = dict(ids=ids, layers=layer_caches, ln_f=ln_f_cache, final=final,
                         squeeze=squeeze)
        return (logits[0] if squeeze else logits), cache

    def forward_logits(self, ids: np.ndarray) -> np.ndarray:
        logits, _ = self._forward(ids, want_cache=False)
        return logits

    def forward_logits_batch(self, ids_batch: np.ndarray) -> np.ndarray:
        logits, _ = self._forward(np.asarray(ids_batch), want_cache=False)
        return logits

    def forward_with_cache(self, ids: np.ndarray):
        return self._forward(ids, want_cache=True)

    # -- backward -----------------------------------------------------------

    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        cfg = self.config
        grad = np.zeros_like(self.params)
        gview = lambda n: self.layout.view(grad, n)  # noqa: E731

        if cache["squeeze"]:
            dlogits = dlogits[None, :, :]
        ids = cache["ids"]
        batch, seq = ids.shape
        head_dim = cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(head_dim)

        final = cache["final"]
        gview("w_head")[:] = np.einsum("btd,btv->dv", final, dlogits)
        gview("b_head")[:] = dlogits.sum(axis=(0, 1))
        dfinal = dlogits @ self.param_view("w_head").T
        dx, dg, db = _layernorm_backward(dfinal, self.param_view("ln_f_g"), cache["ln_f"])
        gview("ln_f_g")[:] = dg
        gview("ln_f_b")[:] = db

        for layer in reversed(range(cfg.n_layers)):
            c = cache["layers"][layer]
            p = lambda n: self.param_view(f"l{layer}.{n}")  # noqa: E731
            g = lambda n: gview(f"l{layer}.{n}")  # noqa: E731

            # MLP branch: x = x_mid + gelu(m_in @ w1 + b1) @ w2 + b2
            dact_out = dx
            g("w_mlp2")[:] = np.einsum("bth,btd->hd", c["act"], dact_out)
            g("b_mlp2")[:] = dact_out.sum(axis=(0, 1))
            dact = dact_out @ p("w_mlp2").T
            dpre = dact * _gelu_grad(c["pre_act"])
            g("w_mlp1")[:] = np.einsum("btd,bth->dh", c["m_in"], dpre)
            g("b_mlp1")[:] = dpre.sum(axis=(0, 1))
            dm_in = dpre @ p("w_mlp1").T
            dx_mid, dg2, db2 = _layernorm_backward(dm_in, p("ln2_g"), c["ln2"])
            g("ln2_g")[:] = dg2
            g("ln2_b")[:] = db2
            dx_mid = dx_mid + dx  # residual

            # Attention branch: x_mid = x + merged @ w_out + b_out
            dattn_out = dx_mid
            g("w_out")[:] = np.einsum("btd,bte->de", c["merged"], dattn_out)
            g("b_out")[:] = dattn_out.sum(axis=(0, 1))
            dmerged = dattn_out @ p("w_out").T
            dattn = dmerged.reshape(batch, seq, cfg.n_heads, head_dim).transpose(0, 2, 1, 3)
            probs, vh, qh, kh = c["probs"], c["vh"], c["qh"], c["kh"]
            dprobs = dattn @ vh.transpose(0, 1, 3, 2)
            dvh = probs.transpose(0, 1, 3, 2) @ dattn
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dqh = dscores @ kh * scale
            dkh = dscores.transpose(0, 1, 3, 2) @ qh * scale

            def unheads(m):
                return m.transpose(0, 2, 1, 3).reshape(batch, seq, cfg.d_model)

            dqkv = np.concatenate([unheads(dqh), unheads(dkh), unheads(dvh)], axis=-1)
            g("w_qkv")[:] = np.einsum("btd,bte->de", c["a_in"], dqkv)
            g("b_qkv")[:] = dqkv.sum(axis=(0, 1))
            da_in = dqkv @ p("w_qkv").T
            dx_attn, dg1, db1 = _layernorm_backward(da_in, p("ln1_g"), c["ln1"])
            g("ln1_g")[:] = dg1
            g("ln1_b")[:] = db1
            dx = dx_mid + dx_attn  # residual

        np.add.at(gview("tok_emb"), ids, dx)
        gview("pos_emb")[:seq] = dx.sum(axis=0)
        return grad

    def config_dict(self) -> dict:
        return {
            "model": "tiny_transformer",
            "vocab_size": self.config.vocab_size,
            "d_model": self.config.d_model,
            "n_layers": self.config.n_layers,
            "n_heads": self.config.n_heads,
            "context_window": self.config.context_window,
            "seed": self.config.seed,
        }

    @classmethod
    def from_config(cls, config: dict) -> "TinyTransformer":
        return cls(
            TransformerConfig(
                vocab_size=config["vocab_size"],
                d_model=config.get("d_model", 64),
                n_layers=config.get("n_layers", 2),
                n_heads=config.get("n_heads", 2),
                context_window=config.get("context_window", 256),
                seed=config.get("seed", 0),
            )
        )
