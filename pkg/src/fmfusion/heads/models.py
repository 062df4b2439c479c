"""Gated-attention MIL aggregator and six-layer slide MLP."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatch
from . import nn


class Model:
    """Parameters live in an ordered dict of float64 arrays."""

    kind = "base"

    def __init__(self, params: dict, arch: dict):
        self.params = params
        self.arch = arch

    @property
    def input_dim(self) -> int:
        return self.arch["input_dim"]

    @property
    def dropout(self) -> float:
        return self.arch["dropout"]

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.params.items()}, dict(self.arch))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def decay_term(self, weight_decay: float) -> float:
        return 0.5 * weight_decay * sum(float(np.sum(v * v)) for v in self.params.values())


class GatedAttentionMIL(Model):
    kind = "gated_attention_mil"

    @classmethod
    def init(cls, input_dim, rng, hidden=512, attn_dim=256, n_classes=2, dropout=0.5):
        shapes = [("W0", input_dim, hidden), ("V", hidden, attn_dim), ("U", hidden, attn_dim),
                  ("w", attn_dim, 1), ("Wc", hidden, n_classes)]
        params = {}
        for name, fi, fo in shapes:
            params[name] = nn.glorot(rng, fi, fo)
            params["b" + name] = np.zeros(fo)
        arch = dict(input_dim=int(input_dim), hidden=hidden, attn_dim=attn_dim,
                    n_classes=n_classes, dropout=float(dropout))
        return cls(params, arch)

    def _check(self, bag):
        bag = np.asarray(bag, dtype=np.float64)
        if bag.ndim != 2 or bag.shape[1] != self.input_dim or bag.shape[0] < 1:
            raise DimensionMismatch(f"bag shape {bag.shape}, model expects (T, {self.input_dim})")
        return bag

    def forward(self, bag, train_mode=False, rng=None):
        """Returns (logits, attention, cache)."""
        p = self.params
        x = self._check(bag)
        pre0 = nn.affine_forward(x, p["W0"], p["bW0"])
        h = nn.relu(pre0)
        mask = nn.dropout_mask(rng, h.shape, self.dropout) if train_mode else None
        if mask is not None:
            h = h * mask
        a_t = np.tanh(nn.affine_forward(h, p["V"], p["bV"]))
        g = nn.sigmoid(nn.affine_forward(h, p["U"], p["bU"]))
        s = nn.affine_forward(a_t * g, p["w"], p["bw"])[:, 0]
        attn = nn.softmax(s)
        z = attn @ h
        logits = nn.affine_forward(z, p["Wc"], p["bWc"])
        cache = dict(x=x, pre0=pre0, h=h, mask=mask, a_t=a_t, g=g, attn=attn, z=z)
        return logits, attn, cache

    def backward(self, dlogits, cache):
        p = self.params
        x, pre0, h, mask = cache["x"], cache["pre0"], cache["h"], cache["mask"]
        a_t, g, attn, z = cache["a_t"], cache["g"], cache["attn"], cache["z"]
        grads = {}
        dz, grads["Wc"], grads["bWc"] = nn.affine_backward(dlogits, z, p["Wc"])
        dh = np.outer(attn, dz)
        dattn = h @ dz
        ds = attn * (dattn - attn @ dattn)
        gated = a_t * g
        dgated, grads["w"], grads["bw"] = nn.affine_backward(ds[:, None], gated, p["w"])
        dpre_v = dgated * g * (1.0 - a_t ** 2)
        dpre_u = dgated * a_t * g * (1.0 - g)
        dh_v, grads["V"], grads["bV"] = nn.affine_backward(dpre_v, h, p["V"])
        dh_u, grads["U"], grads["bU"] = nn.affine_backward(dpre_u, h, p["U"])
        dh += dh_v + dh_u
        if mask is not None:
            dh = dh * mask
        dpre0 = nn.relu_backward(dh, pre0)
        _, grads["W0"], grads["bW0"] = nn.affine_backward(dpre0, x, p["W0"])
        return grads


class SlideMLP(Model):
    kind = "slide_mlp"
    WIDTHS = (512, 256, 128, 64, 32)

    @classmethod
    def init(cls, input_dim, rng, widths=WIDTHS, n_classes=2, dropout=0.5):
        dims = [int(input_dim), *widths, n_classes]
        params = {}
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            params[f"W{i}"] = nn.glorot(rng, fi, fo)
            params[f"b{i}"] = np.zeros(fo)
        arch = dict(input_dim=int(input_dim), widths=list(widths), n_classes=n_classes, dropout=float(dropout))
        return cls(params, arch)

    @property
    def n_layers(self) -> int:
        return len(self.arch["widths"]) + 1

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 2 and v.shape[0] == 1:
            v = v[0]
        if v.ndim != 1 or v.shape[0] != self.input_dim:
            raise DimensionMismatch(f"input shape {v.shape}, model expects ({self.input_dim},)")
        return v

    def forward(self, v, train_mode=False, rng=None):
        """Returns (logits, None, cache)."""
        h = self._check(v)
        layers = []
        for i in range(self.n_layers):
            pre = nn.affine_forward(h, self.params[f"W{i}"], self.params[f"b{i}"])
            if i == self.n_layers - 1:
                layers.append((h, None, None))
                return pre, None, layers
            act = nn.relu(pre)
            mask = nn.dropout_mask(rng, act.shape, self.dropout) if train_mode else None
            layers.append((h, pre, mask))
            h = act * mask if mask is not None else act

    def backward(self, dlogits, cache):
        grads = {}
        dy = dlogits
        for i in reversed(range(self.n_layers)):
            h_in, _, _ = cache[i]
            dh, grads[f"W{i}"], grads[f"b{i}"] = nn.affine_backward(dy, h_in, self.params[f"W{i}"])
            if i > 0:
                _, pre, mask = cache[i - 1]
                if mask is not None:
                    dh = dh * mask
                dy = nn.relu_backward(dh, pre)
        return grads


MODEL_TYPES = {GatedAttentionMIL.kind: GatedAttentionMIL, SlideMLP.kind: SlideMLP}


def loss_and_grads(model: Model, x, label: int, weight_decay: float = 0.0, train_mode=False, rng=None):
    """Cross-entropy plus (weight_decay / 2) * ||params||^2 and its exact gradient."""
    logits, _, cache = model.forward(x, train_mode=train_mode, rng=rng)
    loss, dlogits = nn.cross_entropy(logits, int(label))
    grads = model.backward(dlogits, cache)
    if weight_decay:
        loss += model.decay_term(weight_decay)
        for k, v in model.params.items():
            grads[k] = grads[k] + weight_decay * v
    return float(loss), grads


def mil_forward(model: GatedAttentionMIL, bag, train_mode=False, rng=None):
    logits, attn, _ = model.forward(bag, train_mode=train_mode, rng=rng)
    return logits, attn


def mil_backward(model: GatedAttentionMIL, bag, label, weight_decay=0.0, train_mode=False, rng=None):
    return loss_and_grads(model, bag, label, weight_decay, train_mode, rng)[1]


def mlp_forward(model: SlideMLP, v, train_mode=False, rng=None):
    return model.forward(v, train_mode=train_mode, rng=rng)[0]


def mlp_backward(model: SlideMLP, v, label, weight_decay=0.0, train_mode=False, rng=None):
    return loss_and_grads(model, v, label, weight_decay, train_mode, rng)[1]
