"""Synthetic multi-encoder embeddings with known ground truth.

Every encoder sees a shared latent block Z plus its own unique block U_m,
mixed into its output space by a map with orthonormal columns:
``X_m = [Z U_m] A_m^T + sigma * E``. Labels come from a logistic rule over
chosen latent coordinates, thresholded at probability 0.5.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import ConfigInvalid
from .store import BagDataset, EmbeddingMatrix, SlideBag, grid_coords


@dataclass(frozen=True)
class BagMode:
    tiles_per_bag: int
    signal_fraction: float
    n_bags: int | None = None
    margin: float = 0.0     # signal tiles score >= margin, background below -margin


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int
    shared_dim: int
    unique_dims: tuple
    output_dims: tuple
    noise_scale: float = 0.1
    shared_weights: tuple = ()          # length shared_dim (zeros allowed)
    unique_weights: tuple = ()          # one tuple per encoder, length unique_dims[m]
    bias: float = 0.0
    mixing: str = "dense"               # dense: QR of a Gaussian; sparse: signed column placement
    bag_mode: BagMode | None = None
    encoder_ids: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.bag_mode, dict):
            object.__setattr__(self, "bag_mode", BagMode(**self.bag_mode))
        m = len(self.unique_dims)
        object.__setattr__(self, "unique_dims", tuple(int(u) for u in self.unique_dims))
        object.__setattr__(self, "output_dims", tuple(int(d) for d in self.output_dims))
        if not self.encoder_ids:
            object.__setattr__(self, "encoder_ids", tuple(f"enc{i}" for i in range(m)))
        sw = tuple(self.shared_weights) or (0.0,) * self.shared_dim
        uw = tuple(tuple(w) for w in self.unique_weights) or tuple((0.0,) * u for u in self.unique_dims)
        object.__setattr__(self, "shared_weights", tuple(float(w) for w in sw))
        object.__setattr__(self, "unique_weights", tuple(tuple(float(v) for v in w) for w in uw))
        object.__setattr__(self, "encoder_ids", tuple(self.encoder_ids))
        self.validate()

    def validate(self):
        m = len(self.unique_dims)
        if m < 1 or len(self.output_dims) != m or len(self.encoder_ids) != m:
            raise ConfigInvalid("unique_dims, output_dims and encoder_ids must have one entry per encoder")
        if len(set(self.encoder_ids)) != m:
            raise ConfigInvalid("encoder ids must be unique")
        if self.n_samples < 2 or self.shared_dim < 0 or min(self.unique_dims) < 0:
            raise ConfigInvalid("n_samples must be >= 2 and latent sizes non-negative")
        for u, d in zip(self.unique_dims, self.output_dims):
            if d < self.shared_dim + u or d < 1:
                raise ConfigInvalid(f"output dim {d} is smaller than latent size {self.shared_dim + u}")
        if len(self.shared_weights) != self.shared_dim:
            raise ConfigInvalid("shared_weights must have shared_dim entries")
        if len(self.unique_weights) != m or any(len(w) != u for w, u in zip(self.unique_weights, self.unique_dims)):
            raise ConfigInvalid("unique_weights must match unique_dims")
        ws = [*self.shared_weights, *(v for w in self.unique_weights for v in w), self.bias]
        if not all(math.isfinite(v) for v in ws):
            raise ConfigInvalid("label weights must be finite")
        if self.noise_scale < 0:
            raise ConfigInvalid("noise_scale must be >= 0")
        if self.mixing not in ("dense", "sparse"):
            raise ConfigInvalid("mixing must be 'dense' or 'sparse'")
        if self.bag_mode is not None:
            b = self.bag_mode
            if b.tiles_per_bag < 1 or not 0 < b.signal_fraction <= 1:
                raise ConfigInvalid("bag_mode needs tiles_per_bag >= 1 and signal_fraction in (0, 1]")
            if not b.margin >= 0:
                raise ConfigInvalid("bag_mode margin must be >= 0")

    @property
    def n_encoders(self) -> int:
        return len(self.unique_dims)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown generator fields {sorted(unknown)}")
        for k in ("unique_dims", "output_dims", "shared_weights", "encoder_ids"):
            if k in d:
                d[k] = tuple(d[k])
        if "unique_weights" in d:
            d["unique_weights"] = tuple(tuple(w) for w in d["unique_weights"])
        return cls(**d)


@dataclass
class SynthTruth:
    shared: np.ndarray
    unique: list
    mixing: list                    # d_m x (s + u_m), orthonormal columns
    informative: dict               # encoder -> sorted output columns carrying label signal
    label_prob: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"informative": {k: [int(i) for i in v] for k, v in self.informative.items()},
                           **{k: v for k, v in self.extra.items() if isinstance(v, (int, float, str, list, dict))}},
                          indent=2, sort_keys=True)


def _mixing(rng, d, k, mode):
    if k == 0:
        return np.zeros((d, 0))
    if mode == "sparse":
        rows = rng.permutation(d)[:k]
        a = np.zeros((d, k))
        a[rows, np.arange(k)] = rng.choice([-1.0, 1.0], size=k)
        return a
    q, r = np.linalg.qr(rng.normal(size=(d, k)))
    return q * np.sign(np.diag(r))


def _label_weights(cfg, m):
    return np.concatenate([np.asarray(cfg.shared_weights), np.asarray(cfg.unique_weights[m])])


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _informative(a, w_latent, tol=1e-9):
    """Output columns whose loading on the label direction is non-negligible."""
    if not np.any(w_latent):
        return np.array([], dtype=np.intp)
    load = np.abs(a @ w_latent)
    return np.flatnonzero(load > max(tol, 0.1 * load.max()))


def _score(cfg, z, us):
    s = z @ np.asarray(cfg.shared_weights) + cfg.bias
    for u, w in zip(us, cfg.unique_weights):
        s = s + u @ np.asarray(w)
    return s


def generate(cfg: GeneratorConfig):
    """Returns ``(encoders, labels, truth)``; deterministic per ``cfg.seed``."""
    cfg.validate()
    m = cfg.n_encoders
    lat_rng, mix_rng, noise_rng = _streams(cfg.seed, 3)
    n = cfg.n_samples
    z = lat_rng.normal(size=(n, cfg.shared_dim))
    us = [lat_rng.normal(size=(n, u)) for u in cfg.unique_dims]
    mix = [_mixing(mix_rng, d, cfg.shared_dim + u, cfg.mixing) for d, u in zip(cfg.output_dims, cfg.unique_dims)]
    prob = expit(_score(cfg, z, us))
    labels = (prob >= 0.5).astype(np.int64)
    ids = [f"s{i}" for i in range(n)]
    encoders, informative = {}, {}
    for i, enc in enumerate(cfg.encoder_ids):
        lat = np.hstack([z, us[i]])
        x = lat @ mix[i].T + cfg.noise_scale * noise_rng.normal(size=(n, cfg.output_dims[i]))
        encoders[enc] = EmbeddingMatrix(enc, ids, x)
        informative[enc] = _informative(mix[i], _label_weights(cfg, i))
    return encoders, labels, SynthTruth(z, us, mix, informative, prob)


def _sample_latents(rng, cfg, n, want_positive, margin=0.0):
    """Rejection-sample latent rows whose label score has the requested sign."""
    zs, us_parts = [], [[] for _ in range(cfg.n_encoders)]
    got = 0
    for _ in range(10_000):
        if got >= n:
            break
        z = rng.normal(size=(4 * n, cfg.shared_dim))
        us = [rng.normal(size=(4 * n, u)) for u in cfg.unique_dims]
        sc = _score(cfg, z, us)
        keep = sc >= margin if want_positive else sc < -margin
        zs.append(z[keep])
        for part, u in zip(us_parts, us):
            part.append(u[keep])
        got += int(keep.sum())
    else:
        raise ConfigInvalid("label rule never produces the requested class")
    if got < n:
        raise ConfigInvalid("label rule never produces the requested class")
    z = np.vstack(zs)[:n]
    return z, [np.vstack(p)[:n] for p in us_parts]


def generate_bags(cfg: GeneratorConfig):
    """Bag dataset where positive bags hold ceil(rho * T) signal tiles.

    Signal tiles have latents on the positive side of the label rule; all
    other tiles (and every tile of a negative bag) are background drawn from
    the negative side. Returns ``(dataset, truth)`` with per-bag signal masks
    in ``truth.extra["signal"]``.
    """
    if cfg.bag_mode is None:
        raise ConfigInvalid("generate_bags needs bag_mode")
    cfg.validate()
    bm = cfg.bag_mode
    n_bags = bm.n_bags or cfg.n_samples
    t = bm.tiles_per_bag
    lab_rng, lat_rng, mix_rng, noise_rng = _streams(cfg.seed, 4)
    mix = [_mixing(mix_rng, d, cfg.shared_dim + u, cfg.mixing) for d, u in zip(cfg.output_dims, cfg.unique_dims)]
    n_pos = n_bags // 2
    bag_labels = lab_rng.permutation(np.r_[np.zeros(n_bags - n_pos, np.int64), np.ones(n_pos, np.int64)])
    n_sig = math.ceil(bm.signal_fraction * t)
    coords = grid_coords(t)
    slides, signal = [], []
    for b, lab in enumerate(bag_labels):
        mask = np.zeros(t, bool)
        if lab == 1:
            mask[lat_rng.permutation(t)[:n_sig]] = True
        z = np.zeros((t, cfg.shared_dim))
        us = [np.zeros((t, u)) for u in cfg.unique_dims]
        for want, sel in ((True, mask), (False, ~mask)):
            k = int(sel.sum())
            if k:
                zz, uu = _sample_latents(lat_rng, cfg, k, want, bm.margin)
                z[sel] = zz
                for u, part in zip(us, uu):
                    u[sel] = part
        tiles = {}
        for i, enc in enumerate(cfg.encoder_ids):
            lat = np.hstack([z, us[i]])
            tiles[enc] = lat @ mix[i].T + cfg.noise_scale * noise_rng.normal(size=(t, cfg.output_dims[i]))
        slides.append(SlideBag(f"slide{b:04d}", f"P{b:04d}", int(lab), tiles, coords))
        signal.append(mask)
    informative = {enc: _informative(mix[i], _label_weights(cfg, i)) for i, enc in enumerate(cfg.encoder_ids)}
    truth = SynthTruth(None, [], mix, informative, None, {"signal": signal})
    return BagDataset(tuple(slides)), truth


def redundancy_ladder(cfg: GeneratorConfig, duplication_factor: int, noisy_r: float | None = None):
    """Append (factor - 1) copies of every informative column.

    Copies are exact when ``noisy_r`` is None, otherwise each copy is
    ``r * z + sqrt(1 - r^2) * e`` of the standardized source column, so its
    population correlation with the source is ``r``. The truth records one
    group per source column (source first) in ``truth.extra["groups"]``.
    """
    if duplication_factor < 1 or int(duplication_factor) != duplication_factor:
        raise ConfigInvalid("duplication_factor must be a positive integer")
    if noisy_r is not None and not 0 < noisy_r < 1:
        raise ConfigInvalid("noisy_r must lie in (0, 1)")
    encoders, labels, truth = generate(cfg)
    if duplication_factor == 1:
        truth.extra["groups"] = {}
        return encoders, labels, truth
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    out, groups = {}, {}
    for enc, m in encoders.items():
        x = m.values
        cols = list(truth.informative[enc])
        extra, enc_groups = [], []
        width = x.shape[1]
        for c in cols:
            col = x[:, c]
            zc = (col - col.mean()) / (col.std() or 1.0)
            members = [int(c)]
            for _ in range(duplication_factor - 1):
                if noisy_r is None:
                    extra.append(col.copy())
                else:
                    e = rng.normal(size=len(col))
                    extra.append(noisy_r * zc + math.sqrt(1 - noisy_r ** 2) * e)
                members.append(width + len(extra) - 1)
            enc_groups.append(members)
        values = np.hstack([x, np.column_stack(extra)]) if extra else x
        out[enc] = EmbeddingMatrix(enc, m.sample_ids, values)
        groups[enc] = enc_groups
    truth.extra["groups"] = groups
    truth.extra["minimal"] = {enc: [g[0] for g in gs] for enc, gs in groups.items()}
    return out, labels, truth


# ----------------------------------------------------- logistic oracle ----
def fit_logistic(x, y, l2: float = 1.0):
    """L2-penalized logistic regression (intercept unpenalized) via L-BFGS.

    Returns ``(weights, intercept)``. Used as a fixed probe to compare feature sets.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape

    def obj(theta):
        w, b = theta[:d], theta[d]
        s = x @ w + b
        loss = np.sum(np.logaddexp(0.0, s) - y * s) / n + 0.5 * l2 * np.dot(w, w) / n
        r = (expit(s) - y) / n
        return loss, np.concatenate([x.T @ r + l2 * w / n, [r.sum()]])

    res = minimize(obj, np.zeros(d + 1), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x[:d], res.x[d]


def logistic_scores(x_train, y_train, x_test, l2: float = 1.0):
    """Fit on standardized training columns; return test decision scores."""
    mu, sd = x_train.mean(axis=0), x_train.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    w, b = fit_logistic((x_train - mu) / sd, y_train, l2)
    return ((x_test - mu) / sd) @ w + b


def complementary_config(seed: int, n_samples: int = 600, **overrides) -> GeneratorConfig:
    """Two encoders whose label signal lives in disjoint unique latents."""
    base = dict(
        n_samples=n_samples, shared_dim=8, unique_dims=(4, 4), output_dims=(48, 48),
        noise_scale=0.5, shared_weights=(0.0,) * 8,
        unique_weights=((1.5, 1.0, 0.0, 0.0), (1.5, 1.0, 0.0, 0.0)), mixing="sparse",
        encoder_ids=("encA", "encB"), seed=seed,
    )
    base.update(overrides)
    return GeneratorConfig.from_dict(base)
