"""Linear codec between flattened trajectories and a low-dimensional latent.

Row-vector convention: ``x = (X / s) @ U`` and ``X = s * (x @ V)`` with
``U`` of shape [traj_dim, latent_dim] and ``V`` of shape [latent_dim, traj_dim].
``s`` (``input_scale``) is a fixed positive constant chosen at fit time so
that latents come out with standard deviation near ``DATA_STD``; the map
stays exactly linear.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from ectraj import autograd as ag
from ectraj.optim import AdamW

DATA_STD = 0.5  # matches the 0.25 = 0.5**2 constants in c_skip / c_out


@dataclass
class LatentCodec:
    U: np.ndarray
    V: np.ndarray
    eta: float = DATA_STD
    input_scale: float = 1.0

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.shape[::-1] != self.V.shape:
            raise ValueError(f"U {self.U.shape} and V {self.V.shape} are not transposed shapes")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    @property
    def traj_dim(self) -> int:
        return self.U.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.U.shape[1]

    @classmethod
    def identity(cls, dim: int) -> "LatentCodec":
        return cls(np.eye(dim), np.eye(dim))

    def encode(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.traj_dim:
            raise ValueError(f"expected trailing dim {self.traj_dim}, got {X.shape[-1]}")
        return (X / self.input_scale) @ self.U

    def decode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.latent_dim:
            raise ValueError(f"expected trailing dim {self.latent_dim}, got {x.shape[-1]}")
        return (x @ self.V) * self.input_scale

    def round_trip(self, X) -> np.ndarray:
        return self.decode(self.encode(X))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "U": self.U,
            "V": self.V,
            "eta": np.array(self.eta),
            "input_scale": np.array(self.input_scale),
        }

    @classmethod
    def from_arrays(cls, arrs: dict[str, np.ndarray]) -> "LatentCodec":
        return cls(arrs["U"], arrs["V"], float(arrs["eta"]), float(arrs["input_scale"]))


@dataclass
class CodecFitConfig:
    latent_dim: int = 10
    epochs: int = 600
    lr: float = 1e-2
    lambda_rec: float = 1.0
    lambda_reg: float = 0.1
    lambda_var: float = 0.1
    pairwise_reg: bool = False
    batch_size: int = 0  # 0 = full batch
    seed: int = 0
    refit_decoder: bool = True


def codec_losses(X: ag.Tensor, U: ag.Tensor, V: ag.Tensor, eta: ag.Tensor, pairwise: bool = False, pair_idx=None):
    """The three codec loss terms (batch means) on normalized trajectories."""
    z = X @ U
    recon = z @ V
    l_rec = (recon - X).square().sum(axis=-1).mean()
    if pairwise:
        i, j = pair_idx
        dX, dz = X[i] - X[j], z[i] - z[j]
        l_reg = (dX.square().sum(axis=-1) - dz.square().sum(axis=-1)).square().mean()
    else:
        l_reg = (X.square().sum(axis=-1) - z.square().sum(axis=-1)).square().mean()
    zc = z - z.mean(axis=0, keepdims=True)
    std = (zc.square().mean(axis=0) + 1e-12).sqrt()
    l_var = (std - eta).square().sum()
    return l_rec, l_reg, l_var


def _pca_init(Xn: np.ndarray, latent_dim: int) -> tuple[np.ndarray, np.ndarray]:
    _, _, vt = np.linalg.svd(Xn, full_matrices=False)
    basis = vt[:latent_dim].T
    if basis.shape[1] < latent_dim:  # fewer samples than latent dims
        extra = np.eye(Xn.shape[1])[:, : latent_dim - basis.shape[1]]
        basis = np.linalg.qr(np.concatenate([basis, extra], axis=1))[0]
    return basis.copy(), basis.T.copy()


def fit_codec(futures, config: CodecFitConfig | None = None, **overrides) -> LatentCodec:
    """Fit ``U``, ``V`` and ``eta`` by AdamW on the weighted composite loss.

    ``futures`` is [n, traj_dim] in meters.  ``U``/``V`` start from a PCA
    basis. When ``refit_decoder`` is set, ``V`` finally gets the exact
    least-squares solution for the learned ``U``; the regularization and
    variance terms depend on ``U`` only, so this can only lower the total loss.
    """
    cfg = config or CodecFitConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    X = np.asarray(futures, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit_codec needs a non-empty [n, traj_dim] array")
    if not np.all(np.isfinite(X)):
        raise ag.NumericalError("codec input", stage="forward")
    if min(cfg.lambda_rec, cfg.lambda_reg, cfg.lambda_var) < 0:
        raise ValueError("loss weights must be non-negative")
    n, dim = X.shape
    ms = float((X * X).sum(axis=1).mean())
    scale = float(np.sqrt(ms / (cfg.latent_dim * DATA_STD**2))) if ms > 0 else 1.0
    Xn = X / scale

    U0, V0 = _pca_init(Xn, cfg.latent_dim)
    U, V = ag.Tensor(U0, requires_grad=True), ag.Tensor(V0, requires_grad=True)
    eta = ag.Tensor(np.array(DATA_STD), requires_grad=True)
    opt = AdamW([U, V, eta], lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(cfg.seed)

    for _ in range(cfg.epochs):
        if cfg.batch_size and cfg.batch_size < n:
            batch = Xn[rng.choice(n, cfg.batch_size, replace=False)]
        else:
            batch = Xn
        pair_idx = None
        if cfg.pairwise_reg:
            m = len(batch)
            pair_idx = (rng.integers(0, m, m), rng.integers(0, m, m))
        l_rec, l_reg, l_var = codec_losses(ag.Tensor(batch), U, V, eta, cfg.pairwise_reg, pair_idx)
        loss = cfg.lambda_rec * l_rec + cfg.lambda_reg * l_reg + cfg.lambda_var * l_var
        if not np.isfinite(loss.data):
            raise ag.NumericalError("codec loss", stage="forward")
        opt.step(ag.grad(loss, [U, V, eta]))

    Uf, Vf = U.data.copy(), V.data.copy()
    if cfg.refit_decoder:
        Vf = np.linalg.lstsq(Xn @ Uf, Xn, rcond=None)[0]
    return LatentCodec(Uf, Vf, float(eta.data), scale)


def codec_report(codec: LatentCodec, futures, max_pairs: int = 20000, seed: int = 0) -> dict:
    """Round-trip error, latent std vs eta, and distance-rank agreement."""
    X = np.asarray(futures, dtype=np.float64)
    rt = codec.round_trip(X)
    err = np.linalg.norm(rt - X, axis=-1)
    z = codec.encode(X)
    rng = np.random.default_rng(seed)
    n = len(X)
    i = rng.integers(0, n, max_pairs)
    j = rng.integers(0, n, max_pairs)
    keep = i != j
    dX = np.linalg.norm(X[i[keep]] - X[j[keep]], axis=-1)
    dz = np.linalg.norm(z[i[keep]] - z[j[keep]], axis=-1)
    rho = float(spearmanr(dX, dz).statistic) if keep.sum() > 2 else float("nan")
    std = z.std(axis=0)
    return {
        "round_trip_mean": float(err.mean()),
        "round_trip_max": float(err.max()),
        "latent_std": std.tolist(),
        "eta": codec.eta,
        "max_std_rel_dev": float(np.max(np.abs(std - codec.eta)) / abs(codec.eta)),
        "distance_spearman": rho,
    }
