"""scikit-learn style wrapper around flow training.

``TrivializingFlow.fit`` trains by reverse KL against the Wilson action, so
it needs no data: ``X`` only fixes the lattice shape. ``transform`` maps
physical links to the latent (approximately uniform) links and
``inverse_transform`` maps back. Inputs may be ``[n, 2, Lx, Ly]`` or
flattened ``[n, 2*Lx*Ly]``; outputs keep the input's layout.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from . import flow, lattice, training


def check_configs(X, lattice_shape=None) -> tuple[np.ndarray, bool]:
    """Validate a batch of link configurations.

    Returns the batch as ``[n, 2, Lx, Ly]`` float64 and whether the caller
    passed the flattened layout.
    """
    X = np.asarray(X, dtype=np.float64)
    flat = X.ndim == 2
    if flat:
        if lattice_shape is None:
            raise ValueError("flattened input needs a known lattice_shape")
        lx, ly = lattice_shape
        if X.shape[1] != 2 * lx * ly:
            raise ValueError(f"expected {2 * lx * ly} features for a {lx}x{ly} lattice, got {X.shape[1]}")
        X = X.reshape(-1, 2, lx, ly)
    elif X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"configurations must be [n, 2, Lx, Ly] or [n, 2*Lx*Ly], got {X.shape}")
    if lattice_shape is not None and tuple(X.shape[2:]) != tuple(lattice_shape):
        raise ValueError(f"lattice {X.shape[2:]} does not match fitted {tuple(lattice_shape)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("configurations contain NaN or inf")
    return X, flat


def _restore(X: np.ndarray, flat: bool) -> np.ndarray:
    return X.reshape(X.shape[0], -1) if flat else X


class TrivializingFlow(TransformerMixin, BaseEstimator):
    """Gauge-equivariant flow trained toward ``exp(-S)/Z``.

    Parameters mirror the ``train`` subcommand. After ``fit`` the estimator
    exposes ``model_``, ``checkpoint_``, ``train_log_`` and ``lattice_shape_``.
    """

    def __init__(self, beta=2.0, lattice_shape=(8, 8), n_layers=8, hidden=(16, 16), kernel_size=3,
                 batch_size=64, n_epochs=100, learning_rate=1e-3, init_scale=0.0, random_state=0):
        self.beta = beta
        self.lattice_shape = lattice_shape
        self.n_layers = n_layers
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.init_scale = init_scale
        self.random_state = random_state

    def _seed(self) -> int:
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def fit(self, X=None, y=None):
        if X is not None:
            X, _ = check_configs(X, None if np.ndim(X) > 2 else self.lattice_shape)
            lx, ly = X.shape[2:]
        else:
            lx, ly = self.lattice_shape
        geom = lattice.LatticeGeometry(int(lx), int(ly))
        seed = self._seed()
        arch = flow.Architecture(n_layers=self.n_layers, hidden=tuple(self.hidden), kernel_size=self.kernel_size)
        model = flow.FlowModel.build(arch, seed=seed, final_scale=self.init_scale)
        cfg = training.TrainConfig(beta=self.beta, lx=geom.lx, ly=geom.ly, batch_size=self.batch_size,
                                   n_epochs=self.n_epochs, learning_rate=self.learning_rate, seed=seed)
        self.checkpoint_, self.train_log_ = training.train(cfg, model)
        self.model_ = model
        self.lattice_shape_ = (geom.lx, geom.ly)
        self.n_features_in_ = geom.n_links
        return self

    def transform(self, X):
        """Physical links to latent links, wrapped into (-pi, pi]."""
        check_is_fitted(self, "model_")
        X, flat = check_configs(X, self.lattice_shape_)
        z, _ = flow.flow_inverse(X, self.model_)
        return _restore(lattice.wrap_angle(z), flat)

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z, flat = check_configs(Z, self.lattice_shape_)
        x, _ = flow.flow_forward(Z, self.model_)
        return _restore(lattice.wrap_angle(x), flat)

    def score_samples(self, X):
        """Model log density ``log q(x)`` per configuration."""
        check_is_fitted(self, "model_")
        X, _ = check_configs(X, self.lattice_shape_)
        return np.atleast_1d(flow.model_log_q(X, self.model_))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        """Draw ``n_samples`` configurations from the model."""
        check_is_fitted(self, "model_")
        rng = np.random.default_rng(check_random_state(random_state).randint(0, 2**31 - 1))
        z = flow.sample_prior(lattice.LatticeGeometry(*self.lattice_shape_), rng, n_samples)
        x, _ = flow.flow_forward(z, self.model_)
        return lattice.wrap_angle(x)
