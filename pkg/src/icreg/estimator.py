"""scikit-learn adapter around the registration models.

``fit`` trains a model on an image stack; ``transform`` then warps the
moving half of each supplied pair onto the fixed half.  Everything heavier
(checkpoints, metrics files, experiment drivers) lives in ``training`` and
``cli``; this class only bridges the estimator protocol.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tape as tp
from .data import PairSampler
from .lie import warp_image
from .models import build_model, build_zoo_model
from .params import ParamStore
from .tape import DiffTensor, Tape
from .training import TrainingDiverged, adam_step, loss_terms
from .validation import as_image_stack, as_pair_stack, check_positive


class InverseConsistentRegistration(BaseEstimator, TransformerMixin):
    """Trainable pairwise registration with exact inverse consistency.

    Parameters
    ----------
    model : str or dict, default="affine"
        A zoo model name (``rigid``, ``affine``, ``svf``, ``mlp``,
        ``tsc_mlp_svf``, ``nsc_affine2_svf2``) or a model descriptor dict.
    lambda_reg : float, default=5.0
        Bending-energy weight on velocity-grid steps.
    sigma : float, default=5.0
        LNCC window scale in pixels.
    lr : float, default=1e-4
        Adam learning rate.
    batch_size : int, default=8
        Pairs per training step.
    iterations : int, default=400
        Training steps to run in ``fit``.
    seed : int, default=0
        Controls initialization and pair sampling.
    """

    def __init__(self, model="affine", lambda_reg=5.0, sigma=5.0, lr=1e-4,
                 batch_size=8, iterations=400, seed=0):
        self.model = model
        self.lambda_reg = lambda_reg
        self.sigma = sigma
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.seed = seed

    def _build(self, store):
        if isinstance(self.model, dict):
            return build_model(self.model, store)
        return build_zoo_model(self.model, store, seed=self.seed)

    def fit(self, X, y=None):
        """Train on an (N,H,W) image stack; pairs are sampled uniformly."""
        images = as_image_stack(X)
        check_positive(self.lr, "lr")
        check_positive(self.sigma, "sigma")
        check_positive(self.batch_size, "batch_size")
        check_positive(self.iterations, "iterations")
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")

        store = ParamStore()
        model = self._build(store)
        sampler = PairSampler(len(images), self.seed)
        history = []
        for it in range(1, self.iterations + 1):
            ia, ib = sampler.batch(self.batch_size)
            tape = Tape()
            leaves = model.register_leaves(tape)
            loss, _, _, _ = loss_terms(
                model, leaves, DiffTensor(images[ia]), DiffTensor(images[ib]),
                self.lambda_reg, self.sigma,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at iteration {it}")
            history.append(value)
            grads = tp.backprop(loss)
            adam_step(store, {k: grads.of(v) for k, v in leaves.items()}, self.lr)
        self.store_ = store
        self.model_ = model
        self.loss_history_ = history
        self.image_shape_ = images.shape[1:]
        return self

    def register_pair(self, moving, fixed):
        """Transform mapping fixed-frame points into the moving frame."""
        check_is_fitted(self)
        a = as_image_stack(moving, "moving")
        b = as_image_stack(fixed, "fixed")
        return self.model_.forward(Tape(), a, b)[0].detach()

    def transform(self, X):
        """Warp each pair's moving image onto its fixed image; returns (M,H,W)."""
        check_is_fitted(self)
        pairs = as_pair_stack(X)
        out = np.empty(pairs[:, 0].shape)
        for i, (a, b) in enumerate(pairs):
            t = self.model_.forward(Tape(), a, b)[0].detach()
            out[i] = warp_image(a, t).value[0]
        return out

    def predict(self, X):
        """Position fields for each pair, shape (M,H,W,2) in [0,1] coordinates."""
        check_is_fitted(self)
        pairs = as_pair_stack(X)
        h, w = pairs.shape[2:]
        out = np.empty((len(pairs), h, w, 2))
        for i, (a, b) in enumerate(pairs):
            t = self.model_.forward(Tape(), a, b)[0].detach()
            out[i] = t.position_field(h, w).value[0]
        return out

    def score(self, X, y=None):
        """Mean LNCC of warped-moving against fixed over the pairs; higher is better."""
        from .losses import lncc

        check_is_fitted(self)
        pairs = as_pair_stack(X)
        vals = []
        for a, b in pairs:
            t = self.model_.forward(Tape(), a, b)[0].detach()
            warped = warp_image(a, t)
            vals.append(lncc(warped, DiffTensor(b[None]), self.sigma).item())
        return float(np.mean(vals))
