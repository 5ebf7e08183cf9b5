"""scikit-learn style wrappers around the codec, the band filter and the model.

These make the pipeline composable with ``Pipeline``, ``clone`` and
``get_params``/``set_params``; the functional modules do the actual work.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .data import decode, encode
from .diffusion import SamplerConfig, make_schedule
from .exceptions import ShapeError
from .filters import band_consistency, ffm, make_mask, parse_band
from .training import TrainConfig, pretrain, train_branch, translate

__all__ = [
    "check_images",
    "check_latents",
    "check_tokens",
    "LatentCodec",
    "FrequencyFilter",
    "FrequencyControlledDiffusion",
]


def check_images(X):
    """Validate a batch of RGB images and return it as ``(n, H, W, 3)`` uint8."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    X = check_array(X.reshape(len(X), -1), dtype=None, ensure_all_finite=True).reshape(X.shape)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected (n, H, W, 3) images, got {X.shape}")
    if X.min() < 0 or X.max() > 255:
        raise ValueError("image values must lie in [0, 255]")
    return np.rint(X).astype(np.uint8) if X.dtype != np.uint8 else X


def check_latents(X):
    """Validate a batch of latents and return it as ``(n, h, w, c)`` float."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError(f"expected (n, h, w, c) latents, got {X.shape}")
    dtype = np.float64 if X.dtype == np.float64 else np.float32
    flat = check_array(X.reshape(len(X), -1), dtype=dtype, ensure_all_finite=True)
    return flat.reshape(X.shape)


def check_tokens(y, n, vocab=None):
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    if np.any(y < 0) or (vocab is not None and np.any(y >= vocab)):
        raise ValueError(f"tokens must lie in 0..{'' if vocab is None else vocab - 1}")
    return y


class LatentCodec(TransformerMixin, BaseEstimator):
    """Images to latents (space-to-depth) and back; stateless."""

    def fit(self, X, y=None):
        X = check_images(X)
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "image_shape_")
        return encode(check_images(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "image_shape_")
        return decode(check_latents(Z))


class FrequencyFilter(TransformerMixin, BaseEstimator):
    """Band-limit latents in the DCT domain.

    :param band: ``mini``, ``low``, ``mid``, ``high``, ``full`` or ``custom:LO:HI``
    :param shuffle_seed: equifrequency-shuffle the kept band with this seed
    :param shared_channels: use one shuffle permutation for all channels
    """

    def __init__(self, band="low", shuffle_seed=None, shared_channels=False):
        self.band = band
        self.shuffle_seed = shuffle_seed
        self.shared_channels = shared_channels

    def fit(self, X, y=None):
        X = check_latents(X)
        self.mask_ = make_mask(parse_band(self.band), X.shape[1], X.shape[2])
        self.n_channels_ = X.shape[3]
        return self

    def transform(self, X):
        check_is_fitted(self, "mask_")
        X = check_latents(X)
        if X.shape[1:3] != self.mask_.bits.shape or X.shape[3] != self.n_channels_:
            raise ShapeError(f"latents {X.shape[1:]} differ from fitted shape")
        return ffm(X, self.mask_, self.shuffle_seed, self.shared_channels)


class FrequencyControlledDiffusion(BaseEstimator):
    """Base denoiser plus frequency-control branches, trained on images and tokens.

    ``fit`` pretrains the base on all images, then trains each entry of
    ``branches`` separately on top of the frozen base. ``translate`` maps
    source images toward target tokens under one branch.
    """

    def __init__(self, branches=("low", "mini"), pretrain_steps=2000, branch_steps=2000,
                 batch_size=8, learning_rate=1e-3, n_timesteps=1000, beta_min=1e-4,
                 beta_max=0.02, sampling_steps=50, clip_denoised=True, vocab=None,
                 random_state=0):
        self.branches = branches
        self.pretrain_steps = pretrain_steps
        self.branch_steps = branch_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_timesteps = n_timesteps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.sampling_steps = sampling_steps
        self.clip_denoised = clip_denoised
        self.vocab = vocab
        self.random_state = random_state

    def _train_config(self, stage, steps):
        return TrainConfig(
            stage=stage, steps=steps, batch_size=self.batch_size, lr=self.learning_rate,
            seed=self.random_state, model_seed=self.random_state, T=self.n_timesteps,
            beta_min=self.beta_min, beta_max=self.beta_max,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = check_tokens(y, len(X), self.vocab)
        latents = encode(X)
        vocab = self.vocab if self.vocab is not None else int(y.max()) + 1
        params, report = pretrain(self._train_config("pretrain", self.pretrain_steps),
                                  (latents, y), vocab=vocab)
        self.reports_ = {"pretrain": report}
        for kind in self.branches:
            params, report = train_branch(self._train_config(kind, self.branch_steps), params, (latents, y))
            self.reports_[kind] = report
        self.params_ = params
        return self

    @property
    def sampler_(self):
        return SamplerConfig(num_steps=self.sampling_steps, clip_denoised=self.clip_denoised)

    @property
    def schedule_(self):
        return make_schedule(self.n_timesteps, self.beta_min, self.beta_max)

    def translate(self, X, y, branch="low", shuffle=False, seed=0):
        """Translate images ``X`` toward tokens ``y``; ``branch=None`` samples without control."""
        check_is_fitted(self, "params_")
        X = check_images(X)
        y = check_tokens(y, len(X), self.params_.vocab)
        return translate(self.params_, X, y, branch, self.sampler_, self.schedule_, seed, shuffle=shuffle)

    def sample(self, y, shape=(32, 32), seed=0):
        """Uncontrolled samples for tokens ``y``."""
        y = np.atleast_1d(y)
        blank = np.zeros((len(y),) + tuple(shape) + (3,), np.uint8)
        return self.translate(blank, y, branch=None, seed=seed)

    def score(self, X, y, branch="low"):
        """Mean band consistency between sources and their same-token translations."""
        X = check_images(X)
        out = self.translate(X, y, branch=branch, seed=list(range(len(X))))
        zs, zo = encode(X), encode(out)
        mask = make_mask(parse_band(branch), zs.shape[1], zs.shape[2])
        return float(np.mean(band_consistency(zs, zo, mask)))
