"""scikit-learn style wrappers.

``SiamMAE.fit`` pretrains on video clips; ``transform`` maps frames to
L2-normalised dense patch features.  ``LabelPropagator`` is fit on the
first frame's features and labels and predicts label maps for later frames.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .labelprop import FeatureMap, LabelMap, PropagationConfig, run_propagation
from .model import MaskSpec, ModelConfig, SiamMAEModel
from .train import TrainConfig, Trainer, load_checkpoint, save_checkpoint
from .validation import check_clips, check_frames


class SiamMAE(BaseEstimator, TransformerMixin):
    """Frame-pair masked autoencoder pretrained on unlabeled clips.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`.
    ``mask`` uses the shorthand of :meth:`MaskSpec.parse` (``"0.95a"``).
    """

    def __init__(self, image_size=64, patch_size=8, dim=64, depth=4, heads=4,
                 decoder_dim=64, decoder_depth=2, decoder_heads=4, mlp_ratio=4.0,
                 encoder="siamese", decoder="cross_self", mask="0.95a",
                 steps=2000, warmup_steps=None, batch_size=16, base_lr=1.5e-4,
                 weight_decay=0.05, betas=(0.9, 0.95), gap_range=(4, 48),
                 repeated_sampling=2, augment=True, color_jitter=False,
                 independent_aug=False, grad_clip=None, random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.decoder_dim = decoder_dim
        self.decoder_depth = decoder_depth
        self.decoder_heads = decoder_heads
        self.mlp_ratio = mlp_ratio
        self.encoder = encoder
        self.decoder = decoder
        self.mask = mask
        self.steps = steps
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.gap_range = gap_range
        self.repeated_sampling = repeated_sampling
        self.augment = augment
        self.color_jitter = color_jitter
        self.independent_aug = independent_aug
        self.grad_clip = grad_clip
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, patch_size=self.patch_size,
                           dim=self.dim, depth=self.depth, heads=self.heads,
                           mlp_ratio=self.mlp_ratio, decoder_dim=self.decoder_dim,
                           decoder_depth=self.decoder_depth, decoder_heads=self.decoder_heads,
                           encoder=self.encoder, decoder=self.decoder)

    def train_config(self) -> TrainConfig:
        warm = self.warmup_steps if self.warmup_steps is not None else self.steps // 20
        return TrainConfig(base_lr=self.base_lr, betas=self.betas,
                           weight_decay=self.weight_decay, total_steps=self.steps,
                           warmup_steps=warm, batch_size=self.batch_size,
                           repeated_sampling=self.repeated_sampling, seed=self.random_state,
                           gap_range=self.gap_range, augment=self.augment,
                           color_jitter=self.color_jitter,
                           independent_aug=self.independent_aug, grad_clip=self.grad_clip)

    def mask_spec(self) -> MaskSpec:
        return self.mask if isinstance(self.mask, MaskSpec) else MaskSpec.parse(self.mask)

    def _init_model(self) -> SiamMAEModel:
        seed = 0 if self.random_state is None else self.random_state
        return SiamMAEModel(self.model_config(), np.random.default_rng([seed, 0]))

    def fit(self, X, y=None, out_dir=None, callback=None):
        """Pretrain on clips (``[L, C, H, W]`` arrays or :class:`VideoClip`)."""
        clips = check_clips(X)
        self.model_ = self._init_model()
        self.trainer_ = Trainer(self.model_, clips, self.train_config(), self.mask_spec())
        result = self.trainer_.run(out_dir=out_dir, callback=callback)
        self.loss_log_ = result.loss_log
        self.n_features_out_ = self.dim
        return self

    def init_random(self):
        """Skip training: untrained weights, used as a baseline."""
        self.model_ = self._init_model()
        self.loss_log_ = []
        self.n_features_out_ = self.dim
        return self

    def transform(self, X):
        """Frames -> [n, n_patches, dim] unit-norm patch features."""
        check_is_fitted(self, "model_")
        frames = check_frames(X, self.image_size)
        out = []
        for s in range(0, len(frames), 16):
            z = self.model_.features(frames[s:s + 16]).astype(np.float64)
            out.append(z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12))
        return np.concatenate(out, axis=0)

    def feature_maps(self, frames) -> list[FeatureMap]:
        g = self.image_size // self.patch_size
        return [FeatureMap(z, (g, g), i) for i, z in enumerate(self.transform(frames))]

    def save(self, path):
        check_is_fitted(self, "model_")
        trainer = getattr(self, "trainer_", None)
        if trainer is not None and trainer.model is self.model_:
            return save_checkpoint(trainer, path)
        return save_checkpoint(self.model_, path, self.mask_spec(), self.train_config())

    @classmethod
    def load(cls, path) -> "SiamMAE":
        ckpt = load_checkpoint(path)
        m, t = ckpt.model_config(), ckpt.train_config()
        est = cls(image_size=m.image_size, patch_size=m.patch_size, dim=m.dim, depth=m.depth,
                  heads=m.heads, decoder_dim=m.decoder_dim, decoder_depth=m.decoder_depth,
                  decoder_heads=m.decoder_heads, mlp_ratio=m.mlp_ratio, encoder=m.encoder,
                  decoder=m.decoder, mask=ckpt.mask_spec(), steps=t.total_steps,
                  warmup_steps=t.warmup_steps, batch_size=t.batch_size, base_lr=t.base_lr,
                  weight_decay=t.weight_decay, betas=t.betas, gap_range=t.gap_range,
                  repeated_sampling=t.repeated_sampling, augment=t.augment,
                  color_jitter=t.color_jitter, independent_aug=t.independent_aug,
                  grad_clip=t.grad_clip, random_state=t.seed)
        est.model_ = ckpt.build_model()
        est.loss_log_ = []
        est.n_features_out_ = m.dim
        return est


class LabelPropagator(BaseEstimator):
    """k-NN label propagation with a context queue and a spatial window."""

    def __init__(self, top_k=7, queue_len=20, neighborhood=20, temperature=0.07):
        self.top_k = top_k
        self.queue_len = queue_len
        self.neighborhood = neighborhood
        self.temperature = temperature

    def config(self) -> PropagationConfig:
        return PropagationConfig(top_k=self.top_k, queue_len=self.queue_len,
                                 neighborhood=self.neighborhood, temperature=self.temperature)

    @staticmethod
    def _as_feature_map(f, grid=None) -> FeatureMap:
        if isinstance(f, FeatureMap):
            return f
        f = np.asarray(f)
        if f.ndim == 3:
            grid = f.shape[:2]
            f = f.reshape(-1, f.shape[-1])
        if grid is None:
            side = int(round(np.sqrt(len(f))))
            grid = (side, side)
        return FeatureMap.from_raw(f, grid)

    def fit(self, features, labels):
        """Reference frame: features [n, D] (or [h, w, D]) and labels [n, C]."""
        self.reference_ = self._as_feature_map(features)
        probs = labels.probs if isinstance(labels, LabelMap) else np.asarray(labels, dtype=float)
        if probs.shape[0] != self.reference_.features.shape[0]:
            raise ValueError(f"{probs.shape[0]} label rows for "
                             f"{self.reference_.features.shape[0]} feature rows")
        self.labels_ = LabelMap(probs, self.reference_.grid)
        self.n_classes_ = probs.shape[1]
        return self

    def predict_proba(self, features) -> np.ndarray:
        """Label distributions [L, n, C] for the frames that follow the reference."""
        check_is_fitted(self, "reference_")
        seq = [self._as_feature_map(f, self.reference_.grid) for f in features]
        maps = run_propagation([self.reference_] + seq, self.labels_, self.config())
        return np.stack([m.probs for m in maps[1:]])

    def predict(self, features) -> np.ndarray:
        return self.predict_proba(features).argmax(axis=-1)
