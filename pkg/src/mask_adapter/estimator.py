"""scikit-learn style wrappers around the mask classifiers.

A sample is a ``(masks, features)`` pair: ``(N, H, W)`` binary masks and the
``(C, H/4, W/4)`` feature map of the same image. ``y`` holds one integer label
array per sample. Per-mask outputs of :meth:`predict`, :meth:`predict_proba`
and :meth:`transform` are concatenated over samples in input order.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import extractors as ex
from ._validation import check_feature_map, check_mask_batch
from .adapter import init_params
from .pipeline import TrainConfig, extract_embeddings, train_mixed, train_warmup
from .synthworld import STRIDE, CategoryBank, Scene


def check_samples(X, y=None, channels=None):
    """Validate a sequence of ``(masks, features)`` samples (and optional labels)."""
    samples = []
    for i, item in enumerate(X):
        try:
            masks, features = item
        except (TypeError, ValueError):
            raise ValueError(f"sample {i} must be a (masks, features) pair") from None
        masks = check_mask_batch(masks, f"sample {i} masks")
        features = check_feature_map(features, f"sample {i} features")
        if masks.shape[1:] != (STRIDE * features.shape[1], STRIDE * features.shape[2]):
            raise ValueError(f"sample {i}: masks must be {STRIDE}x the feature resolution")
        if channels is not None and features.shape[0] != channels:
            raise ValueError(f"sample {i}: expected {channels} feature channels, got {features.shape[0]}")
        samples.append((masks, features))
    if not samples:
        raise ValueError("need at least one sample")
    if y is None:
        return samples
    labels = [np.asarray(t, dtype=np.int64).reshape(-1) for t in y]
    if len(labels) != len(samples):
        raise ValueError("X and y have different numbers of samples")
    for i, ((masks, _), t) in enumerate(zip(samples, labels)):
        if len(t) != len(masks):
            raise ValueError(f"sample {i}: {len(masks)} masks but {len(t)} labels")
    return samples, labels


def _check_bank(bank):
    if not isinstance(bank, CategoryBank):
        raise ValueError("bank must be a CategoryBank")
    return bank


class _MaskClassifierBase(ClassifierMixin, BaseEstimator):
    def _embed(self, X):
        raise NotImplementedError

    def transform(self, X):
        """Concatenated L2-normalized embeddings, one row per mask."""
        check_is_fitted(self, "classes_")
        rows = self._embed(check_samples(X, channels=self.n_features_in_))
        return np.concatenate(rows) if rows else np.zeros((0, self.n_features_in_))

    def predict_proba(self, X):
        emb = self.transform(X)
        return ex.classify(emb, self.bank, self.logit_scale)

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y, sample_weight=None):
        """Mask classification accuracy over all masks of all samples."""
        _, labels = check_samples(X, y, channels=self.n_features_in_)
        truth = np.concatenate(labels)
        return float(np.average(self.predict(X) == truth, weights=sample_weight))


class MaskPoolingClassifier(TransformerMixin, _MaskClassifierBase):
    """Training-free baseline: mask pooling (``extractor="pool"``) or cropping (``"crop"``)."""

    def __init__(self, bank=None, extractor="pool", logit_scale=ex.DEFAULT_LOGIT_SCALE):
        self.bank = bank
        self.extractor = extractor
        self.logit_scale = logit_scale

    def fit(self, X, y=None):
        bank = _check_bank(self.bank)
        if self.extractor not in ("pool", "crop"):
            raise ValueError("extractor must be 'pool' or 'crop'")
        check_samples(X, channels=bank.channels)
        self.classes_ = np.arange(bank.n_categories)
        self.n_features_in_ = bank.channels
        return self

    def _embed(self, samples):
        return [extract_embeddings(self.extractor, m, f) for m, f in samples]


class MaskAdapterClassifier(TransformerMixin, _MaskClassifierBase):
    """Mask adapter trained with GT warmup followed by mixed-mask training.

    Parameters
    ----------
    bank : CategoryBank
        Category prototypes. Training classifies against the seen categories
        only; prediction uses all of them.
    n_maps : int
        Number of activation maps per mask.
    warmup_steps, mixed_steps : int
        Optimizer steps per stage. ``mixed_steps=0`` skips the mixed stage.
    batch_size : int
        Samples per step, drawn at random from the training set.
    learning_rate, weight_decay, iou_threshold, matcher, lambda_ce, lambda_cos,
    perturb_iou_targets, mix_ratio, logit_scale
        As in :class:`~mask_adapter.pipeline.TrainConfig`.
    random_state : int or None
        Seeds parameter init, batch sampling and mask perturbation.

    Attributes
    ----------
    params_ : AdapterParams
    warmup_log_, mixed_log_ : list of dict
    classes_ : ndarray of category indices
    """

    def __init__(
        self,
        bank=None,
        n_maps=16,
        warmup_steps=200,
        mixed_steps=100,
        batch_size=4,
        learning_rate=1e-3,
        weight_decay=0.05,
        iou_threshold=0.7,
        matcher="iou",
        lambda_ce=2.0,
        lambda_cos=5.0,
        perturb_iou_targets=(0.7, 0.8, 0.9),
        mix_ratio=0.5,
        logit_scale=ex.DEFAULT_LOGIT_SCALE,
        random_state=None,
    ):
        self.bank = bank
        self.n_maps = n_maps
        self.warmup_steps = warmup_steps
        self.mixed_steps = mixed_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.iou_threshold = iou_threshold
        self.matcher = matcher
        self.lambda_ce = lambda_ce
        self.lambda_cos = lambda_cos
        self.perturb_iou_targets = perturb_iou_targets
        self.mix_ratio = mix_ratio
        self.logit_scale = logit_scale
        self.random_state = random_state

    def _stage_config(self, stage, steps, seed):
        return TrainConfig(
            stage=stage,
            epochs=1,
            steps_per_epoch=steps,
            batch_scenes=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            iou_threshold=self.iou_threshold,
            matcher=self.matcher,
            lambda_ce=self.lambda_ce,
            lambda_cos=self.lambda_cos,
            perturb_iou_targets=list(self.perturb_iou_targets),
            mix_ratio=self.mix_ratio,
            logit_scale=self.logit_scale,
            seed=seed,
        )

    def fit(self, X, y):
        bank = _check_bank(self.bank)
        samples, labels = check_samples(X, y, channels=bank.channels)
        for i, t in enumerate(labels):
            if t.size and (t.min() < 0 or t.max() >= bank.n_categories):
                raise ValueError(f"sample {i}: label out of range")
            if not np.all(bank.seen[t]):
                raise ValueError(f"sample {i}: training labels must be seen categories")
        seed = 0 if self.random_state is None else int(self.random_state)
        scenes = [
            Scene(label_map=None, gt_masks=m, gt_labels=t, features=f)
            for (m, f), t in zip(samples, labels)
        ]

        def source(config, step):
            rng = np.random.default_rng([seed, 1 if config.stage == "warmup" else 2, step])
            pick = rng.choice(len(scenes), size=config.batch_scenes, replace=len(scenes) < config.batch_scenes)
            return [scenes[i] for i in pick], rng

        params = init_params(bank.channels, self.n_maps, seed)
        self.warmup_log_, self.mixed_log_ = [], []
        if self.warmup_steps > 0:
            cfg = self._stage_config("warmup", self.warmup_steps, seed)
            params, self.warmup_log_ = train_warmup(cfg, bank, params, source=source)
        if self.mixed_steps > 0:
            cfg = self._stage_config("mixed", self.mixed_steps, seed)
            params, self.mixed_log_ = train_mixed(cfg, bank, params, source=source)
        self.params_ = params
        self.classes_ = np.arange(bank.n_categories)
        self.n_features_in_ = bank.channels
        return self

    def _embed(self, samples):
        check_is_fitted(self, "params_")
        return [extract_embeddings("adapter", m, f, self.params_) for m, f in samples]

    def activation_maps(self, X):
        """Per-sample ``(N, K, h, w)`` activation stacks."""
        from .adapter import adapter_forward

        check_is_fitted(self, "params_")
        return [adapter_forward(self.params_, m, f)[0] for m, f in check_samples(X, channels=self.n_features_in_)]
