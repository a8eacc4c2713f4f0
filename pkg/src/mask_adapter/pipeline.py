"""Two-stage adapter training, ensembling, semantic inference and evaluation."""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import extractors as ex
from .adapter import adapter_backward, adapter_forward
from .losses import ce_loss, cos_consistency_loss, pair_cosines, total_loss
from .masks import downsample_masks, perturb_mask
from .matching import MATCHERS, MatchSet
from .synthworld import STRIDE, WorldConfig, scene_stream

VOID = -1
STAGES = ("warmup", "mixed")
EXTRACTORS = ("pool", "crop", "adapter")
_STAGE_CODE = {"warmup": 1, "mixed": 2}


class TrainingDiverged(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    """Hyperparameters of one training stage.

    The schedule runs ``epochs * steps_per_epoch`` optimizer steps, each on
    ``batch_scenes`` freshly generated scenes. The learning rate is multiplied
    by ``lr_decay`` at each fraction of the total steps in ``lr_milestones``.
    """

    stage: str = "warmup"
    epochs: int = 20
    steps_per_epoch: int = 10
    batch_scenes: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    lr_milestones: list = field(default_factory=lambda: [0.9, 0.95])
    lr_decay: float = 0.1
    optimizer: str = "adamw"
    iou_threshold: float = 0.7
    matcher: str = "iou"
    lambda_ce: float = 2.0
    lambda_cos: float = 5.0
    perturb_iou_targets: list = field(default_factory=lambda: [0.7, 0.8, 0.9])
    mix_ratio: float = 0.5
    logit_scale: float = ex.DEFAULT_LOGIT_SCALE
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("epochs", "steps_per_epoch", "batch_scenes"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if any(not 0.0 <= m <= 1.0 for m in self.lr_milestones):
            raise ValueError("lr_milestones are fractions of the total steps in [0, 1]")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.matcher not in MATCHERS:
            raise ValueError(f"matcher must be one of {sorted(MATCHERS)}")
        if self.lambda_ce < 0 or self.lambda_cos < 0:
            raise ValueError("loss weights must be nonnegative")
        if any(not 0.0 < t <= 1.0 for t in self.perturb_iou_targets):
            raise ValueError("perturb_iou_targets must lie in (0, 1]")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def lr_at(self, step):
        n_decays = sum(step >= m * self.total_steps for m in self.lr_milestones)
        return self.learning_rate * self.lr_decay**n_decays

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class EnsembleConfig:
    alpha: float
    beta: float
    seen_flags: np.ndarray

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        self.seen_flags = np.asarray(self.seen_flags, dtype=bool)


@dataclass
class EvalReport:
    miou: float
    miou_seen: float
    miou_unseen: float
    per_class_iou: np.ndarray  # NaN marks classes absent from the ground truth
    mask_acc: float
    mask_acc_pred: float
    n_classes_seen: int
    n_classes_unseen: int
    confusion: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        d = asdict(self)
        d["per_class_iou"] = [None if np.isnan(v) else float(v) for v in self.per_class_iou]
        d.pop("confusion")
        return d


# ----------------------------------------------------------------- helpers


def _n_workers():
    try:
        return max(1, int(os.environ.get("MASKADAPTER_THREADS", "1")))
    except ValueError:
        return 1


def perturb_scene_masks(gt_masks, targets, rng):
    """Perturb every GT mask at every target IoU.

    Masks too small to reach a target are skipped. Returns ``(pred_masks, source_index)``.
    """
    preds, source = [], []
    for i, m in enumerate(gt_masks):
        for t in targets:
            try:
                preds.append(perturb_mask(m, t, rng))
            except ValueError:
                continue
            source.append(i)
    if not preds:
        return np.zeros((0,) + gt_masks.shape[1:], dtype=bool), np.zeros(0, dtype=np.int64)
    return np.stack(preds), np.asarray(source, dtype=np.int64)


def extract_embeddings(extractor, masks, features, params=None):
    """L2-normalized embeddings of ``masks`` with one of the three extractors."""
    if extractor == "pool":
        return ex.mask_pool(downsample_masks(masks, STRIDE), features)
    if extractor == "crop":
        return ex.mask_crop_embed(masks, features, STRIDE)
    if extractor == "adapter":
        if params is None:
            raise ValueError("the adapter extractor needs trained params")
        if len(masks) == 0:
            return np.zeros((0, features.shape[0]))
        acts, _ = adapter_forward(params, masks, features)
        return ex.aggregate(acts, features)
    raise ValueError(f"unknown extractor {extractor!r}; expected one of {EXTRACTORS}")


# ----------------------------------------------------------------- training


class _Optimizer:
    """AdamW (default) or plain gradient descent, both with decoupled weight decay."""

    def __init__(self, params, config):
        self.config = config
        self.t = 0
        if config.optimizer == "adamw":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        cfg = self.config
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            if p.ndim >= 2 and cfg.weight_decay:
                p -= lr * cfg.weight_decay * p
            if cfg.optimizer == "sgd":
                p -= lr * g
                continue
            m, v = self.m[name], self.v[name]
            m *= 0.9
            m += 0.1 * g
            v *= 0.999
            v += 0.001 * g * g
            mhat = m / (1.0 - 0.9**self.t)
            vhat = v / (1.0 - 0.999**self.t)
            p -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def _step_batch(config, bank, world, step, source):
    if source is not None:
        return source(config, step)
    rng = np.random.default_rng([config.seed, _STAGE_CODE[config.stage], step])
    stream = scene_stream(bank, world, rng, categories=bank.seen_indices)
    return [next(stream) for _ in range(config.batch_scenes)], rng


def _embed_with_grad(params, masks, features):
    acts, tape = adapter_forward(params, masks, features, want_tape=True)
    raw = ex.aggregate(acts, features, normalize=False)
    unit, norms = ex.l2_normalize(raw)
    return unit, (acts, tape, norms, features)


def _backprop_embeddings(ctx, unit, grad_unit, grads):
    acts, tape, norms, features = ctx
    g_raw = ex.l2_normalize_backward(unit, norms, grad_unit)
    g_acts, _ = ex.aggregate_backward(acts, features, g_raw)
    pgrads, _ = adapter_backward(tape, g_acts)
    for k, v in pgrads.items():
        grads[k] += v


def training_step(params, config, bank, scenes, rng):
    """Loss and parameter gradients for one batch of scenes.

    Returns ``(report, grads, n_matches)``.
    """
    seen = bank.seen_indices
    remap = np.full(bank.n_categories, -1, dtype=np.int64)
    remap[seen] = np.arange(len(seen))
    protos = bank.prototypes[seen]
    mixed = config.stage == "mixed" and config.mix_ratio > 0
    matcher = MATCHERS[config.matcher]

    items = []
    for scene in scenes:
        targets = remap[scene.gt_labels]
        if np.any(targets < 0):
            raise ValueError("training scenes may only contain seen categories")
        e_gt, ctx_gt = _embed_with_grad(params, scene.gt_masks, scene.features)
        item = {"e_gt": e_gt, "ctx_gt": ctx_gt, "y": targets, "match": MatchSet.empty()}
        if mixed:
            preds, _ = perturb_scene_masks(scene.gt_masks, config.perturb_iou_targets, rng)
            if config.matcher == "iou":
                match = matcher(scene.gt_masks, preds, config.iou_threshold)
            else:
                match = matcher(scene.gt_masks, preds)
            match = match.subset(bank.seen[scene.gt_labels[match.gt]])
            if len(match):
                used, local = np.unique(match.pred, return_inverse=True)
                e_pred, ctx_pred = _embed_with_grad(params, preds[used], scene.features)
                item.update(
                    e_pred=e_pred,
                    ctx_pred=ctx_pred,
                    match=MatchSet(match.gt, local, match.iou),
                )
        items.append(item)

    # cross-entropy over GT rows and over matched predicted rows
    logits_gt = np.concatenate([config.logit_scale * it["e_gt"] @ protos.T for it in items])
    y_gt = np.concatenate([it["y"] for it in items])
    ce_gt, g_logits_gt = ce_loss(logits_gt, y_gt)
    n_matches = sum(len(it["match"]) for it in items)
    w_pred = config.mix_ratio if n_matches else 0.0
    ce = (1.0 - w_pred) * ce_gt
    g_logits_pred = None
    if n_matches:
        rows = [it["e_pred"][it["match"].pred] for it in items if len(it["match"])]
        logits_pred = config.logit_scale * np.concatenate(rows) @ protos.T
        y_pred = np.concatenate([it["y"][it["match"].gt] for it in items if len(it["match"])])
        ce_pred, g_logits_pred = ce_loss(logits_pred, y_pred)
        ce += w_pred * ce_pred

    # mask consistency, averaged over all pairs in the batch
    cos_total = 0.0
    per_pair = []
    for it in items:
        if not len(it["match"]):
            continue
        loss, g_a, g_b = cos_consistency_loss(it["e_gt"], it["e_pred"], it["match"])
        share = len(it["match"]) / n_matches
        cos_total += share * loss
        it["g_cos_gt"], it["g_cos_pred"] = share * g_a, share * g_b
        per_pair.extend(1.0 - pair_cosines(it["e_gt"], it["e_pred"], it["match"]))

    report = total_loss(ce, cos_total, config.lambda_ce, config.lambda_cos, per_pair)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    lam_ce, lam_cos = config.lambda_ce, config.lambda_cos
    off_gt = off_pred = 0
    for it in items:
        n = len(it["e_gt"])
        g_gt = (1.0 - w_pred) * lam_ce * config.logit_scale * g_logits_gt[off_gt : off_gt + n] @ protos
        off_gt += n
        if len(it["match"]):
            p = len(it["match"])
            g_rows = w_pred * lam_ce * config.logit_scale * g_logits_pred[off_pred : off_pred + p] @ protos
            off_pred += p
            g_pred = np.zeros_like(it["e_pred"])
            np.add.at(g_pred, it["match"].pred, g_rows)
            g_gt = g_gt + lam_cos * it["g_cos_gt"]
            g_pred += lam_cos * it["g_cos_pred"]
            _backprop_embeddings(it["ctx_pred"], it["e_pred"], g_pred, grads)
        _backprop_embeddings(it["ctx_gt"], it["e_gt"], g_gt, grads)
    return report, grads, n_matches


def _run_stage(config, bank, params, world=None, source=None, callback=None):
    world = world or WorldConfig()
    params = params.copy()
    opt = _Optimizer(params, config)
    log = []
    for step in range(config.total_steps):
        scenes, rng = _step_batch(config, bank, world, step, source)
        try:
            report, grads, n_matches = training_step(params, config, bank, scenes, rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(step, str(exc)) from None
        if not np.isfinite(report.total):
            raise TrainingDiverged(step, f"loss became {report.total}")
        lr = config.lr_at(step)
        if lr > 0:
            opt.step(params, grads, lr)
        for name, p in params.items():
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged(step, f"parameter {name} became non-finite")
        row = {
            "step": step,
            "lr": lr,
            "total": report.total,
            "ce": report.ce_term,
            "cos": report.cos_term,
            "n_matches": n_matches,
        }
        log.append(row)
        if callback is not None:
            callback(row)
    params.stage = config.stage
    return params, log


def train_warmup(config, bank, params, world=None, source=None, callback=None):
    """Ground-truth warmup: CE on GT masks against the seen categories only.

    Args:
        config: a ``stage="warmup"`` :class:`TrainConfig`.
        bank: category bank; training scenes draw from its seen categories.
        params: starting adapter weights (not modified).
        world: synthetic world settings for scene generation.
        source: optional ``(config, step) -> (scenes, rng)`` replacing scene generation.
        callback: optional per-step hook receiving the log row.

    Returns:
        ``(params, log)`` with one log dict per step.
    """
    if config.stage != "warmup":
        raise ValueError("train_warmup needs a warmup-stage config")
    return _run_stage(config, bank, params, world, source, callback)


def train_mixed(config, bank, params, world=None, source=None, callback=None):
    """Mixed-mask training on GT masks plus matched perturbed masks.

    Per scene the GT masks are perturbed at each target IoU, matched back to
    the GT with the configured matcher, and both sets are classified; matched
    pairs additionally pay the consistency loss. Arguments as :func:`train_warmup`.
    """
    if config.stage != "mixed":
        raise ValueError("train_mixed needs a mixed-stage config")
    return _run_stage(config, bank, params, world, source, callback)


def write_training_log(path, log):
    cols = ["step", "lr", "total", "ce", "cos", "n_matches"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in log:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


# ----------------------------------------------------------------- inference


def geometric_ensemble(y_in, y_out, cfg):
    """Per-class weighted geometric mean of two probability matrices, rows renormalized.

    Seen classes use weight ``alpha`` on ``y_out``, unseen classes ``beta``.
    """
    y_in = np.asarray(y_in, dtype=np.float64)
    y_out = np.asarray(y_out, dtype=np.float64)
    if y_in.shape != y_out.shape:
        raise ValueError("ensemble inputs must have equal shape")
    if (y_in.size and y_in.min() < 0) or (y_out.size and y_out.min() < 0):
        raise ValueError("probabilities must be nonnegative")
    if cfg.seen_flags.shape != (y_in.shape[1],):
        raise ValueError("seen_flags must have one entry per class")
    w = np.where(cfg.seen_flags, cfg.alpha, cfg.beta)
    y = y_in ** (1.0 - w) * y_out**w
    sums = y.sum(axis=1, keepdims=True)
    return np.divide(y, sums, out=y.copy(), where=sums > 0)


def semantic_inference(masks, class_scores, void=VOID):
    """Pixel label = argmax_c sum_n mask_n * score[n, c]; uncovered pixels get ``void``."""
    masks = np.asarray(masks, dtype=bool)
    scores = np.asarray(class_scores, dtype=np.float64)
    if scores.size and scores.min() < 0:
        raise ValueError("class scores must be nonnegative")
    h, w = masks.shape[1:]
    if len(masks) == 0:
        return np.full((h, w), void, dtype=np.int64)
    votes = np.einsum("nyx,nc->yxc", masks.astype(np.float64), scores)
    labels = np.argmax(votes, axis=-1).astype(np.int64)
    labels[~masks.any(axis=0)] = void
    return labels


def confusion_matrix(gt_map, pred_map, n_classes):
    """``n_classes x n_classes`` counts (rows = ground truth), void pixels excluded."""
    gt = np.asarray(gt_map).reshape(-1)
    pred = np.asarray(pred_map).reshape(-1)
    keep = (pred >= 0) & (gt >= 0)
    return np.bincount(
        gt[keep] * n_classes + pred[keep], minlength=n_classes * n_classes
    ).reshape(n_classes, n_classes)


def report_from_confusion(conf, seen_flags, mask_acc=float("nan"), mask_acc_pred=float("nan")):
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    union = gt_count + conf.sum(axis=0) - tp
    present = gt_count > 0
    per_class = np.full(len(conf), np.nan)
    per_class[present] = tp[present] / union[present]
    seen_flags = np.asarray(seen_flags, dtype=bool)

    def _mean(sel):
        return float(np.mean(per_class[sel])) if sel.any() else float("nan")

    return EvalReport(
        miou=_mean(present),
        miou_seen=_mean(present & seen_flags),
        miou_unseen=_mean(present & ~seen_flags),
        per_class_iou=per_class,
        mask_acc=mask_acc,
        mask_acc_pred=mask_acc_pred,
        n_classes_seen=int(np.sum(present & seen_flags)),
        n_classes_unseen=int(np.sum(present & ~seen_flags)),
        confusion=conf.astype(np.int64),
    )


def _evaluate_scene(idx, scene, params, bank, extractor, ensemble, cfg):
    rng = np.random.default_rng([cfg["seed"], idx])
    e_gt = extract_embeddings(extractor, scene.gt_masks, scene.features, params)
    probs_gt = ex.classify(e_gt, bank, cfg["logit_scale"])
    correct_gt = int(np.sum(np.argmax(probs_gt, 1) == scene.gt_labels))

    if cfg["segment_with"] == "gt":
        seg_masks, source = scene.gt_masks, np.arange(len(scene.gt_masks))
        probs = probs_gt
    else:
        seg_masks, source = perturb_scene_masks(scene.gt_masks, cfg["targets"], rng)
        e = extract_embeddings(extractor, seg_masks, scene.features, params)
        probs = ex.classify(e, bank, cfg["logit_scale"]) if len(seg_masks) else np.zeros((0, bank.n_categories))
    if ensemble is not None and len(seg_masks):
        if cfg["in_vocab"] == "onehot":
            y_in = np.eye(bank.n_categories)[scene.gt_labels[source]]
        else:
            y_in = ex.classify(extract_embeddings("pool", seg_masks, scene.features), bank, cfg["logit_scale"])
        probs = geometric_ensemble(y_in, probs, ensemble)
    correct_pred = int(np.sum(np.argmax(probs, 1) == scene.gt_labels[source])) if len(probs) else 0
    pred_map = semantic_inference(seg_masks, probs)
    conf = confusion_matrix(scene.label_map, pred_map, bank.n_categories)
    return conf, correct_gt, len(scene.gt_masks), correct_pred, len(seg_masks)


def evaluate(
    scenes,
    params,
    bank,
    extractor,
    ensemble=None,
    perturb_targets=(0.7, 0.8, 0.9),
    segment_with="perturbed",
    in_vocab="pool",
    logit_scale=ex.DEFAULT_LOGIT_SCALE,
    seed=0,
):
    """Classification accuracy and mIoU of one extractor over a list of scenes.

    GT masks give ``mask_acc``. Segmentation uses either the GT masks or
    perturbed copies at ``perturb_targets``; ``mask_acc_pred`` is the accuracy
    of those masks against their source labels. With ``ensemble`` the extractor
    probabilities are fused with an in-vocabulary surrogate (mask pooling, or
    the one-hot ground truth when ``in_vocab="onehot"``).
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes to evaluate")
    if extractor not in EXTRACTORS:
        raise ValueError(f"unknown extractor {extractor!r}")
    if extractor == "adapter" and params is None:
        raise ValueError("the adapter extractor needs trained params")
    if segment_with not in ("gt", "perturbed"):
        raise ValueError("segment_with must be 'gt' or 'perturbed'")
    cfg = {
        "seed": seed,
        "targets": list(perturb_targets),
        "segment_with": segment_with,
        "in_vocab": in_vocab,
        "logit_scale": logit_scale,
    }

    def job(args):
        return _evaluate_scene(args[0], args[1], params, bank, extractor, ensemble, cfg)

    workers = _n_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, enumerate(scenes)))
    else:
        results = [job(a) for a in enumerate(scenes)]

    conf = sum(r[0] for r in results)
    n_gt = sum(r[2] for r in results)
    n_pred = sum(r[4] for r in results)
    acc = sum(r[1] for r in results) / n_gt
    acc_pred = sum(r[3] for r in results) / n_pred if n_pred else float("nan")
    return report_from_confusion(conf, bank.seen, acc, acc_pred)


def embedding_consistency(scenes, params, bank, extractor="adapter", perturb_targets=(0.7, 0.8, 0.9), seed=0):
    """Mean cosine similarity between each GT-mask embedding and its perturbed copies."""
    sims = []
    for idx, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, idx])
        preds, source = perturb_scene_masks(scene.gt_masks, perturb_targets, rng)
        if not len(preds):
            continue
        e_gt = extract_embeddings(extractor, scene.gt_masks, scene.features, params)
        e_pred = extract_embeddings(extractor, preds, scene.features, params)
        sims.append(np.sum(e_gt[source] * e_pred, axis=1))
    return float(np.mean(np.concatenate(sims)))


def eval_scenes(bank, world, n_scenes, seed):
    """A fixed evaluation suite drawn from all categories."""
    rng = np.random.default_rng([seed, 99])
    stream = scene_stream(bank, world, rng)
    return [next(stream) for _ in range(n_scenes)]
