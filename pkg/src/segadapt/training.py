"""Alternating min-max trainer for the adaptation framework.

Each iteration draws one source sample, one labeled-target sample, and one
unlabeled-target image, runs a generator step (segmentation plus adversarial
terms, SGD with Nesterov momentum) and then a discriminator step (domain
classification terms, Adam), both on polynomially decayed learning rates.

Training modes:

* ``source_only``   - supervised on source images only (lower baseline)
* ``target_only``   - supervised on the labeled target budget only (the
                      supervised reference; no source data, no adversaries)
* ``global``        - source_only + labeled-target supervision + global
                      score-map alignment
* ``semantic_fc``   - global + class-vector alignment (FC discriminator)
* ``semantic_conv`` - global + per-pixel class alignment (1x1 convolutions)

Determinism: sample order is a pure function of (seed, stream, iteration),
so a checkpoint written at an evaluation boundary resumes bit-identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, add, backward, no_grad, scale, zero_grads
from .data import DatasetBundle, Sample, downsample_labels
from .losses import (
    SOURCE_DOMAIN,
    TARGET_DOMAIN,
    class_average,
    global_adversarial_loss,
    global_discriminator_loss,
    segmentation_loss,
    semantic_adversarial_conv,
    semantic_adversarial_fc,
    semantic_discriminator_conv,
    semantic_discriminator_fc,
)
from .metrics import ConfusionMatrix, IoUReport, mean_iou
from .networks import (
    CheckpointError,
    ClassifierHead,
    FeatureGenerator,
    GlobalDiscriminator,
    ModelConfig,
    SemanticDiscriminatorConv,
    SemanticDiscriminatorFC,
    load_checkpoint,
    predict,
    save_checkpoint,
)

MODES = ("source_only", "target_only", "global", "semantic_fc", "semantic_conv")
ADAPT_MODES = ("global", "semantic_fc", "semantic_conv")
SEMANTIC_MODES = ("semantic_fc", "semantic_conv")

# Defaults for the semantic adversarial weight, per discriminator variant.
SEMANTIC_ADV_DEFAULTS = {"semantic_fc": 1.0, "semantic_conv": 0.01}


class TrainingDiverged(RuntimeError):
    """Raised when a loss term stops being finite."""


class IsolationError(AssertionError):
    """Raised when a parameter changed outside the step that owns it."""


def poly_lr(base_lr: float, iteration: int, max_iterations: int, power: float = 0.9) -> float:
    """base_lr * (1 - i/max)^power, the polynomial decay schedule."""
    if max_iterations <= 0:
        raise ValueError(f"max_iterations must be positive, got {max_iterations}")
    if not 0 <= iteration <= max_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {max_iterations}]")
    return float(base_lr) * (1.0 - iteration / max_iterations) ** power


class NesterovSGD:
    """SGD with Nesterov momentum and decoupled weight shrinkage.

    Per parameter p with gradient g and velocity v:
        v <- mu * v + g
        p <- p * (1 - lr * wd) - lr * (g + mu * v)
    The shrinkage multiplies the weight directly instead of being added to
    the gradient, so it is exact even when every loss weight is zero.
    """

    def __init__(self, params: Dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        mu = self.momentum
        decay = 1.0 - lr * self.weight_decay
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v *= mu
            v += g
            p.data = p.data * decay - lr * (g + mu * v)

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        return {f"{prefix}{name}": v for name, v in self.velocity.items()}

    def load_state(self, arrays: Dict[str, np.ndarray], prefix: str) -> None:
        for name, v in self.velocity.items():
            key = f"{prefix}{name}"
            if key not in arrays or arrays[key].shape != v.shape:
                raise CheckpointError(f"optimizer state {key!r} missing or mis-shaped")
            self.velocity[name] = arrays[key].astype(v.dtype)


class Adam:
    """Bias-corrected Adam.

    Per parameter: m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2, then
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
    """

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = dict(params)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"{prefix}m/{name}"] = self.m[name]
            out[f"{prefix}v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays: Dict[str, np.ndarray], prefix: str, step_count: int) -> None:
        for name in self.params:
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}{kind}/{name}"
                if key not in arrays or arrays[key].shape != store[name].shape:
                    raise CheckpointError(f"optimizer state {key!r} missing or mis-shaped")
                store[name] = arrays[key].astype(store[name].dtype)
        self.step_count = int(step_count)


@dataclass
class TrainConfig:
    """Everything the optimization loop needs besides the data itself."""

    mode: str = "global"
    max_iterations: int = 3000
    seed: int = 0
    eval_every: Optional[int] = None  # None -> max_iterations // 20
    lambda_seg: float = 1.0
    lambda_global_adv: float = 0.001
    lambda_semantic_adv: Optional[float] = None  # None -> per-mode default
    lambda_global_disc: float = 1.0
    lambda_semantic_disc: float = 1.0
    generator_lr: float = 0.005
    generator_momentum: float = 0.9
    generator_weight_decay: float = 5e-4
    discriminator_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    lr_power: float = 0.9
    normalize_losses: bool = True
    dtype: str = "float32"
    check_isolation: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.eval_every is not None and self.eval_every <= 0:
            raise ValueError("eval_every must be positive when given")
        for name in (
            "lambda_seg",
            "lambda_global_adv",
            "lambda_global_disc",
            "lambda_semantic_disc",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lambda_semantic_adv is not None and self.lambda_semantic_adv < 0:
            raise ValueError("lambda_semantic_adv must be nonnegative")
        if np.dtype(self.dtype).kind != "f":
            raise ValueError(f"dtype must be a float type, got {self.dtype!r}")

    @property
    def semantic_adv_weight(self) -> float:
        if self.lambda_semantic_adv is not None:
            return self.lambda_semantic_adv
        return SEMANTIC_ADV_DEFAULTS.get(self.mode, 0.0)

    @property
    def eval_interval(self) -> int:
        return self.eval_every if self.eval_every is not None else max(1, self.max_iterations // 20)


@dataclass
class ModelSet:
    generator: FeatureGenerator
    head: ClassifierHead
    global_disc: Optional[GlobalDiscriminator] = None
    semantic_disc: Optional[object] = None  # FC or conv variant

    def generator_parameters(self) -> Dict[str, Tensor]:
        params = {f"generator/{k}": v for k, v in self.generator.parameters().items()}
        params.update({f"head/{k}": v for k, v in self.head.parameters().items()})
        return params

    def discriminator_parameters(self) -> Dict[str, Tensor]:
        params = {}
        if self.global_disc is not None:
            params.update({f"global_disc/{k}": v for k, v in self.global_disc.parameters().items()})
        if self.semantic_disc is not None:
            params.update({f"semantic_disc/{k}": v for k, v in self.semantic_disc.parameters().items()})
        return params

    def all_parameters(self) -> Dict[str, Tensor]:
        params = self.generator_parameters()
        params.update(self.discriminator_parameters())
        return params


def build_models(mode: str, num_classes: int, model_config: ModelConfig, seed: int, dtype) -> ModelSet:
    generator = FeatureGenerator(model_config, seed=[seed, 0], dtype=dtype)
    head = ClassifierHead(num_classes, model_config, seed=[seed, 1], dtype=dtype)
    global_disc = None
    semantic_disc = None
    if mode in ADAPT_MODES:
        global_disc = GlobalDiscriminator(num_classes, model_config, seed=[seed, 2], dtype=dtype)
    if mode == "semantic_fc":
        semantic_disc = SemanticDiscriminatorFC(num_classes, model_config, seed=[seed, 3], dtype=dtype)
    elif mode == "semantic_conv":
        semantic_disc = SemanticDiscriminatorConv(num_classes, model_config, seed=[seed, 3], dtype=dtype)
    return ModelSet(generator=generator, head=head, global_disc=global_disc, semantic_disc=semantic_disc)


def config_digest(config: TrainConfig, model_config: ModelConfig, num_classes: int, resolution) -> str:
    payload = {
        "train": asdict(config),
        "model": asdict(model_config),
        "num_classes": int(num_classes),
        "resolution": [int(v) for v in resolution],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _params_digest(params: Dict[str, Tensor]) -> bytes:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.digest()


@dataclass
class _Batch:
    source: Optional[Sample] = None
    labeled: Optional[Sample] = None
    target_image: Optional[np.ndarray] = None  # image stream for D_g; labels never touched


class TrainState:
    """Mutable loop state: models, optimizers, cursors, and best-so-far."""

    def __init__(self, config: TrainConfig, model_config: ModelConfig, bundle: DatasetBundle):
        self.config = config
        self.model_config = model_config
        self.bundle = bundle
        self.dtype = np.dtype(config.dtype)
        self.models = build_models(config.mode, bundle.num_classes, model_config, config.seed, self.dtype)
        gen_params = self.models.generator_parameters()
        self.gen_opt = NesterovSGD(
            gen_params,
            momentum=config.generator_momentum,
            weight_decay=config.generator_weight_decay,
        )
        disc_params = self.models.discriminator_parameters()
        self.disc_opt = (
            Adam(disc_params, beta1=config.adam_beta1, beta2=config.adam_beta2) if disc_params else None
        )
        self.iteration = 0
        self.best_miou: Optional[float] = None
        self.best_iteration: Optional[int] = None
        self._perms: Dict[int, Tuple[int, np.ndarray]] = {}
        # D_g's target stream prefers unlabeled images; with a full labeled
        # budget the unlabeled pool is empty and labeled images stand in
        # (their labels still are not consumed by the global term).
        self._target_stream = bundle.target_unlabeled if bundle.target_unlabeled else bundle.target_labeled

    def _pick(self, stream: int, pool_size: int) -> int:
        """Round-robin with a per-epoch reshuffle; pure function of (seed, stream, epoch)."""
        epoch, pos = divmod(self.iteration, pool_size)
        cached = self._perms.get(stream)
        if cached is None or cached[0] != epoch:
            perm = np.random.default_rng([self.config.seed, 101 + stream, epoch]).permutation(pool_size)
            self._perms[stream] = (epoch, perm)
        return int(self._perms[stream][1][pos])

    def draw_batch(self) -> _Batch:
        cfg = self.config
        batch = _Batch()
        if cfg.mode != "target_only" and self.bundle.source_train:
            batch.source = self.bundle.source_train[self._pick(0, len(self.bundle.source_train))]
        if cfg.mode != "source_only" and self.bundle.target_labeled:
            batch.labeled = self.bundle.target_labeled[self._pick(1, len(self.bundle.target_labeled))]
        if cfg.mode in ADAPT_MODES and self._target_stream:
            sample = self._target_stream[self._pick(2, len(self._target_stream))]
            batch.target_image = sample.image
        return batch


def _weighted(total, term, weight: float):
    weighted = scale(term, weight)
    return weighted if total is None else add(total, weighted)


def generator_step(state: TrainState, batch: _Batch, lr: float):
    """One update of the generator/head stack; returns (terms, artifacts).

    ``artifacts`` carries detached score/feature maps of this batch so the
    discriminator step can reuse them without a second generator forward.
    """
    cfg = state.config
    models = state.models
    h, w = state.bundle.resolution
    norm = cfg.normalize_losses
    zero_grads(state.gen_opt.params.values())

    terms: Dict[str, float] = {}
    artifacts: Dict[str, np.ndarray] = {}
    total = None

    source_scores = None
    source_features = None
    if batch.source is not None and cfg.mode != "target_only":
        source_features = models.generator.forward(batch.source.image)
        source_scores = models.head.score_map(source_features, (h, w))
        seg_s = segmentation_loss(source_scores, batch.source.label, normalize=norm)
        total = _weighted(total, seg_s, cfg.lambda_seg)
        terms["seg_source"] = seg_s.item()

    if batch.labeled is not None and cfg.mode != "source_only":
        labeled_features = models.generator.forward(batch.labeled.image)
        labeled_scores = models.head.score_map(labeled_features, (h, w))
        seg_t = segmentation_loss(labeled_scores, batch.labeled.label, normalize=norm)
        total = _weighted(total, seg_t, cfg.lambda_seg)
        terms["seg_target"] = seg_t.item()
        if cfg.mode in SEMANTIC_MODES:
            fh, fw = labeled_features.shape[1], labeled_features.shape[2]
            artifacts["features_labeled"] = labeled_features.data
            artifacts["labels_labeled"] = downsample_labels(batch.labeled.label, fh, fw)

    if cfg.mode in ADAPT_MODES:
        if source_scores is None:
            raise RuntimeError(f"mode {cfg.mode!r} needs a source sample every iteration")
        adv_g = global_adversarial_loss(models.global_disc, source_scores, normalize=norm)
        total = _weighted(total, adv_g, cfg.lambda_global_adv)
        terms["adv_global"] = adv_g.item()
        if cfg.mode in SEMANTIC_MODES:
            fh, fw = source_features.shape[1], source_features.shape[2]
            labels_small = downsample_labels(batch.source.label, fh, fw)
            if cfg.mode == "semantic_fc":
                vset = class_average(source_features, labels_small, models.head.num_classes)
                adv_s = semantic_adversarial_fc(models.semantic_disc, vset, normalize=norm)
            else:
                adv_s = semantic_adversarial_conv(
                    models.semantic_disc, source_features, labels_small, normalize=norm
                )
            total = _weighted(total, adv_s, cfg.semantic_adv_weight)
            terms["adv_semantic"] = adv_s.item()
            artifacts["features_source"] = source_features.data
            artifacts["labels_source"] = labels_small

    if total is None:
        raise RuntimeError(f"mode {cfg.mode!r} produced no generator loss terms")
    backward(total)
    state.gen_opt.step(lr)

    if source_scores is not None:
        artifacts["scores_source"] = source_scores.data
    return terms, artifacts


def discriminator_step(state: TrainState, batch: _Batch, artifacts: Dict[str, np.ndarray], lr: float):
    """One update of the discriminators on detached generator outputs."""
    cfg = state.config
    models = state.models
    if state.disc_opt is None or cfg.mode not in ADAPT_MODES:
        return {}
    h, w = state.bundle.resolution
    norm = cfg.normalize_losses
    zero_grads(state.disc_opt.params.values())

    terms: Dict[str, float] = {}
    total = None

    # Target-side score map, computed without building a graph: this forward
    # exists only to feed the discriminator.
    with no_grad():
        target_features = models.generator.forward(batch.target_image)
        target_scores = models.head.score_map(target_features, (h, w))

    gd_s = global_discriminator_loss(
        models.global_disc, Tensor(artifacts["scores_source"]), SOURCE_DOMAIN, normalize=norm
    )
    gd_t = global_discriminator_loss(models.global_disc, target_scores, TARGET_DOMAIN, normalize=norm)
    total = _weighted(total, gd_s, cfg.lambda_global_disc)
    total = _weighted(total, gd_t, cfg.lambda_global_disc)
    terms["disc_global_source"] = gd_s.item()
    terms["disc_global_target"] = gd_t.item()

    if cfg.mode in SEMANTIC_MODES:
        c = models.head.num_classes
        f_s = Tensor(artifacts["features_source"])
        f_tl = Tensor(artifacts["features_labeled"])
        y_s = artifacts["labels_source"]
        y_tl = artifacts["labels_labeled"]
        if cfg.mode == "semantic_fc":
            sd_s = semantic_discriminator_fc(
                models.semantic_disc, class_average(f_s, y_s, c), SOURCE_DOMAIN, normalize=norm
            )
            sd_t = semantic_discriminator_fc(
                models.semantic_disc, class_average(f_tl, y_tl, c), TARGET_DOMAIN, normalize=norm
            )
        else:
            sd_s = semantic_discriminator_conv(
                models.semantic_disc, f_s, y_s, SOURCE_DOMAIN, normalize=norm
            )
            sd_t = semantic_discriminator_conv(
                models.semantic_disc, f_tl, y_tl, TARGET_DOMAIN, normalize=norm
            )
        total = _weighted(total, sd_s, cfg.lambda_semantic_disc)
        total = _weighted(total, sd_t, cfg.lambda_semantic_disc)
        terms["disc_semantic_source"] = sd_s.item()
        terms["disc_semantic_target"] = sd_t.item()

    backward(total)
    state.disc_opt.step(lr)
    return terms


def evaluate(generator, head, samples, num_classes: int) -> IoUReport:
    """mIoU of hard predictions over a list of labeled samples."""
    cm = ConfusionMatrix(num_classes)
    for sample in samples:
        cm.update(predict(generator, head, sample.image), sample.label)
    return mean_iou(cm)


@dataclass
class TrainResult:
    models: ModelSet
    metrics: List[dict]
    best_miou: Optional[float]
    best_iteration: Optional[int]
    final_miou: Optional[float]
    loss_terms_per_iteration: int
    run_dir: Optional[Path]


def _validate_mode_budget(config: TrainConfig, bundle: DatasetBundle) -> None:
    n_src = len(bundle.source_train)
    n_lab = len(bundle.target_labeled)
    n_unl = len(bundle.target_unlabeled)
    mode = config.mode
    if mode == "target_only" and n_lab == 0:
        raise ValueError("target_only mode needs a nonzero labeled-target budget")
    if mode != "target_only" and n_src == 0:
        raise ValueError(f"{mode} mode needs source training images")
    if mode in SEMANTIC_MODES and n_lab == 0:
        raise ValueError(
            f"{mode} mode needs labeled target images: its discriminator trains on "
            "labeled-target class features"
        )
    if mode in ADAPT_MODES and n_lab == 0 and n_unl == 0:
        raise ValueError(f"{mode} mode needs target images for the domain discriminator")


def _checkpoint_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    arrays = {f"model/{k}": v.data for k, v in state.models.all_parameters().items()}
    arrays.update(state.gen_opt.state_arrays("opt_gen/"))
    if state.disc_opt is not None:
        arrays.update(state.disc_opt.state_arrays("opt_disc/"))
    return arrays


def _save_state(state: TrainState, path: Path, digest: str) -> None:
    meta = {
        "iteration": state.iteration,
        "best_miou": state.best_miou,
        "best_iteration": state.best_iteration,
        "mode": state.config.mode,
        "num_classes": state.bundle.num_classes,
        "dtype": state.config.dtype,
        "adam_step": state.disc_opt.step_count if state.disc_opt else 0,
        "fingerprint": digest,
        "model_config": asdict(state.model_config),
    }
    save_checkpoint(path, _checkpoint_arrays(state), meta)


def _restore_state(state: TrainState, path, digest: str) -> None:
    arrays, meta = load_checkpoint(path, expected_fingerprint=digest)
    for name, tensor in state.models.all_parameters().items():
        key = f"model/{name}"
        if key not in arrays or arrays[key].shape != tensor.shape:
            raise CheckpointError(f"checkpoint parameter {key!r} missing or mis-shaped")
        tensor.data = arrays[key].astype(tensor.dtype)
    state.gen_opt.load_state(arrays, "opt_gen/")
    if state.disc_opt is not None:
        state.disc_opt.load_state(arrays, "opt_disc/", meta.get("adam_step", 0))
    state.iteration = int(meta["iteration"])
    state.best_miou = meta.get("best_miou")
    state.best_iteration = meta.get("best_iteration")


def load_models(path):
    """Rebuild the networks a checkpoint was written for and load its weights.

    Returns (models, meta); works for any checkpoint this module saved.
    """
    arrays, meta = load_checkpoint(path)
    try:
        model_config = ModelConfig(**meta["model_config"])
        models = build_models(
            meta["mode"], int(meta["num_classes"]), model_config, seed=0, dtype=meta.get("dtype", "float32")
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has unusable metadata: {exc}") from exc
    for name, tensor in models.all_parameters().items():
        key = f"model/{name}"
        if key not in arrays or arrays[key].shape != tensor.shape:
            raise CheckpointError(f"checkpoint parameter {key!r} missing or mis-shaped")
        tensor.data = arrays[key].astype(tensor.dtype)
    return models, meta


def train(
    config: TrainConfig,
    bundle: DatasetBundle,
    model_config: Optional[ModelConfig] = None,
    run_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run the full alternating optimization; see the module docstring.

    With ``run_dir`` set, writes ``metrics.jsonl`` plus ``last``/``best``/
    ``final`` checkpoints. ``resume_from`` continues from a ``last``
    checkpoint written by a run with the same config (bit-identical to the
    uninterrupted run, since sampling is stateless).
    """
    model_config = model_config or ModelConfig()
    _validate_mode_budget(config, bundle)
    state = TrainState(config, model_config, bundle)
    digest = config_digest(config, model_config, bundle.num_classes, bundle.resolution)

    run_path: Optional[Path] = None
    metrics_file = None
    if run_dir is not None:
        run_path = Path(run_dir)
        (run_path / "checkpoints").mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        _restore_state(state, resume_from, digest)
        at_boundary = state.iteration % config.eval_interval == 0
        if not at_boundary and state.iteration < config.max_iterations:
            raise CheckpointError(
                "can only resume from a checkpoint written at an evaluation boundary"
            )
    if run_path is not None:
        metrics_file = open(run_path / "metrics.jsonl", "a" if resume_from else "w")

    metrics: List[dict] = []
    window: Dict[str, float] = {}
    window_n = 0
    terms_per_iteration = 0
    check = config.check_isolation

    try:
        while state.iteration < config.max_iterations:
            i = state.iteration
            lr_g = poly_lr(config.generator_lr, i, config.max_iterations, config.lr_power)
            lr_d = poly_lr(config.discriminator_lr, i, config.max_iterations, config.lr_power)
            batch = state.draw_batch()

            disc_before = _params_digest(state.models.discriminator_parameters()) if check else None
            gen_terms, artifacts = generator_step(state, batch, lr_g)
            if check:
                if _params_digest(state.models.discriminator_parameters()) != disc_before:
                    raise IsolationError("discriminator parameters changed during a generator step")
                gen_before = _params_digest(state.models.generator_parameters())
            disc_terms = discriminator_step(state, batch, artifacts, lr_d)
            if check and _params_digest(state.models.generator_parameters()) != gen_before:
                raise IsolationError("generator parameters changed during a discriminator step")

            terms = {**gen_terms, **disc_terms}
            terms_per_iteration = len(terms)
            if not all(np.isfinite(v) for v in terms.values()):
                if run_path is not None:
                    _save_state(state, run_path / "checkpoints" / "diverged.npz", digest)
                bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
                raise TrainingDiverged(
                    f"non-finite loss at iteration {i + 1}: {bad} "
                    f"(snapshot saved)" if run_path else f"non-finite loss at iteration {i + 1}: {bad}"
                )
            for name, value in terms.items():
                window[name] = window.get(name, 0.0) + value
            window_n += 1
            state.iteration = i + 1

            if state.iteration % config.eval_interval == 0 or state.iteration == config.max_iterations:
                record = {
                    "iteration": state.iteration,
                    "lr_generator": lr_g,
                    "lr_discriminator": lr_d if state.disc_opt else None,
                }
                for name in sorted(window):
                    record[f"loss_{name}"] = window[name] / window_n
                if bundle.target_val:
                    report = evaluate(
                        state.models.generator, state.models.head, bundle.target_val, bundle.num_classes
                    )
                    record["miou"] = report.mean
                    record["per_class_iou"] = {str(k): v for k, v in report.per_class.items()}
                    if state.best_miou is None or report.mean > state.best_miou:
                        state.best_miou = report.mean
                        state.best_iteration = state.iteration
                        if run_path is not None:
                            _save_state(state, run_path / "checkpoints" / "best.npz", digest)
                metrics.append(record)
                if metrics_file is not None:
                    metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
                    metrics_file.flush()
                if run_path is not None:
                    _save_state(state, run_path / "checkpoints" / "last.npz", digest)
                window = {}
                window_n = 0
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if run_path is not None:
        _save_state(state, run_path / "checkpoints" / "final.npz", digest)

    final_miou = None
    for record in reversed(metrics):
        if "miou" in record:
            final_miou = record["miou"]
            break
    return TrainResult(
        models=state.models,
        metrics=metrics,
        best_miou=state.best_miou,
        best_iteration=state.best_iteration,
        final_miou=final_miou,
        loss_terms_per_iteration=terms_per_iteration,
        run_dir=run_path,
    )
