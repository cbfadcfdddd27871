"""
SGD training of the Siamese matcher with optional channel decorrelation.

Also home of the synthetic pair generator used for desk-scale runs: a
procedurally textured target is cut into the exemplar and pasted,
slightly warped, among distractors in the search image.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import affine_transform

from app.config import DataConfig, ScdConfig, TrainConfig
from app.errors import ConfigError, GraphError
from app.layers import EmbeddingConfig, infer_shapes
from app.scd import LossBreakdown, combined_loss, layer_scd_loss
from app.siamese import SiameseModel, batch_labels, embed, score_center, task_loss
from app.tensor import Graph, Tensor4, add, scale

logger = logging.getLogger(__name__)


@dataclass
class RunStreams:
    """
    Independent generators for one run.

    SCD pair sampling draws from its own per-layer streams, so enabling or
    disabling SCD never shifts the initial weights or the training data.
    """
    init: np.random.Generator
    data: np.random.Generator
    eval: np.random.Generator
    scd: dict[int, np.random.Generator] = field(default_factory=dict)

    @classmethod
    def from_seed(cls, seed: int, conv_count: int) -> "RunStreams":
        init, data, evaluation, scd = np.random.SeedSequence(seed).spawn(4)
        layer_seqs = scd.spawn(conv_count)
        return cls(
            init=np.random.default_rng(init),
            data=np.random.default_rng(data),
            eval=np.random.default_rng(evaluation),
            scd={index: np.random.default_rng(seq) for index, seq in enumerate(layer_seqs, start=1)},
        )


@dataclass(frozen=True)
class PairSpec:
    """Geometry and jitter of generated pairs."""
    exemplar_size: int
    search_size: int
    target_size: int
    channels: int = 3
    distractors: int = 6
    scale_jitter: float = 0.05
    rotation_jitter_deg: float = 5.0
    brightness_jitter: float = 0.1
    jitter: bool = True
    # Fixed target center in search pixels; random when None
    center: tuple[int, int] | None = None

    @classmethod
    def from_config(cls, embedding: EmbeddingConfig, data: DataConfig) -> "PairSpec":
        return cls(
            exemplar_size=embedding.exemplar_size,
            search_size=embedding.search_size,
            target_size=max(1, round(data.target_fraction * embedding.exemplar_size)),
            channels=embedding.in_channels,
            distractors=data.distractors,
            scale_jitter=data.scale_jitter,
            rotation_jitter_deg=data.rotation_jitter_deg,
            brightness_jitter=data.brightness_jitter,
        )


@dataclass
class SyntheticPair:
    exemplar: np.ndarray  # (C, ez, ez)
    search: np.ndarray  # (C, ss, ss)
    center: tuple[int, int]  # target center (row, col) in search pixels


@dataclass
class Batch:
    exemplars: Tensor4
    search: Tensor4
    centers: np.ndarray  # (n, 2) target centers in search pixels

    @property
    def size(self) -> int:
        return self.exemplars.n


def _render_texture(rng: np.random.Generator, size: int, channels: int, blobs: int, amplitude: float) -> np.ndarray:
    """Zero-mean texture: a random colour gradient plus Gaussian blobs."""
    rows, cols = np.mgrid[0:size, 0:size] / max(size, 1)
    slopes = rng.normal(size=(channels, 2))
    image = slopes[:, 0, None, None] * rows + slopes[:, 1, None, None] * cols
    for _ in range(blobs):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        sigma = rng.uniform(0.05, 0.25)
        colour = rng.normal(size=channels)
        bump = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma**2))
        image = image + colour[:, None, None] * bump
    image = image - image.mean()
    return amplitude * image / (image.std() + 1e-8)


def _paste(canvas: np.ndarray, patch: np.ndarray, center: tuple[int, int]) -> None:
    """Write patch into canvas centered at center, clipped to the canvas."""
    size = patch.shape[-1]
    top, left = center[0] - size // 2, center[1] - size // 2
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + size, canvas.shape[-2]), min(left + size, canvas.shape[-1])
    if y1 <= y0 or x1 <= x0:
        return
    canvas[:, y0:y1, x0:x1] = patch[:, y0 - top : y1 - top, x0 - left : x1 - left]


def _warp(rng: np.random.Generator, patch: np.ndarray, spec: PairSpec) -> np.ndarray:
    """Random scale, rotation and brightness change about the patch center."""
    zoom = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    angle = np.deg2rad(rng.uniform(-spec.rotation_jitter_deg, spec.rotation_jitter_deg))
    gain = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)

    # affine_transform maps output coordinates to input coordinates
    cos, sin = np.cos(angle), np.sin(angle)
    matrix = np.array([[cos, -sin], [sin, cos]]) / zoom
    middle = (np.array(patch.shape[-2:]) - 1) / 2.0
    offset = middle - matrix @ middle
    warped = np.stack(
        [affine_transform(plane, matrix, offset=offset, order=1, mode="nearest") for plane in patch]
    )
    return gain * warped


def generate_pair(rng: np.random.Generator, spec: PairSpec) -> SyntheticPair:
    """
    Render one exemplar/search pair.

    Args:
        rng: Data stream
        spec: Image sizes, target size and jitter ranges

    Returns:
        SyntheticPair with the target center in search coordinates
    """
    ez, ss, ts = spec.exemplar_size, spec.search_size, spec.target_size
    if ts > ez or ez > ss:
        raise ConfigError(f"need target ({ts}) <= exemplar ({ez}) <= search ({ss})")

    target = _render_texture(rng, ts, spec.channels, blobs=5, amplitude=1.0)
    exemplar = _render_texture(rng, ez, spec.channels, blobs=3, amplitude=0.3)
    _paste(exemplar, target, (ez // 2, ez // 2))

    search = _render_texture(rng, ss, spec.channels, blobs=8, amplitude=0.3)
    for _ in range(spec.distractors):
        clutter = _render_texture(rng, ts, spec.channels, blobs=5, amplitude=1.0)
        _paste(search, clutter, tuple(int(v) for v in rng.integers(0, ss, size=2)))

    if spec.center is not None:
        center = spec.center
    else:
        low, high = ez // 2, ss - ez // 2
        center = (int(rng.integers(low, high + 1)), int(rng.integers(low, high + 1)))
    placed = _warp(rng, target, spec) if spec.jitter else target
    _paste(search, placed, center)
    return SyntheticPair(exemplar=exemplar, search=search, center=center)


def make_batch(rng: np.random.Generator, spec: PairSpec, size: int) -> Batch:
    pairs = [generate_pair(rng, spec) for _ in range(size)]
    return Batch(
        exemplars=Tensor4(np.stack([p.exemplar for p in pairs]), name="exemplars"),
        search=Tensor4(np.stack([p.search for p in pairs]), name="search"),
        centers=np.array([p.center for p in pairs], dtype=np.int64),
    )


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Geometric decay from lr_initial at epoch 0 to lr_final at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_initial
    factor = (cfg.lr_final / cfg.lr_initial) ** (1.0 / (cfg.epochs - 1))
    return cfg.lr_initial * factor**epoch


def sgd_step(params: list[Tensor4], lr: float, weight_decay: float) -> None:
    """
    Plain SGD with weight decay added to the gradient, then zero the gradients.

    w <- w - lr * (g + weight_decay * w)
    """
    for param in params:
        if param.grad is None:
            raise GraphError(f"parameter '{param.name}' has no gradient; run backward first")
    for param in params:
        param.data -= lr * (param.grad + weight_decay * param.data)
        param.zero_grad()


def compute_losses(
    model: SiameseModel,
    batch: Batch,
    cfg: TrainConfig,
    scd_rngs: dict[int, np.random.Generator] | None = None,
    training: bool = True,
) -> LossBreakdown:
    """
    Forward both branches and assemble the combined objective.

    SCD runs on the search-branch conv outputs; with include_exemplar_branch
    the exemplar-branch loss is averaged in.
    """
    scd: ScdConfig = cfg.scd
    taps = scd.layers if scd.enabled else ()
    exemplar_taps = taps if scd.include_exemplar_branch else ()

    z, z_tapped = embed(model, batch.exemplars, training=training, taps=exemplar_taps)
    x, x_tapped = embed(model, batch.search, training=training, taps=taps)
    score = model.score(z, x)

    centers = np.array([score_center(c, model.embedding, score.grid_dims) for c in batch.centers])
    labels, weights = batch_labels(score.grid_dims, centers, cfg.label_radius)
    task = task_loss(score.with_labels(labels, weights))

    per_layer: dict[int, Tensor4] = {}
    if scd.enabled:
        if scd_rngs is None:
            scd_rngs = RunStreams.from_seed(cfg.seed, model.embedding.conv_count).scd
        for layer in scd.layers:
            margin = scd.margin_for(layer)
            loss = layer_scd_loss(x_tapped[layer], scd, scd_rngs[layer], epsilon=margin)
            if scd.include_exemplar_branch:
                exemplar_loss = layer_scd_loss(z_tapped[layer], scd, scd_rngs[layer], epsilon=margin)
                loss = scale(add(loss, exemplar_loss), 0.5)
            per_layer[layer] = loss
    return combined_loss(task, per_layer, scd)


def train_step(
    model: SiameseModel,
    batch: Batch,
    cfg: TrainConfig,
    lr: float,
    scd_rngs: dict[int, np.random.Generator] | None = None,
) -> LossBreakdown:
    """
    One SGD iteration on a batch.

    Args:
        model: Model to update in place
        batch: Exemplar/search images and target centers
        cfg: Training recipe, including SCD settings
        lr: Learning rate for this step
        scd_rngs: Per-layer pair sampling streams

    Returns:
        The loss breakdown computed before the update
    """
    with Graph() as graph:
        breakdown = compute_losses(model, batch, cfg, scd_rngs)
        graph.backward(breakdown.combined)
    if not math.isfinite(breakdown.combined.item()):
        logger.warning(f"Non-finite combined loss {breakdown.combined.item()}")
    sgd_step(model.parameters(), lr, cfg.weight_decay)
    return breakdown


@dataclass
class IntervalLosses:
    """Loss averages over the steps of one metrics interval."""
    epoch: int
    lr: float
    task_loss: float
    scd_loss_mean: float
    combined_loss: float
    steps: int
    last_in_epoch: bool

    @classmethod
    def from_steps(cls, epoch: int, lr: float, steps: list[dict[str, float]], last: bool) -> "IntervalLosses":
        return cls(
            epoch=epoch,
            lr=lr,
            task_loss=float(np.mean([s["task_loss"] for s in steps])),
            scd_loss_mean=float(np.mean([s["scd_loss_mean"] for s in steps])),
            combined_loss=float(np.mean([s["combined_loss"] for s in steps])),
            steps=len(steps),
            last_in_epoch=last,
        )


def steps_per_epoch(cfg: TrainConfig) -> int:
    return math.ceil(cfg.samples_per_epoch / cfg.batch_size)


def fit(
    model: SiameseModel,
    cfg: TrainConfig,
    streams: RunStreams,
    spec: PairSpec,
    intervals_per_epoch: int = 1,
    on_interval: Callable[[IntervalLosses], None] | None = None,
) -> list[IntervalLosses]:
    """
    Run the full schedule.

    Each epoch is split into intervals_per_epoch runs of consecutive steps;
    after each, on_interval receives the averaged losses.

    Returns:
        Every interval record, in order
    """
    total_steps = steps_per_epoch(cfg)
    if not 1 <= intervals_per_epoch <= total_steps:
        raise ConfigError(
            f"metrics_per_epoch={intervals_per_epoch} must lie in [1, {total_steps}] "
            f"(steps per epoch at batch size {cfg.batch_size})"
        )
    infer_shapes(model.embedding, (spec.exemplar_size, spec.exemplar_size))
    infer_shapes(model.embedding, (spec.search_size, spec.search_size))

    chunks = np.array_split(np.arange(total_steps), intervals_per_epoch)
    records: list[IntervalLosses] = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for position, chunk in enumerate(chunks):
            steps = []
            for step in chunk:
                size = min(cfg.batch_size, cfg.samples_per_epoch - int(step) * cfg.batch_size)
                batch = make_batch(streams.data, spec, size)
                breakdown = train_step(model, batch, cfg, lr, streams.scd)
                steps.append(breakdown.as_floats())
                logger.debug(f"epoch {epoch} step {int(step)}: {steps[-1]}")
            record = IntervalLosses.from_steps(epoch, lr, steps, last=position == len(chunks) - 1)
            records.append(record)
            if on_interval is not None:
                on_interval(record)
        last = records[-1]
        logger.info(
            f"Epoch {epoch + 1}/{cfg.epochs} lr={lr:.3g} task={last.task_loss:.4f} "
            f"scd={last.scd_loss_mean:.4f} combined={last.combined_loss:.4f}"
        )
    return records
