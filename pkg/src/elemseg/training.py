"""Training loop, early stopping, and the ablation grid."""

from __future__ import annotations

import csv
import dataclasses
import multiprocessing
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_split
from .metrics import EvalReport, evaluate
from .model import ModelConfig, SegmentationModel
from .tensor import blas_single_thread

LOG_HEADER = ("step", "train_loss", "val_miou", "val_accuracy")

# (use_image, use_elements, use_projection, description)
ABLATION_GRID = (
    (1, 1, 1, "full model"),
    (1, 0, 0, "image only"),
    (0, 1, 1, "elements only"),
    (1, 1, 0, "no projection"),
    (0, 1, 0, "elements only, tiled"),
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 20000
    accum: int = 8
    patience: int = 10
    eval_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("beta1", "beta2", "eps", "steps", "accum", "eval_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """First/second-moment adaptive updates over a graph's parameter registry."""

    def __init__(self, graph, cfg: TrainConfig):
        self.graph = graph
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in graph.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in graph.params.items()}

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        corr1 = 1.0 - cfg.beta1 ** self.t
        corr2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.graph.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= (cfg.learning_rate / corr1) * m / (np.sqrt(v / corr2) + cfg.eps)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_accuracy: float
    best_miou: float
    best_step: int
    steps_run: int
    diverged: bool
    log_rows: list[tuple[int, float, float, float]] = field(default_factory=list)


def train(model_config: ModelConfig, train_config: TrainConfig,
          train_samples, val_samples, progress=None) -> TrainResult:
    """Minimize the mean pixel cross-entropy with Adam and early stopping.

    Evaluates on the validation split every ``eval_interval`` steps, keeps the
    parameters with the best validation accuracy, and stops after ``patience``
    evaluations without improvement. On divergence (non-finite loss) the last
    finite best checkpoint is retained.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    with blas_single_thread():
        return _train_loop(model_config, train_config, train_samples, val_samples, progress)


def _train_loop(model_config, train_config, train_samples, val_samples, progress) -> TrainResult:
    model = SegmentationModel(model_config)
    graph = model.graph
    opt = Adam(graph, train_config)
    rng = np.random.default_rng(train_config.seed)

    best = TrainResult(params=model.export_params(), best_accuracy=-1.0,
                       best_miou=0.0, best_step=0, steps_run=0, diverged=False)
    order: list[int] = []
    cursor = 0
    loss_acc = 0.0
    loss_n = 0
    bad_evals = 0
    inv_accum = 1.0 / train_config.accum

    for step in range(1, train_config.steps + 1):
        graph.zero_grad()
        step_ok = True
        for _ in range(train_config.accum):
            if cursor >= len(order):
                order = [int(i) for i in rng.permutation(len(train_samples))]
                cursor = 0
            sample = train_samples[order[cursor]]
            cursor += 1
            loss = model.sample_loss(sample)
            value = float(loss.data)
            if not np.isfinite(value):
                best.diverged = True
                step_ok = False
                break
            graph.backward(graph.scale(loss, inv_accum))
            loss_acc += value
            loss_n += 1
        if not step_ok:
            break
        opt.step()
        best.steps_run = step

        if step % train_config.eval_interval == 0:
            report = evaluate(model, val_samples, split="val")
            train_loss = loss_acc / max(loss_n, 1)
            best.log_rows.append((step, train_loss, report.miou, report.accuracy))
            loss_acc = 0.0
            loss_n = 0
            if progress is not None:
                progress(step, train_loss, report)
            if report.accuracy > best.best_accuracy:
                best.best_accuracy = report.accuracy
                best.best_miou = report.miou
                best.best_step = step
                best.params = model.export_params()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= train_config.patience:
                    break

    if best.best_accuracy < 0:
        # budget ended before the first evaluation; keep the current parameters
        # unless they already went non-finite, then fall back to the initial ones
        current = model.export_params()
        if all(np.isfinite(a).all() for a in current.values()):
            best.params = current
        best.best_accuracy = 0.0
    return best


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_HEADER)
        for step, loss, miou, acc in rows:
            writer.writerow([step, f"{loss:.6f}", f"{miou:.6f}", f"{acc:.6f}"])


# ---------------------------------------------------------------------- #
# ablation grid

@dataclass
class AblationCell:
    use_image: int
    use_elements: int
    use_projection: int
    description: str
    accuracy: float | None = None
    miou: float | None = None
    status: str = "ok"


def _cell_config(base: ModelConfig, img: int, el: int, proj: int) -> ModelConfig:
    return dataclasses.replace(base, use_image=bool(img), use_elements=bool(el),
                               use_projection=bool(proj))


def _run_cell(args) -> AblationCell:
    data_dir, model_dict, train_dict, img, el, proj, desc, eval_split = args
    cell = AblationCell(img, el, proj, desc)
    try:
        model_config = _cell_config(ModelConfig.from_dict(model_dict), img, el, proj)
        train_config = TrainConfig.from_dict(train_dict)
        data_dir = Path(data_dir)
        train_samples = load_split(data_dir / "train.jsonl")
        val_samples = load_split(data_dir / "val.jsonl")
        eval_samples = load_split(data_dir / f"{eval_split}.jsonl")
        result = train(model_config, train_config, train_samples, val_samples)
        model = SegmentationModel(model_config)
        model.set_params(result.params)
        report = evaluate(model, eval_samples, split=eval_split)
        cell.accuracy = report.accuracy
        cell.miou = report.miou
    except Exception as e:  # a failing cell must not abort the grid
        cell.status = f"failed: {e}"
        print(f"ablation cell ({img},{el},{proj}) failed: {e}", file=sys.stderr)
    return cell


def run_ablation_grid(data_dir, model_config: ModelConfig, train_config: TrainConfig,
                      jobs: int = 1, eval_split: str = "test") -> list[AblationCell]:
    """Train and evaluate the five ablation configurations with shared
    hyperparameters and one seed; failed cells are marked, not fatal."""
    args = [(str(data_dir), model_config.to_dict(), train_config.to_dict(),
             img, el, proj, desc, eval_split)
            for img, el, proj, desc in ABLATION_GRID]
    if jobs <= 1:
        return [_run_cell(a) for a in args]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(jobs, len(args))) as pool:
        return pool.map(_run_cell, args)


def write_grid_csv(path, cells: list[AblationCell]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["img", "el", "proj", "description", "accuracy", "miou", "status"])
        for c in cells:
            writer.writerow([
                c.use_image, c.use_elements, c.use_projection, c.description,
                "" if c.accuracy is None else f"{c.accuracy:.6f}",
                "" if c.miou is None else f"{c.miou:.6f}",
                c.status,
            ])
