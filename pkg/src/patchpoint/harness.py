"""Synthetic color-pointing task, training orchestration, and sweeps.

An example is a cell grid of categorical colors; the query names one color and
the targets are the centers of every matching subpatch cell. Training runs log
JSON lines (per-step losses, periodic eval reports) and save the best-F1
checkpoint; the sample-efficiency sweep trains both heads for a fixed number of
epochs per dataset size and writes one CSV row per run.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import decoder, metrics, text_baseline
from .backbone import (
    SyntheticImage,
    ToyModelConfig,
    ToyPointModel,
    grounding_example_loss,
)
from .geometry import PixelPoint, build_grid
from .targets import PointAnnotation

RUN_DIR_ENV = "PATCHPOINT_RUN_DIR"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    image_width: int = 112
    image_height: int = 112
    n_colors: int = 5
    min_points: int = 1
    max_points: int = 4
    n_frames: int = 1
    seed: int = 0
    sweep_sizes: Tuple[int, ...] = (128, 512, 2048, 8192)
    rotary: bool = True
    no_more_points: bool = True
    point_sorting: bool = True
    head: str = "grounding"

    def __post_init__(self):
        if list(self.sweep_sizes) != sorted(set(self.sweep_sizes)):
            raise ValueError("sweep sizes must be strictly increasing")
        if self.min_points < 0 or self.max_points < self.min_points:
            raise ValueError("bad points-per-example range")


@dataclass(frozen=True)
class TrainConfig:
    hidden_size: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vit_size: int = 32
    head_width: int = 512
    context_len: int = 512
    noise_sigma: float = 0.05
    steps: int = 3000
    batch_size: int = 8
    dataset_size: int = 512
    heldout_size: int = 48
    eval_every: int = 100
    base_lr: float = 3e-4
    pointing_lr: float = 1e-4
    pointing_warmup: int = 200
    base_clip: float = 1.0
    pointing_clip: float = 1.0
    decode_max_points: int = 64
    early_stop_f1: Optional[float] = None
    early_stop_count_acc: Optional[float] = None
    torch_threads: int = 1  # tiny matrices: thread fan-out costs more than it buys


Example = Tuple[SyntheticImage, str, PointAnnotation]


def gen_example(rng: np.random.Generator, cfg: TaskConfig) -> Example:
    """One synthetic example: colored cell grid, query, ground-truth cell centers."""
    grid = build_grid(cfg.image_width, cfg.image_height, cfg.n_frames)
    rows, cols = grid.subpatch_rows, grid.subpatch_cols
    n_cells = cfg.n_frames * rows * cols
    target_color = int(rng.integers(cfg.n_colors))

    if cfg.n_colors == 1:
        chosen = np.arange(n_cells)
    else:
        n_targets = int(rng.integers(cfg.min_points, cfg.max_points + 1))
        if n_targets > n_cells:
            raise ValueError(f"{n_targets} targets do not fit in {n_cells} cells")
        chosen = rng.choice(n_cells, size=n_targets, replace=False)

    if cfg.n_colors == 1:
        cells = np.zeros(n_cells, dtype=np.int64)
    else:
        others = [c for c in range(cfg.n_colors) if c != target_color]
        cells = rng.choice(others, size=n_cells)
        cells[chosen] = target_color
    cells = cells.reshape(cfg.n_frames, rows, cols)

    image = SyntheticImage(
        cfg.image_width, cfg.image_height, cells, noise_seed=int(rng.integers(2**31))
    )
    sub = grid.vit_patch_px
    points = []
    order = rng.permutation(len(chosen))  # annotation order is random on purpose
    for idx in np.asarray(chosen)[order]:
        frame, rem = divmod(int(idx), rows * cols)
        r, c = divmod(rem, cols)
        points.append(PixelPoint((c + 0.5) * sub, (r + 0.5) * sub, frame))
    query = f"point to all cells of color c{target_color}"
    return image, query, PointAnnotation(grid, points)


def make_dataset(cfg: TaskConfig, size: int, seed: int) -> List[Example]:
    rng = np.random.default_rng(seed)
    return [gen_example(rng, cfg) for _ in range(size)]


def resolve_run_dir(run_dir=None) -> Path:
    if run_dir is None:
        root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
        run_dir = root / time.strftime("run-%Y%m%d-%H%M%S")
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class TrainResult:
    best_f1: float
    best_step: int
    final_report: metrics.MetricsReport
    checkpoint_path: Path
    log_path: Path
    steps_run: int


class Trainer:
    """Single-writer training loop with a separate pointing-parameter group."""

    def __init__(self, task: TaskConfig, train: TrainConfig, run_dir=None):
        self.task = task
        self.cfg = train
        if train.torch_threads:
            torch.set_num_threads(train.torch_threads)
        self.run_dir = resolve_run_dir(run_dir)
        self.model = ToyPointModel(
            ToyModelConfig(
                hidden_size=train.hidden_size,
                n_layers=train.n_layers,
                n_heads=train.n_heads,
                vit_size=train.vit_size,
                context_len=train.context_len,
                n_colors=task.n_colors,
                head_width=train.head_width,
                noise_sigma=train.noise_sigma,
                use_rotary=task.rotary,
                use_done=task.no_more_points,
            ),
            head=task.head,
            seed=task.seed,
        )
        self.train_set = make_dataset(task, train.dataset_size, task.seed)
        self.heldout = make_dataset(task, train.heldout_size, task.seed + 1_000_003)
        self.data_rng = np.random.default_rng(task.seed + 7)

        groups = [{"params": self.model.base_parameters(), "lr": train.base_lr}]
        self._has_pointing = bool(self.model.pointing_parameters())
        if self._has_pointing:
            groups.append({"params": self.model.pointing_parameters(), "lr": train.pointing_lr})
        self.opt = torch.optim.AdamW(groups, weight_decay=0.01)
        lambdas = [lambda s: 1.0]
        if self._has_pointing:
            warm = max(train.pointing_warmup, 1)
            lambdas.append(lambda s: min(1.0, (s + 1) / warm))
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, lambdas)

        self.log_path = self.run_dir / "log.jsonl"
        self.ckpt_path = self.run_dir / "best.ckpt"
        self._log_file = open(self.log_path, "w")
        manifest = {
            "task": dataclasses.asdict(task),
            "train": dataclasses.asdict(train),
            "note": "toy-scale defaults; full-scale runs use batch 64+ and far more steps",
        }
        (self.run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    def _log(self, record: dict) -> None:
        self._log_file.write(json.dumps(record) + "\n")
        self._log_file.flush()

    def _example_loss(self, ex: Example):
        image, query, ann = ex
        if self.task.head == "text":
            return text_baseline.text_example_loss(
                self.model, image, query, ann, self.task.point_sorting
            )
        bd, _ = grounding_example_loss(
            self.model, image, query, ann, self.task.point_sorting
        )
        return bd

    def train_step(self) -> dict:
        idxs = self.data_rng.integers(0, len(self.train_set), self.cfg.batch_size)
        self.opt.zero_grad()
        agg = {"l_p": 0.0, "l_s": 0.0, "l_loc": 0.0, "llm_token_loss_sum": 0.0,
               "n_tokens": 0, "total": 0.0}
        for i in idxs:
            bd = self._example_loss(self.train_set[int(i)])
            total = bd.total if torch.is_tensor(bd.total) else torch.tensor(bd.total)
            (total / self.cfg.batch_size).backward()
            for k, v in bd.as_floats().items():
                agg[k] += v / self.cfg.batch_size
        if not math.isfinite(agg["total"]):
            self._log({"event": "diverged", "loss": agg})
            raise TrainingDiverged(f"non-finite loss: {agg['total']}")
        torch.nn.utils.clip_grad_norm_(self.model.base_parameters(), self.cfg.base_clip)
        if self._has_pointing:
            torch.nn.utils.clip_grad_norm_(
                self.model.pointing_parameters(), self.cfg.pointing_clip
            )
        self.opt.step()
        self.sched.step()
        return agg

    def evaluate(self) -> metrics.MetricsReport:
        self.model.eval()
        pairs = []
        cfg = metrics.MatchConfig.for_grid(self.heldout[0][2].grid)
        with torch.no_grad():
            for image, query, ann in self.heldout:
                if self.task.head == "text":
                    preds = text_baseline.decode_text(
                        self.model, image, query, max_points=self.cfg.decode_max_points
                    ).points
                else:
                    preds = decoder.decode(
                        self.model, image, query,
                        decoder.DecodeConfig(
                            max_points=self.cfg.decode_max_points,
                            enforce_monotone=self.task.point_sorting,
                        ),
                    ).points
                pairs.append((preds, ann.points))
        self.model.train()
        return metrics.aggregate_reports(pairs, cfg)

    def _save(self, step: int, f1: float) -> None:
        self.model.save(
            self.ckpt_path,
            {"step": step, "best_f1": f1, "task": dataclasses.asdict(self.task)},
        )

    def run(self) -> TrainResult:
        best_f1, best_step = -1.0, 0
        report = self.evaluate()
        self._log({"step": 0, "eval": report.as_dict()})
        best_f1, best_step = report.f1, 0
        self._save(0, best_f1)
        step = 0
        for step in range(1, self.cfg.steps + 1):
            agg = self.train_step()
            self._log({"step": step, "loss": agg})
            if step % self.cfg.eval_every == 0 or step == self.cfg.steps:
                report = self.evaluate()
                self._log({"step": step, "eval": report.as_dict()})
                if report.f1 > best_f1:
                    best_f1, best_step = report.f1, step
                    self._save(step, best_f1)
                if (
                    self.cfg.early_stop_f1 is not None
                    and report.f1 >= self.cfg.early_stop_f1
                    and (
                        self.cfg.early_stop_count_acc is None
                        or report.count_accuracy >= self.cfg.early_stop_count_acc
                    )
                ):
                    break
        self._log_file.close()
        return TrainResult(best_f1, best_step, report, self.ckpt_path, self.log_path, step)


def train(task: TaskConfig, cfg: TrainConfig, run_dir=None) -> TrainResult:
    return Trainer(task, cfg, run_dir).run()


def sweep(
    task: TaskConfig,
    cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    heads: Sequence[str] = ("grounding", "text"),
    epochs: int = 6,
    run_dir=None,
    csv_path=None,
) -> List[dict]:
    """Train every (size, head, seed) cell to saturation; return/write CSV rows."""
    root = resolve_run_dir(run_dir)
    rows = []
    for size in task.sweep_sizes:
        steps = max(1, math.ceil(epochs * size / cfg.batch_size))
        for head in heads:
            for seed in seeds:
                cell_task = dataclasses.replace(task, head=head, seed=seed)
                cell_cfg = dataclasses.replace(
                    cfg, dataset_size=size, steps=steps,
                    early_stop_f1=None, early_stop_count_acc=None,
                )
                result = train(cell_task, cell_cfg, root / f"size{size}-{head}-s{seed}")
                rows.append(
                    {"size": size, "head": head, "f1": result.final_report.f1, "seed": seed}
                )
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write("size,head,f1,seed\n")
            for r in rows:
                f.write(f"{r['size']},{r['head']},{r['f1']:.4f},{r['seed']}\n")
    return rows


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def finite_difference_gradcheck(
    seed: int = 0,
    h: float = 1e-4,
    samples_per_tensor: int = 6,
    task: Optional[TaskConfig] = None,
    model_cfg: Optional[ToyModelConfig] = None,
) -> Dict[str, float]:
    """Compare autograd gradients of the total loss against central differences.

    Runs in double precision on a small seeded instance; returns per-tensor
    maximum relative error (keyed by parameter name) plus "max" overall.
    """
    task = task or TaskConfig(image_width=56, image_height=56, n_colors=3,
                              min_points=1, max_points=2, seed=seed)
    model_cfg = model_cfg or ToyModelConfig(
        hidden_size=16, n_layers=2, n_heads=2, vit_size=8, head_width=8,
        n_colors=task.n_colors, noise_sigma=0.05,
    )
    model = ToyPointModel(model_cfg, seed=seed).double()
    rng = np.random.default_rng(seed + 1)
    image, query, ann = gen_example(rng, task)

    def loss_value() -> float:
        bd, _ = grounding_example_loss(model, image, query, ann)
        return float(bd.total)

    bd, _ = grounding_example_loss(model, image, query, ann)
    model.zero_grad()
    bd.total.backward()

    torch_rng = np.random.default_rng(seed + 2)
    report: Dict[str, float] = {}
    worst = 0.0
    for name, param in model.named_parameters():
        grad = param.grad
        if grad is None:
            continue
        flat = grad.reshape(-1)
        n = flat.numel()
        order = torch.argsort(flat.abs(), descending=True)
        picks = list(order[: samples_per_tensor // 2].tolist())
        picks += [int(i) for i in torch_rng.integers(0, n, samples_per_tensor - len(picks))]
        tensor_worst = 0.0
        data = param.data.reshape(-1)
        for idx in picks:
            orig = float(data[idx])
            data[idx] = orig + h
            up = loss_value()
            data[idx] = orig - h
            down = loss_value()
            data[idx] = orig
            fd = (up - down) / (2 * h)
            an = float(flat[idx])
            scale = max(abs(an), abs(fd))
            if scale < 1e-6:
                continue  # both effectively zero; nothing to compare
            tensor_worst = max(tensor_worst, abs(an - fd) / scale)
        report[name] = tensor_worst
        worst = max(worst, tensor_worst)
    report["max"] = worst
    return report
