"""Training loop, leave-one-domain-out evaluation, ablations and reporting."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore as nn
from .data import Partition, WindowedDataset, channel_stats, lodo_partition, standardize
from .ids import DEFAULT_EPS, DEFAULT_MAX_DRAWS, IDSAugmenter
from .losses import LossWeights, total_loss
from .metrics import accuracy, aggregate_seeds, confusion_matrix, macro_f1
from .model import ArchConfig, TwoBranchNet, build, forward_infer, forward_train, preset

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    arch: str = "synthetic"
    arch_overrides: dict = field(default_factory=dict)
    alpha: float = 1.0
    beta: float = 0.1
    con_mode: str = "symmetric-sum"
    l1_reduce: str = "mean"
    cls_mode: str = "default"
    measure: str = "hsic"
    ids_eps: float = DEFAULT_EPS
    ids_max_draws: int = DEFAULT_MAX_DRAWS
    lr: float = 1e-3
    epochs: int = 150
    batch_size: int = 32
    seed: int = 0
    target: int = 0
    val_fraction: float = 0.2
    use_ind: bool = True
    use_con: bool = True
    use_ids: bool = True
    use_cdpl: bool = True
    early_fork: bool = True
    with_noncausal: bool = True
    cdpl_shared: bool = False
    cdpl_stopgrad: bool = False
    variant: str = "full"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    def arch_config(self, ds: WindowedDataset) -> ArchConfig:
        return preset(
            self.arch,
            **{
                **self.arch_overrides,
                "in_channels": ds.num_channels,
                "width": ds.width,
                "num_classes": ds.num_classes,
                "num_domains": ds.num_domains,
                "cdpl_shared": self.cdpl_shared,
                "early_fork": self.early_fork,
                "with_noncausal": self.with_noncausal,
            },
        )

    def to_dict(self) -> dict:
        return asdict(self)


# ablation variants with their display labels, plus the ERM baseline
VARIANTS: dict[str, tuple[str, dict]] = {
    "full": ("Ours", {}),
    "no-ind": ("Ours w/o L_ind", {"use_ind": False}),
    "no-con": ("Ours w/o L_con", {"use_con": False}),
    "no-both": ("Ours w/o L_ind & L_con", {"use_ind": False, "use_con": False}),
    "orth": ("Ours w/o L_ind & w/ L_orth", {"measure": "orth"}),
    "corr": ("Ours w/o L_ind & w/ L_corr", {"measure": "corr"}),
    "no-cdpl": ("Ours w/o CDPL", {"use_cdpl": False}),
    "no-ids": ("Ours w/o IDS", {"use_ids": False}),
    "no-fork": ("Ours w/o f_c / f_d", {"early_fork": False}),
}
BASELINES: dict[str, tuple[str, dict]] = {
    "erm": ("ERM", {"use_ind": False, "use_con": False, "use_ids": False, "with_noncausal": False,
                    "alpha": 0.0, "beta": 0.0}),
}


def apply_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    table = {**VARIANTS, **BASELINES}
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(table)}")
    return replace(cfg, variant=variant, **table[variant][1])


@dataclass
class RunResult:
    config: dict
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    test_acc: float
    test_f1: float
    confusion: np.ndarray
    wall_clock: float
    state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    adam_state: dict | None = field(repr=False, default=None)
    norm_mean: np.ndarray | None = field(repr=False, default=None)
    norm_std: np.ndarray | None = field(repr=False, default=None)
    arch: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "target": self.config["target"],
            "variant": self.config["variant"],
            "seed": self.config["seed"],
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "test_acc": self.test_acc,
            "test_f1": self.test_f1,
            "confusion": self.confusion.tolist(),
            "wall_clock": self.wall_clock,
        }

    def to_json(self) -> dict:
        return {**self.summary(), "config": self.config, "arch": self.arch, "history": self.history}


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def epoch_batches(domains: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for one epoch: each step takes one chunk from every source domain."""
    per_domain = [rng.permutation(np.flatnonzero(domains == d)) for d in np.unique(domains)]
    iters = math.ceil(min(len(p) for p in per_domain) / batch_size)
    return [np.concatenate([p[i * batch_size : (i + 1) * batch_size] for p in per_domain]) for i in range(iters)]


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------


def predict(model: TwoBranchNet, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    model.eval()
    preds = []
    with nn.no_grad():
        for s in range(0, len(x), chunk):
            preds.append(forward_infer(model, x[s : s + chunk]).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate_model(model: TwoBranchNet, x: np.ndarray, y: np.ndarray) -> tuple[float, float, np.ndarray]:
    cm = confusion_matrix(y, predict(model, x), model.config.num_classes)
    return accuracy(cm), macro_f1(cm), cm


def train_step(model: TwoBranchNet, opt: nn.Adam, cfg: TrainConfig, x: np.ndarray, y: np.ndarray, d: np.ndarray,
               augment) -> "LossBreakdown":  # noqa: F821
    model.train()
    opt.zero_grad()
    try:
        out = forward_train(model, x, augment, use_cdpl=cfg.use_cdpl)
        lb = total_loss(out, y, d, LossWeights(cfg.alpha, cfg.beta), con_mode=cfg.con_mode, cls_mode=cfg.cls_mode,
                        measure=cfg.measure, use_ind=cfg.use_ind, use_con=cfg.use_con,
                        stopgrad=cfg.cdpl_stopgrad, l1_reduce=cfg.l1_reduce)
        nn.backward(lb.graph)
        opt.step()
    except FloatingPointError as exc:
        raise DivergenceError(str(exc)) from None
    for name, p in model.named_parameters().items():
        if not np.isfinite(p.data).all():
            raise DivergenceError(f"parameter {name} became non-finite after the update")
    return lb


def make_augmenter(cfg: TrainConfig, rng: np.random.Generator):
    if not cfg.with_noncausal and not cfg.use_ids:
        return None
    if not cfg.use_ids:
        return lambda z: z  # the augmented view is the original
    return IDSAugmenter(cfg.ids_eps, cfg.ids_max_draws, rng)


def train(cfg: TrainConfig, part: Partition, verbose: bool = False) -> RunResult:
    """Run the training loop on ``part.train``; select the epoch with best val accuracy; test on the target."""
    cfg.validate()
    t0 = time.perf_counter()
    mean, std = channel_stats(part.train)
    x_tr = standardize(part.train.windows, mean, std)
    x_va = standardize(part.val.windows, mean, std)
    x_te = standardize(part.test.windows, mean, std)
    arch = cfg.arch_config(part.train)
    model = build(arch, cfg.seed)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    data_rng = np.random.default_rng([cfg.seed, 1])
    augment = make_augmenter(cfg, np.random.default_rng([cfg.seed, 2]))

    history = []
    best = (-1.0, -1)
    best_state, best_adam = model.state_dict(), opt.state_dict()
    for epoch in range(cfg.epochs):
        sums = {"l_cls": 0.0, "l_ind": 0.0, "l_con": 0.0, "total": 0.0}
        batches = epoch_batches(part.train.domains, cfg.batch_size, data_rng)
        steps = 0
        for idx in batches:
            if len(idx) < 2:
                continue
            lb = train_step(model, opt, cfg, x_tr[idx], part.train.labels[idx], part.train.domains[idx], augment)
            for k in sums:
                sums[k] += getattr(lb, k)
            steps += 1
        val_acc, _, _ = evaluate_model(model, x_va, part.val.labels)
        row = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}, "val_acc": val_acc}
        history.append(row)
        if verbose:
            log.info("epoch %d %s", epoch, row)
        if val_acc > best[0]:
            best = (val_acc, epoch)
            best_state, best_adam = model.state_dict(), opt.state_dict()

    model.load_state_dict(best_state)
    test_acc, test_f1, cm = evaluate_model(model, x_te, part.test.labels)
    return RunResult(
        config=cfg.to_dict(), history=history, best_epoch=best[1], best_val_acc=best[0], test_acc=test_acc,
        test_f1=test_f1, confusion=cm, wall_clock=time.perf_counter() - t0, state=best_state, adam_state=best_adam,
        norm_mean=mean, norm_std=std, arch=arch.to_dict(),
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_run_checkpoint(result: RunResult, path) -> None:
    extra = {
        "arch": result.arch,
        "norm_mean": result.norm_mean.tolist(),
        "norm_std": result.norm_std.tolist(),
        "train_config": result.config,
    }
    nn.save_checkpoint(path, result.state, result.adam_state, extra)


def load_model(path) -> tuple[TwoBranchNet, np.ndarray, np.ndarray]:
    """Rebuild a model from a checkpoint; missing non-causal entries are tolerated."""
    arrays, _, extra = nn.load_checkpoint(path)
    arch = ArchConfig(**extra["arch"])
    model = build(arch, 0)
    model.load_state_dict(arrays, strict=False)
    missing = [k for k in model.inference_parameters() if k not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks inference parameters {missing}")
    return model, np.asarray(extra["norm_mean"]), np.asarray(extra["norm_std"])


def evaluate(checkpoint, test: WindowedDataset) -> tuple[float, float, np.ndarray]:
    model, mean, std = load_model(checkpoint)
    if test.num_channels != model.config.in_channels or test.width != model.config.width:
        raise ValueError(
            f"checkpoint expects [{model.config.in_channels} x {model.config.width}] windows, "
            f"got [{test.num_channels} x {test.width}]"
        )
    return evaluate_model(model, standardize(test.windows, mean, std), test.labels)


def export_embeddings(checkpoint, split: WindowedDataset, out_dir) -> np.ndarray:
    """Write causal-branch features as embeddings.f32 + meta.json + labels.csv."""
    model, mean, std = load_model(checkpoint)
    x = standardize(split.windows, mean, std)
    model.eval()
    with nn.no_grad():
        feats = [model.causal_features(model.base_features(x[s : s + 512])).data for s in range(0, len(x), 512)]
    emb = np.concatenate(feats) if feats else np.zeros((0, model.config.feature_dim))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embeddings.f32").write_bytes(np.ascontiguousarray(emb, dtype="<f4").tobytes())
    (out / "meta.json").write_text(json.dumps({"schema_version": 1, "dims": {"N": emb.shape[0], "D": emb.shape[1]}},
                                              indent=2))
    with open(out / "labels.csv", "w") as fh:
        fh.write("index,activity,domain\n")
        for i, (y, d) in enumerate(zip(split.labels, split.domains)):
            fh.write(f"{i},{y},{d}\n")
    return emb


# ---------------------------------------------------------------------------
# leave-one-domain-out, ablations, seeds
# ---------------------------------------------------------------------------


@dataclass
class LodoTable:
    variant: str
    seed: int
    rows: list[RunResult]

    @property
    def avg_acc(self) -> float:
        return float(np.mean([r.test_acc for r in self.rows]))

    @property
    def avg_f1(self) -> float:
        return float(np.mean([r.test_f1 for r in self.rows]))

    def grid(self) -> list[dict]:
        out = [{"target": r.config["target"], "acc": r.test_acc, "f1": r.test_f1} for r in self.rows]
        out.append({"target": "AVG", "acc": self.avg_acc, "f1": self.avg_f1})
        return out

    def format(self) -> str:
        lines = [f"{'target':>8} {'acc':>7} {'macroF1':>8}"]
        for row in self.grid():
            lines.append(f"{row['target']!s:>8} {100 * row['acc']:7.2f} {100 * row['f1']:8.2f}")
        return "\n".join(lines)


def lodo_run(cfg: TrainConfig, ds: WindowedDataset, targets: list[int] | None = None) -> LodoTable:
    if ds.num_domains < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    rows = []
    for t in targets if targets is not None else range(ds.num_domains):
        run_cfg = replace(cfg, target=t)
        part = lodo_partition(ds, t, cfg.val_fraction, seed=cfg.seed)
        rows.append(train(run_cfg, part))
    return LodoTable(cfg.variant, cfg.seed, rows)


def one_to_one_run(cfg: TrainConfig, ds: WindowedDataset, pairs) -> LodoTable:
    """Single-source transfer: train on subject b, test on subject a for each (a, b)."""
    rows = []
    for test_dom, train_dom in pairs:
        part = lodo_partition(ds, test_dom, cfg.val_fraction, seed=cfg.seed, source_domains=[train_dom])
        rows.append(train(replace(cfg, target=test_dom), part))
    return LodoTable(cfg.variant, cfg.seed, rows)


def ablate(cfg: TrainConfig, ds: WindowedDataset, variants, seeds=(0,), targets=None) -> dict[str, list[LodoTable]]:
    table = {**VARIANTS, **BASELINES}
    unknown = [v for v in variants if v not in table]
    if unknown:
        raise ValueError(f"unknown ablation variant(s) {unknown}; choose from {sorted(table)}")
    return {v: [lodo_run(replace(apply_variant(cfg, v), seed=s), ds, targets) for s in seeds] for v in variants}


def summarize_seeds(tables: list[LodoTable]) -> dict:
    accs = [t.avg_acc for t in tables]
    f1s = [t.avg_f1 for t in tables]
    out = {"n": len(tables), "acc_values": accs, "f1_values": f1s}
    if len(tables) >= 2:
        out["acc_mean"], out["acc_ci95"] = aggregate_seeds(accs)
        out["f1_mean"], out["f1_ci95"] = aggregate_seeds(f1s)
    else:
        out["acc_mean"], out["f1_mean"] = accs[0], f1s[0]
    return out
