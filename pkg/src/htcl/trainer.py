"""Training, classifier fine-tuning on a class-balanced feature set, evaluation, ablations."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import (BalancedIndex, ClassStats, SceneGraph, balanced_resample, class_stats,
                      split_validation)
from .metrics import MetricsReport, PredictedTriplet, evaluate_ranked, rank_triplets
from .model import BRANCH_MODES, TASKS, Dims, HTCLNet, LossSwitches, collate, compute_losses
from .numeric import Adam, ParamStore, cross_entropy, make_generator, read_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_con", "l_hc", "l_rw", "l_hpc", "l_obj", "l_total")
CLASSIFIERS = {"HPC": "head.hpc", "TPC": "head.tpc"}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: HTCLNet):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    beta: float = 0.9999
    normalize_weights: bool = True
    lam: float = 1e-4
    tau: float = 0.1
    p_m: float = 0.1
    con_reduction: str = "mean"
    h: int = 10
    tpfe_layers: int = 4
    dims: Dims = field(default_factory=Dims)
    T: int = 5000
    ft_epochs: int = 3
    ft_lr: float = 1e-3
    ft_batch_size: int = 64
    val_fraction: float = 0.1
    task: str = "predcls"
    Ks: tuple[int, ...] = (20, 50)
    graph_constraint: bool = True
    use_tpfe: bool = True
    use_tpc_ft: bool = True
    use_l_ssl: bool = True
    use_l_con: bool = True
    use_l_hc: bool = True
    use_l_hpc: bool = True
    use_l_rw: bool = True
    branch_mode: str = "full"

    def validate(self) -> "TrainConfig":
        positive_int = ("epochs", "batch_size", "h", "T", "ft_batch_size")
        for name in positive_int:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "epochs" else 1):
                raise ConfigError(f"{name}: must be a {'non-negative' if name == 'epochs' else 'positive'} integer, got {v!r}")
        if not isinstance(self.ft_epochs, int) or self.ft_epochs < 0:
            raise ConfigError(f"ft_epochs: must be a non-negative integer, got {self.ft_epochs!r}")
        if not isinstance(self.tpfe_layers, int) or self.tpfe_layers < 0:
            raise ConfigError(f"tpfe_layers: must be a non-negative integer, got {self.tpfe_layers!r}")
        for name in ("lr", "ft_lr", "lam"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)!r}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta: must be in (0, 1), got {self.beta!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau: must be > 0, got {self.tau!r}")
        if not 0 <= self.p_m <= 1:
            raise ConfigError(f"p_m: must be in [0, 1], got {self.p_m!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction: must be in [0, 1), got {self.val_fraction!r}")
        if self.con_reduction not in ("sum", "mean"):
            raise ConfigError(f"con_reduction: expected 'sum' or 'mean', got {self.con_reduction!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.branch_mode not in BRANCH_MODES:
            raise ConfigError(f"branch_mode: expected one of {BRANCH_MODES}, got {self.branch_mode!r}")
        if not self.Ks or any(int(k) < 0 for k in self.Ks):
            raise ConfigError(f"Ks: need non-negative integers, got {self.Ks!r}")
        for f in asdict(self.dims):
            if getattr(self.dims, f) < 1:
                raise ConfigError(f"dims.{f}: must be >= 1")
        if self.dims.d_model % self.dims.heads or self.dims.d_e % self.dims.heads:
            raise ConfigError("dims.heads: must divide dims.d_model and dims.d_e")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["Ks"] = list(self.Ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"{key}: unknown config field")
        d = dict(d)
        if "dims" in d:
            dims = d["dims"]
            if not isinstance(dims, dict):
                raise ConfigError("dims: expected an object")
            dnames = {f.name for f in fields(Dims)}
            for key in dims:
                if key not in dnames:
                    raise ConfigError(f"dims.{key}: unknown field")
            d["dims"] = Dims(**dims)
        if "Ks" in d:
            d["Ks"] = tuple(int(k) for k in d["Ks"])
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"$: invalid JSON in {path} ({e})") from None
        return cls.from_dict(doc)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        if isinstance(d["dims"], Dims):
            d["dims"] = asdict(d["dims"])
        return TrainConfig.from_dict(d)

    @property
    def switches(self) -> LossSwitches:
        return LossSwitches(self.branch_mode, self.use_l_ssl, self.use_l_con, self.use_l_hc,
                            self.use_l_hpc, self.use_l_rw)


@dataclass
class TrainResult:
    net: HTCLNet
    stats: ClassStats
    config: TrainConfig
    loss_curve: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    val_reports: list[MetricsReport] = field(default_factory=list)

    def write_loss_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for row in self.loss_curve:
                w.writerow({k: (row[k] if k == "step" else repr(row[k])) for k in LOSS_COLUMNS})


def loss_weights(stats: ClassStats, normalize: bool = True) -> np.ndarray:
    """Effective-number weights, optionally rescaled so they sum to the number of classes."""
    w = stats.weights
    return w * (len(w) / w.sum()) if normalize else w.copy()


def build_net(config: TrainConfig, stats: ClassStats, N_obj: int, d_v: int) -> HTCLNet:
    net = HTCLNet(stats.C, N_obj, d_v, config.dims, config.tpfe_layers, seed=config.seed)
    net.head.set_gate(stats.counts)
    net.centers.set_head(stats.head_set.tolist())
    return net


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _mean_loss(net, scenes, weights, config, generator) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for idx in _batches(len(scenes), config.batch_size, None):
            batch = collate([scenes[i] for i in idx], net.dtype)
            bundle, _ = compute_losses(net, batch, weights, config.switches, config.lam,
                                       config.tau, config.p_m, generator, config.task,
                                       config.use_tpfe, config.con_reduction)
            total += float(bundle.l_total)
            n += 1
    return total / max(n, 1)


def train(config: TrainConfig, scenes: list[SceneGraph], C: int, N_obj: int, d_v: int,
          validation: list[SceneGraph] | None = None, evaluate_each_epoch: bool = True,
          net: HTCLNet | None = None) -> TrainResult:
    """Train the network end to end on ``scenes``.

    ``validation`` defaults to ``val_fraction`` of ``scenes`` held out by seed.
    ``epoch_losses[0]`` is the mean training loss at initialisation and
    ``epoch_losses[e]`` the running mean over epoch ``e``.
    """
    config.validate()
    if validation is None and config.val_fraction > 0:
        scenes, validation = split_validation(scenes, config.val_fraction, config.seed)
    stats = class_stats(scenes, C, config.beta, config.h)
    if net is None:
        net = build_net(config, stats, N_obj, d_v)
    weights = torch.as_tensor(loss_weights(stats, config.normalize_weights))
    result = TrainResult(net, stats, config)
    if config.epochs == 0:
        return result

    store = ParamStore(net)
    opt = Adam(store, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    aug_gen = make_generator(config.seed + 1)
    result.epoch_losses.append(_mean_loss(net, scenes, weights, config, make_generator(config.seed + 2)))
    last_good = copy.deepcopy(net)
    step = 0
    for epoch in range(1, config.epochs + 1):
        net.train()
        running = []
        for idx in _batches(len(scenes), config.batch_size, rng):
            batch = collate([scenes[i] for i in idx], net.dtype)
            bundle, out = compute_losses(net, batch, weights, config.switches, config.lam,
                                         config.tau, config.p_m, aug_gen, config.task,
                                         config.use_tpfe, config.con_reduction)
            loss = bundle.l_total
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})", last_good)
            store.backward(loss)
            opt.step()
            if out.r_t is not None:
                lab = batch.labelled
                net.centers.update(out.r_t[lab], batch.pair_label[lab])
            step += 1
            row = {"step": step, **bundle.as_floats()}
            result.loss_curve.append(row)
            running.append(row["l_total"])
        last_good = copy.deepcopy(net)
        result.epoch_losses.append(float(np.mean(running)) if running else math.nan)
        if evaluate_each_epoch and validation:
            rep = evaluate(net, validation, config)
            result.val_reports.append(rep)
            k = config.Ks[0]
            logger.info("epoch %d loss %.4f val R@%d %.4f mR@%d %.4f", epoch,
                        result.epoch_losses[-1], k, rep.R[k], k, rep.mR[k])
    net.eval()
    return result


# ---------------------------------------------------------------------------
# evaluation

def predict_ranked(net: HTCLNet, scenes: list[SceneGraph], config: TrainConfig,
                   chunk: int = 64) -> list[list[PredictedTriplet]]:
    """Scored candidate triplets per scene, ranked."""
    out = []
    for start in range(0, len(scenes), chunk):
        part = scenes[start:start + chunk]
        batch = collate(part, net.dtype)
        scores = net.scores(batch, config.branch_mode, config.task, config.use_tpfe).numpy()
        img = batch.pair_image.numpy()
        for b in range(len(part)):
            sel = img == b
            out.append(rank_triplets(scores[sel], [tuple(p) for p in batch.pair_local[sel]],
                                     config.graph_constraint))
    return out


def evaluate(net: HTCLNet, scenes: list[SceneGraph], config: TrainConfig) -> MetricsReport:
    ranked = predict_ranked(net, scenes, config)
    return evaluate_ranked(ranked, [s.relations for s in scenes], net.C, config.Ks,
                           config.task, config.graph_constraint)


# ---------------------------------------------------------------------------
# classifier fine-tuning

@dataclass
class FeatureCache:
    """Frozen predicate features of the annotated relations, keyed by (image_id, relation index)."""

    which: str
    features: torch.Tensor
    labels: torch.Tensor
    keys: dict[tuple[int, int], int]

    def gather(self, refs) -> tuple[torch.Tensor, torch.Tensor]:
        rows = torch.as_tensor([self.keys[(int(i), int(k))] for i, k in refs], dtype=torch.long)
        return self.features[rows], self.labels[rows]


def extract_features(net: HTCLNet, scenes: list[SceneGraph], which: str, config: TrainConfig,
                     chunk: int = 64) -> FeatureCache:
    """Features fed to the chosen classifier: r for HPC, r_t for TPC."""
    if which not in CLASSIFIERS:
        raise ValueError(f"which: expected one of {tuple(CLASSIFIERS)}, got {which!r}")
    if which == "TPC" and config.branch_mode == "hp_only":
        raise ValueError("TPC fine-tuning requested but branch_mode is hp_only")
    feats, labels, keys = [], [], {}
    net.eval()
    mode = "hp_only" if which == "HPC" else config.branch_mode
    with torch.no_grad():
        for start in range(0, len(scenes), chunk):
            part = scenes[start:start + chunk]
            batch = collate(part, net.dtype)
            out = net(batch, mode, config.task, config.use_tpfe)
            x = out.r if which == "HPC" else out.r_t
            lab = batch.labelled.numpy()
            img = batch.pair_image.numpy()
            for p in np.nonzero(lab)[0]:
                keys[(part[img[p]].image_id, int(batch.pair_rel[p]))] = len(keys)
            feats.append(x[batch.labelled])
            labels.append(batch.pair_label[batch.labelled])
    return FeatureCache(which, torch.cat(feats), torch.cat(labels), keys)


def finetune_classifier(net: HTCLNet, which: str, balanced: BalancedIndex, cache: FeatureCache,
                        epochs: int = 3, lr: float = 1e-3, batch_size: int = 64,
                        seed: int = 0) -> HTCLNet:
    """Re-fit one linear classifier with plain cross-entropy on the balanced cache.

    Returns a copy of ``net``; only ``head.hpc.*`` or ``head.tpc.*`` differ.
    """
    if which not in CLASSIFIERS:
        raise ValueError(f"which: expected one of {tuple(CLASSIFIERS)}, got {which!r}")
    if cache.which != which:
        raise ValueError(f"feature cache holds {cache.which} inputs, not {which}")
    tuned = copy.deepcopy(net)
    clf = tuned.head.hpc if which == "HPC" else tuned.head.tpc
    prefix = CLASSIFIERS[which]
    names = [n for n, _ in tuned.named_parameters() if n.startswith(prefix + ".")]
    store = ParamStore(tuned)
    opt = Adam(store, lr=lr, only=names)
    refs = balanced.entries[:, 1:]
    X, y = cache.gather(refs)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for idx in _batches(len(y), batch_size, rng):
            idx_t = torch.as_tensor(idx)
            loss = cross_entropy(clf(X[idx_t]), y[idx_t])
            store.backward(loss)
            opt.step()
    tuned.eval()
    return tuned


# ---------------------------------------------------------------------------
# checkpoints

def save(path: str | Path, net: HTCLNet, config: TrainConfig, stats: ClassStats,
         extra: dict | None = None) -> None:
    meta = {"arch": net.arch(), "config": config.to_dict(), "stats": stats.to_json(),
            **(extra or {})}
    save_checkpoint(path, net, meta)


def load(path: str | Path) -> tuple[HTCLNet, TrainConfig, ClassStats, dict]:
    meta, state = read_checkpoint(path)
    arch = meta["arch"]
    net = HTCLNet(arch["C"], arch["N_obj"], arch["d_v"], Dims(**arch["dims"]), arch["tpfe_layers"])
    net.load_state_dict(state)
    net.eval()
    return net, TrainConfig.from_dict(meta["config"]), ClassStats.from_json(meta["stats"]), meta


# ---------------------------------------------------------------------------
# pipelines and ablations

@dataclass
class VariantResult:
    name: str
    config: TrainConfig
    net: HTCLNet
    stats: ClassStats
    report: MetricsReport
    train_result: TrainResult | None = None


def fit_pipeline(config: TrainConfig, scenes: list[SceneGraph], C: int, N_obj: int, d_v: int,
                 finetune: str | None = "auto", trained: TrainResult | None = None,
                 evaluate_each_epoch: bool = False) -> tuple[HTCLNet, TrainResult]:
    """Train, then optionally fine-tune one classifier on a balanced resample.

    ``finetune="auto"`` fine-tunes TPC when ``use_tpc_ft`` is set and the model
    has a tail branch; pass "HPC", "TPC" or None to choose explicitly.
    """
    if finetune not in ("auto", "HPC", "TPC", None):
        raise ValueError(f"finetune: expected 'auto', 'HPC', 'TPC' or None, got {finetune!r}")
    result = trained or train(config, scenes, C, N_obj, d_v, evaluate_each_epoch=evaluate_each_epoch)
    if finetune == "auto":
        finetune = "TPC" if config.use_tpc_ft and config.branch_mode != "hp_only" else None
    net = result.net
    if finetune:
        train_scenes = scenes
        if config.val_fraction > 0:
            train_scenes, _ = split_validation(scenes, config.val_fraction, config.seed)
        balanced = balanced_resample(train_scenes, config.T, config.seed, C)
        cache = extract_features(net, train_scenes, finetune, config)
        net = finetune_classifier(net, finetune, balanced, cache, config.ft_epochs,
                                  config.ft_lr, config.ft_batch_size, config.seed)
    return net, result


def ablation_grid(base: TrainConfig) -> list[tuple[str, TrainConfig, str | None]]:
    """(row name, config, classifier to fine-tune) for every ablation row."""
    hp = base.replace(branch_mode="hp_only", use_tpc_ft=False)
    full = base.replace(branch_mode="full", use_tpc_ft=True)
    return [
        ("HP-Branch", hp, None),
        ("HPC-ft", hp, "HPC"),
        ("TPFR-Branch", full.replace(branch_mode="tpfr_only"), "TPC"),
        ("w/o TPFE", full.replace(use_tpfe=False), "TPC"),
        ("w/o TPC-ft", full.replace(use_tpc_ft=False), None),
        ("HTCL", full, "TPC"),
        ("w/o L_SSL", full.replace(use_l_ssl=False), "TPC"),
        ("w/o L_Con", full.replace(use_l_con=False), "TPC"),
        ("w/o L_HC", full.replace(use_l_hc=False), "TPC"),
        ("w/o L_HPC", full.replace(use_l_hpc=False), "TPC"),
        ("w/o L_RW", full.replace(use_l_rw=False), "TPC"),
    ]


def _training_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    for k in ("use_tpc_ft", "ft_epochs", "ft_lr", "ft_batch_size", "T"):
        d.pop(k)
    return json.dumps(d, sort_keys=True)


def run_ablation(base: TrainConfig, train_scenes: list[SceneGraph], test_scenes: list[SceneGraph],
                 C: int, N_obj: int, d_v: int, only: list[str] | None = None) -> list[VariantResult]:
    """One evaluated row per ablation variant; variants that differ only in fine-tuning share a training run."""
    trained: dict[str, TrainResult] = {}
    rows = []
    for name, cfg, ft in ablation_grid(base):
        if only is not None and name not in only:
            continue
        key = _training_key(cfg)
        if key not in trained:
            logger.info("training %s", name)
            trained[key] = train(cfg, train_scenes, C, N_obj, d_v, evaluate_each_epoch=False)
        net, result = fit_pipeline(cfg, train_scenes, C, N_obj, d_v, finetune=ft,
                                   trained=trained[key])
        report = evaluate(net, test_scenes, cfg)
        rows.append(VariantResult(name, cfg, net, result.stats, report, result))
    return rows


def ablation_table(rows: list[VariantResult], K: int) -> list[dict]:
    return [{"variant": r.name, f"R@{K}": r.report.R[K], f"mR@{K}": r.report.mR[K],
             f"F@{K}": r.report.F[K], f"M@{K}": r.report.M[K]} for r in rows]
