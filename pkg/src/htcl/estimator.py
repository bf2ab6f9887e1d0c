"""scikit-learn style wrapper: ``fit`` on scene graphs, ``predict`` ranked triplets."""
from __future__ import annotations

from dataclasses import asdict, fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import SceneGraph, validate_scene
from .metrics import PredictedTriplet, evaluate_ranked
from .model import Dims, collate
from .trainer import TrainConfig, evaluate, fit_pipeline, predict_ranked

_CONFIG_FIELDS = [f.name for f in fields(TrainConfig)]


def check_scenes(X, C: int | None = None, N_obj: int | None = None,
                 d_v: int | None = None) -> tuple[list[SceneGraph], int, int]:
    """Validate a list of scenes and return it with the inferred (N_obj, d_v).

    Every scene is checked against the dataset invariants; dimensions must agree
    across scenes and with any explicitly given value.
    """
    if isinstance(X, SceneGraph):
        raise TypeError("X: expected a sequence of SceneGraph, got a single SceneGraph")
    X = list(X)
    if not X:
        raise ValueError("X: no scenes given")
    for i, sg in enumerate(X):
        if not isinstance(sg, SceneGraph):
            raise TypeError(f"X[{i}]: expected SceneGraph, got {type(sg).__name__}")
    dims = {sg.visual.shape[1] for sg in X}
    if len(dims) != 1:
        raise ValueError(f"X: inconsistent visual dims {sorted(dims)}")
    d_v_found = dims.pop()
    if d_v is not None and d_v != d_v_found:
        raise ValueError(f"X: visual dim {d_v_found} != expected {d_v}")
    if N_obj is None:
        N_obj = int(max(int(sg.classes.max()) for sg in X)) + 1
    if C is None:
        C = max((int(sg.relations[:, 2].max()) for sg in X if sg.num_relations), default=0) + 1
    for sg in X:
        validate_scene(sg, C, N_obj, d_v_found)
    return X, N_obj, d_v_found


class HTCLRelationClassifier(BaseEstimator):
    """Predicate classifier for scene graphs with head-prefer and tail-prefer branches.

    Hyperparameters mirror :class:`htcl.trainer.TrainConfig`; ``dims`` takes a
    dict of layer sizes. ``n_classes`` and ``n_object_classes`` are inferred
    from the training scenes when left as ``None``. ``finetune`` selects the
    classifier re-fitted on a class-balanced resample after training: "auto"
    follows ``use_tpc_ft``, or pass "HPC", "TPC" or None.
    """

    def __init__(self, n_classes=None, n_object_classes=None, finetune="auto", seed=0,
                 epochs=8, batch_size=8, lr=1e-3, beta=0.9999, normalize_weights=True,
                 lam=1e-4, tau=0.1, p_m=0.1, con_reduction="mean", h=10, tpfe_layers=4,
                 dims=None, T=5000, ft_epochs=3, ft_lr=1e-3, ft_batch_size=64,
                 val_fraction=0.1, task="predcls", Ks=(20, 50), graph_constraint=True,
                 use_tpfe=True, use_tpc_ft=True, use_l_ssl=True, use_l_con=True,
                 use_l_hc=True, use_l_hpc=True, use_l_rw=True, branch_mode="full"):
        self.n_classes = n_classes
        self.n_object_classes = n_object_classes
        self.finetune = finetune
        self.seed = seed
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta = beta
        self.normalize_weights = normalize_weights
        self.lam = lam
        self.tau = tau
        self.p_m = p_m
        self.con_reduction = con_reduction
        self.h = h
        self.tpfe_layers = tpfe_layers
        self.dims = dims
        self.T = T
        self.ft_epochs = ft_epochs
        self.ft_lr = ft_lr
        self.ft_batch_size = ft_batch_size
        self.val_fraction = val_fraction
        self.task = task
        self.Ks = Ks
        self.graph_constraint = graph_constraint
        self.use_tpfe = use_tpfe
        self.use_tpc_ft = use_tpc_ft
        self.use_l_ssl = use_l_ssl
        self.use_l_con = use_l_con
        self.use_l_hc = use_l_hc
        self.use_l_hpc = use_l_hpc
        self.use_l_rw = use_l_rw
        self.branch_mode = branch_mode

    def _config(self) -> TrainConfig:
        d = {name: getattr(self, name) for name in _CONFIG_FIELDS if name != "dims"}
        d["dims"] = asdict(Dims()) if self.dims is None else dict(self.dims)
        d["Ks"] = list(self.Ks)
        return TrainConfig.from_dict(d)

    @classmethod
    def from_config(cls, config: TrainConfig, **kw) -> "HTCLRelationClassifier":
        d = config.to_dict()
        d["Ks"] = tuple(d["Ks"])
        return cls(**d, **kw)

    def fit(self, X, y=None):
        """Train on scenes ``X``; labels come from the scenes' relations, so ``y`` is ignored."""
        config = self._config()
        X, N_obj, d_v = check_scenes(X, self.n_classes, self.n_object_classes)
        C = self.n_classes
        if C is None:
            C = max((int(sg.relations[:, 2].max()) for sg in X if sg.num_relations), default=0) + 1
        if C < 2:
            raise ValueError(f"n_classes: need at least 2 predicate classes, got {C}")
        if config.h > C:
            raise ValueError(f"h: {config.h} exceeds the number of predicate classes {C}")
        net, result = fit_pipeline(config, X, C, N_obj, d_v, finetune=self.finetune)
        self.config_ = config
        self.net_ = net
        self.stats_ = result.stats
        self.loss_curve_ = result.loss_curve
        self.n_classes_ = C
        self.n_object_classes_ = N_obj
        self.n_features_in_ = d_v
        self.gate_ = net.head.gate.detach().numpy().copy()
        return self

    def _check(self, X) -> list[SceneGraph]:
        check_is_fitted(self, "net_")
        X, _, _ = check_scenes(X, self.n_classes_, self.n_object_classes_, self.n_features_in_)
        return X

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per scene, a (pairs, C) array of predicate probabilities.

        Rows follow the ordered object pairs ``(s, o)``, ``s != o``, in
        lexicographic order.
        """
        X = self._check(X)
        batch = collate(X, self.net_.dtype)
        scores = self.net_.scores(batch, self.config_.branch_mode, self.config_.task,
                                  self.config_.use_tpfe).numpy()
        img = batch.pair_image.numpy()
        return [scores[img == b] for b in range(len(X))]

    def predict(self, X) -> list[list[PredictedTriplet]]:
        """Ranked ``PredictedTriplet`` lists, one per scene."""
        X = self._check(X)
        return predict_ranked(self.net_, X, self.config_)

    def evaluate(self, X):
        X = self._check(X)
        return evaluate(self.net_, X, self.config_)

    def score(self, X, y=None) -> float:
        """F@K at the first configured K (harmonic mean of R@K and mR@K)."""
        X = self._check(X)
        ranked = predict_ranked(self.net_, X, self.config_)
        k = self.config_.Ks[0]
        return evaluate_ranked(ranked, [s.relations for s in X], self.n_classes_, (k,)).F[k]
