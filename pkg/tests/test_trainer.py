import json

import numpy as np
import pytest
import torch

from htcl import trainer as tr
from htcl.dataset import GenConfig, balanced_resample, class_stats, generate, split_validation
from htcl.model import Dims
from htcl.trainer import (ConfigError, TrainConfig, TrainingDiverged, ablation_grid, build_net,
                          evaluate, extract_features, finetune_classifier, fit_pipeline, load,
                          run_ablation, save, train)

DIMS = Dims(d_pos=4, d_word=6, d_f=8, d_e=8, d_r=8, d_model=8, d_ff=12, heads=2, d_proj=6)


def tiny_config(**kw):
    d = dict(seed=1, epochs=2, h=3, T=30, tpfe_layers=1, dims=DIMS.__dict__, Ks=[5, 10])
    d.update(kw)
    return TrainConfig.from_dict(d)


def _dims(cfg):
    return cfg.C, cfg.N_obj, cfg.d_v


def state(net):
    return {k: v.clone() for k, v in net.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def tiny_run(tiny_data):
    gen, data = tiny_data
    cfg = tiny_config()
    return cfg, train(cfg, data["train"][:50], *_dims(gen))


# -- train ---------------------------------------------------------------------------------------

def test_zero_epochs_returns_initialisation(tiny_data):
    gen, data = tiny_data
    cfg = tiny_config(epochs=0)
    res = train(cfg, data["train"], *_dims(gen))
    train_part, _ = split_validation(data["train"], cfg.val_fraction, cfg.seed)
    init = build_net(cfg, class_stats(train_part, gen.C, cfg.beta, cfg.h), gen.N_obj, gen.d_v)
    assert same_state(state(res.net), state(init))
    assert res.loss_curve == []


def test_tiny_run_reduces_training_loss(tiny_run):
    _, res = tiny_run
    assert len(res.epoch_losses) == 3
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert len(res.val_reports) == 2
    assert all(np.isfinite(row["l_total"]) for row in res.loss_curve)


def test_same_seed_gives_identical_checkpoints(tiny_data, tiny_run, tmp_path):
    gen, data = tiny_data
    cfg, first = tiny_run
    second = train(cfg, data["train"][:50], *_dims(gen))
    assert same_state(state(first.net), state(second.net))
    save(tmp_path / "a.json", first.net, cfg, first.stats)
    save(tmp_path / "b.json", second.net, cfg, second.stats)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_different_seed_differs(tiny_data, tiny_run):
    gen, data = tiny_data
    cfg, first = tiny_run
    other = train(cfg.replace(seed=2), data["train"][:50], *_dims(gen))
    assert not same_state(state(first.net), state(other.net))


def test_loss_curve_csv(tiny_run, tmp_path):
    _, res = tiny_run
    res.write_loss_curve(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,l_con,l_hc,l_rw,l_hpc,l_obj,l_total"
    assert len(lines) == 1 + len(res.loss_curve)


def test_divergence_raises_with_last_good(tiny_data, monkeypatch):
    gen, data = tiny_data
    scenes = data["train"][:24]
    cfg = tiny_config(epochs=2, val_fraction=0.0)
    one_epoch = train(cfg.replace(epochs=1), scenes, *_dims(gen))
    real = tr.compute_losses
    calls = {"n": 0}
    steps_per_epoch = -(-len(scenes) // cfg.batch_size)

    def poisoned(*a, **kw):
        bundle, out = real(*a, **kw)
        calls["n"] += 1
        if calls["n"] > 2 * steps_per_epoch:     # initial loss pass, then epoch 1
            bundle.l_rw = bundle.l_rw * float("nan")
        return bundle, out

    monkeypatch.setattr(tr, "compute_losses", poisoned)
    with pytest.raises(TrainingDiverged, match="non-finite") as info:
        train(cfg, scenes, *_dims(gen))
    assert same_state(state(info.value.last_good), state(one_epoch.net))


# -- config ----------------------------------------------------------------------------------------

@pytest.mark.parametrize("bad, field", [
    ({"epochs": -1}, "epochs"), ({"lr": -1.0}, "lr"), ({"beta": 1.0}, "beta"),
    ({"tau": 0}, "tau"), ({"p_m": 1.5}, "p_m"), ({"branch_mode": "both"}, "branch_mode"),
    ({"task": "sgdet"}, "task"), ({"dims": {"heads": 3}}, "dims.heads"),
    ({"dims": {"width": 3}}, "dims.width"), ({"bogus": 1}, "bogus"),
])
def test_config_errors_name_the_field(bad, field):
    with pytest.raises(ConfigError, match=f"^{field}:"):
        TrainConfig.from_dict(bad)


def test_config_json_round_trip(tmp_path):
    cfg = tiny_config(lam=2e-4, branch_mode="tpfr_only")
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(tmp_path / "c.json") == cfg
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        TrainConfig.from_json(tmp_path / "bad.json")


# -- fine-tuning -----------------------------------------------------------------------------------

def _balanced_setup(tiny_data, tiny_run, which="HPC"):
    gen, data = tiny_data
    cfg, res = tiny_run
    scenes = data["train"][:50]
    bal = balanced_resample(scenes, cfg.T, cfg.seed, gen.C)
    cache = extract_features(res.net, scenes, which, cfg)
    return cfg, res, bal, cache


def test_lr_zero_leaves_checkpoint_unchanged(tiny_data, tiny_run):
    cfg, res, bal, cache = _balanced_setup(tiny_data, tiny_run)
    tuned = finetune_classifier(res.net, "HPC", bal, cache, epochs=2, lr=0.0)
    assert same_state(state(tuned), state(res.net))


@pytest.mark.parametrize("which", ["HPC", "TPC"])
def test_freeze_contract(tiny_data, tiny_run, which):
    cfg, res, bal, cache = _balanced_setup(tiny_data, tiny_run, which)
    before = state(res.net)
    tuned = finetune_classifier(res.net, which, bal, cache, epochs=1, lr=1e-2)
    after = state(tuned)
    assert same_state(before, state(res.net))           # the input net is not touched
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    prefix = "head.hpc." if which == "HPC" else "head.tpc."
    assert changed and all(k.startswith(prefix) for k in changed)


def test_tpc_finetune_on_head_only_model_errors(tiny_data):
    gen, data = tiny_data
    cfg = tiny_config(epochs=0, branch_mode="hp_only")
    res = train(cfg, data["train"][:20], *_dims(gen))
    with pytest.raises(ValueError, match="hp_only"):
        extract_features(res.net, data["train"][:20], "TPC", cfg)
    with pytest.raises(ValueError, match="hp_only"):
        fit_pipeline(cfg, data["train"][:20], *_dims(gen), finetune="TPC", trained=res)


def test_cache_mismatch_errors(tiny_data, tiny_run):
    cfg, res, bal, cache = _balanced_setup(tiny_data, tiny_run, "HPC")
    with pytest.raises(ValueError, match="cache"):
        finetune_classifier(res.net, "TPC", bal, cache)


def _balanced_accuracy(net, cache, C):
    with torch.no_grad():
        pred = net.head.hpc(cache.features).argmax(-1).numpy()
    y = cache.labels.numpy()
    return float(np.mean([np.mean(pred[y == c] == c) for c in range(C) if np.any(y == c)]))


def test_hpc_finetune_raises_balanced_accuracy():
    gen = GenConfig(num_images=400, num_test_images=200, C=6, N_obj=5, d_v=8, seed=5,
                    zipf_exponent=1.5, num_parents=3, max_objects=4)
    data = generate(gen)
    cfg = tiny_config(epochs=8, branch_mode="hp_only", use_tpc_ft=False, T=200,
                      ft_epochs=5, ft_lr=1e-2)
    res = train(cfg, data["train"], *_dims(gen), evaluate_each_epoch=False)
    held_out = extract_features(res.net, data["test"], "HPC", cfg)
    tuned, _ = fit_pipeline(cfg, data["train"], *_dims(gen), finetune="HPC", trained=res)
    assert _balanced_accuracy(tuned, held_out, gen.C) > _balanced_accuracy(res.net, held_out, gen.C)


# -- checkpoints, evaluation, ablation --------------------------------------------------------------

def test_checkpoint_round_trip_preserves_evaluation(tiny_data, tiny_run, tmp_path):
    gen, data = tiny_data
    cfg, res = tiny_run
    before = evaluate(res.net, data["test"], cfg)
    save(tmp_path / "m.json", res.net, cfg, res.stats, {"note": "x"})
    net, cfg2, stats2, meta = load(tmp_path / "m.json")
    assert cfg2 == cfg and meta["note"] == "x"
    assert np.array_equal(stats2.counts, res.stats.counts)
    assert evaluate(net, data["test"], cfg2) == before


def test_repeated_evaluation_is_identical(tiny_data, tiny_run):
    gen, data = tiny_data
    cfg, res = tiny_run
    assert evaluate(res.net, data["test"], cfg) == evaluate(res.net, data["test"], cfg)


def test_ablation_grid_has_eleven_rows():
    names = [n for n, _, _ in ablation_grid(tiny_config())]
    assert len(names) == 11 and len(set(names)) == 11
    assert names[:2] == ["HP-Branch", "HPC-ft"] and "HTCL" in names and "w/o L_RW" in names


def test_ablation_toggles_map_to_configs():
    rows = {n: (c, ft) for n, c, ft in ablation_grid(tiny_config())}
    assert rows["HP-Branch"][0].branch_mode == "hp_only" and rows["HP-Branch"][1] is None
    assert rows["HPC-ft"][1] == "HPC"
    assert rows["TPFR-Branch"][0].branch_mode == "tpfr_only"
    assert rows["w/o TPFE"][0].use_tpfe is False
    assert rows["w/o TPC-ft"][1] is None and rows["HTCL"][1] == "TPC"
    for name, flag in [("w/o L_SSL", "use_l_ssl"), ("w/o L_Con", "use_l_con"), ("w/o L_HC", "use_l_hc"),
                       ("w/o L_HPC", "use_l_hpc"), ("w/o L_RW", "use_l_rw")]:
        assert getattr(rows[name][0], flag) is False


@pytest.mark.slow
def test_full_ablation_grid_runs(tiny_data):
    gen, data = tiny_data
    rows = run_ablation(tiny_config(epochs=1), data["train"], data["test"], *_dims(gen))
    assert len(rows) == 11
    assert all(0 <= r.report.R[5] <= 1 for r in rows)
