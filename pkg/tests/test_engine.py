import dataclasses

import numpy as np
import pytest
import torch
import torch.nn as nn

import osad.engine as engine
from osad.config import load_config
from osad.data import load_folds, read_image, sample_episode
from osad.engine import (
    Checkpoint,
    View,
    evaluate,
    load_checkpoint,
    lr_at_epoch,
    predict,
    prepare_episode,
    prepare_support,
    save_checkpoint,
    sweep,
    sweep_config,
    train,
    write_predictions,
)
from osad.errors import ConfigError, DivergenceError, InsufficientQueriesError, UnwritablePathError
from osad.model import OSADNet


def quick(synth_index, tmp_path, **over):
    settings = {"dataset": str(synth_index.root), "out": str(tmp_path / "run"), "max_steps": "3",
                "batch_size": "2", "eval.episodes_per_category": "2"}
    settings.update({k: str(v) for k, v in over.items()})
    return load_config("desk", settings)


@pytest.fixture(scope="module")
def trained(synth_index, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg = quick(synth_index, out)
    return cfg, train(cfg, synth_index)


def test_lr_halves_after_decay_epoch():
    assert lr_at_epoch(16, 1e-3, 15) == lr_at_epoch(14, 1e-3, 15) * 0.5
    assert lr_at_epoch(15, 1e-3, 15) == 1e-3


def test_lr_schedule_applied_in_training(synth_index, tmp_path):
    cfg = quick(synth_index, tmp_path, max_steps=0, epochs=3, lr_decay_epoch=1, batch_size=8, queries=5)
    res = train(cfg, synth_index, write=False)
    lrs = {row["epoch"]: row["lr"] for row in res.log}
    assert lrs[1] == cfg.lr and lrs[2] == lrs[3] == cfg.lr * 0.5
    # 60 train queries / N=5 -> 12 episodes -> 2 steps per epoch at batch 8
    assert len(res.log) == 6


def test_training_writes_artifacts(trained):
    cfg, res = trained
    out = engine.Path(cfg.out)
    assert (out / "last.safetensors").is_file() and (out / "train_log.csv").is_file()
    assert (out / "loss_curve.png").stat().st_size > 0
    assert len(res.losses) == 3 and all(np.isfinite(res.losses))


def test_same_seed_identical_loss_curves(synth_index, tmp_path):
    cfg = quick(synth_index, tmp_path)
    a = train(cfg, synth_index, write=False).losses
    b = train(cfg, synth_index, write=False).losses
    assert a == b


def test_checkpoint_round_trip_bit_exact(trained, tmp_path):
    _, res = trained
    p1 = save_checkpoint(res.checkpoint, tmp_path / "a.safetensors")
    again = load_checkpoint(p1)
    p2 = save_checkpoint(again, tmp_path / "b.safetensors")
    assert p1.read_bytes() == p2.read_bytes()
    assert again.optimizer_state is not None and again.step == 3


def test_unknown_checkpoint_version(trained):
    bad = dataclasses.replace(trained[1].checkpoint, format_version=99)
    with pytest.raises(ConfigError, match="format"):
        Checkpoint.from_bytes(bad.to_bytes())
    with pytest.raises(ConfigError):
        Checkpoint.from_bytes(b"not a checkpoint")


def test_unwritable_checkpoint_path(trained, tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(UnwritablePathError):
        save_checkpoint(trained[1].checkpoint, blocker / "x.pt")


def test_divergence_aborts_with_last_good(synth_index, tmp_path, monkeypatch):
    cfg = quick(synth_index, tmp_path, max_steps=0, epochs=3, batch_size=8)
    real = engine.batch_loss
    calls = {"n": 0}

    def flaky(sides, masks):
        calls["n"] += 1
        loss = real(sides, masks)
        return loss * float("nan") if calls["n"] == 5 else loss

    monkeypatch.setattr(engine, "batch_loss", flaky)
    with pytest.raises(DivergenceError) as err:
        train(cfg, synth_index)
    assert err.value.last_checkpoint is not None
    assert load_checkpoint(err.value.last_checkpoint).step == 3


def test_oracle_evaluation_is_perfect(synth_index, tmp_path):
    cfg = quick(synth_index, tmp_path)
    rep = evaluate(cfg, index=synth_index, oracle=True, out_dir=tmp_path / "eval")
    means = rep.means()
    assert means["iou"] == 1.0 and means["mae"] == 0.0
    for name in ("metrics.csv", "metrics.json", "categories.csv", "curves.csv", "pr_curve.png", "f_curve.png"):
        assert (tmp_path / "eval" / name).is_file()


def test_every_test_category_is_covered(trained, synth_index):
    cfg, res = trained
    rep = evaluate(cfg, index=synth_index, model=res.model)
    fold = load_folds(synth_index.root / "folds", synth_index.registry)[0]
    assert {r["category"] for r in rep.rows} == set(fold.test)
    train_rep = evaluate(cfg, index=synth_index, model=res.model, split="train")
    assert {r["category"] for r in train_rep.rows} == set(fold.train)


def test_fold_mismatch_rejected(trained, synth_index):
    cfg, res = trained
    with pytest.raises(ConfigError, match="fold"):
        evaluate(cfg.replace(fold=2), res.checkpoint, index=synth_index)


def predict_inputs(synth_index):
    fold = load_folds(synth_index.root / "folds", synth_index.registry)[0]
    return sample_episode(synth_index, fold, "test", 3, np.random.default_rng(0))


def test_predict_counts_and_resolution(trained, synth_index, tmp_path):
    ep = predict_inputs(synth_index)
    queries = [ep.query_images[0], ep.query_images[1][:48, :40]]
    out = predict(ep.support_image, ep.annotation, queries, trained[1].checkpoint)
    assert len(out) == 2
    assert out[0][0].shape == (64, 64) and out[1][0].shape == (48, 40) == out[1][1].shape
    assert set(np.unique(out[1][1])) <= {0, 1}
    paths = write_predictions(out, ["a", "b"], tmp_path)
    assert sorted(p.name for p in paths) == ["a_mask.png", "a_prob.png", "b_mask.png", "b_prob.png"]
    assert read_image(tmp_path / "b_mask.png").shape[:2] == (48, 40)


def test_identical_queries_identical_masks(trained, synth_index):
    ep = predict_inputs(synth_index)
    q = ep.query_images[0]
    (p1, m1), (p2, m2) = predict(ep.support_image, ep.annotation, [q, q.copy()], trained[1].checkpoint)
    assert np.array_equal(p1, p2) and np.array_equal(m1, m2)


def test_predict_needs_two_queries(trained, synth_index):
    ep = predict_inputs(synth_index)
    with pytest.raises(InsufficientQueriesError):
        predict(ep.support_image, ep.annotation, [ep.query_images[0]], trained[1].checkpoint)


def test_augmented_episode_keeps_object_and_masks(synth_index, rng):
    cfg = load_config("desk")
    fold = load_folds(synth_index.root / "folds", synth_index.registry)[0]
    for _ in range(20):
        ep = sample_episode(synth_index, fold, "train", 3, rng)
        t = prepare_episode(ep, 64, rng, cfg)
        x0, y0, x1, y1 = t.object_box.tolist()
        assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1
        assert t.masks.shape == (3, 64, 64) and bool((t.masks.flatten(1).sum(1) > 0).all())
        assert set(torch.unique(t.masks).tolist()) <= {0.0, 1.0}


def symmetrize(model):
    """Mirror-symmetric kernels and an x-blind pose embedding make the network
    commute with horizontal flips, so any mismatch comes from the plumbing."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.copy_((m.weight + m.weight.flip(-1)) / 2)
        if model.apl is not None:
            model.apl.gcn.embed.weight[:, 0] = 0


def test_flip_consistency(synth_index):
    torch.manual_seed(0)
    cfg = load_config("desk")
    model = OSADNet(cfg.model_config(), engine.dataset_adjacency(synth_index)).eval()
    symmetrize(model)
    ep = predict_inputs(synth_index)
    size = 64

    def run(flip):
        view = View((size, size), (0, 0), size, flip)
        support, h, o, pose = prepare_support(ep.support_image, ep.annotation, size, view)
        qs = torch.stack([engine.normalize_images(view.image(engine._to_tensor(q)).unsqueeze(0))[0]
                          for q in ep.query_images])
        return model.predict(support[None], h[None], o[None], pose[None], qs[None],
                             torch.Generator().manual_seed(1))[0]

    plain, flipped = run(False), run(True)
    assert torch.allclose(flipped, plain.flip(-1), atol=1e-5)


def test_sweep_n_rows_and_note(synth_index, tmp_path):
    cfg = quick(synth_index, tmp_path, max_steps=1, **{"eval.episodes_per_category": 1})
    res = sweep(cfg, "N", [2, 3, 4, 5], synth_index, tmp_path / "sw")
    assert [r["N"] for r in res.rows] == [2, 3, 4, 5]
    assert "monoton" in res.note
    assert (tmp_path / "sw" / "sweep_N.csv").read_text().count("\n") == 5
    assert (tmp_path / "sw" / "sweep_N.png").is_file() and (tmp_path / "sw" / "sweep_N_loss.png").is_file()


def test_sweep_similarity_and_modules(synth_index, tmp_path):
    cfg = quick(synth_index, tmp_path, max_steps=1, **{"eval.episodes_per_category": 1})
    assert len(sweep(cfg, "similarity", ["cosine", "embedded_gaussian"], synth_index).rows) == 2
    mods = sweep(cfg, "modules", list(engine.MODULE_COMBINATIONS), synth_index)
    assert len(mods.rows) == 6


def test_sweep_rejects_bad_axis_before_training(synth_index, tmp_path):
    cfg = quick(synth_index, tmp_path)
    with pytest.raises(ConfigError):
        sweep(cfg, "depth", [1], synth_index)
    with pytest.raises(ConfigError):
        sweep_config(cfg, "modules", "mpt")
