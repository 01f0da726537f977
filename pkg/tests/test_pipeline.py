import hashlib
import json

import numpy as np
import pytest

from structvit import ums
from structvit.model import checkpoint, teacher
from structvit.model.config import desk_preset, tiny_preset
from structvit.model.objective import LossParts, init_model, load_checkpoint
from structvit.numerics import Tensor
from structvit.pipeline import attention, probe, synthetic
from structvit.pipeline import train as train_mod
from structvit.pipeline.synthetic import SyntheticDatasetSpec, generate_dataset
from structvit.supervision import FREE_TEXT_PREFIX, INSTRUCTION_PREFIX, free_text_target, make_target
from structvit.ums import FindingState

TINY_NAMES = ("A", "B", "C", "D")


def tiny_ds(n=12, seed=3):
    return generate_dataset(SyntheticDatasetSpec(num_samples=n, image_size=16, seed=seed, finding_names=TINY_NAMES))


def tiny_run(**kw):
    return tiny_preset(**{"steps": 6, "batch_size": 2, "k_range": (1, 2), **kw})


@pytest.fixture(scope="module")
def desk_ds():
    return generate_dataset(SyntheticDatasetSpec(num_samples=500, seed=11))


@pytest.fixture(scope="module")
def desk_untrained(tmp_path_factory, desk_ds):
    out = tmp_path_factory.mktemp("untrained")
    train_mod.train(desk_preset(steps=0, teacher_pretrain_steps=0), desk_ds, out)
    return out


# --- synthetic data ---------------------------------------------------------


def test_dataset_deterministic():
    a = generate_dataset(SyntheticDatasetSpec(num_samples=30, seed=5))
    b = generate_dataset(SyntheticDatasetSpec(num_samples=30, seed=5))
    c = generate_dataset(SyntheticDatasetSpec(num_samples=30, seed=6))
    assert np.array_equal(a.images, b.images) and a.records == b.records
    assert not np.array_equal(a.images, c.images)


def test_dataset_states_recoverable():
    spec = SyntheticDatasetSpec(num_samples=1000, seed=1)
    ds = generate_dataset(spec)
    right = total = 0
    for img, rec in zip(ds.images, ds.records):
        for got, (name, state) in zip(synthetic.recover_states(img, spec), rec.findings.items()):
            if rec.answerability[name]:
                total += 1
                right += got is state
    assert right / total >= 0.99


def test_dataset_all_null():
    ds = generate_dataset(SyntheticDatasetSpec(num_samples=20, p_null=1.0, p_uncertain=0.0))
    assert all(not any(r.answerability.values()) for r in ds.records)
    assert all(s is FindingState.NULL for r in ds.records for s in r.findings.values())


def test_dataset_state_frequencies():
    ds = generate_dataset(SyntheticDatasetSpec(num_samples=3000, seed=2))
    states = [s for r in ds.records for s in r.findings.values()]
    frac = {k: states.count(k) / len(states) for k in FindingState}
    assert frac[FindingState.NULL] == pytest.approx(0.1, abs=0.015)
    assert frac[FindingState.UNCERTAIN] == pytest.approx(0.1, abs=0.015)
    assert frac[FindingState.PRESENT] == pytest.approx(0.4, abs=0.02)


def test_dataset_save_load(tmp_path):
    ds = tiny_ds()
    synthetic.save_dataset(ds, tmp_path)
    back = synthetic.load_dataset(tmp_path)
    assert np.array_equal(back.images, ds.images)
    assert back.records == ds.records
    assert back.schema == ds.schema


def test_probe_labels():
    rec = ums.build_record({"A": 1.0, "B": -1.0, "C": 0.0}, ums.SchemaConfig(TINY_NAMES))
    y, m = synthetic.probe_labels([rec], ums.SchemaConfig(TINY_NAMES))
    assert y.tolist() == [[1.0, 1.0, 0.0, 0.0]]
    assert m.tolist() == [[True, True, True, False]]


# --- targets ----------------------------------------------------------------


def test_free_text_target_is_unmasked_and_distinct():
    ds = tiny_ds()
    rng = np.random.default_rng(0)
    rec = next(r for r in ds.records if not all(r.answerability.values()))
    t = free_text_target(rec, list(TINY_NAMES), rng)
    assert np.all(t.seq.weights == 1)
    assert bytes(t.instruction_ids.tolist()).decode().startswith(FREE_TEXT_PREFIX)
    u = make_target(rec, list(TINY_NAMES), "ums", rng)
    assert bytes(u.instruction_ids.tolist()).decode() == INSTRUCTION_PREFIX + "A, B, C, D"
    with pytest.raises(ValueError):
        make_target(rec, ["A"], "prose", rng)


def test_effective_k_range_clamps_small_schema():
    assert train_mod.effective_k_range(desk_preset(), ums.SchemaConfig(TINY_NAMES)) == (4, 4)
    assert train_mod.effective_k_range(desk_preset(), ums.SchemaConfig(tuple("ABCDEFGH"))) == (4, 6)


# --- training ---------------------------------------------------------------


def test_zero_steps_checkpoint_equals_init(tmp_path):
    ds = tiny_ds()
    run = tiny_run(steps=0)
    res = train_mod.train(run, ds, tmp_path)
    assert res.log == []
    init = init_model(run.model, run.seed).arrays()
    saved = load_checkpoint(tmp_path / "checkpoint.vivd").model.arrays()
    for n in init:
        assert np.array_equal(init[n], saved[n]), n
    assert (tmp_path / "metrics.jsonl").read_bytes() == b""


def test_training_is_deterministic(tmp_path):
    ds = tiny_ds()
    train_mod.train(tiny_run(), ds, tmp_path / "a")
    train_mod.train(tiny_run(), ds, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    assert [r["step"] for r in rows] == list(range(6))
    assert set(rows[0]) == {"step", "loss", "loss_tok", "loss_ortho", "lr_vit", "lr_spd"}
    assert rows[0]["lr_vit"] == 0.0
    for r in rows:
        assert r["loss"] == pytest.approx(r["loss_tok"] + 0.01 * r["loss_ortho"], rel=1e-12)


def test_teacher_warm_start_is_deterministic_and_frozen():
    ds = tiny_ds()
    run = tiny_run(teacher_pretrain_steps=3)
    m1, m2 = init_model(run.model, 0), init_model(run.model, 0)
    before = teacher.checksum(m1.teacher_params)
    l1 = train_mod.pretrain_teacher(m1, ds, run)
    l2 = train_mod.pretrain_teacher(m2, ds, run)
    assert l1 == l2 and len(l1) == 3
    assert teacher.checksum(m1.teacher_params) == teacher.checksum(m2.teacher_params) != before
    assert all(not t.requires_grad for t in m1.teacher_params.values())


def test_non_finite_loss_aborts_keeping_last_good_checkpoint(tmp_path, monkeypatch):
    ds = tiny_ds()
    real = train_mod.total_loss
    calls = {"n": 0}

    def flaky(model, batch, lam):
        calls["n"] += 1
        parts = real(model, batch, lam)
        if calls["n"] == 4:
            return LossParts(Tensor(np.nan), parts.tok, parts.ortho, parts.spd_outputs)
        return parts

    monkeypatch.setattr(train_mod, "total_loss", flaky)
    with pytest.raises(train_mod.TrainingAborted, match="step 3"):
        train_mod.train(tiny_run(checkpoint_every=2), ds, tmp_path)
    assert load_checkpoint(tmp_path / "checkpoint.vivd").step == 2


def test_smoothed():
    out = train_mod.smoothed([1.0, 3.0, 5.0, 7.0], window=2)
    assert out.tolist() == [1.0, 2.0, 4.0, 6.0]


# --- probe ------------------------------------------------------------------


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_probe_leaves_backbone_untouched(desk_untrained, desk_ds):
    path = desk_untrained / "backbone.vivd"
    before = _sha(path)
    cfg, params = checkpoint.load_backbone(path)
    sums = teacher.checksum(params)
    result, head = probe.linear_probe(path, desk_ds, steps=50)
    assert _sha(path) == before
    assert teacher.checksum(checkpoint.load_backbone(path)[1]) == sums
    assert result.num_train == 400 and result.num_test == 100
    assert len(result.auc) == 4 and result.steps == 50


def test_probe_rejects_full_checkpoint(desk_untrained, desk_ds):
    with pytest.raises(checkpoint.DeploymentContractError):
        probe.linear_probe(desk_untrained / "checkpoint.vivd", desk_ds, steps=1)


@pytest.fixture(scope="module")
def ds2000():
    return generate_dataset(SyntheticDatasetSpec(num_samples=2000, seed=12))


@pytest.mark.parametrize("seed", range(5))
def test_shuffled_labels_give_chance_auc(seed, desk_untrained, ds2000):
    result, _ = probe.linear_probe(desk_untrained / "backbone.vivd", ds2000, steps=3000, seed=seed, shuffle_labels=True)
    assert 0.45 <= result.macro_auc <= 0.55


def test_shuffle_flag_through_linear_probe(desk_untrained, desk_ds):
    plain, _ = probe.linear_probe(desk_untrained / "backbone.vivd", desk_ds, steps=300)
    shuffled, _ = probe.linear_probe(desk_untrained / "backbone.vivd", desk_ds, steps=300, shuffle_labels=True)
    assert shuffled.macro_auc < plain.macro_auc


def test_probe_skips_class_without_answerable_examples():
    feats = np.random.default_rng(0).normal(size=(6, 3))
    labels = np.array([[1, 0], [0, 0], [1, 1], [0, 0], [1, 0], [0, 1]], dtype=float)
    mask = np.ones_like(labels, dtype=bool)
    mask[:, 1] = False
    head = probe.fit_head(feats, labels, mask, 10)
    res = probe.evaluate_head(head, feats, labels, mask, ["x", "y"])
    assert res.skipped == ["y"] and res.auc[1] is None
    assert res.macro_auc == res.auc[0]


def test_probe_head_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    head = probe.LinearHead(rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=3), rng.uniform(1, 2, size=3))
    probe.save_head(tmp_path / "h.vivd", head, ["x", "y"])
    back, names = probe.load_head(tmp_path / "h.vivd")
    feats = rng.normal(size=(4, 3))
    assert names == ["x", "y"]
    assert np.array_equal(back.scores(feats), head.scores(feats))


def test_probe_result_json_round_trip():
    r = probe.ProbeResult(["a"], [0.5], [None], [3], [1], 0.5, 0.0, [], 10, 1, 8, 2)
    assert probe.ProbeResult.from_json(r.to_json()) == r


def test_worker_count(monkeypatch):
    monkeypatch.setenv("VIVID_THREADS", "3")
    assert probe.worker_count() == 3
    for bad in ("0", "x", "-1"):
        monkeypatch.setenv("VIVID_THREADS", bad)
        with pytest.raises(ValueError):
            probe.worker_count()


def test_threaded_features_match_serial(monkeypatch, desk_untrained, desk_ds):
    cfg, params = checkpoint.load_backbone(desk_untrained / "backbone.vivd")
    imgs = desk_ds.images[:12]
    monkeypatch.setenv("VIVID_THREADS", "1")
    serial = probe.cls_features(imgs, params, cfg)
    monkeypatch.setenv("VIVID_THREADS", "3")
    assert np.array_equal(probe.cls_features(imgs, params, cfg), serial)


# --- attention export -------------------------------------------------------


def test_attention_export(desk_untrained, desk_ds, tmp_path):
    files = attention.export_attention(desk_untrained / "checkpoint.vivd", desk_ds.images[:3], tmp_path)
    assert len(files) == 3 * 4 * 2
    assert len(list(tmp_path.iterdir())) == 24
    for f in tmp_path.glob("*.csv"):
        rows = np.loadtxt(f, delimiter=",", ndmin=2)
        assert rows.shape == (2, 17)
        assert np.all(np.abs(rows.sum(axis=1) - 1) <= 1e-9)
    pgm = (tmp_path / "img0000_group0.pgm").read_bytes()
    assert pgm.startswith(b"P5\n4 4\n255\n") and len(pgm) == len(b"P5\n4 4\n255\n") + 16


def test_attention_export_rejects_backbone(desk_untrained, desk_ds, tmp_path):
    with pytest.raises(attention.MissingProjectorError):
        attention.export_attention(desk_untrained / "backbone.vivd", desk_ds.images[:1], tmp_path)
