import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bigru_fss.fewshot import Checkpoint, TrainConfig, initial_checkpoint, segment_volume, train
from bigru_fss.harness.cli import load_dataset, run_cli, save_dataset
from bigru_fss.harness.config import ConfigError, build_train_config, dump_config, parse_config
from bigru_fss.harness.evaluate import EvalReport, evaluate, summarize, support_sets
from bigru_fss.harness.io import (
    ChecksumError,
    FormatError,
    VersionError,
    decode_checkpoint,
    decode_volume,
    encode_checkpoint,
    encode_volume,
    load_checkpoint,
    read_volume,
    save_checkpoint,
    write_volume,
)
from bigru_fss.harness.phantoms import FAMILIES, PhantomSpec, generate_case, generate_corpus, generate_phantoms

TINY = dict(slice_size=16, widths=(4, 8), n_a=1)
SMALL_DIMS = dict(dims=(10, 16, 16), radius_range=(3.0, 6.0), noise_std=0.1)


# -- phantoms ----------------------------------------------------------------------------

def test_families_and_labels():
    assert len(FAMILIES) >= 2
    for family in FAMILIES:
        for case in generate_phantoms(PhantomSpec(family=family, count=3, **SMALL_DIMS)):
            assert case.labels.labels.any()
            assert case.organs() == [PhantomSpec(family=family).label]
            v = case.volume.voxels
            assert v.min() == 0.0 and v.max() == 1.0


def test_phantoms_deterministic():
    a = generate_phantoms(PhantomSpec(family="crescent", count=2, seed=5))
    b = generate_phantoms(PhantomSpec(family="crescent", count=2, seed=5))
    c = generate_phantoms(PhantomSpec(family="crescent", count=2, seed=6))
    assert [x.digest() for x in a] == [x.digest() for x in b]
    assert a[0].digest() != c[0].digest()


def test_noise_free_foreground_brighter_than_background():
    spec = PhantomSpec(family="two-lobe", count=3, noise_std=0.0, contrast_range=(1.0, 1.0))
    for case in generate_phantoms(spec):
        fg = case.labels.labels > 0
        assert case.volume.voxels[fg].min() > case.volume.voxels[~fg].max()


def test_ellipsoid_voxel_count_matches_analytic_volume():
    spec = PhantomSpec(family="ellipsoid", radius_range=(8.0, 11.0), dims=(24, 64, 64), noise_std=0.0)
    for i in range(8):
        rng = np.random.default_rng([spec.seed, 1, i])
        radii = [min(rng.uniform(*spec.radius_range), n / 2 - 1.0) for n in spec.dims]
        assert min(radii) >= 8
        count = int(generate_case(spec, i).labels.labels.astype(bool).sum())
        analytic = 4.0 / 3.0 * np.pi * np.prod(radii)
        assert abs(count - analytic) / analytic < 0.05


@pytest.mark.parametrize("bad", [dict(radius_range=(0.0, 3.0)), dict(family="cube"),
                                 dict(noise_std=-1.0), dict(dims=(2, 16, 16))])
def test_degenerate_spec(bad):
    with pytest.raises(ValueError):
        PhantomSpec(**bad)


# -- volume files ------------------------------------------------------------------------

@settings(max_examples=30)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_volume_roundtrip_bit_exact(vox):
    blob = encode_volume(vox)
    back = decode_volume(blob)
    assert back.dtype == np.float32 and back.tobytes() == vox.tobytes()
    assert encode_volume(back) == blob


def test_label_volume_roundtrip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 5, size=(3, 4, 5)).astype(np.uint8)
    write_volume(tmp_path / "l.fsvl", lab)
    back = read_volume(tmp_path / "l.fsvl")
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, lab)
    raw = (tmp_path / "l.fsvl").read_bytes()
    assert raw[:4] == b"FSVL" and struct.unpack_from("<H3IB", raw, 4) == (1, 3, 4, 5, 1)


def test_volume_corruption_detected():
    blob = bytearray(encode_volume(np.ones((2, 3, 3), np.float32)))
    blob[30] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_volume(bytes(blob))


def test_volume_truncation_and_magic_and_version():
    blob = encode_volume(np.ones((2, 3, 3), np.float32))
    with pytest.raises(FormatError):
        decode_volume(blob[:-7])
    with pytest.raises(FormatError):
        decode_volume(b"XXXX" + blob[4:])
    future = blob[:4] + struct.pack("<H", 2) + blob[6:]
    with pytest.raises(VersionError, match="version 2"):
        decode_volume(future)


# -- checkpoints -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    cases = generate_corpus(count=3, seed=0, **SMALL_DIMS)
    return train(TrainConfig(K=1, iterations=2, **TINY), cases)


def test_checkpoint_roundtrip(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "c.fsck")
    back = load_checkpoint(tmp_path / "c.fsck")
    assert back.params.keys() == trained.params.keys()
    for k in trained.params:
        assert back.params[k].dtype == trained.params[k].dtype
        assert back.params[k].tobytes() == trained.params[k].tobytes()
        assert back.optimizer.first_moment[k].tobytes() == trained.optimizer.first_moment[k].tobytes()
    assert back.config == trained.config and back.iteration == 2 and back.history == trained.history
    assert encode_checkpoint(back) == encode_checkpoint(trained)


def test_checkpoint_64_bit_roundtrip():
    ckpt = initial_checkpoint(TrainConfig(precision=64, **TINY))
    back = decode_checkpoint(encode_checkpoint(ckpt))
    assert all(v.dtype == np.float64 for v in back.params.values())
    assert encode_checkpoint(back) == encode_checkpoint(ckpt)


def test_checkpoint_single_byte_flip_rejected(trained):
    blob = encode_checkpoint(trained)
    for pos in (len(blob) // 2, len(blob) - 10, 12):
        bad = bytearray(blob)
        bad[pos] ^= 0x10
        with pytest.raises(ChecksumError):
            decode_checkpoint(bytes(bad))


def test_checkpoint_truncated_future_and_foreign(trained):
    blob = encode_checkpoint(trained)
    with pytest.raises(FormatError):
        decode_checkpoint(blob[: len(blob) // 2])
    with pytest.raises(VersionError):
        decode_checkpoint(blob[:4] + struct.pack("<H", 99) + blob[6:])
    with pytest.raises(FormatError):
        decode_checkpoint(b"FSVL" + blob[4:])


# -- config files ------------------------------------------------------------------------

def test_parse_config_comments_and_errors():
    text = "# comment\nK = 3\n\nlearning_rate=0.001  # trailing\n"
    assert parse_config(text) == {"K": "3", "learning_rate": "0.001"}
    with pytest.raises(ConfigError):
        parse_config("K 3")
    with pytest.raises(ConfigError):
        parse_config("K=1\nK=2")


def test_overrides_beat_file_values():
    cfg = build_train_config({"K": "3", "widths": "4,8", "slice_size": "16"},
                             {"K": "5", "n_a": None, "ablation_disable_gru": "true"})
    assert cfg.K == 5 and cfg.n_a == 2 and cfg.widths == (4, 8) and cfg.ablation_disable_gru


def test_config_dump_roundtrip():
    cfg = TrainConfig(K=2, widths=(4, 8), slice_size=16, learning_rate=3e-4)
    assert build_train_config(parse_config(dump_config(cfg))) == cfg


@pytest.mark.parametrize("values", [{"nope": "1"}, {"K": "x"}, {"K": "0"}, {"augment_train": "maybe"}])
def test_bad_config_values(values):
    with pytest.raises(ConfigError):
        build_train_config(values)


# -- evaluation --------------------------------------------------------------------------

def test_summarize_hand_computed():
    mean, std = summarize([0.5, 0.7, 0.9])
    assert mean == pytest.approx(0.7, abs=1e-15)
    # sample variance: (0.04 + 0 + 0.04) / 2 = 0.04
    assert std == pytest.approx(0.2, abs=1e-15)
    assert summarize([0.3]) == (0.3, 0.0)


@given(st.lists(st.lists(st.floats(0, 1), min_size=2, max_size=2), min_size=2, max_size=6))
def test_report_is_recomputable(scores):
    rep = EvalReport.from_scores(scores, K=1, seeds=[0])
    per_query = [sum(s) / 2 for s in scores]
    np.testing.assert_allclose(rep.per_query, per_query, rtol=0, atol=1e-12)
    assert abs(rep.mean - float(np.mean(rep.per_query))) <= 1e-12
    assert abs(rep.std - float(np.std(rep.per_query, ddof=1))) <= 1e-12
    assert rep.trials == 2


@pytest.fixture(scope="module")
def ring_cases():
    return generate_corpus(("ring",), count=4, seed=2, **SMALL_DIMS)


def test_support_sets_exclude_query(ring_cases):
    sets = support_sets(ring_cases, ring_cases, 2, 5, 0, shared=False)
    for q, rows in zip(ring_cases, sets):
        assert len(rows) == 5
        assert all(q not in row and len(row) == 2 for row in rows)


def test_single_trial_equals_single_segmentation(ring_cases):
    ckpt = initial_checkpoint(TrainConfig(K=1, **TINY))
    rep = evaluate(ckpt, ring_cases, 4, K=1, trials=1, seed=3)
    sets = support_sets(ring_cases, ring_cases, 1, 1, 3, shared=False)
    from bigru_fss.decoder import dice_score
    for q, rows, got in zip(ring_cases, sets, rep.per_query):
        pred = segment_volume(ckpt, rows[0], q.volume, q.organ_range(4), 4)
        assert got == dice_score(pred.labels == 4, q.labels.labels == 4)


def test_background_model_scores_zero(ring_cases):
    ckpt = initial_checkpoint(TrainConfig(K=1, **TINY))
    params = dict(ckpt.params)
    bias = np.array([50.0, -50.0], dtype=params["dec.head.bias"].dtype)
    params["dec.head.weight"] = np.zeros_like(params["dec.head.weight"])
    params["dec.head.bias"] = bias
    ckpt.params = params
    rep = evaluate(ckpt, ring_cases, 4, K=1, trials=2)
    assert rep.mean == 0.0 and rep.per_query == [0.0] * 4


def test_evaluate_is_reproducible_and_thread_independent(ring_cases, monkeypatch):
    ckpt = initial_checkpoint(TrainConfig(K=2, **TINY))
    a = evaluate(ckpt, ring_cases, 4, K=2, trials=2, seed=1)
    monkeypatch.setenv("BIGRU_FSS_THREADS", "3")
    b = evaluate(ckpt, ring_cases, 4, K=2, trials=2, seed=1)
    assert a == b
    assert a.trials == 2 and a.K == 2 and len(a.per_query) == 4


def test_evaluate_insufficient(ring_cases):
    ckpt = initial_checkpoint(TrainConfig(K=1, **TINY))
    from bigru_fss.fewshot import InsufficientDataError
    with pytest.raises(InsufficientDataError):
        evaluate(ckpt, ring_cases, 4, K=4)
    with pytest.raises(InsufficientDataError):
        evaluate(ckpt, ring_cases, 2, K=1)


def test_shared_pool_uses_one_support_set_per_trial(ring_cases):
    pool = generate_corpus(("ring",), count=4, seed=9, **SMALL_DIMS)
    sets = support_sets(ring_cases, pool, 2, 3, 0, shared=True)
    for t in range(3):
        assert len({tuple(c.case_id for c in row[t]) for row in sets}) == 1


# -- command line ------------------------------------------------------------------------

def records(capsys):
    out = capsys.readouterr().out
    return [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture()
def data_dir(tmp_path):
    d = tmp_path / "data"
    assert run_cli(["gen", "--out", str(d), "--count", "3", "--dims", "10", "16", "16",
                    "--radius_range", "3", "6", "--families", "ellipsoid,ring"]) == 0
    return d


def test_dataset_directory_roundtrip(tmp_path):
    cases = generate_corpus(("crescent",), count=2, **SMALL_DIMS)
    save_dataset(cases, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert [c.digest() for c in back] == [c.digest() for c in cases]


def test_cli_train_zero_then_segment(data_dir, tmp_path, capsys):
    ck = tmp_path / "c.fsck"
    assert run_cli(["train", "--data", str(data_dir), "--out", str(ck), "--iterations", "0",
                    "--slice_size", "16", "--widths", "4,8", "--n_a", "1"]) == 0
    assert records(capsys)[-1]["iterations"] == 0
    out = tmp_path / "pred.fsvl"
    assert run_cli(["segment", "--checkpoint", str(ck), "--data", str(data_dir),
                    "--supports", "ellipsoid_0_001", "--query", "ellipsoid_0_000",
                    "--out", str(out)]) == 0
    rec = records(capsys)[-1]
    assert rec["event"] == "segment" and 0.0 <= rec["dice"] <= 1.0
    assert read_volume(out).shape == (10, 16, 16)


def test_cli_config_file_and_override(data_dir, tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("slice_size = 16\nwidths = 4,8\nn_a = 1\niterations = 5\nlog_every = 1\n")
    ck = tmp_path / "c.fsck"
    assert run_cli(["train", "--data", str(data_dir), "--out", str(ck), "--config", str(cfg),
                    "--iterations", "2"]) == 0
    recs = records(capsys)
    assert [r["iteration"] for r in recs if r["event"] == "train_step"] == [1, 2]
    assert load_checkpoint(ck).config.iterations == 2


def test_cli_eval_records(data_dir, tmp_path, capsys):
    ck = tmp_path / "c.fsck"
    run_cli(["train", "--data", str(data_dir), "--out", str(ck), "--iterations", "1",
             "--slice_size", "16", "--widths", "4,8", "--n_a", "1"])
    capsys.readouterr()
    argv = ["eval", "--checkpoint", str(ck), "--data", str(data_dir), "--target_organ", "4",
            "--K", "1", "--trials", "2"]
    assert run_cli(argv) == 0
    first = records(capsys)
    assert run_cli(argv) == 0
    assert records(capsys) == first
    rec = first[-1]
    assert {"mean", "std", "trials", "per_query"} <= rec.keys() and rec["trials"] == 2


def test_cli_adapt(data_dir, tmp_path, capsys):
    ck = tmp_path / "c.fsck"
    run_cli(["train", "--data", str(data_dir), "--out", str(ck), "--iterations", "1", "--K", "2",
             "--slice_size", "16", "--widths", "4,8", "--n_a", "1"])
    out = tmp_path / "a.fsck"
    assert run_cli(["adapt", "--checkpoint", str(ck), "--data", str(data_dir), "--supports",
                    "ring_0_000,ring_0_001,ring_0_002", "--out", str(out),
                    "--adapt_iterations", "2", "--adapt_eval_every", "1"]) == 0
    rec = records(capsys)[-1]
    assert rec["event"] == "adapt" and rec["steps"] >= 1
    assert load_checkpoint(out).params.keys() == load_checkpoint(ck).params.keys()


def test_cli_gradcheck_small(capsys):
    assert run_cli(["gradcheck", "--size", "16", "--precision", "64", "--max_entries", "3"]) == 0
    last = records(capsys)[-1]
    assert last["passed"] and last["failures"] == []


def test_cli_usage_errors(capsys):
    assert run_cli(["train", "--bogus"]) != 0
    assert "usage" in capsys.readouterr().err
    assert run_cli(["frobnicate"]) != 0
    assert run_cli(["train", "--data", "/nonexistent", "--out", "x", "--K", "zero"]) == 2
