import json
import subprocess
import sys

import numpy as np
import pytest

from xmodal import (
    EmbeddingMatrix,
    LinearMap,
    PairEntry,
    PairManifest,
    load_head,
    save_emb,
    save_manifest,
    save_map,
)
from xmodal.gmlp import GmlpConfig, init_params

from conftest import random_orthogonal


def run_cli(args, cwd):
    return subprocess.run(
        [sys.executable, "-m", "xmodal", *map(str, args)],
        capture_output=True,
        cwd=cwd,
    )


def write_rotation_data(tmp_path, n=16, d=3, seed=7, noise=0.0):
    """Small magnitudes keep the float32 storage round-off below 1e-6."""
    rng = np.random.default_rng(seed)
    src_vals = (rng.standard_normal((n, d)) * 0.1).astype(np.float32)
    rot = random_orthogonal(rng, d)
    tgt64 = src_vals.astype(np.float64) @ rot
    if noise:
        tgt64 = tgt64 + rng.normal(0.0, noise, tgt64.shape)
    src = EmbeddingMatrix(src_vals, tuple(f"t{i}" for i in range(n)))
    tgt = EmbeddingMatrix(tgt64.astype(np.float32), tuple(f"m{i}" for i in range(n)))
    save_emb(src, tmp_path / "src.emb")
    save_emb(tgt, tmp_path / "tgt.emb")
    manifest = PairManifest(tuple(PairEntry(f"t{i}", f"m{i}", f"g{i}") for i in range(n)))
    save_manifest(manifest, tmp_path / "pairs.jsonl")
    return tmp_path / "src.emb", tmp_path / "tgt.emb", tmp_path / "pairs.jsonl"


def fit_args(src, tgt, pairs, out, method="procrustes", extra=()):
    return [
        "fit", "--method", method, "--src", src, "--tgt", tgt,
        "--pairs", pairs, "--out", out, *extra,
    ]


# --- fit -----------------------------------------------------------------------


def test_fit_procrustes_reports_tiny_residual(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    proc = run_cli(fit_args(src, tgt, pairs, tmp_path / "rot.xmap"), tmp_path)
    assert proc.returncode == 0, proc.stderr
    payload = json.loads(proc.stdout)
    assert payload["method"] == "procrustes"
    assert payload["residual_frobenius"] < 1e-6
    assert (tmp_path / "rot.xmap").exists()
    assert (tmp_path / "rot.xmap.manifest.json").exists()


def test_fit_rank_deficient_exits_3(tmp_path):
    rng = np.random.default_rng(0)
    base = rng.standard_normal((20, 1)).astype(np.float32)
    src = EmbeddingMatrix(np.hstack([base, base]), tuple(f"s{i}" for i in range(20)))
    tgt = EmbeddingMatrix(rng.standard_normal((20, 2)).astype(np.float32), tuple(f"t{i}" for i in range(20)))
    save_emb(src, tmp_path / "s.emb")
    save_emb(tgt, tmp_path / "t.emb")
    save_manifest(
        PairManifest(tuple(PairEntry(f"s{i}", f"t{i}", f"g{i}") for i in range(20))),
        tmp_path / "p.jsonl",
    )
    proc = run_cli(
        fit_args(tmp_path / "s.emb", tmp_path / "t.emb", tmp_path / "p.jsonl",
                 tmp_path / "o.xmap", method="lsq", extra=["--ridge", "0"]),
        tmp_path,
    )
    assert proc.returncode == 3
    assert b"ridge" in proc.stderr


def test_fit_missing_out_is_usage_error(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    proc = run_cli(
        ["fit", "--method", "procrustes", "--src", src, "--tgt", tgt, "--pairs", pairs],
        tmp_path,
    )
    assert proc.returncode == 2


def test_fit_ridge_rejected_for_procrustes(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    proc = run_cli(
        fit_args(src, tgt, pairs, tmp_path / "o.xmap", extra=["--ridge", "0.1"]),
        tmp_path,
    )
    assert proc.returncode == 2


def test_fit_unknown_manifest_id_exits_4(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    save_manifest(PairManifest((PairEntry("nope", "m0", "g"),)), tmp_path / "bad.jsonl")
    proc = run_cli(fit_args(src, tgt, tmp_path / "bad.jsonl", tmp_path / "o.xmap"), tmp_path)
    assert proc.returncode == 4


# --- eval ----------------------------------------------------------------------


def test_eval_aligned_data_recall_one(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "rot.xmap"), tmp_path)
    proc = run_cli(
        ["eval", "--map", tmp_path / "rot.xmap", "--queries", src, "--gallery", tgt,
         "--pairs", pairs, "--direction", "text_to_image", "--k", "1,5,10"],
        tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    payload = json.loads(proc.stdout)
    recall = payload["reports"]["procrustes"]["recall"]
    assert recall == {"1": 1.0, "5": 1.0, "10": 1.0}


def test_eval_two_maps_emits_three_blocks(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path, noise=0.01)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "p.xmap"), tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "l.xmap", method="lsq"), tmp_path)
    proc = run_cli(
        ["eval", "--map", tmp_path / "l.xmap", "--map", tmp_path / "p.xmap",
         "--queries", src, "--gallery", tgt, "--pairs", pairs,
         "--direction", "text_to_image", "--k", "1,5"],
        tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    reports = json.loads(proc.stdout)["reports"]
    assert set(reports) == {"least_squares", "procrustes", "best_of"}
    for k in ("1", "5"):
        assert reports["best_of"]["recall"][k] == max(
            reports["least_squares"]["recall"][k], reports["procrustes"]["recall"][k]
        )


def test_eval_k_exceeding_gallery_exits_2(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "rot.xmap"), tmp_path)
    proc = run_cli(
        ["eval", "--map", tmp_path / "rot.xmap", "--queries", src, "--gallery", tgt,
         "--pairs", pairs, "--direction", "text_to_image", "--k", "1,999"],
        tmp_path,
    )
    assert proc.returncode == 2
    assert b"out of range" in proc.stderr


def test_eval_duplicate_methods_rejected(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "a.xmap"), tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "b.xmap"), tmp_path)
    proc = run_cli(
        ["eval", "--map", tmp_path / "a.xmap", "--map", tmp_path / "b.xmap",
         "--queries", src, "--gallery", tgt, "--pairs", pairs,
         "--direction", "text_to_image"],
        tmp_path,
    )
    assert proc.returncode == 2


# --- retrieve ------------------------------------------------------------------


def _identity_setup(tmp_path, n=8, d=4, seed=3):
    rng = np.random.default_rng(seed)
    vals = rng.standard_normal((n, d)).astype(np.float32)
    gallery = EmbeddingMatrix(vals, tuple(f"m{i}" for i in range(n)))
    save_emb(gallery, tmp_path / "gal.emb")
    queries = EmbeddingMatrix(vals[:3], tuple(f"q{i}" for i in range(3)))
    save_emb(queries, tmp_path / "q.emb")
    save_map(LinearMap(np.eye(d), "least_squares"), tmp_path / "id.xmap")
    save_manifest(
        PairManifest(tuple(PairEntry(f"q{i}", f"m{i}", f"g{i}") for i in range(3))),
        tmp_path / "pairs.jsonl",
    )


def test_retrieve_rank1_marked_correct(tmp_path):
    _identity_setup(tmp_path)
    proc = run_cli(
        ["retrieve", "--map", tmp_path / "id.xmap", "--gallery", tmp_path / "gal.emb",
         "--query-file", tmp_path / "q.emb", "--query-id", "q1",
         "--pairs", tmp_path / "pairs.jsonl", "--top", "3"],
        tmp_path,
    )
    assert proc.returncode == 0, proc.stderr
    lines = proc.stdout.decode().splitlines()
    assert lines[0] == "# query q1"
    rank1 = lines[1].split("\t")
    assert rank1[0] == "1"
    assert rank1[2] == "m1"
    assert rank1[3] == "correct"
    assert all(line.split("\t")[3] == "incorrect" for line in lines[2:])


def test_retrieve_top_clipped_with_warning(tmp_path):
    _identity_setup(tmp_path)
    proc = run_cli(
        ["retrieve", "--map", tmp_path / "id.xmap", "--gallery", tmp_path / "gal.emb",
         "--query-id", "m0", "--top", "99"],
        tmp_path,
    )
    assert proc.returncode == 0
    assert b"clipping" in proc.stderr
    result_lines = [l for l in proc.stdout.decode().splitlines() if not l.startswith("#")]
    assert len(result_lines) == 8


def test_retrieve_scores_descending(tmp_path):
    _identity_setup(tmp_path, n=20, seed=11)
    proc = run_cli(
        ["retrieve", "--map", tmp_path / "id.xmap", "--gallery", tmp_path / "gal.emb",
         "--query-file", tmp_path / "q.emb", "--top", "20"],
        tmp_path,
    )
    assert proc.returncode == 0
    scores = []
    for line in proc.stdout.decode().splitlines():
        if line.startswith("#"):
            scores.append([])
        else:
            scores[-1].append(float(line.split("\t")[1]))
    assert scores and all(s == sorted(s, reverse=True) for s in scores)


def test_retrieve_unknown_id_exits_4(tmp_path):
    _identity_setup(tmp_path)
    proc = run_cli(
        ["retrieve", "--map", tmp_path / "id.xmap", "--gallery", tmp_path / "gal.emb",
         "--query-id", "nope"],
        tmp_path,
    )
    assert proc.returncode == 4


def test_retrieve_needs_query_source(tmp_path):
    _identity_setup(tmp_path)
    proc = run_cli(
        ["retrieve", "--map", tmp_path / "id.xmap", "--gallery", tmp_path / "gal.emb"],
        tmp_path,
    )
    assert proc.returncode == 2


# --- train-head ----------------------------------------------------------------


def _train_setup(tmp_path, n=64, d=8, seed=5):
    rng = np.random.default_rng(seed)
    rot = random_orthogonal(rng, d)
    src_vals = rng.standard_normal((n, d)).astype(np.float32)
    tgt_vals = (src_vals.astype(np.float64) @ rot + rng.normal(0, 0.02, (n, d))).astype(np.float32)
    save_emb(EmbeddingMatrix(src_vals, tuple(f"s{i}" for i in range(n))), tmp_path / "s.emb")
    save_emb(EmbeddingMatrix(tgt_vals, tuple(f"t{i}" for i in range(n))), tmp_path / "t.emb")
    save_manifest(
        PairManifest(tuple(PairEntry(f"s{i}", f"t{i}", f"g{i}") for i in range(n))),
        tmp_path / "p.jsonl",
    )
    (tmp_path / "train.cfg").write_text(
        "epochs=3\nbatch_size=32\nlr=0.001\ntau=0.1\nseed=11\n"
    )


def _train_args(tmp_path, out_dir, train_cfg="train.cfg"):
    return [
        "train-head", "--src", tmp_path / "s.emb", "--tgt", tmp_path / "t.emb",
        "--pairs", tmp_path / "p.jsonl", "--train-config", tmp_path / train_cfg,
        "--out-dir", out_dir,
    ]


def test_train_head_writes_outputs(tmp_path):
    _train_setup(tmp_path)
    out_dir = tmp_path / "run"
    proc = run_cli(_train_args(tmp_path, out_dir), tmp_path)
    assert proc.returncode == 0, proc.stderr
    for name in (
        "head_src.xgml", "head_tgt.xgml", "loss.csv",
        "gmlp_config_resolved.txt", "train_config_resolved.txt", "run_manifest.json",
    ):
        assert (out_dir / name).exists(), name
    csv_lines = (out_dir / "loss.csv").read_text().splitlines()
    assert csv_lines[0] == "epoch,mean_loss"
    losses = [float(line.split(",")[1]) for line in csv_lines[1:]]
    assert len(losses) == 3
    assert losses[-1] < losses[0]
    resolved = dict(
        line.split("=", 1)
        for line in (out_dir / "train_config_resolved.txt").read_text().splitlines()
    )
    assert resolved["seed"] == "11"
    assert resolved["beta1"] == "0.9"  # defaults are echoed too


def test_train_head_epochs_zero_returns_init(tmp_path):
    _train_setup(tmp_path)
    (tmp_path / "zero.cfg").write_text("epochs=0\nseed=11\n")
    out_dir = tmp_path / "run0"
    proc = run_cli(_train_args(tmp_path, out_dir, "zero.cfg"), tmp_path)
    assert proc.returncode == 0, proc.stderr
    params = load_head(out_dir / "head_src.xgml")
    fresh = init_params(GmlpConfig(seq_len=1, d_model=8, d_ffn=16), np.random.default_rng(11))
    for (name, got), (_, want) in zip(params.tensors(), fresh.tensors()):
        assert (got == want).all(), name
    assert (out_dir / "loss.csv").read_text() == "epoch,mean_loss\n"


def test_train_head_same_seed_identical_bytes(tmp_path):
    _train_setup(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    proc_a = run_cli(_train_args(tmp_path, out_a), tmp_path)
    proc_b = run_cli(_train_args(tmp_path, out_b), tmp_path)
    assert proc_a.returncode == 0 and proc_b.returncode == 0
    for name in ("loss.csv", "head_src.xgml", "head_tgt.xgml"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name
    # stdout payloads only differ in the out-dir path
    assert json.loads(proc_a.stdout)["epoch_losses"] == json.loads(proc_b.stdout)["epoch_losses"]


def test_train_head_bad_config_key_exits_2(tmp_path):
    _train_setup(tmp_path)
    (tmp_path / "bad.cfg").write_text("learning_rate=0.1\n")
    proc = run_cli(_train_args(tmp_path, tmp_path / "bad_run", "bad.cfg"), tmp_path)
    assert proc.returncode == 2


# --- inspect & manifests ---------------------------------------------------------


def test_inspect_summaries(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    proc = run_cli(["inspect", "--path", src], tmp_path)
    assert proc.returncode == 0
    assert json.loads(proc.stdout) == {
        "format": "EMB1", "n": 16, "d": 3, "ids_head": ["t0", "t1", "t2", "t3", "t4"],
    }
    run_cli(fit_args(src, tgt, pairs, tmp_path / "rot.xmap"), tmp_path)
    payload = json.loads(run_cli(["inspect", "--path", tmp_path / "rot.xmap"], tmp_path).stdout)
    assert payload["format"] == "XMAP"
    assert payload["method"] == "procrustes"


def test_inspect_garbage_exits_4(tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00" * 64)
    proc = run_cli(["inspect", "--path", junk], tmp_path)
    assert proc.returncode == 4


def test_run_manifest_contents(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "rot.xmap"), tmp_path)
    manifest = json.loads((tmp_path / "rot.xmap.manifest.json").read_text())
    assert manifest["command"][0] == "xmodal"
    assert manifest["version"]
    assert manifest["duration_seconds"] >= 0
    assert set(manifest["inputs"]) == {"src", "tgt", "pairs"}
    for entry in manifest["inputs"].values():
        assert len(entry["sha256"]) == 64


def test_eval_writes_manifest_next_to_out(tmp_path):
    src, tgt, pairs = write_rotation_data(tmp_path)
    run_cli(fit_args(src, tgt, pairs, tmp_path / "rot.xmap"), tmp_path)
    proc = run_cli(
        ["eval", "--map", tmp_path / "rot.xmap", "--queries", src, "--gallery", tgt,
         "--pairs", pairs, "--direction", "text_to_image", "--k", "1",
         "--out", tmp_path / "report.json"],
        tmp_path,
    )
    assert proc.returncode == 0
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "report.json.manifest.json").exists()
