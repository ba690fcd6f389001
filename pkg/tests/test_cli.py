import csv
import filecmp
import os

import numpy as np
import pytest

from sparsemag import io
from sparsemag.cli import main
from sparsemag.decomp import DecompParams, build_flow_matrix, decompose
from sparsemag.synthetic import blob_sequence, bump, planted_components, planted_same_area


def write_sequence(path, frames):
    os.makedirs(path, exist_ok=True)
    for t, f in enumerate(frames):
        io.write_png(f, os.path.join(path, f"frame_{t:03d}.png"))
    return str(path)


@pytest.fixture(scope="module")
def blob_dir(tmp_path_factory):
    T = 8
    disp = bump(T, 1, 6, 1.5)[:, None] * np.array([0.6, 0.8])
    frames, _ = blob_sequence(36, 40, (18, 20), 4.0, disp)
    return write_sequence(tmp_path_factory.mktemp("blob"), frames)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def same_tree(a, b, ignore=()):
    cmp = filecmp.dircmp(a, b, ignore=list(ignore))
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(os.path.join(a, d), os.path.join(b, d), ignore) for d in cmp.common_dirs)


def test_static_sequence_is_reproduced(tmp_path):
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, (20, 24, 3)) / 255.0
    src = write_sequence(tmp_path / "in", [frame] * 6)
    assert main(["run", src, str(tmp_path / "out")]) == 0
    for t in range(6):
        out = io.read_png(tmp_path / "out" / f"out_{t + 1:04d}.png")
        assert np.array_equal(out, frame)


def test_run_outputs_and_diagnostics(tmp_path, blob_dir):
    out = tmp_path / "o"
    assert main(["run", blob_dir, str(out), "--k", "3", "--diagnostics"]) == 0
    names = sorted(os.listdir(out))
    assert [n for n in names if n.startswith("out_")] == [f"out_{t:04d}.png" for t in range(1, 9)]
    assert len(os.listdir(out / "flows")) == 7
    diag = out / "diagnostics"
    for name in ["components.csv", "d_timeseries.csv", "temporal_sparsity.csv",
                 "recon_error.txt", "G_1.png", "G_2.png", "G_3.png"]:
        assert (diag / name).exists(), name
    rows = read_csv(diag / "components.csv")
    assert rows[0] == ["k", "m_k", "peak_time", "c_k", "selected"]
    assert len(rows) == 4
    ts = read_csv(diag / "d_timeseries.csv")
    assert ts[0] == ["t", "k1", "k2", "k3"] and len(ts) == 8
    D, G, n1, n2, mode = io.load_decomposition(out / "decomposition.dsd")
    assert D.shape == (14, 3) and G.shape == (3, 36 * 40) and mode == "l21"
    assert float((diag / "recon_error.txt").read_text()) < 0.5


def test_runs_are_deterministic_and_flo_dir_matches(tmp_path, blob_dir):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    args = ["--k", "3", "--diagnostics"]
    assert main(["run", blob_dir, str(a), *args]) == 0
    assert main(["run", blob_dir, str(b), *args]) == 0
    assert same_tree(a, b)
    assert main(["run", blob_dir, str(c), *args, "--flow-source", "flo_dir",
                 "--flo-dir", str(a / "flows")]) == 0
    assert same_tree(a, c, ignore=["flows"])


def test_rethresholding_changes_selection(tmp_path, blob_dir):
    lo, hi = tmp_path / "lo", tmp_path / "hi"
    assert main(["run", blob_dir, str(lo), "--k", "3", "--diagnostics",
                 "--lambda1", "0.0", "--lambda2", "0.3"]) == 0
    assert main(["run", blob_dir, str(hi), "--k", "3", "--diagnostics",
                 "--lambda1", "0.3", "--lambda2", "inf"]) == 0
    sel_lo = [r[4] for r in read_csv(lo / "diagnostics" / "components.csv")[1:]]
    sel_hi = [r[4] for r in read_csv(hi / "diagnostics" / "components.csv")[1:]]
    assert "1" in sel_hi and sel_lo != sel_hi
    assert not filecmp.cmp(lo / "out_0005.png", hi / "out_0005.png", shallow=False)


def test_empty_selection_warns_and_matches_mu_zero(tmp_path, blob_dir, caplog):
    e, z = tmp_path / "e", tmp_path / "z"
    with caplog.at_level("WARNING", logger="sparsemag"):
        assert main(["run", blob_dir, str(e), "--k", "3", "--lambda1", "100",
                     "--lambda2", "200"]) == 0
    assert any("no component" in r.message for r in caplog.records)
    assert main(["run", blob_dir, str(z), "--k", "3", "--mu", "0"]) == 0
    for t in range(1, 9):
        assert filecmp.cmp(e / f"out_{t:04d}.png", z / f"out_{t:04d}.png", shallow=False)


def test_mismatched_frame_is_named(tmp_path, capsys):
    src = tmp_path / "in"
    write_sequence(src, [np.zeros((10, 10))] * 3)
    io.write_png(np.zeros((10, 11)), src / "frame_999.png")
    assert main(["run", str(src), str(tmp_path / "o")]) != 0
    assert "frame_999.png" in capsys.readouterr().err


def test_unreadable_frame_is_named(tmp_path, capsys):
    src = tmp_path / "in"
    write_sequence(src, [np.zeros((10, 10))] * 3)
    (src / "frame_001.png").write_bytes(b"not a png")
    assert main(["run", str(src), str(tmp_path / "o")]) != 0
    assert "frame_001.png" in capsys.readouterr().err


def test_flo_dir_count_and_grid_checks(tmp_path, blob_dir, capsys):
    flo = tmp_path / "flo"
    flo.mkdir()
    for t in range(3):
        io.write_flo(np.zeros((36, 40, 2)), flo / f"f{t}.flo")
    assert main(["run", blob_dir, str(tmp_path / "o"), "--flow-source", "flo_dir",
                 "--flo-dir", str(flo)]) != 0
    assert "expected 7" in capsys.readouterr().err
    for t in range(3, 6):
        io.write_flo(np.zeros((36, 40, 2)), flo / f"f{t}.flo")
    io.write_flo(np.zeros((36, 41, 2)), flo / "f6.flo")
    assert main(["run", blob_dir, str(tmp_path / "o"), "--flow-source", "flo_dir",
                 "--flo-dir", str(flo)]) != 0
    assert "f6.flo" in capsys.readouterr().err


def test_too_few_frames(tmp_path, capsys):
    src = write_sequence(tmp_path / "in", [np.zeros((8, 8))])
    assert main(["run", src, str(tmp_path / "o")]) != 0
    assert "at least 2" in capsys.readouterr().err


def test_invalid_parameters_rejected(tmp_path, blob_dir):
    assert main(["run", blob_dir, str(tmp_path / "o"), "--lambda1", "0.5",
                 "--lambda2", "0.2"]) != 0
    assert main(["run", blob_dir, str(tmp_path / "o"), "--mu", "-1"]) != 0


def test_dump_is_deterministic_and_rejects_corrupt(tmp_path, capsys):
    rng = np.random.default_rng(3)
    path = tmp_path / "c.dsd"
    io.save_decomposition(path, rng.standard_normal((10, 3)), rng.standard_normal((3, 30)), 5, 6)
    assert main(["dump", str(path), str(tmp_path / "d1")]) == 0
    assert main(["dump", str(path), str(tmp_path / "d2")]) == 0
    assert same_tree(tmp_path / "d1", tmp_path / "d2")
    path.write_bytes(path.read_bytes()[:50])
    assert main(["dump", str(path), str(tmp_path / "d3")]) != 0
    assert main(["dump", str(tmp_path / "missing.dsd"), str(tmp_path / "d4")]) != 0
    assert "missing.dsd" in capsys.readouterr().err


def _support_overlap(maps):
    S = [set(np.flatnonzero(m)) for m in maps]
    return max(len(S[i] & S[j]) / max(1, min(len(S[i]), len(S[j])))
               for i in range(len(S)) for j in range(i + 1, len(S)))


def test_dump_planted_components_have_disjoint_maps(tmp_path):
    pf = planted_components(seed=0)
    V = build_flow_matrix(pf.volume)
    D, G = decompose(V, DecompParams(K=3, alpha=0.1, beta=4.0, seed=0))
    path = tmp_path / "p.dsd"
    io.save_decomposition(path, D, G, 48, 48)
    assert main(["dump", str(path), str(tmp_path / "d")]) == 0
    maps = [io.read_png(tmp_path / "d" / f"G_{k}.png") for k in (1, 2, 3)]
    assert all(m.any() for m in maps)
    assert _support_overlap(maps) <= 0.05


def test_dump_sparsity_higher_for_l21(tmp_path):
    pf = planted_same_area(seed=0)
    V = build_flow_matrix(pf.volume)
    means = {}
    for mode in ("l21", "l2"):
        D, G = decompose(V, DecompParams(K=5, alpha=0.01, beta=4.0, seed=0, constraint_mode=mode))
        path = tmp_path / f"{mode}.dsd"
        io.save_decomposition(path, D, G, 48, 48, mode)
        assert main(["dump", str(path), str(tmp_path / mode)]) == 0
        rows = read_csv(tmp_path / mode / "temporal_sparsity.csv")[1:]
        active = np.any(G != 0, axis=1)
        means[mode] = np.mean([float(r[1]) for r, a in zip(rows, active) if a])
    assert means["l21"] > means["l2"]


def test_dewarp_subcommand(tmp_path, blob_dir):
    out = tmp_path / "dw"
    assert main(["dewarp", blob_dir, str(out)]) == 0
    first = io.read_png(out / "out_0001.png")
    assert np.array_equal(first, io.read_png(os.path.join(blob_dir, "frame_000.png")))
    assert len([n for n in os.listdir(out) if n.startswith("out_")]) == 8
    assert main(["dewarp", blob_dir, str(out), "--flow-mode", "consecutive"]) != 0

