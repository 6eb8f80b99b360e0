import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceprotect import evaluate as ev
from faceprotect.degrade import DegradationSpec


def brute_force_topk(probe, labels, gal_emb, gal_labels, k):
    """Exhaustive oracle: score every identity by its best entry, sort with an explicit comparator."""
    idents = list(dict.fromkeys(gal_labels))
    hits, used = 0, 0
    for p, lab in zip(probe, labels):
        if lab not in idents:
            continue
        used += 1
        scored = []
        for j, ident in enumerate(idents):
            best = max(float(np.dot(p, g)) for g, gl in zip(gal_emb, gal_labels) if gl == ident)
            scored.append((-best, j, ident))
        scored.sort()
        hits += lab in [s[2] for s in scored[:k]]
    return hits / used if used else float("nan")


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n_id=st.integers(1, 8), k=st.integers(1, 5))
def test_topk_matches_oracle(seed, n_id, k):
    r = np.random.default_rng(seed)
    d = int(r.integers(2, 9))
    gl = [f"i{j}" for j in r.integers(0, n_id, 12)]
    ge = _unit(r.normal(size=(12, d)))
    pl = [f"i{j}" for j in r.integers(0, n_id + 1, 7)]  # may include absent identities
    pe = _unit(r.normal(size=(7, d)))
    gal = ev.GalleryIndex(gl, ge)
    got = ev.topk_accuracy(pe, pl, gal, k)
    want = brute_force_topk(pe, pl, ge, gl, k)
    assert (np.isnan(got) and np.isnan(want)) or got == want


def test_ties_resolve_toward_first_identity():
    gal = ev.GalleryIndex(["a", "b"], np.array([[1.0, 0.0], [1.0, 0.0]]))
    p = np.array([[1.0, 0.0]])
    assert ev.topk_accuracy(p, ["a"], gal, 1) == 1.0
    assert ev.topk_accuracy(p, ["b"], gal, 1) == 0.0
    assert ev.topk_accuracy(p, ["b"], gal, 2) == 1.0


def test_absent_identities_excluded_and_reported():
    gal = ev.GalleryIndex(["a"], np.array([[1.0, 0.0]]))
    d = ev.topk_detail(np.array([[1.0, 0.0], [0.0, 1.0]]), ["a", "zz"], gal, 1)
    assert d == {"accuracy": 1.0, "used": 1, "excluded": 1}
    assert np.isnan(ev.topk_accuracy(np.array([[1.0, 0.0]]), ["zz"], gal, 1))


def test_sample_mode_counts_entries_not_identities():
    gal = ev.GalleryIndex(["a", "a", "b"], _unit(np.array([[1.0, 0.1], [1.0, 0.0], [0.9, 0.2]])))
    p = np.array([[1.0, 0.05]])
    assert ev.topk_accuracy(p, ["b"], gal, 2, mode="identity") == 1.0
    assert ev.topk_accuracy(p, ["b"], gal, 2, mode="sample") == 0.0


def test_topk_errors():
    gal = ev.GalleryIndex(["a"], np.ones((1, 2)))
    with pytest.raises(ValueError, match="k must"):
        ev.topk_accuracy(np.ones((1, 2)), ["a"], gal, 0)
    with pytest.raises(ValueError, match="mode"):
        ev.topk_accuracy(np.ones((1, 2)), ["a"], gal, 1, mode="pairs")
    with pytest.raises(ValueError, match="one label"):
        ev.GalleryIndex(["a", "b"], np.ones((1, 2)))


def test_similarities():
    assert ev.sim_pair(np.array([1.0, 0]), np.array([0, 2.0])) == pytest.approx(0.0)
    assert ev.sim_id(np.array([1.0, 0]), np.array([[1.0, 0], [0, 1.0]])) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="at least one"):
        ev.sim_id(np.array([1.0, 0]), np.zeros((0, 2)))


def test_report_serialization_is_deterministic(tmp_path):
    rows = [{"kind": "none", "acc1": np.float64(0.25), "n": np.int64(4)}, {"kind": "jpeg", "acc1": 1 / 3, "n": 4}]
    rep = ev.EvalReport("robust", rows, "abc", 7)
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "# protocol=robust fingerprint=abc seed=7"
    assert csv_text.splitlines()[1] == "kind,acc1,n"
    env = json.loads(rep.to_json())
    assert env["protocol"] == "robust" and env["config_fingerprint"] == "abc" and env["seed"] == 7
    a = rep.write(tmp_path / "one")
    b = ev.EvalReport("robust", rows, "abc", 7).write(tmp_path / "two")
    assert a[0].read_bytes() == b[0].read_bytes() and a[1].read_bytes() == b[1].read_bytes()
    assert rep.row(kind="jpeg")["n"] == 4
    with pytest.raises(KeyError):
        rep.row(kind="blur")


def test_split_evenly_sizes():
    for n in range(0, 23):
        sizes = [len(c) for c in ev.split_evenly(n, 5)]
        assert sum(sizes) == n and max(sizes) - min(sizes) <= 1


def test_robustness_identity_degradation_matches_none(tiny_extractor, rng):
    imgs = rng.uniform(-1, 1, (10, 3, 16, 16)).astype(np.float32)
    labels = [f"i{j % 5}" for j in range(10)]
    gal = ev.GalleryIndex.build(tiny_extractor, imgs[::2] * 0.9, labels[::2])
    rep = ev.robustness_sweep(tiny_extractor, imgs, labels, gal, [DegradationSpec("noise", (0,)),
                                                                  DegradationSpec("jpeg", (95, 50, 20))])
    none, noise = rep.row(kind="none"), rep.row(kind="noise", value="all")
    assert noise["acc1"] == none["acc1"] and noise["acc5"] == none["acc5"]
    assert [r["n"] for r in rep.rows if r["kind"] == "jpeg" and r["value"] != "all"] == [4, 3, 3]
    per_kind = ev.split_by(rep, "kind")
    assert list(per_kind) == ["none", "noise", "jpeg"]


def test_plots_are_written_and_reproducible(tmp_path):
    rep = ev.EvalReport("alpha", [{"alpha": a, "psnr": 30 - a, "acc1": a / 2} for a in (0.05, 0.5)], "fp")
    p1 = ev.write_plot(rep, tmp_path / "a.png")
    p2 = ev.write_plot(rep, tmp_path / "b.png")
    assert p1.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert p1.read_bytes() == p2.read_bytes()
    bars = ev.EvalReport("robust", [{"kind": "none", "value": "", "acc1": 0.5},
                                    {"kind": "jpeg", "value": "all", "acc1": 0.4},
                                    {"kind": "jpeg", "value": 95, "acc1": 0.3}], "fp")
    assert ev.write_plot(bars, tmp_path / "r.png").stat().st_size > 0
