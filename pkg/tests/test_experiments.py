import pytest

from pisr_lab import experiments as ex
from pisr_lab import train as tr
from pisr_lab.scenes import SceneConfig

SMALL_SCENE = SceneConfig(height=16, width=16, size_range=(2, 4), instances_per_scene=(1, 3))
BASE = tr.TrainConfig(epochs=1, channels=8, k=4, fusion_k=4)


@pytest.fixture(scope="module")
def data():
    return tr.synthetic_dataset(SMALL_SCENE, 4, 2)


def test_cache_key_depends_on_config_and_data(tmp_path, data):
    cache = ex.RunCache(tmp_path)
    other = tr.synthetic_dataset(SMALL_SCENE, 5, 2)
    keys = {cache.key(BASE, data), cache.key(BASE, other), cache.key(tr.TrainConfig(epochs=2), data)}
    assert len(keys) == 3
    assert cache.key(BASE, data) == ex.RunCache(tmp_path).key(BASE, data)


def test_cache_roundtrip(tmp_path, data):
    cache = ex.RunCache(tmp_path)
    assert cache.get(BASE, data) is None
    hist = [dict(epoch=1, variant="pisr", k=4, pq=0.5, pq_th=0.25, pq_st=0.75, miou=0.9, loss_total=1.0)]
    cache.put(BASE, data, hist)
    assert cache.get(BASE, data) == hist


def test_run_many_uses_cache(tmp_path, data, monkeypatch):
    cache = ex.RunCache(tmp_path)
    cfgs = [BASE, tr.TrainConfig(**{**BASE.__dict__, "variant": "baseline"})]
    first = ex.run_many(cfgs, data, cache=cache)

    def boom(*a, **k):
        raise AssertionError("should not retrain")

    monkeypatch.setattr(ex, "train", boom)
    assert ex.run_many(cfgs, data, cache=cache) == first


def test_parallel_runs_match_serial(data):
    cfgs = [tr.TrainConfig(**{**BASE.__dict__, "variant": v}) for v in ("baseline", "eprod")]
    assert ex.run_many(cfgs, data, jobs=2) == ex.run_many(cfgs, data, jobs=1)


def test_summarize_means_over_seeds():
    rows = [dict(variant="a", pq=0.2, pq_th=0.0, pq_st=0.4, miou=0.5),
            dict(variant="b", pq=0.9, pq_th=0.9, pq_st=0.9, miou=0.9),
            dict(variant="a", pq=0.4, pq_th=0.2, pq_st=0.6, miou=0.7)]
    s = ex.summarize(rows)
    assert [r["variant"] for r in s] == ["a", "b"]
    assert s[0]["n_seeds"] == 2 and s[0]["pq"] == pytest.approx(0.3) and s[0]["miou"] == pytest.approx(0.6)


def _sweep(values):
    return [dict(k=k, variant=v, pq=p) for (k, v), p in values.items()]


def test_k_robustness_picks_best_plain_k():
    pq = {(2, "pisr"): 0.50, (2, "pisr_no_rw"): 0.55, (4, "pisr"): 0.60, (4, "pisr_no_rw"): 0.60,
          (8, "pisr"): 0.58, (8, "pisr_no_rw"): 0.50, (16, "pisr"): 0.57, (16, "pisr_no_rw"): 0.40}
    r = ex.k_robustness(_sweep(pq))
    assert r["k_star"] == 4
    assert r["delta_pisr"] == pytest.approx(-0.03)
    assert r["delta_pisr_no_rw"] == pytest.approx(-0.20)
    assert r["passed"]


def test_k_robustness_needs_quadruple():
    with pytest.raises(ValueError):
        ex.k_robustness(_sweep({(2, "pisr"): 0.5, (2, "pisr_no_rw"): 0.5, (4, "pisr"): 0.5, (4, "pisr_no_rw"): 0.5}))


def test_ablation_direction():
    s = [dict(variant=v, pq=p) for v, p in
         [("baseline", 0.5), ("concat", 0.55), ("eprod", 0.52), ("sem_only", 0.5), ("pisr_no_rw", 0.57), ("pisr", 0.58)]]
    r = ex.ablation_direction(s)
    assert r["best_naive"] == 0.55 and r["gate_helps"] and r["beats_naive"] and r["passed"]
    s[-1]["pq"] = 0.555
    assert not ex.ablation_direction(s)["passed"]


def test_rows_to_csv_formats_floats():
    text = ex.rows_to_csv([dict(a="x", b=0.5, c=3)], ["a", "b", "c"])
    assert text == "a,b,c\nx,0.500000,3\n"


def test_source_digest_is_stable():
    assert ex.source_digest() == ex.source_digest()
    assert len(ex.source_digest()) == 16
