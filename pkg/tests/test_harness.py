import json
import math

import numpy as np
import pytest

from fbcp import harness as H
from fbcp import dynamics as dyn
from fbcp.errors import InvalidInput


def small_campaign(**kw):
    scenario = kw.pop("scenario", dyn.ScenarioConfig())
    doc = dict(scenario=scenario, n_train=100, n_cal1=200, n_cal2=200, n_test=12, n_episodes=3,
               methods=[H.S_CP, H.FB_ARA, H.FB_IRA], alphas=[0.2])
    doc.update(kw)
    return H.CampaignConfig(**doc)


@pytest.fixture(scope="module")
def world():
    return H.build_world(small_campaign())


@pytest.fixture(scope="module")
def records(world):
    return H.run_records(world)


def test_campaign_config_validation_and_roundtrip(tmp_path):
    cfg = small_campaign(t_s=5, methods=[H.FB_ARA, H.HYBRID])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert H.CampaignConfig.load(path) == cfg
    bad = [dict(methods=["nope"]), dict(methods=[H.HYBRID]), dict(alphas=[1.2]), dict(n_episodes=0),
           dict(n_episodes=50), dict(n_cal1=0), dict(scp_calibration="both"), dict(backend="ipopt")]
    for kw in bad:
        with pytest.raises(InvalidInput):
            small_campaign(**kw)
    with pytest.raises(InvalidInput):
        H.CampaignConfig.from_json({"n_epsiodes": 3})


def test_dataset_roles_and_sizes(world):
    ds = world.dataset
    assert [ds.size(r) for r in ("train", "cal1", "cal2", "test")] == [100, 200, 200, 12]
    assert world.tables.K == 200 and world.tables.L == 200
    assert len(world.tables.scores) == world.config.scenario.T


def test_episode_is_deterministic(world):
    seed = int(world.dataset.ids("test")[0])
    a = H.run_episode(H.FB_IRA, world, 0.2, seed)
    b = H.run_episode(H.FB_IRA, world, 0.2, seed)
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    with pytest.raises(InvalidInput):
        H.run_episode("bogus", world, 0.2, seed)
    with pytest.raises(InvalidInput):
        H.run_episode(H.FB_ARA, world, 0.2, int(world.dataset.ids("cal1")[0]))


def test_collision_flag_matches_recomputation(records):
    spec = records[0].constraint
    for r in records:
        hit = False
        for tau in range(1, r.ego_states.shape[0]):
            p = r.ego_states[tau, :2]
            for j in range(r.obstacle_states.shape[1] // 2):
                if math.dist(p, r.obstacle_states[tau, 2 * j:2 * j + 2]) < spec.radius:
                    hit = True
        assert r.collision == hit
        assert r.to_json()["collision"] == hit


def test_records_respect_budget_and_bookkeeping(records, world):
    T = world.config.scenario.T
    K = world.tables.K
    for r in records:
        assert r.controls.shape == (T, 2) and r.ego_states.shape == (T + 1, 4)
        assert r.cost == pytest.approx(float(np.sum(r.controls ** 2 * [100.0, 1.0])))
        assert r.betas[0] == 0.0
        for t in range(T):
            spent = math.fsum(r.betas[: t + 1]) + math.fsum(r.allocations[t, t:])
            if r.method != H.S_CP and not r.budget_exhausted:
                assert spent <= r.alpha + 1e-12
        if r.method == H.S_CP:
            assert np.all(r.allocations[np.triu_indices(T)] == r.alpha / T)
            assert np.all(r.betas == 0.0)
        else:
            # every posterior risk sits on the (1 + k) / (1 + L) lattice
            k = r.betas[1:] * (world.tables.L + 1) - 1
            assert np.allclose(k, np.round(k), atol=1e-9)
        # allocations above the floor give finite radii
        finite = r.allocations[np.triu_indices(T)] >= 1 / (K + 1)
        assert np.all(np.isfinite(r.radii[np.triu_indices(T)][finite]))


def test_zero_noise_world_is_a_deterministic_baseline():
    sc = dyn.ScenarioConfig(noise_std=0.0, init_std=[0, 0, 0, 0])
    w = H.build_world(small_campaign(scenario=sc, n_episodes=2, methods=[H.S_CP, H.FB_ARA]))
    recs = H.run_records(w)
    # identical obstacle trajectories give one score per (t, tau), hence one radius
    for t in range(sc.T):
        assert np.all(np.ptp(w.tables.scores[t], axis=1) == 0.0)
        regions = H.EpisodeRegions(w.tables, w.constraint)
        assert np.array_equal(regions.radii(t, np.full(sc.T - t, 0.01)), w.tables.scores[t][:, 0])
    first = {r.method: r for r in recs if r.seed == recs[0].seed}
    for r in recs:
        assert not r.collision and not r.infeasible
        assert np.allclose(r.obstacle_states, recs[0].obstacle_states, atol=0)
        assert r.cost == pytest.approx(first[r.method].cost, abs=1e-9)
        if r.method == H.FB_ARA:
            assert np.allclose(r.betas[1:], 1 / (w.tables.L + 1))
    # with nothing to learn from feedback both methods plan the same path
    assert first[H.S_CP].cost == pytest.approx(first[H.FB_ARA].cost, rel=1e-6)


def test_hybrid_switch_extremes(world):
    seed = int(world.dataset.ids("test")[1])
    ara = H.run_episode(H.FB_ARA, world, 0.2, seed)
    ira = H.run_episode(H.FB_IRA, world, 0.2, seed)
    assert H.run_episode(H.HYBRID, world, 0.2, seed, t_s=0).cost == ara.cost
    assert H.run_episode(H.HYBRID, world, 0.2, seed, t_s=world.config.scenario.T).cost == ira.cost
    with pytest.raises(InvalidInput):
        H.run_episode(H.HYBRID, world, 0.2, seed)


def test_uniform_weights_reproduce_unweighted_bit_for_bit():
    sc = H.shift_scenario(shifted=False)
    w = H.build_world(small_campaign(scenario=sc, n_episodes=2, methods=[H.FB_ARA, H.WFB_ARA]))
    for seed in w.dataset.ids("test")[:2]:
        a = H.run_episode(H.FB_ARA, w, 0.2, int(seed)).to_json()
        b = H.run_episode(H.WFB_ARA, w, 0.2, int(seed)).to_json()
        a.pop("method"), b.pop("method")
        assert a == b


def test_weighted_regions_use_test_weight_floor():
    sc = H.shift_scenario()
    w = H.build_world(small_campaign(scenario=sc))
    y0 = w.dataset.states("test")[0, 0]
    w1, w2 = w.weights_for(y0)
    regions = H.EpisodeRegions(w.tables, w.constraint, w1, w2)
    assert regions.floor == pytest.approx(w1.test_weight + 1e-9)
    assert np.all(np.isinf(regions.radii(0, np.full(sc.T, w1.test_weight * 0.5))))
    r = regions.radii(0, np.full(sc.T, 0.2))
    assert np.all(np.isfinite(r))
    # a weighted lower bound never undercuts the test atom
    lb = regions.lower_bounds(0, np.full(sc.T, 100.0))
    assert np.allclose(lb, w1.test_weight)


def test_shift_experiment_requires_shift(world):
    with pytest.raises(InvalidInput):
        H.shift_experiment(world.config, world=world)


def test_summary_and_paired_difference(records):
    summ = H.summarize(records)
    assert [(c.method, c.alpha) for c in summ] == [(H.S_CP, 0.2), (H.FB_ARA, 0.2), (H.FB_IRA, 0.2)]
    for c in summ:
        assert c.n_episodes == 3 and 0 <= c.avoidance_rate <= 1
    mean, lcb, n = H.paired_cost_difference(records, H.S_CP, H.FB_ARA, 0.2)
    d = [a.cost - b.cost for a, b in zip([r for r in records if r.method == H.S_CP],
                                         [r for r in records if r.method == H.FB_ARA])]
    assert n == 3 and mean == pytest.approx(np.mean(d))
    assert lcb == pytest.approx(np.mean(d) - 1.645 * np.std(d, ddof=1) / math.sqrt(3))
    with pytest.raises(InvalidInput):
        H.summarize([])
    with pytest.raises(InvalidInput):
        H.paired_cost_difference(records[:1], H.S_CP, H.FB_ARA, 0.2)


def test_report_files_roundtrip(records, tmp_path):
    paths = H.report(records, tmp_path / "a")
    assert H.read_summary_csv(paths["summary"]) == H.summarize(records)
    assert H.load_records_summary(paths["records"]) == H.summarize(records)
    again = H.report(records, tmp_path / "b")
    for key in ("summary", "records"):
        assert paths[key].read_bytes() == again[key].read_bytes()
    doc = json.loads(paths["records"].read_text())
    assert len(doc["records"]) == len(records)
    single = [r for r in records if r.method == H.S_CP][:1]
    lines = H.report(single, tmp_path / "c")["summary"].read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("method,alpha")
    with pytest.raises(InvalidInput):
        H.report([], tmp_path / "d")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        H.report(records, blocker / "sub")


def test_report_identical_across_worker_counts(world, records, tmp_path):
    par = H.run_records(world, workers=2)
    a = H.report(records, tmp_path / "w1")
    b = H.report(par, tmp_path / "w2")
    assert a["summary"].read_bytes() == b["summary"].read_bytes()
    assert a["records"].read_bytes() == b["records"].read_bytes()


def test_json_array_encoding():
    got = H.json_array(np.array([[1.5, np.nan], [np.inf, -np.inf]]))
    assert got == [[1.5, None], ["inf", "-inf"]]


def test_coverage_audit_rows(world):
    rows = H.coverage_audit(world.model, world.dataset, [0.1, 0.5], [0, 10])
    T = world.config.scenario.T
    assert len(rows) == 2 * (T + T - 10)
    for r in rows:
        assert 0.0 <= r["coverage"] <= 1.0 and r["tau"] > r["t"]
        assert r["se"] == pytest.approx(math.sqrt(r["alpha"] * (1 - r["alpha"]) / 12))
    pooled = H.pooled_coverage(rows)
    assert set(pooled) == {0.1, 0.5} and pooled[0.1] >= pooled[0.5]


def test_region_audit_equal_calibration_at_start(records):
    audit = H.region_radius_audit(records)
    assert audit["t0_ratio"] == 1.0
    assert audit["ratio"].shape == (20, 20)
    with pytest.raises(InvalidInput):
        H.region_radius_audit([r for r in records if r.method == H.S_CP])
    with pytest.raises(InvalidInput):
        H.region_radius_audit([])


def test_ara_first_step_matches_uniform_split(records):
    by_seed = {}
    for r in records:
        by_seed.setdefault(r.seed, {})[r.method] = r
    for group in by_seed.values():
        assert np.array_equal(group[H.FB_ARA].allocations[0], group[H.S_CP].allocations[0])
        assert np.array_equal(group[H.FB_ARA].radii[0], group[H.S_CP].radii[0])


def test_hybrid_cost_non_increasing_in_switch_time():
    w = H.build_world(small_campaign(n_test=20, n_episodes=20, methods=[H.FB_ARA]))
    seeds = [int(s) for s in w.dataset.ids("test")[:20]]
    costs = {}
    for t_s in (0, 10, 20):
        costs[t_s] = np.array([H.run_episode(H.HYBRID, w, 0.2, s, t_s=t_s).cost for s in seeds])
    for early, late in ((0, 10), (10, 20)):
        d = costs[early] - costs[late]
        se = np.std(d, ddof=1) / math.sqrt(d.size)
        assert np.mean(d) >= -3 * se
