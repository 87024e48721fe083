"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``ACCEPTANCE_REPORT`` and repeated in the
pytest terminal summary (see ``conftest.py``). The end-to-end criteria share
one grid of runs (6 methods x 3 seeds, 20 rounds on the default world),
built once per session.
"""

import time

import numpy as np
import pytest

from dirfed import lowrank, mixing, oracle, runner
from dirfed.config import ExperimentConfig

ACCEPTANCE_REPORT: list[str] = []

SEEDS = (7, 8, 9)
ABLATIONS = (mixing.WO_DECOMP, mixing.WO_PER, mixing.WO_SEP)
GRID_METHODS = (mixing.FEDECIDER, mixing.LOCAL_ONLY, mixing.FEDAVG) + ABLATIONS


def report(number: int, name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    ACCEPTANCE_REPORT.append(line)
    print(line)
    assert ok, line


def _suite(check: str):
    t0 = time.perf_counter()
    summary = oracle.run_suite(seed=7, checks=[check])
    return summary, [r for r in summary.records if r.check == check], time.perf_counter() - t0


# -- property and oracle criteria ------------------------------------------------


def test_c01_normalization():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst_norm = worst_cos = 0.0
    for _ in range(1000):
        d = int(rng.choice([8, 16, 32]))
        r = int(rng.choice([1, 4, 8]))
        pair = lowrank.AdapterPair("w", rng.standard_normal((r, d)), rng.standard_normal((d, r)))
        comp = lowrank.normalize_direction(pair, 0, 0)
        prod = comp.b_tilde @ comp.a_tilde
        raw = lowrank.compose(pair)
        worst_norm = max(worst_norm, abs(lowrank.frob_norm(prod) - 1.0))
        cos = lowrank.frob_inner(prod, raw) / (lowrank.frob_norm(prod) * lowrank.frob_norm(raw))
        worst_cos = max(worst_cos, abs(cos - 1.0))
    zero_raised = 0
    for d, r in [(8, 1), (16, 4), (32, 8)]:
        for a, b in [(np.zeros((r, d)), rng.standard_normal((d, r))), (rng.standard_normal((r, d)), np.zeros((d, r)))]:
            try:
                lowrank.normalize_direction(lowrank.AdapterPair("w", a, b), 0, 0)
            except lowrank.ZeroUpdate:
                zero_raised += 1
    elapsed = time.perf_counter() - t0
    ok = worst_norm <= 1e-6 and worst_cos <= 1e-9 and zero_raised == 6 and elapsed < 5.0
    report(1, "normalization", ok,
           f"max |norm-1| {worst_norm:.1e}, max |cos-1| {worst_cos:.1e}, zero pairs raised {zero_raised}/6, {elapsed:.2f}s")


def test_c02_alpha_gradient():
    summary, records, elapsed = _suite("alpha_gradient")
    worst = max(r.measured["max_rel_err"] for r in records)
    ok = len(records) == 20 and summary.ok and worst < 1e-4 and elapsed < 120
    report(2, "alpha-gradient identity", ok, f"{len(records)} configs, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_c03_descent_sign():
    summary, records, elapsed = _suite("descent_sign")
    counts = summary.counts["descent_sign"]
    checked = counts["pass"] + counts["fail"]
    ok = len(records) == 50 and counts["fail"] == 0 and checked > 0 and elapsed < 60
    report(3, "down-weighting sign", ok,
           f"{counts['pass']}/{checked} agree, skip rate {summary.skip_rate('descent_sign'):.0%}, {elapsed:.1f}s")


def test_c04_representation():
    _, records, _ = _suite("representation")
    err = max(r.measured["coef_err"] for r in records)
    res = max(r.measured["residual"] for r in records)
    ok = err < 1e-8 and res < 1e-10
    report(4, "representation", ok, f"{len(records)} cases, recovery err {err:.1e}, residual {res:.1e}")


def test_c05_capacity():
    _, records, _ = _suite("capacity")
    gap = max(abs(r.measured["shared_residual_sq"] - 1.0) for r in records)
    span = max(max(r.measured["span_residuals"]) for r in records)
    ok = gap <= 1e-3 and span < 1e-8
    report(5, "capacity", ok, f"max |residual^2 - 1| {gap:.1e}, span residual {span:.1e}")


def test_c06_first_order():
    _, bb_records, _ = _suite("first_order_backbone")
    _, q_records, _ = _suite("first_order_quadratic")
    slopes = [r.measured["slope"] for r in bb_records]
    q_gap = max(abs(r.measured["slope"] - 2.0) for r in q_records)
    ok = len(slopes) == 10 and all(s is not None and 1.8 <= s <= 2.2 for s in slopes) and q_gap <= 1e-6
    report(6, "first-order expansion", ok,
           f"backbone slopes [{min(slopes):.3f}, {max(slopes):.3f}], quadratic |slope-2| {q_gap:.1e}")


# -- end-to-end criteria -----------------------------------------------------------


@pytest.fixture(scope="module")
def grid():
    """``{(method, seed): RunResult}`` on the default world, plus per-method time."""
    results, timing = {}, {}
    for method in GRID_METHODS:
        t0 = time.perf_counter()
        for seed in SEEDS:
            results[method, seed] = runner.run_experiment(ExperimentConfig(method=method, seed=seed))
        timing[method] = (time.perf_counter() - t0) / len(SEEDS)
    return results, timing


def _mean(results, method):
    return float(np.mean([results[method, s].mean_final("H@5") for s in SEEDS]))


@pytest.mark.slow
def test_c07_ordering(grid):
    results, timing = grid
    fed, loc, avg = (_mean(results, m) for m in (mixing.FEDECIDER, mixing.LOCAL_ONLY, mixing.FEDAVG))
    slowest = max(timing[m] for m in (mixing.FEDECIDER, mixing.LOCAL_ONLY, mixing.FEDAVG))
    ok = fed >= loc >= avg and slowest < 600
    report(7, "end-to-end ordering", ok,
           f"mean test H@5 fedecider {fed:.4f}, local_only {loc:.4f}, fedavg {avg:.4f} "
           f"(slowest method {slowest:.0f}s per run)")


@pytest.mark.slow
def test_c08_alpha_alignment(grid):
    results, _ = grid
    parts, ok = [], True
    for seed in SEEDS:
        traj = results[mixing.FEDECIDER, seed].trajectory
        r = traj.convergence_round if traj.convergence_round is not None else traj.rounds[-1]
        a = traj.at(r)
        good = a[0, 1] > a[0, 2] and a[1, 0] > a[1, 2]
        ok &= good
        tag = "conv" if traj.convergence_round is not None else "last"
        parts.append(f"seed {seed} ({tag} round {r}): a12 {a[0, 1]:.3f} vs a13 {a[0, 2]:.3f}, "
                     f"a21 {a[1, 0]:.3f} vs a23 {a[1, 2]:.3f}")
    report(8, "alpha-similarity alignment", ok, "; ".join(parts))


@pytest.mark.slow
def test_c09_ablations(grid):
    results, _ = grid
    parts, ok = [], True
    for ab in ABLATIONS:
        wins = sum(
            results[mixing.FEDECIDER, s].mean_final("H@5") >= results[ab, s].mean_final("H@5") for s in SEEDS
        )
        ok &= wins * 2 > len(SEEDS)
        parts.append(f"vs {ab} {wins}/{len(SEEDS)}")
    report(9, "ablation directionality", ok, ", ".join(parts))


def test_c10_communication():
    # one round holds a full upload and broadcast; accounting does not depend on training quality
    base = ExperimentConfig(rounds=1, local_epochs=1, pretrain_epochs=0, users_per_domain=20)

    def per_round(method, **changes):
        res = runner.run_experiment(base.replace(method=method, **changes))
        ups = {row["upload_params"] for row in res.comm.rows}
        downs = {row["download_params"] for row in res.comm.rows}
        assert len(ups) == len(downs) == 1, (ups, downs)
        return ups.pop(), downs.pop(), res

    up, down, res = per_round(mixing.FEDECIDER)
    k_identity = all(row["download_params"] == 3 * row["upload_params"] for row in res.comm.rows)
    sim6 = np.full((6, 6), 0.1)
    np.fill_diagonal(sim6, 1.0)
    up6, down6, _ = per_round(mixing.FEDECIDER, num_domains=6, similarity=sim6.tolist())
    up16, down16, _ = per_round(mixing.FEDECIDER, rank=16)
    up_avg, down_avg, _ = per_round(mixing.FEDAVG)
    ok = (
        k_identity and up == 4096 and down == 3 * 4096
        and (up6, down6) == (up, 2 * down)
        and (up16, down16) == (2 * up, 2 * down)
        and up_avg == down_avg == up
    )
    report(10, "communication accounting", ok,
           f"K=3 up {up} down {down}; K=6 up {up6} down {down6}; r=16 up {up16} down {down16}; "
           f"fedavg up {up_avg} down {down_avg}")


def test_c11_determinism(tmp_path):
    cfg = ExperimentConfig(rounds=3)
    digests = []
    for name in ("a", "b"):
        runner._BACKBONE_CACHE.clear()  # include pretraining in the replay
        runner.run_experiment(cfg, out_dir=tmp_path / name)
        digests.append({f: (tmp_path / name / f).read_bytes() for f in ("metrics.csv", "alpha.csv")})
    same = digests[0] == digests[1]
    report(11, "determinism", same,
           f"metrics.csv and alpha.csv byte-identical across two runs: {same} "
           f"({len(digests[0]['metrics.csv'])} + {len(digests[0]['alpha.csv'])} bytes)")
