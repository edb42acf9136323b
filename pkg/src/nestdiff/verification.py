"""Oracle checks for the numerical contracts, plus the end-to-end toy run.

Each check returns ``(passed, detail)``. The oracles here are written
independently of the library code they test: brute-force loops, explicit
Gaussian conditioning and plain order statistics.
"""

from __future__ import annotations

import functools
import itertools
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import diffusion as D
from . import ensemble as E
from . import metrics as MT
from . import perturb as P
from .backbone import Backbone, BackboneConfig, loss_init
from .numerics import RngStream, grad_check, one_hot, stream_id
from .shallow import ShallowMap, loss_shallow

F64 = torch.float64
SEED = 20240611


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng([SEED, stream_id(*parts)])


def _scramble(module: torch.nn.Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Replace every floating parameter/buffer with O(1) random values so no gradient is trivially tiny."""
    with torch.no_grad():
        for name, t in itertools.chain(module.named_parameters(), module.named_buffers()):
            if not t.is_floating_point() or name.endswith("positions"):
                continue
            vals = torch.as_tensor(rng.normal(0.0, scale, t.shape), dtype=t.dtype)
            if "running_var" in name:
                vals = vals.abs() + 0.5
            t.copy_(vals)


# -- 1. gradients ------------------------------------------------------------------------

def _param_groups(module: torch.nn.Module, groups: dict[str, Callable[[str], bool]]) -> dict[str, list]:
    named = dict(module.named_parameters())
    return {g: [p for n, p in named.items() if pred(n)] for g, pred in groups.items()}


def check_gradients() -> tuple[bool, str]:
    torch.manual_seed(0)
    rng = _rng("grad")
    worst: dict[str, float] = {}

    cfg = BackboneConfig(image_size=8, channels=2, patch_size=4, embed_dim=8, num_blocks=2, num_heads=2,
                         mlp_hidden=12, num_classes=3, tap_levels=1)
    bb = Backbone(cfg, RngStream(SEED, 1), F64)
    _scramble(bb, rng)
    x = torch.as_tensor(rng.normal(size=(3, 8, 8, 2)))
    y = one_hot([0, 2, 1], 3, F64)
    groups = _param_groups(bb, {
        "patch_embed": lambda n: n.startswith("embed."),
        "attention": lambda n: ".attn." in n,
        "layer_norm": lambda n: ".ln" in n,
        "mlp": lambda n: ".fc" in n,
        "head": lambda n: n.startswith("head."),
    })
    for g, params in groups.items():
        worst[g] = grad_check(lambda: loss_init(bb(x)[0], y), params)

    sm = ShallowMap(4, 8, 3, (6, 5), RngStream(SEED, 2), F64)
    _scramble(sm, rng)
    r = torch.as_tensor(rng.normal(size=(3, 4, 8)))
    worst["shallow_mlp"] = grad_check(lambda: loss_shallow(sm(r), y), list(sm.parameters()))

    dcfg = D.DenoiserConfig(image_dim=12, num_classes=3, T=6, width=8, encoder_hidden=(7, 6), chain_hidden=(5, 4))
    den = D.Denoiser(dcfg, RngStream(SEED, 3), F64)
    _scramble(den, rng)
    sched = D.make_schedule(6, 0.95, 0.6)
    xd = torch.as_tensor(rng.normal(size=(4, 12)))
    yd = one_hot([0, 1, 2, 1], 3, F64)
    zd = torch.softmax(torch.as_tensor(rng.normal(size=(4, 3))), dim=-1)
    t = torch.tensor([1, 3, 5, 6])
    eps = torch.as_tensor(rng.normal(size=(4, 3)))
    dgroups = _param_groups(den, {
        "time_embedding": lambda n: n.startswith("time_embed"),
        "image_encoder": lambda n: n.startswith("image_encoder"),
        "chain_encoder": lambda n: n.startswith("chain_encoder"),
        "denoiser_head": lambda n: n.startswith(("joint", "norm", "out")),
    })
    for mode in ("eval", "train"):
        den.train(mode == "train")
        for g, params in dgroups.items():
            err = grad_check(lambda: D.loss_diffusion(den, xd, yd, zd, sched, t=t, eps=eps), params)
            worst[g] = max(worst.get(g, 0.0), err)
    ok = all(v <= 1e-5 for v in worst.values())
    return ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())


# -- 2-5. diffusion algebra ------------------------------------------------------------------

def random_schedule(rng: np.random.Generator, max_T: int = 32) -> D.NoiseSchedule:
    T = int(rng.integers(2, max_T + 1))
    first = float(rng.uniform(0.6, 0.9999))
    last = float(rng.uniform(0.2, first - 1e-3))
    return D.make_schedule(T, first, last)


def _alpha_bar_oracle(sched: D.NoiseSchedule, t: int) -> float:
    return math.prod(float(a) for a in sched.alpha[:t])


def check_forward_equivalence(n_schedules: int = 50, n_mc: int = 100_000) -> tuple[bool, str]:
    rng = _rng("forward")
    worst_mean = worst_var = 0.0
    for _ in range(n_schedules):
        sched = random_schedule(rng)
        C = int(rng.integers(1, 5))
        y0, z, e = (torch.as_tensor(rng.normal(size=(1, C))) for _ in range(3))
        zero, one = torch.zeros(1, C, dtype=F64), torch.ones(1, C, dtype=F64)
        m, v = y0.clone(), torch.zeros(1, C, dtype=F64)
        for t in range(1, sched.T + 1):
            # propagate moments through the one-step transition: y_t = a*y + b*shift + n*eps
            a = D.forward_step(one, zero, zero, t, zero, sched)
            n = D.forward_step(zero, zero, zero, t, one, sched)
            m = D.forward_step(m, z, e, t, zero, sched)
            v = a ** 2 * v + n ** 2
            ab = _alpha_bar_oracle(sched, t)
            closed_mean = math.sqrt(ab) * y0 + (1 - math.sqrt(ab)) * (z + e)
            worst_mean = max(worst_mean, float((m - closed_mean).abs().max()),
                             float((D.forward_sample(y0, z, e, t, zero, sched) - closed_mean).abs().max()))
            closed_std = D.forward_sample(zero, zero, zero, t, one, sched)
            worst_var = max(worst_var, float((v - (1 - ab)).abs().max()),
                            float((closed_std ** 2 - (1 - ab)).abs().max()))
    exact = worst_mean <= 1e-10 and worst_var <= 1e-10

    # Monte Carlo: simulate the stepwise chain with random noise and compare sample moments.
    mc_ok, worst_z = True, 0.0
    for _ in range(5):
        sched = random_schedule(rng)
        y0, z, e = (torch.as_tensor(rng.normal(size=(1, 2))).expand(n_mc, 2) for _ in range(3))
        y = y0.clone()
        for t in range(1, sched.T + 1):
            y = D.forward_step(y, z, e, t, torch.as_tensor(rng.normal(size=(n_mc, 2))), sched)
        ab = sched.ab(sched.T)
        mu = math.sqrt(ab) * y0[0] + (1 - math.sqrt(ab)) * (z[0] + e[0])
        var = 1 - ab
        zm = ((y.mean(0) - mu).abs() / math.sqrt(var / n_mc)).max().item()
        zv = ((y.var(0, unbiased=False) - var).abs() / (var * math.sqrt(2 / n_mc))).max().item()
        worst_z = max(worst_z, zm, zv)
        mc_ok &= zm <= 4 and zv <= 4
    return exact and mc_ok, f"mean err {worst_mean:.1e}, var err {worst_var:.1e}, MC worst {worst_z:.2f} sigma"


def _condition_oracle(sched: D.NoiseSchedule, t: int, y0: float, s: float, yt: float) -> tuple[float, float]:
    """Condition the joint Gaussian of (y_{t-1}, y_t) | y_0 on y_t."""
    ab_prev = _alpha_bar_oracle(sched, t - 1)
    a = float(sched.alpha[t - 1])
    m1 = math.sqrt(ab_prev) * y0 + (1 - math.sqrt(ab_prev)) * s
    v1 = 1 - ab_prev
    m2 = math.sqrt(a) * m1 + (1 - math.sqrt(a)) * s
    cov = np.array([[v1, math.sqrt(a) * v1], [math.sqrt(a) * v1, a * v1 + (1 - a)]])
    mean = m1 + cov[0, 1] / cov[1, 1] * (yt - m2)
    var = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
    return mean, var


def check_posterior_equivalence(n_schedules: int = 50) -> tuple[bool, str]:
    rng = _rng("posterior")
    worst_m = worst_v = 0.0
    for _ in range(n_schedules):
        sched = random_schedule(rng)
        for t in range(2, sched.T + 1):
            y0, z, e, yt = rng.normal(size=4)
            mean, var = D.posterior_params(*(torch.tensor([[v]], dtype=F64) for v in (yt, y0, z, e)), t, sched)
            om, ov = _condition_oracle(sched, t, y0, z + e, yt)
            worst_m = max(worst_m, abs(float(mean) - om))
            worst_v = max(worst_v, abs(float(var) - ov))
    return worst_m <= 1e-10 and worst_v <= 1e-10, f"mean err {worst_m:.1e}, var err {worst_v:.1e}"


def check_schedule_invariants() -> tuple[bool, str]:
    s = D.make_schedule(D.FULL_T, D.FULL_ALPHA_FIRST, D.FULL_ALPHA_LAST)
    ab = s.alpha_bar
    monotone = bool(np.all(np.diff(ab) < 0))
    exact = all(ab[t] == ab[t - 1] * s.alpha[t - 1] for t in range(1, s.T + 1))
    ok = ab[-1] < 1e-3 and monotone and exact and ab[0] == 1.0
    return ok, f"alpha_bar_T={ab[-1]:.3e}, monotone={monotone}, recursion exact={exact}"


def check_round_trip(n: int = 10_000) -> tuple[bool, str]:
    rng = _rng("roundtrip")
    sched = D.make_schedule(D.FULL_T, D.FULL_ALPHA_FIRST, D.FULL_ALPHA_LAST)
    C = 3
    y0, z, e, eps = (torch.as_tensor(rng.normal(size=(n, C))) for _ in range(4))
    t = torch.as_tensor(rng.integers(1, sched.T + 1, n))
    back = D.recover_y0(D.forward_sample(y0, z, e, t, eps, sched), z, e, t, eps, sched)
    err = float((back - y0).abs().max())
    return err <= 1e-12, f"max |y0 - recovered| = {err:.1e} over {n} cases"


# -- 6-8. ensemble and metrics ------------------------------------------------------------

def _oracle_vote(sample) -> int:
    best, best_d = 0, None
    for c, v in enumerate(sample):
        d = (float(v) - 1.0) * (float(v) - 1.0)
        if best_d is None or d < best_d:
            best, best_d = c, d
    return best


def _oracle_upper(groups: list[np.ndarray]) -> int:
    counts: dict[int, int] = {}
    for g in groups:
        for s in g:
            v = _oracle_vote(s)
            counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    for c in sorted(counts):
        if counts[c] == top:
            return c
    raise AssertionError


def _random_groups(rng: np.random.Generator, forced_tie: bool) -> list[np.ndarray]:
    K, M, C = int(rng.integers(1, 8)), int(rng.integers(1, 26)), int(rng.integers(2, 6))
    groups = [rng.normal(1.0, 0.6, size=(M, C)) for _ in range(K)]
    if forced_tie:
        # two classes with equal vote counts and identical coordinates within some samples
        a, b = sorted(rng.choice(C, 2, replace=False))
        pooled = [(k, m) for k in range(K) for m in range(M)]
        half = len(pooled) // 2
        for i, (k, m) in enumerate(pooled):
            row = np.full(C, -5.0)
            row[a if i < half else b] = 1.0
            if i == 0:
                row[b] = 1.0  # exact coordinate tie, must resolve to a
                row[a] = 1.0
            groups[k][m] = row
        if len(pooled) % 2 and C > 2:
            third = next(c for c in range(C) if c not in (a, b))
            groups[pooled[-1][0]][pooled[-1][1]] = np.where(np.arange(C) == third, 1.0, -5.0)
    return groups


def check_ensemble_oracle(n_cases: int = 1000, n_regroup: int = 200) -> tuple[bool, str]:
    rng = _rng("ensemble")
    mismatches = ties = 0
    for i in range(n_cases):
        forced = i % 4 == 0
        ties += forced
        arrays = _random_groups(rng, forced)
        groups = [E.CandidateGroup(k + 1, g) for k, g in enumerate(arrays)]
        lower_ok = all(E.aggregate_lower(g) == [_oracle_vote(s) for s in g.samples] for g in groups)
        if not lower_ok or E.aggregate_upper(groups) != _oracle_upper(arrays):
            mismatches += 1
    regroup_fail = 0
    for _ in range(n_regroup):
        arrays = _random_groups(rng, bool(rng.integers(0, 2)))
        pooled = np.concatenate(arrays)
        ref = E.aggregate_upper([E.CandidateGroup(1, pooled)])
        perm = rng.permutation(len(pooled))
        cuts = np.sort(rng.choice(np.arange(1, len(pooled)), size=min(len(pooled) - 1, int(rng.integers(0, 6))),
                                  replace=False))
        parts = [E.CandidateGroup(j + 1, p) for j, p in enumerate(np.split(pooled[perm], cuts))]
        regroup_fail += E.aggregate_upper(parts) != ref
    ok = mismatches == 0 and regroup_fail == 0
    return ok, f"{mismatches}/{n_cases} oracle mismatches ({ties} forced ties), {regroup_fail}/{n_regroup} regroupings differ"


def _oracle_ece(conf: list[float], hit: list[bool]) -> float:
    total = 0.0
    n = len(conf)
    for b in range(10):
        lo, hi = b / 10, (b + 1) / 10
        members = [i for i in range(n) if lo < conf[i] <= hi]
        if not members:
            continue
        acc = sum(hit[i] for i in members) / len(members)
        avg = sum(conf[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - avg)
    return total


def _oracle_percentile(col: list[float], p: float) -> float:
    v = sorted(col)
    h = (len(v) - 1) * p / 100
    lo = math.floor(h)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def _oracle_var(col: list[float]) -> float:
    mean = math.fsum(col) / len(col)
    return math.fsum((c - mean) ** 2 for c in col) / len(col)


def check_metrics_oracle(n_sets: int = 200) -> tuple[bool, str]:
    rng = _rng("metrics")
    worst_ece = worst_piw = worst_pv = worst_scale = 0.0
    for _ in range(n_sets):
        n = int(rng.integers(1, 300))
        conf = rng.uniform(0, 1, n)
        # include exact bin edges
        conf[: n // 5] = rng.integers(1, 11, n // 5) / 10
        conf = np.clip(conf, 1e-9, 1.0)
        true = rng.integers(0, 3, n)
        pred = np.where(rng.uniform(size=n) < 0.7, true, (true + 1) % 3)
        recs = [MT.EvalRecord(int(a), int(b), float(c)) for a, b, c in zip(true, pred, conf)]
        worst_ece = max(worst_ece, abs(MT.ece10(recs) - _oracle_ece(list(map(float, conf)), list(true == pred))))

        s = rng.normal(size=(int(rng.integers(2, 60)), 3))
        for c in range(3):
            col = [float(v) for v in s[:, c]]
            worst_piw = max(worst_piw, abs(MT.piw(s, c) - (_oracle_percentile(col, 97.5) - _oracle_percentile(col, 2.5))))
            worst_pv = max(worst_pv, abs(MT.pv(s, c) - _oracle_var(col)))
            a = float(rng.uniform(-3, 3))
            ref = a * a * MT.pv(s, c)
            worst_scale = max(worst_scale, abs(MT.pv(a * s, c) - ref) / max(1.0, abs(ref)))
    perfect = MT.ece10([MT.EvalRecord(1, 1, 1.0) for _ in range(50)])
    ok = max(worst_ece, worst_piw, worst_pv) <= 1e-12 and perfect == 0.0 and worst_scale <= 1e-12
    return ok, (f"ece err {worst_ece:.1e}, piw err {worst_piw:.1e}, pv err {worst_pv:.1e}, "
                f"scaling err {worst_scale:.1e}, perfect ECE {perfect}")


def check_probability_contract(n_sets: int = 300) -> tuple[bool, str]:
    rng = _rng("proba")
    worst = 0.0
    for temp in (0.1737, 0.3162, 1.0):
        for _ in range(n_sets):
            C = int(rng.integers(2, 6))
            groups = [E.CandidateGroup(k + 1, rng.normal(0.5, 2.0, size=(int(rng.integers(1, 20)), C)))
                      for k in range(int(rng.integers(1, 6)))]
            p = E.predict_proba(groups, temp)
            if np.any(p < 0):
                return False, "negative probability"
            worst = max(worst, abs(float(p.sum()) - 1.0))
    return worst <= 1e-6, f"max |sum - 1| = {worst:.1e}"


# -- 9. perturbations --------------------------------------------------------------------------

def check_perturbations() -> tuple[bool, str]:
    rng = _rng("perturb")
    cfg = BackboneConfig(image_size=16, channels=1, patch_size=4, embed_dim=16, num_blocks=2, num_heads=2,
                         mlp_hidden=16, num_classes=2, tap_levels=1)
    problems = []
    for dtype in (torch.float32, F64):
        x = torch.as_tensor(rng.normal(size=(6, 16, 16, 1)), dtype=dtype)
        y = one_hot(rng.integers(0, 2, 6), 2, dtype)
        model = Backbone(cfg, RngStream(SEED, 9), dtype)
        model.requires_grad_(False)
        if not torch.equal(P.contrast(x, 1.0), x):
            problems.append("contrast r=1")
        if not torch.equal(P.gaussian_noise(x, 0.0, RngStream(1, 1)), x):
            problems.append("noise g=0")
        if not torch.equal(P.downsample(x, 1, 4), x):
            problems.append("downsample w=1")
        drift = float((P.contrast(x, 0.7).mean(dim=(1, 2, 3)) - x.mean(dim=(1, 2, 3))).abs().max())
        if drift > 1e-6:
            problems.append(f"contrast mean drift {drift:.1e}")
        for name, adv in (("fgsm", P.fgsm(x, y, model, 0.03)), ("pgd", P.pgd(x, y, model, 0.03, 10, 0.01))):
            over = (adv - x).abs() > torch.tensor(0.03, dtype=dtype)
            if bool(over.any()):
                problems.append(f"{name} {dtype} exceeds eps at {int(over.sum())} entries")
    return not problems, "; ".join(problems) or "identities exact, contrast mean kept, attacks within eps=0.03"


# -- 10-12. end-to-end toy run ----------------------------------------------------------------

REPORT_FILES = ("predictions.jsonl", "summary.csv", "piw_pv.csv", "bins.csv")


@dataclass
class ToyRun:
    out: Path
    summary: dict
    seconds: float
    stage_digests: dict
    reports: dict[str, bytes]
    checkpoint: bytes


def toy_run(out: Path, seed: int = 0) -> ToyRun:
    import json

    from .cli import CHECKPOINT_NAME, infer_run, train_run
    from .config import build_config

    config = build_config({"train": {"seed": seed}, "data": {"seed": seed}, "infer": {"seed": seed}})
    start = time.perf_counter()
    path = train_run(config, out)
    summary = infer_run(path, out / "report")
    seconds = time.perf_counter() - start
    manifest = json.loads((out / "train_manifest.json").read_text())
    reports = {f: (out / "report" / f).read_bytes() for f in REPORT_FILES}
    return ToyRun(out, summary, seconds, manifest["stage_digests"], reports, (out / CHECKPOINT_NAME).read_bytes())


@functools.lru_cache(maxsize=1)
def toy_runs() -> tuple[ToyRun, ToyRun]:
    """Two independent single-threaded runs of the toy preset with the same seeds."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        root = Path(tempfile.mkdtemp(prefix="nestdiff-toy-"))
        return toy_run(root / "a"), toy_run(root / "b")
    finally:
        torch.set_num_threads(prev)


def check_end_to_end() -> tuple[bool, str]:
    a, b = toy_runs()
    s = a.summary
    identical = a.reports == b.reports and a.checkpoint == b.checkpoint
    ok = s["backbone_accuracy"] >= 0.97 and s["accuracy"] >= 0.95 and a.seconds < 600 and identical
    return ok, (f"backbone acc {s['backbone_accuracy']:.3f}, ensemble acc {s['accuracy']:.3f}, "
                f"ECE {s['ece10']:.3f}, train+infer {a.seconds:.0f}s, identical reruns={identical}")


def check_drift_trend() -> tuple[bool, str]:
    from .cli import CHECKPOINT_NAME, probe_run

    a, _ = toy_runs()
    res = probe_run(a.out / CHECKPOINT_NAME, "gaussian:0.5", a.out / "drift.csv")
    frac = res["deepest_exceeds_first"]
    means = ", ".join(f"{r['mean_distance']:.2f}" for r in res["blocks"])
    return frac >= 0.8, f"deepest > first on {frac:.1%} of test instances; block means [{means}]"


def check_freeze() -> tuple[bool, str]:
    a, _ = toy_runs()
    d = a.stage_digests
    kept = (d["shallow"]["backbone"] == d["backbone"]["backbone"]
            and d["diffusion"]["backbone"] == d["backbone"]["backbone"]
            and d["diffusion"]["shallow"] == d["shallow"]["shallow"])
    moved = d["shallow"]["shallow"] != d["backbone"]["shallow"] and d["diffusion"]["diffusion"] != d["shallow"]["diffusion"]
    return kept and moved, f"earlier-stage hashes unchanged={kept}, trained stages changed={moved}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]], bool]] = [
    ("1 gradient correctness", check_gradients, False),
    ("2 forward-sampling equivalence", check_forward_equivalence, False),
    ("3 posterior equivalence", check_posterior_equivalence, False),
    ("4 schedule invariants", check_schedule_invariants, False),
    ("5 round trip", check_round_trip, False),
    ("6 ensemble oracle", check_ensemble_oracle, False),
    ("7 metrics oracles", check_metrics_oracle, False),
    ("8 probability contract", check_probability_contract, False),
    ("9 perturbation contracts", check_perturbations, False),
    ("10 end-to-end toy run", check_end_to_end, True),
    ("11 drift trend", check_drift_trend, True),
    ("12 freeze contract", check_freeze, True),
]


def run_check(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def run_checks(full: bool = False, only: list[str] | None = None) -> list[CheckResult]:
    out = []
    for name, fn, slow in CHECKS:
        if slow and not full:
            continue
        if only and not any(o in name for o in only):
            continue
        out.append(run_check(name, fn))
    return out
