"""Named invariant checks with a pass/fail table.

Two families share one runner: quick module properties, and the end-to-end
acceptance criteria (numbered ``C01``..``C13``).  Criteria 9-12 share a single
trained desk model, built once per run.  Every check is deterministic.

Checks look up library functions through their modules at call time, so a
monkeypatched (e.g. deliberately corrupted) implementation is what gets tested.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import allocator, corrmap, entropy, experiment, latent, mimo, pipeline, training, transceiver, video
from .errors import CorruptCodeword
from .numerics import ParamStore, SeededRng, Tensor, grad_check, svd_complex

SELFTEST_BUDGET_S = 300.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


class Context:
    """Lazily built shared state (the trained model and its training history)."""

    def __init__(self, seed=0, model=None, trainer=None):
        self.seed = seed
        self._model, self._trainer = model, trainer
        self.train_seconds = None

    def trained(self):
        if self._model is None:
            t0 = time.perf_counter()
            self._model, self._trainer = training.train_model(seed=self.seed)
            self.train_seconds = time.perf_counter() - t0
        return self._model, self._trainer


# -- acceptance criteria ---------------------------------------------------------


def c01_svd(ctx):
    rng = SeededRng(ctx.seed, 0x5FD)
    t0 = time.perf_counter()
    worst_rec = worst_uni = 0.0
    ordered = True
    for i in range(100):
        r = rng.spawn(i)
        rows, cols = int(r.integers(1, 17)), int(r.integers(1, 17))
        A = r.complex_normal((rows, cols))
        U, s, V = svd_complex(A)
        worst_rec = max(worst_rec, np.abs(U @ np.diag(s) @ V.conj().T - A).max())
        k = s.size
        worst_uni = max(worst_uni, np.abs(U.conj().T @ U - np.eye(k)).max(), np.abs(V.conj().T @ V - np.eye(k)).max())
        ordered &= bool(np.all(np.diff(s) <= 0) and np.all(s >= 0))
    dt = time.perf_counter() - t0
    ok = worst_rec < 1e-8 and worst_uni < 1e-8 and ordered and dt < 5.0
    return ok, f"residual {worst_rec:.1e}, unitarity {worst_uni:.1e}, descending={ordered}, {dt:.2f}s"


def c02_channel_identity(ctx):
    rng = SeededRng(ctx.seed, 0xE01)
    spec = mimo.ChannelSpec(8, 8, 10.0)
    worst = 0.0
    for i in range(20):
        r = rng.spawn("id", i)
        H = mimo.sample_rayleigh(r, spec)
        pre = mimo.SvdPrecoder.from_channel(H)
        s = [r.complex_normal(16) for _ in range(8)]
        out = mimo.transmit(s, H, pre, mimo.NoiseSpec(0.0), r)
        worst = max(worst, max(np.abs(a - b).max() for a, b in zip(out, s)))
    r = rng.spawn("noise")
    H = mimo.sample_rayleigh(r, spec)
    pre = mimo.SvdPrecoder.from_channel(H)
    n = 10_000
    zeros = [np.zeros(n, complex) for _ in range(8)]
    out = mimo.transmit(zeros, H, pre, spec.noise(), r.spawn("draw"))
    measured = np.array([np.mean(np.abs(o) ** 2) for o in out])
    expected = spec.sigma2 / pre.lam**2
    rel = float(np.max(np.abs(measured / expected - 1)))
    return worst < 1e-6 and rel < 0.05, f"noiseless error {worst:.1e}, noise power deviation {rel:.1%}"


def _full_size_head(seed):
    part = latent.GroupPartition(64, 4, 8)
    return part, corrmap.EmbeddingHead(ParamStore(), part, 8, 16, SeededRng(seed, 0xC0))


def c03_correlation_map(ctx):
    part, head = _full_size_head(ctx.seed)
    rng = SeededRng(ctx.seed, 0xC3)
    shape_ok, worst_col, worst_eq = True, 0.0, 0.0
    for i in range(50):
        r = rng.spawn(i)
        c = r.normal(0, 1, (64, 4, 4))
        H = mimo.sample_rayleigh(r, mimo.ChannelSpec(8, 8))
        pre = mimo.SvdPrecoder.from_channel(H)
        cm = corrmap.build_map(c, H, pre, head)
        shape_ok &= cm.scores.shape == (16, 8) and cm.gathers.shape == (2, 8, 8)
        worst_col = max(worst_col, np.abs(cm.gathers.sum(axis=1) - 1).max())
        # permute groups inside each gather and the subchannels; the map follows
        gperm = np.concatenate([g * 8 + r.permutation(8) for g in range(2)])
        sperm = r.permutation(8)
        c_p = c.reshape(16, 4, 4, 4)[gperm].reshape(64, 4, 4)
        pre_p = mimo.SvdPrecoder(pre.U[:, sperm], pre.lam[sperm], pre.V[:, sperm])
        cm_p = corrmap.build_map(c_p, H, pre_p, head)
        worst_eq = max(worst_eq, np.abs(cm_p.scores - cm.scores[gperm][:, sperm]).max())
    ok = shape_ok and worst_col < 1e-9 and worst_eq < 1e-9
    return ok, f"16x8 in two 8x8 gathers={shape_ok}, column-sum error {worst_col:.1e}, equivariance {worst_eq:.1e}"


def _brute_force(W):
    """Best objective and the lexicographically first permutation achieving it."""
    n = W.shape[0]
    best, arg = -math.inf, None
    for p in itertools.permutations(range(n)):
        v = float(W[np.arange(n), list(p)].sum())
        if v > best + 1e-12:
            best, arg = v, p
    return best, arg


def c04_hungarian(ctx):
    rng = SeededRng(ctx.seed, 0x4A)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        r = rng.spawn(i)
        n = 2 + i % 7
        W = r.uniform(0, 1, (n, n)) if i % 3 else r.integers(0, 3, (n, n)).astype(float)
        best, _ = _brute_force(W)
        perm = list(allocator.hungarian(W).perm)
        worst = max(worst, abs(float(W[np.arange(n), perm].sum()) - best))
    ties_ok = True
    tie_cases = [np.ones((3, 3)), np.zeros((5, 5)), np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
                 np.kron(np.eye(2), np.ones((2, 2))), np.array([[2.0, 1.0], [3.0, 2.0]])]
    for W in tie_cases:
        ties_ok &= tuple(allocator.hungarian(W).perm) == tuple(_brute_force(W)[1])
    dt = time.perf_counter() - t0
    ok = worst == 0.0 and ties_ok and dt < 10.0
    return ok, f"max objective gap {worst:.1e}, tie-break lexicographic={ties_ok}, {dt:.2f}s"


def c05_entropy(ctx):
    xs = np.arange(-4000, 4001, dtype=float)
    worst = 0.0
    for b in (0.1, 1.0, 10.0):
        for mu in (0.0, 0.3):
            worst = max(worst, abs(entropy.discrete_likelihood(xs, mu, b).sum() - 1),
                        abs(entropy.factorized_likelihood(xs, mu, b).sum() - 1))
    v1 = float(entropy.discrete_likelihood(0.0, 0.0, 1.0))
    v2 = float(entropy.factorized_likelihood(0.0, 0.0, 1.0))
    sig = lambda t: 1.0 / (1.0 + math.exp(-t))  # noqa: E731
    spot = max(abs(v1 - (1 - math.exp(-0.5))), abs(v2 - (sig(0.5) - sig(-0.5))),
               abs(entropy.discrete_likelihood(1.0, 0.0, 1.0) - 0.5 * (math.exp(-0.5) - math.exp(-1.5))))
    spot = max(spot, abs(v1 - 0.393469) - 5e-7, abs(v2 - 0.244919) - 5e-7)
    return worst < 1e-6 and spot < 1e-6, f"pmf sum error {worst:.1e}, spot error {spot:.1e}"


def c06_round_trips(ctx):
    rng = SeededRng(ctx.seed, 0x6E)
    worst = 0.0
    for i, (h, w) in enumerate([(4, 4), (5, 7), (3, 3), (8, 6), (1, 5)]):
        r = rng.spawn(i)
        f = r.normal(0, 3, (4, h, w))
        a, na = latent.checkerboard_split(f)
        worst = max(worst, np.abs(latent.checkerboard_merge(a, na, h, w) - f).max())
        q = latent.ModulationTerm(r.uniform(0.2, 3), r.uniform(0.1, 5, 4), r.uniform(0.1, 5, 4))
        worst = max(worst, np.abs(latent.demodulate(latent.modulate(f, q), q) - f).max())
        proj = transceiver.GroupProjection.build(2, 2, h, w, kind="dct" if i % 2 else "random", rng=r.spawn("b"))
        if proj.k_max >= 1:
            g = r.normal(0, 2, (2, h, w))
            sym, alpha = transceiver.project_group(g, proj.k_max, proj, "encode", index=1)
            back = transceiver.project_group(sym, proj.k_max, proj, "decode", index=1, scale=alpha)
            worst = max(worst, np.abs(back - g).max())
    return worst < 1e-9, f"max round-trip error {worst:.1e} (odd dims included)"


def c07_eta(ctx):
    part, head = _full_size_head(ctx.seed + 1)
    cfg = allocator.EtaConfig()
    rng = SeededRng(ctx.seed, 0x7E)
    in_range, ordered = True, True
    for i in range(100):
        r = rng.spawn(i)
        H = mimo.sample_rayleigh(r, mimo.ChannelSpec(8, 8))
        cm = corrmap.build_map(r.normal(0, 1, (64, 4, 4)), H, mimo.SvdPrecoder.from_channel(H), head,
                               tau=r.uniform(0.02, 0.5))
        ec = allocator.compute_eta(cm.scores, cfg, "context")
        ev = allocator.compute_eta(cm.scores, cfg, "motion")
        in_range &= bool(np.all((ec >= 0.25) & (ec <= 0.55)) and np.all((ev >= 0.07) & (ev <= 0.15)))
        ordered &= bool(ec.min() > ev.max())
    model, _ = ctx.trained()
    frames = 0
    additive = True
    for sd in range(3):
        x = video.synth_video(video.ClipSpec(32, 32, 6, (4, 4), pattern_seed=sd), SeededRng(sd))
        res = pipeline.run_gop(x, model, 0.12, 6.0, SeededRng(sd, 9))
        for led in res.ledgers:
            frames += 1
            additive &= led.k_total == led.k_c + led.k_v + led.k_cz + led.k_vz
            additive &= led.cbr == led.k_total / (3.0 * 32 * 32)
    ok = in_range and ordered and additive
    return ok, f"eta in range={in_range}, min(eta_c)>max(eta_v)={ordered}, ledger additive on {frames} frames={additive}"


def micro_trainer(seed=0, clips=2, frames=5):
    """A <=500-parameter model with a tiny corpus, for gradient checks."""
    cfg = pipeline.ModelConfig.micro()
    model = pipeline.CvstModel(cfg)
    corpus = [video.synth_video(video.ClipSpec(cfg.height, cfg.width, frames, (2, 0), pattern_seed=i),
                                SeededRng(seed, i)) for i in range(clips)]
    sch = training.Schedule(stage1_steps=25, stage2_steps=25, batch=2, lambdas=cfg.lambdas)
    return model, training.Trainer(model, corpus, sch, seed)


def micro_grad_error(trainer, seed=0, stage=2, chain=1):
    rng = SeededRng(seed, 0x6C)
    batch = trainer.sample_batch(rng.spawn("batch"), chain)
    lam = trainer.model.cfg.lambdas[0]
    frozen = {}

    def loss(_params):
        return trainer.forward(batch, lam, 8.0, stage, rng.spawn("fwd"), frozen)[0]

    return grad_check(loss, trainer.model.params)


def c08_gradients(ctx):
    model, tr = micro_trainer(ctx.seed)
    n = model.params.size()
    model.stage1_done = True
    e0 = micro_grad_error(tr, ctx.seed)
    model2, tr2 = micro_trainer(ctx.seed)
    tr2.run(50)
    e1 = micro_grad_error(tr2, ctx.seed + 1)
    ok = n <= 500 and max(e0, e1) < 1e-4
    return ok, f"{n} params; stage-2 max relative error {e0:.1e} at init, {e1:.1e} after 50 steps"


def stage2_progress(trainer, window=50):
    """(initial, final) smoothed stage-2 loss of a finished run."""
    start = trainer.schedule.stage1_steps
    L = np.array([r.L_t for r in trainer.history[start:]])
    return float(L[:window].mean()), float(training.smoothed(L, window)[-1])


def c09_training(ctx):
    model, tr = ctx.trained()
    first, last = stage2_progress(tr)
    finite = model.params.all_finite()
    dt = ctx.train_seconds
    ok = last < 0.8 * first and finite and (dt is None or dt < 240.0)
    timing = "" if dt is None else f", {dt:.0f}s"
    return ok, f"smoothed stage-2 loss {first:.1f} -> {last:.1f} ({last / first:.2f}x), finite={finite}{timing}"


def _grid(ctx, seeds, snrs=(9.0,), lambdas=(0.12,), csi="perfect"):
    model, _ = ctx.trained()
    cfg = experiment.ExperimentConfig(lambdas=tuple(lambdas), snrs_db=tuple(snrs), seeds=tuple(seeds),
                                      channel=experiment.ChannelSettings(csi=csi))
    rows, summary = experiment.run(cfg, model)
    return rows, summary["points"]


def c10_snr_trend(ctx):
    _, pts = _grid(ctx, range(20), snrs=(0.0, 6.0, 14.0))
    p = [pt["psnr_mean"] for pt in pts]
    ok = p[0] <= p[1] <= p[2] and p[2] - p[0] >= 1.0
    return ok, "PSNR " + " / ".join(f"{v:.2f}" for v in p) + f" dB at 0/6/14 dB (gain {p[2] - p[0]:.2f})"


def c11_rate_trend(ctx):
    _, pts = _grid(ctx, range(20), lambdas=pipeline.LAMBDA_SET)
    p = [pt["psnr_mean"] for pt in pts]
    c = [pt["cbr_mean"] for pt in pts]
    ok = all(a <= b for a, b in zip(p, p[1:])) and all(a <= b for a, b in zip(c, c[1:]))
    return ok, "PSNR " + " / ".join(f"{v:.2f}" for v in p) + "; CBR " + " / ".join(f"{v:.4f}" for v in c)


def c12_imperfect_csi(ctx, seeds=100):
    rows_p, _ = _grid(ctx, range(seeds))
    rows_l, _ = _grid(ctx, range(seeds), csi="ls")

    def per_seed(rows):
        acc = {}
        for r in rows:
            acc.setdefault(r.seed, []).append(r.psnr_db)
        return np.array([np.mean(acc[s]) for s in sorted(acc)])

    d = per_seed(rows_p) - per_seed(rows_l)
    se = d.std(ddof=1) / math.sqrt(d.size)
    lower = d.mean() - 1.6449 * se
    return lower > 0, f"perfect - LS = {d.mean():.3f} dB, one-sided 95% lower bound {lower:.3f} ({d.size} seeds)"


def _setup(ctx):
    model, tr = ctx.trained()
    return model.params.all_finite(), f"{model.params.size()} parameters, {tr.step_index} steps"


ACCEPTANCE = [
    ("C01 SVD correctness", c01_svd),
    ("C02 channel identity and noise power", c02_channel_identity),
    ("C03 correlation map", c03_correlation_map),
    ("C04 Hungarian equals brute force", c04_hungarian),
    ("C05 entropy normalization", c05_entropy),
    ("C06 structural round trips", c06_round_trips),
    ("C07 eta discipline and ledger additivity", c07_eta),
    ("C08 gradient fidelity", c08_gradients),
    ("C09 training progress", c09_training),
    ("C10 SNR trend", c10_snr_trend),
    ("C11 rate trend", c11_rate_trend),
    ("C12 imperfect CSI degradation", c12_imperfect_csi),
]


# -- module properties -----------------------------------------------------------


def p_rng(ctx):
    a, b = SeededRng(7).spawn("x", 1), SeededRng(7).spawn("x", 1)
    same = np.array_equal(a.normal(size=8), b.normal(size=8))
    other = not np.array_equal(SeededRng(7).spawn("x", 2).normal(size=8), SeededRng(7).spawn("x", 1).normal(size=8))
    return same and other, f"replayable={same}, streams distinct={other}"


def p_autodiff(ctx):
    ps = ParamStore()
    rng = SeededRng(ctx.seed, 0xAD)
    w = ps.add("w", rng.normal(0, 1, (3, 4)))
    b = ps.add("b", rng.normal(0, 1, 4))
    x = Tensor(rng.normal(0, 1, (5, 3)))
    err = grad_check(lambda _p: ((x @ w + b).tanh() ** 2).sum() + (x @ w).abs().mean(), ps)
    return err < 1e-6, f"composite grad_check {err:.1e}"


def p_mimo(ctx):
    rng = SeededRng(ctx.seed, 0x3B)
    spec = mimo.ChannelSpec(4, 6, 5.0)
    H = mimo.sample_rayleigh(rng, spec)
    P = mimo.orthogonal_pilots(4)
    Y = mimo.send_pilots(H, P, mimo.NoiseSpec(0.0), rng)
    est = np.abs(mimo.ls_estimate(P, Y) - H).max()
    g = mimo.lmmse_gain(mimo.SvdPrecoder.from_channel(H), spec.noise())
    ok = est < 1e-10 and bool(np.all((g > 0) & (g <= 1)))
    return ok, f"noiseless LS error {est:.1e}, LMMSE gains in (0, 1]"


def p_allocator(ctx):
    k = allocator.bandwidth_cost(np.array([0.0, 3.0, 1e6]), np.array([0.4, 0.4, 0.4]), 32)
    k = [int(v) for v in k]
    return k == [1, 2, 32], f"k = {k} for r = 0, 3, 1e6 bits"


def p_transceiver(ctx):
    rng = SeededRng(ctx.seed, 0x7C)
    cw = transceiver.Codeword((2, 1), 3, (1, 0), (0.5, 2.0),
                              [rng.complex_normal(2), rng.complex_normal(1)])
    back = transceiver.Codeword.from_bytes(cw.to_bytes())
    same = back.ks == cw.ks and back.assignment == cw.assignment and all(
        np.array_equal(a, b) for a, b in zip(back.symbols, cw.symbols))
    try:
        transceiver.Codeword.from_bytes(cw.to_bytes()[:-3])
        rejected = False
    except CorruptCodeword:
        rejected = True
    return same and rejected, f"byte round trip={same}, truncated blob rejected={rejected}"


def p_motion(ctx):
    rng = SeededRng(ctx.seed, 0x30)
    ref = rng.normal(0, 1, (4, 8, 8))
    cur = np.roll(ref, (-1, 2), axis=(1, 2))  # cur(p) = ref(p + (1, -2))
    v = pipeline.motion_estimate(cur, ref, radius=2)
    inner = v[:, 2:-2, 2:-2]
    ok = bool(np.all(inner[0] == 1) and np.all(inner[1] == -2))
    return ok, "interior field recovers a (1, -2) shift" if ok else f"got {np.unique(inner[0])}, {np.unique(inner[1])}"


def p_training(ctx):
    model, tr = micro_trainer(ctx.seed)
    before = model.params.state()
    rep = tr.train_step(lr=0.0)
    same = all(np.array_equal(before[k], v) for k, v in model.params.state().items())
    comps = rep.k_t >= 0 and rep.D_t >= 0 and math.isfinite(rep.L_t)
    return same and comps, f"zero learning rate leaves parameters unchanged={same}, loss terms valid={comps}"


def p_video(ctx):
    x = video.synth_video(video.ClipSpec(16, 16, 3, (1, 0), noise=0.0, pattern_seed=3))
    shift = np.abs(x[1][:, :, :-1] - x[0][:, :, 1:]).max()
    p = video.psnr(np.zeros(4), np.full(4, 0.1))
    ok = shift == 0 and abs(p - 20.0) < 1e-9 and video.psnr(x, x) == 99.0
    return ok, f"translation exact={shift == 0}, PSNR(MSE=0.01)={p:.6f}"


def p_csv_stable(ctx):
    model, _ = micro_trainer(ctx.seed)
    cfg = experiment.ExperimentConfig(clip=experiment.ClipSettings(4, 4, 3, (2, 0)), seeds=(0, 1),
                                      snrs_db=(0.0, 10.0), lambdas=model.cfg.lambdas)
    a = experiment.rows_to_csv(experiment.run(cfg, model)[0])
    b = experiment.rows_to_csv(experiment.run(replace(cfg, workers=2), model)[0])
    return a == b and a.count("\n") == 1 + 2 * 2 * 3, f"{a.count(chr(10)) - 1} rows, byte-identical={a == b}"


PROPERTIES = [
    ("rng streams", p_rng),
    ("autodiff gradients", p_autodiff),
    ("mimo pilots and LMMSE", p_mimo),
    ("bandwidth cost bounds", p_allocator),
    ("codeword serialization", p_transceiver),
    ("motion estimation", p_motion),
    ("optimizer zero step", p_training),
    ("synthetic video and PSNR", p_video),
    ("CSV stability", p_csv_stable),
]


def run_checks(checks, ctx=None, report=None):
    ctx = ctx or Context()
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn(ctx)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)
    return results


def format_row(res: CheckResult) -> str:
    return f"{'PASS' if res.passed else 'FAIL'}  {res.name:<42} {res.seconds:6.1f}s  {res.detail}"


def selftest(seed=0, printer=print) -> int:
    """Run everything, print the table, return the process exit code."""
    t0 = time.perf_counter()
    ctx = Context(seed)
    printer(f"{'':4}  {'check':<42} {'time':>7}  detail")
    results = run_checks(PROPERTIES + [("desk model training (setup)", _setup)] + ACCEPTANCE, ctx,
                         lambda r: printer(format_row(r)))
    total = time.perf_counter() - t0
    budget = CheckResult("C13 selftest runtime", total < SELFTEST_BUDGET_S,
                         f"{total:.0f}s of {SELFTEST_BUDGET_S:.0f}s", total)
    results.append(budget)
    printer(format_row(budget))
    failed = [r.name for r in results if not r.passed]
    printer(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 1 if failed else 0
