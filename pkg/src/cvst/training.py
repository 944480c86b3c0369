"""Two-stage progressive training of the desk codec.

Stage 1 fits the transforms on distortion alone (unit modulation, no MRA,
full-rate transmission).  Stage 2 minimizes ``k_t + lambda (D_t + D_ntc)`` with
one ``(lambda, SNR)`` pair drawn per batch; quantization is replaced by additive
uniform noise throughout training.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .allocator import EtaConfig
from .errors import ContractViolation, InvalidInput, NumericalFailure
from .mimo import ChannelSpec
from .numerics import ParamStore, SeededRng, Tensor, no_grad
from .pipeline import LAMBDA_SET, SNR_SET_DB, CvstModel, ModelConfig, channel_state
from .video import ClipSpec, synth_video

CKPT_MAGIC = b"CVSTCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Schedule:
    """Step counts, batch size and the learning-rate ramp of both stages.

    The learning rate decays geometrically from ``lr_start`` to ``lr_end``
    within each stage.  ``max_chain`` bounds how many extra (non-differentiated)
    P-frames are coded before the graded one, so the model also learns from
    references that already carry accumulated coding error.
    """

    stage1_steps: int = 300
    stage2_steps: int = 700
    batch: int = 4
    lr_start: float = 1e-2
    lr_end: float = 4e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    lambdas: tuple = LAMBDA_SET
    snrs_db: tuple = SNR_SET_DB
    max_chain: int = 2

    def __post_init__(self):
        if not (self.lr_start > 0 and 0 < self.lr_end <= self.lr_start):
            raise InvalidInput("learning rates must be positive and non-increasing")
        if self.batch < 1 or self.stage1_steps < 0 or self.stage2_steps < 0 or self.max_chain < 0:
            raise InvalidInput("invalid step counts")
        if not self.lambdas or not self.snrs_db:
            raise InvalidInput("lambda and SNR sets must be non-empty")

    @classmethod
    def full_scale(cls) -> "Schedule":
        """Full-scale optimizer settings (batch 16, 5e-5 -> 2e-5)."""
        return cls(batch=16, lr_start=5e-5, lr_end=2e-5)

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    def stage(self, step: int) -> int:
        return 1 if step < self.stage1_steps else 2

    def lr(self, step: int) -> float:
        if step < self.stage1_steps:
            frac = step / max(self.stage1_steps - 1, 1)
        else:
            frac = (step - self.stage1_steps) / max(self.stage2_steps - 1, 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** min(frac, 1.0)


def sample_conditions(rng: SeededRng, lambdas=LAMBDA_SET, snrs_db=SNR_SET_DB):
    """One ``(lambda, snr_db)`` pair, each uniform over its set."""
    lam = float(lambdas[int(rng.integers(0, len(lambdas)))])
    snr = float(snrs_db[int(rng.integers(0, len(snrs_db)))])
    return lam, snr


@dataclass
class LossReport:
    k_t: float
    D_t: float
    D_ntc: float
    L_t: float
    lam: float
    snr_db: float
    stage: int


def combine_loss(k_t, D_t, D_ntc, lam, stage):
    """``D_t`` in stage 1; ``k_t + lambda (D_t + D_ntc)`` in stage 2 (tensors or floats)."""
    if stage == 1:
        return D_t
    if stage == 2:
        return k_t + (D_t + D_ntc) * lam
    raise InvalidInput(f"stage must be 1 or 2, got {stage}")


def compute_loss(out, x, stage, lam, model: CvstModel, snr_db=float("nan"), intra=None):
    """Loss tensor and report for a batch ``out`` of P-frame outputs against frames ``x``.

    ``intra`` optionally holds ``(x_hat, x)`` of the I frames sent in the same
    batch; ``D_t`` is then the mean frame distortion over both frame types.
    """
    scale = model.cfg.distortion_scale
    D_t = ((out.x_hat - x) ** 2).mean() * scale
    if intra is not None:
        D_t = (D_t + ((intra[0] - intra[1]) ** 2).mean() * scale) * 0.5
    if stage == 2:
        D_ntc = ((out.x_ntc - x) ** 2).mean() * scale
        k_t = out.surrogate_symbols(model.cfg.eta).mean()
    else:
        D_ntc = Tensor(0.0)
        k_t = Tensor(0.0)
    loss = combine_loss(k_t, D_t, D_ntc, lam, stage)
    report = LossReport(float(k_t.data), float(D_t.data), float(D_ntc.data), float(loss.data), lam, snr_db, stage)
    if not all(math.isfinite(v) for v in (report.k_t, report.D_t, report.D_ntc, report.L_t)):
        raise NumericalFailure(f"non-finite loss {report}")
    return loss, report


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, params: ParamStore, betas=(0.9, 0.999), weight_decay=1e-4, eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float):
        grads = {n: self.params.grad(n) for n in self.params.names()}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalFailure("non-finite gradient; step skipped")
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for n, p in self.params.items():
            g = grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            update = (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            p.data[...] -= lr * (update + self.wd * p.data)


def default_corpus(cfg: ModelConfig, frames=7, seed=0):
    """The fixed 8-clip training corpus (one static clip, seven translations)."""
    speeds = [(0, 0), (4, 0), (0, 4), (4, 4), (-4, 0), (4, -4), (2, 2), (8, 0)]  # (dx, dy)
    return [synth_video(ClipSpec(cfg.height, cfg.width, frames, sp, pattern_seed=seed * 100 + i),
                        SeededRng(seed, i)) for i, sp in enumerate(speeds)]


@dataclass
class Batch:
    """``x_prev`` is coded as the I frame, ``x_mid`` (n, B, 3, H, W) as ungraded P frames."""

    x_prev: np.ndarray
    x_cur: np.ndarray
    x_mid: np.ndarray | None = None


class Trainer:
    """Runs :meth:`train_step` over the schedule; one optimizer step per batch."""

    def __init__(self, model: CvstModel, corpus, schedule: Schedule = Schedule(), seed: int = 0):
        self.model = model
        self.corpus = [np.asarray(c, dtype=np.float64) for c in corpus]
        self.schedule = schedule
        self.rng = SeededRng(seed, 0x7EA1)
        self.opt = AdamW(model.params, schedule.betas, schedule.weight_decay)
        self.step_index = 0
        self.history: list[LossReport] = []

    def sample_batch(self, rng: SeededRng, chain: int = 0) -> Batch:
        prev, mid, cur = [], [], []
        for _ in range(self.schedule.batch):
            clip = self.corpus[int(rng.integers(0, len(self.corpus)))]
            if clip.shape[0] < chain + 2:
                raise InvalidInput(f"clips of {clip.shape[0]} frames cannot hold a chain of {chain}")
            t = int(rng.integers(chain + 1, clip.shape[0]))
            prev.append(clip[t - 1 - chain])
            mid.append(clip[t - chain:t])
            cur.append(clip[t])
        x_mid = np.stack(mid, axis=1) if chain else None
        return Batch(np.stack(prev), np.stack(cur), x_mid)

    def forward(self, batch: Batch, lam, snr_db, stage, rng: SeededRng, frozen=None):
        """Loss tensor and report for one batch under fixed random streams."""
        model = self.model
        cfg = model.cfg
        B = batch.x_cur.shape[0]
        spec = ChannelSpec(cfg.n_tx, cfg.n_rx, snr_db)
        ref_states = [channel_state(rng.spawn("ref", b), spec) for b in range(B)]
        ref_rngs = [rng.spawn("ref_noise", b) for b in range(B)]
        f_int, x_int, _ = model.i_frame_tensor(batch.x_prev, ref_states, ref_rngs)
        li = model.lam_index(lam)
        # the graded P frame sees a constant reference: the I frame's
        # reconstruction, possibly carried through a few ungraded P frames
        if frozen is not None and "reference" in frozen:
            f_ref = frozen["reference"]
        else:
            f_ref = f_int.data
            n_mid = 0 if batch.x_mid is None else batch.x_mid.shape[0]
            with no_grad():
                for j in range(n_mid):
                    st = [channel_state(rng.spawn("mid", j, b), spec) for b in range(B)]
                    rg = [rng.spawn("mid_noise", j, b) for b in range(B)]
                    f_ref = model.p_frame(batch.x_mid[j], f_ref, li, snr_db, st, rg, mode="noise",
                                          stage=stage).f_hat.data
            if frozen is not None:
                frozen["reference"] = f_ref
        states = [channel_state(rng.spawn("cur", b), spec) for b in range(B)]
        rngs = [rng.spawn("cur_noise", b) for b in range(B)]
        out = model.p_frame(batch.x_cur, f_ref, li, snr_db, states, rngs, mode="noise", frozen=frozen,
                            stage=stage, with_ntc=stage == 2)
        return compute_loss(out, batch.x_cur, stage, lam, model, snr_db, intra=(x_int, batch.x_prev))

    def train_step(self, lr: float | None = None) -> LossReport:
        sch = self.schedule
        step = self.step_index
        stage = sch.stage(step)
        if stage == 2 and not self.model.stage1_done:
            raise ContractViolation("stage 2 needs transforms initialized by stage 1")
        rng = self.rng.spawn("step", step)
        chain = int(rng.spawn("chain").integers(0, sch.max_chain + 1)) if sch.max_chain else 0
        batch = self.sample_batch(rng.spawn("batch"), chain)
        if stage == 1:
            lam, snr = float(sch.lambdas[0]), float(sch.snrs_db[int(rng.spawn("snr").integers(0, len(sch.snrs_db)))])
        else:
            lam, snr = sample_conditions(rng.spawn("cond"), sch.lambdas, sch.snrs_db)
        loss, report = self.forward(batch, lam, snr, stage, rng.spawn("fwd"))
        self.model.params.zero_grad()
        loss.backward()
        self.opt.step(sch.lr(step) if lr is None else lr)
        self.step_index += 1
        if self.step_index >= sch.stage1_steps:
            self.model.stage1_done = True
        self.history.append(report)
        return report

    def run(self, steps: int | None = None, callback=None):
        end = self.schedule.total_steps if steps is None else self.step_index + steps
        while self.step_index < end:
            rep = self.train_step()
            if callback is not None:
                callback(self.step_index, rep)
        return self.history


def smoothed(values, window=50):
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train_model(cfg: ModelConfig = ModelConfig(), schedule: Schedule = Schedule(), seed=0, corpus=None,
                callback=None):
    model = CvstModel(cfg)
    trainer = Trainer(model, corpus if corpus is not None else default_corpus(cfg, seed=seed), schedule, seed)
    trainer.run(callback=callback)
    return model, trainer


# -- checkpoints ---------------------------------------------------------------


def _config_to_json(cfg: ModelConfig) -> str:
    d = asdict(cfg)
    d["eta"] = asdict(cfg.eta)
    return json.dumps(d, sort_keys=True)


def config_from_dict(d) -> ModelConfig:
    d = dict(d)
    eta = d.pop("eta", None)
    for key in ("lambdas", "snr_range"):
        if key in d:
            d[key] = tuple(d[key])
    if eta is not None:
        eta = {k: tuple(v) if isinstance(v, list) else v for k, v in eta.items()}
        d["eta"] = EtaConfig(**eta)
    return ModelConfig(**d)


def save_checkpoint(path, model: CvstModel, step: int = 0):
    """Binary blob: magic, version, step, stage flag, config JSON, named f64 tensors."""
    buf = io.BytesIO()
    cfg_json = _config_to_json(model.cfg).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQBI", CKPT_VERSION, step, int(model.stage1_done), len(cfg_json)))
    buf.write(cfg_json)
    items = list(model.params.items())
    buf.write(struct.pack("<I", len(items)))
    for name, p in items:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(model, step)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise InvalidInput("not a checkpoint")
    off = 8
    version, step, stage_flag, n_cfg = struct.unpack_from("<IQBI", blob, off)
    if version != CKPT_VERSION:
        raise InvalidInput(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQBI")
    cfg = config_from_dict(json.loads(blob[off:off + n_cfg].decode()))
    off += n_cfg
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    model = CvstModel(cfg)
    model.params.load_state(state)
    model.stage1_done = bool(stage_flag)
    return model, step
