"""Non-parallel training loop: segment sampling, alternating D/G Adam updates,
identity-loss scheduling, and bitwise-resumable binary checkpoints.

Determinism contract: (seed, config, corpus) fixes every checkpoint byte and
every loss-CSV row. The loop is single-threaded; checkpoint writes are atomic
(write-temp-then-rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import autodiff as ad
from .audio import FeatureStats
from .autodiff import NumericError, Tensor
from .losses import (
    LossReport,
    LossWeights,
    adv_loss_d,
    adv_loss_g,
    cycle_loss,
    identity_loss,
    total_losses,
)
from .models import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec

CKPT_MAGIC = b"MCYCKPT1"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


class SpecMismatchError(CheckpointError):
    """Checkpoint was produced under a different model/config spec."""


@dataclass
class TrainConfig:
    iterations: int = 5000  # paper setting is 500000
    batch_size: int = 1
    segment_frames: int = 64
    lr_g: float = 0.0002
    lr_d: float = 0.0001
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 1000
    gen_spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    disc_spec: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    dtype: str = "float64"  # 'float32' halves memory traffic; still deterministic

    def __post_init__(self):
        if self.segment_frames % 4 != 0:
            raise ValueError("segment_frames must be divisible by 4")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_spec"] = self.gen_spec.to_dict()
        d["disc_spec"] = self.disc_spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["gen_spec"] = GeneratorSpec.from_dict(d["gen_spec"])
        d["disc_spec"] = DiscriminatorSpec.from_dict(d["disc_spec"])
        return cls(**d)


class Adam:
    """Adam with bias correction over an ordered list of named parameters."""

    def __init__(self, named_params, lr: float, beta1: float, beta2: float, eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    cfg: TrainConfig
    g_xy: Generator
    g_yx: Generator
    d_x: Discriminator
    d_y: Discriminator
    d2_x: Discriminator
    d2_y: Discriminator
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    iteration: int = 0
    stats_x: FeatureStats | None = None
    stats_y: FeatureStats | None = None

    def models(self):
        return [("g_xy", self.g_xy), ("g_yx", self.g_yx), ("d_x", self.d_x),
                ("d_y", self.d_y), ("d2_x", self.d2_x), ("d2_y", self.d2_y)]

    def named_tensors(self):
        for prefix, model in self.models():
            for name, p in model.named_params():
                yield f"{prefix}.{name}", p


def new_state(cfg: TrainConfig, stats_x=None, stats_y=None) -> TrainState:
    s = cfg.seed
    with ad.using_dtype(cfg.dtype):
        g_xy = Generator(cfg.gen_spec, s)
        g_yx = Generator(cfg.gen_spec, s + 1)
        d_x = Discriminator(cfg.disc_spec, s + 2)
        d_y = Discriminator(cfg.disc_spec, s + 3)
        d2_x = Discriminator(cfg.disc_spec, s + 4)
        d2_y = Discriminator(cfg.disc_spec, s + 5)
    gen_params = [(f"g_xy.{n}", p) for n, p in g_xy.named_params()]
    gen_params += [(f"g_yx.{n}", p) for n, p in g_yx.named_params()]
    disc_params = []
    for prefix, model in [("d_x", d_x), ("d_y", d_y), ("d2_x", d2_x), ("d2_y", d2_y)]:
        disc_params += [(f"{prefix}.{n}", p) for n, p in model.named_params()]
    return TrainState(
        cfg=cfg,
        g_xy=g_xy, g_yx=g_yx, d_x=d_x, d_y=d_y, d2_x=d2_x, d2_y=d2_y,
        opt_g=Adam(gen_params, cfg.lr_g, cfg.beta1, cfg.beta2),
        opt_d=Adam(disc_params, cfg.lr_d, cfg.beta1, cfg.beta2),
        rng=np.random.Generator(np.random.PCG64(s + 6)),
    )


def pad_to_frames(data: np.ndarray, frames: int) -> np.ndarray:
    """Reflection-pad (Q, T) along time until T >= frames."""
    while data.shape[1] < frames:
        need = min(frames - data.shape[1], data.shape[1] - 1)
        if need == 0:  # single-frame utterance: repeat it
            data = np.concatenate([data, data], axis=1)
            continue
        data = np.pad(data, ((0, 0), (0, need)), mode="reflect")
    return data


def sample_segment(corpus: list[np.ndarray], rng: np.random.Generator, frames: int = 64) -> np.ndarray:
    """Uniform utterance, uniform start offset; deterministic given rng state."""
    if not corpus:
        raise ValueError("cannot sample from an empty corpus")
    utt = corpus[int(rng.integers(len(corpus)))]
    if utt.shape[1] < frames:
        raise ValueError("corpus contains utterances shorter than the segment (pad at load)")
    off = int(rng.integers(utt.shape[1] - frames + 1))
    return utt[:, off : off + frames].copy()


def train_step(state: TrainState, x_seg: np.ndarray, y_seg: np.ndarray) -> LossReport:
    """One discriminator update then one generator update; mutates *state*."""
    with ad.using_dtype(state.cfg.dtype):
        return _train_step(state, x_seg, y_seg)


def _train_step(state: TrainState, x_seg: np.ndarray, y_seg: np.ndarray) -> LossReport:
    w = state.cfg.weights
    x = Tensor(x_seg)
    y = Tensor(y_seg)

    # cached generator graph, reused by both phases via detachment
    fake_y = state.g_xy(x)
    fake_x = state.g_yx(y)
    x_cyc = state.g_yx(fake_y)
    y_cyc = state.g_xy(fake_x)
    use_id = state.iteration < w.id_cutoff_iters
    if use_id:
        id_x = state.g_yx(x)
        id_y = state.g_xy(y)

    # --- discriminator phase (detached fakes) ---
    state.opt_d.zero_grad()
    adv_d = adv_loss_d(state.d_x(x), state.d_x(fake_x.detach())) + adv_loss_d(
        state.d_y(y), state.d_y(fake_y.detach())
    )
    adv2_d = adv_loss_d(state.d2_x(x), state.d2_x(x_cyc.detach())) + adv_loss_d(
        state.d2_y(y), state.d2_y(y_cyc.detach())
    )
    total_d = adv_d + adv2_d
    total_d.backward()
    state.opt_d.step()

    # --- generator phase (fresh discriminator forwards after the D update) ---
    state.opt_g.zero_grad()
    adv_g = adv_loss_g(state.d_y(fake_y)) + adv_loss_g(state.d_x(fake_x))
    adv2_g = adv_loss_g(state.d2_x(x_cyc)) + adv_loss_g(state.d2_y(y_cyc))
    cyc = cycle_loss(x, x_cyc, y, y_cyc)
    id_term = identity_loss(x, id_x, y, id_y) if use_id else Tensor(0.0)
    total_g, _ = total_losses(adv_g, adv_d, adv2_g, adv2_d, cyc, id_term, w, state.iteration)
    total_g.backward()
    state.opt_g.step()

    report = LossReport(
        iteration=state.iteration,
        adv_g=adv_g.item(),
        adv_d=adv_d.item(),
        adv2_g=adv2_g.item(),
        adv2_d=adv2_d.item(),
        cyc=cyc.item(),
        id=id_term.item() if use_id else 0.0,
        total_g=total_g.item(),
        total_d=total_d.item(),
    )
    state.iteration += 1
    values = [report.adv_g, report.adv_d, report.adv2_g, report.adv2_d,
              report.cyc, report.id, report.total_g, report.total_d]
    if not all(np.isfinite(v) for v in values):
        raise NumericError(
            f"non-finite loss at iteration {report.iteration}: {values}"
        )
    return report


# --- checkpoint serialization -------------------------------------------------


def _stats_to_jsonable(stats):
    if stats is None:
        return None
    return {"mean": [float(v) for v in stats.mean], "std": [float(v) for v in stats.std]}


def _stats_from_jsonable(d):
    if d is None:
        return None
    return FeatureStats(np.array(d["mean"]), np.array(d["std"]))


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "format_version": CKPT_VERSION,
        "tool_version": __version__,
        "iteration": state.iteration,
        "t_g": state.opt_g.t,
        "t_d": state.opt_d.t,
        "config": state.cfg.to_dict(),
        "stats_x": _stats_to_jsonable(state.stats_x),
        "stats_y": _stats_to_jsonable(state.stats_y),
    }
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    meta_b = json.dumps(meta, sort_keys=True).encode()
    chunks.append(struct.pack("<Q", len(meta_b)))
    chunks.append(meta_b)

    named = [(n, p.data) for n, p in state.named_tensors()]
    for opt, label in [(state.opt_g, "opt_g"), (state.opt_d, "opt_d")]:
        for n, _ in opt.params:
            named.append((f"{label}.m.{n}", opt.m[n]))
            named.append((f"{label}.v.{n}", opt.v[n]))
    chunks.append(struct.pack("<I", len(named)))
    for name, arr in named:
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    rng_b = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode()
    chunks.append(struct.pack("<Q", len(rng_b)))
    chunks.append(rng_b)
    payload = b"".join(chunks)
    payload += hashlib.sha256(payload).digest()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path) -> TrainState:
    """Reconstruct a TrainState; the round trip is bitwise exact."""
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(payload) < len(CKPT_MAGIC) + 32:
        raise CheckpointError(f"checkpoint {path} is truncated")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} failed its checksum")
    r = _Reader(body)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.unpack("<Q")).decode())
    cfg = TrainConfig.from_dict(meta["config"])
    state = new_state(cfg)
    state.iteration = meta["iteration"]
    state.opt_g.t = meta["t_g"]
    state.opt_d.t = meta["t_d"]
    state.stats_x = _stats_from_jsonable(meta["stats_x"])
    state.stats_y = _stats_from_jsonable(meta["stats_y"])

    arrays = {}
    n_tensors = r.unpack("<I")
    for _ in range(n_tensors):
        name = r.take(r.unpack("<H")).decode()
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<Q") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
    rng_state = json.loads(r.take(r.unpack("<Q")).decode())
    state.rng.bit_generator.state = rng_state

    for name, p in state.named_tensors():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        if arrays[name].shape != p.data.shape:
            raise SpecMismatchError(
                f"tensor {name} shape {arrays[name].shape} != model shape {p.data.shape}"
            )
        p.data = arrays[name].astype(p.data.dtype)  # exact for values saved from f32
    for opt, label in [(state.opt_g, "opt_g"), (state.opt_d, "opt_d")]:
        for n, p in opt.params:
            opt.m[n] = arrays[f"{label}.m.{n}"].astype(p.data.dtype)
            opt.v[n] = arrays[f"{label}.v.{n}"].astype(p.data.dtype)
    return state


def _require_matching_specs(cfg: TrainConfig, state: TrainState) -> None:
    if cfg.gen_spec.to_dict() != state.cfg.gen_spec.to_dict():
        raise SpecMismatchError("generator spec differs from the checkpoint's")
    if cfg.disc_spec.to_dict() != state.cfg.disc_spec.to_dict():
        raise SpecMismatchError("discriminator spec differs from the checkpoint's")


def _csv_echo(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True)
    return f"# config: {blob} tool_version={__version__}"


def fit(
    cfg: TrainConfig,
    corpus_x: list[np.ndarray],
    corpus_y: list[np.ndarray],
    out_dir,
    resume_from=None,
    stats_x=None,
    stats_y=None,
    progress=None,
) -> str:
    """Run the training loop; returns the final checkpoint path.

    Writes ``loss.csv`` plus ``ckpt_<iteration>.bin`` files under *out_dir*.
    Resuming from a checkpoint continues bitwise identically to an
    uninterrupted run.
    """
    os.makedirs(out_dir, exist_ok=True)
    if not corpus_x or not corpus_y:
        raise ValueError("both corpora must be nonempty")
    corpus_x = [pad_to_frames(u, cfg.segment_frames) for u in corpus_x]
    corpus_y = [pad_to_frames(u, cfg.segment_frames) for u in corpus_y]

    csv_path = os.path.join(out_dir, "loss.csv")
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        _require_matching_specs(cfg, state)
        state.cfg = cfg
        kept = [_csv_echo(cfg), LossReport.CSV_HEADER]
        if os.path.exists(csv_path):
            with open(csv_path) as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if line.startswith("#") or line.startswith("iteration"):
                        continue  # header/echo rewritten for the resuming config
                    if line and int(line.split(",", 1)[0]) < state.iteration:
                        kept.append(line)
        with open(csv_path, "w") as fh:
            fh.write("\n".join(kept) + "\n")
    else:
        state = new_state(cfg, stats_x, stats_y)
        state.stats_x = stats_x
        state.stats_y = stats_y
        with open(csv_path, "w") as fh:
            fh.write(_csv_echo(cfg) + "\n" + LossReport.CSV_HEADER + "\n")
        save_checkpoint(state, os.path.join(out_dir, "ckpt_000000.bin"))

    def ckpt_path(it: int) -> str:
        return os.path.join(out_dir, f"ckpt_{it:06d}.bin")

    csv_fh = open(csv_path, "a")
    try:
        while state.iteration < cfg.iterations:
            x_seg = sample_segment(corpus_x, state.rng, cfg.segment_frames)
            y_seg = sample_segment(corpus_y, state.rng, cfg.segment_frames)
            try:
                report = train_step(state, x_seg, y_seg)
            except NumericError:
                save_checkpoint(state, os.path.join(out_dir, "ckpt_diagnostic.bin"))
                raise
            csv_fh.write(report.csv_row() + "\n")
            csv_fh.flush()
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                save_checkpoint(state, ckpt_path(state.iteration))
            if progress is not None:
                progress(report)
    finally:
        csv_fh.close()
    final = ckpt_path(cfg.iterations)
    if not os.path.exists(final):
        save_checkpoint(state, final)
    return final
