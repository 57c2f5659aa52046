"""Command-line entry point: feature extraction, training, conversion,
evaluation, ablation sweeps, and plot emission.

Exit codes: 0 success, 2 usage errors, 3 data errors, 4 numeric failures.
Every artifact written embeds the resolved configuration and tool version;
all commands are deterministic given fixed seeds and inputs.
"""

from __future__ import annotations

import argparse
import importlib.resources
import json
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .audio import (
    DataError,
    FeatureConfig,
    MelSpectrogram,
    apply_denorm,
    apply_norm,
    compute_stats,
    griffin_lim,
    load_stats,
    load_wav,
    log_mel,
    mel_cepstrum,
    save_stats,
    save_wav,
)
from .autodiff import NumericError, Tensor
from .fileio import load_manifest, load_spectrogram, save_spectrogram
from .layers import AdaptiveNormConfig
from .losses import LossWeights
from .metrics import evaluate_cepstra
from .models import DiscriminatorSpec, GeneratorSpec
from .training import (
    CheckpointError,
    TrainConfig,
    fit,
    load_checkpoint,
    new_state,
    sample_segment,
    train_step,
)
from .toy import ToySpec, generate_toy_corpus

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_config_file(path) -> dict:
    cfg = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            cfg[key.strip()] = _parse_value(value)
    return cfg


def builtin_defaults() -> dict:
    text = (
        importlib.resources.files("melcycle").joinpath("data/defaults.cfg").read_text()
    )
    cfg = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        cfg[key.strip()] = _parse_value(value)
    return cfg


def resolve_config(args) -> dict:
    """builtin defaults <- --config file <- explicit flags."""
    cfg = builtin_defaults()
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key, val in vars(args).items():
        if key in cfg and val is not None:
            cfg[key] = val
    cfg["tool_version"] = __version__
    return cfg


def train_config_from(cfg: dict, **overrides) -> TrainConfig:
    gen = GeneratorSpec(
        input_bins=cfg["input_bins"],
        base_channels=cfg["base_channels"],
        n_residual_blocks=cfg["n_residual_blocks"],
        adanorm=AdaptiveNormConfig(
            depth=cfg["adanorm_depth"],
            hidden_channels=cfg["adanorm_hidden"],
            kernel_size=cfg["adanorm_kernel"],
        ),
        adanorm_position=cfg["adanorm_position"],
    )
    disc = DiscriminatorSpec(
        base_channels=cfg["disc_channels"],
        second_last_freq_kernel_doubled=cfg["disc_freq_kernel_doubled"],
    )
    kw = dict(
        iterations=cfg["iterations"],
        segment_frames=cfg["segment_frames"],
        lr_g=cfg["lr_g"],
        lr_d=cfg["lr_d"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        weights=LossWeights(cfg["lambda_cyc"], cfg["lambda_id"], cfg["id_cutoff_iters"]),
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        gen_spec=gen,
        disc_spec=disc,
        dtype=cfg["dtype"],
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def toy_spec_from(cfg: dict) -> ToySpec:
    return ToySpec(
        f0_range_a=(cfg["toy_f0_a_lo"], cfg["toy_f0_a_hi"]),
        f0_range_b=(cfg["toy_f0_b_lo"], cfg["toy_f0_b_hi"]),
        n_utterances=cfg["toy_n_utterances"],
        utterance_frames=cfg["toy_frames"],
        n_heldout=cfg["toy_heldout"],
        seed=cfg["toy_seed"],
    )


def _echo(cfg: dict) -> dict:
    return {"config": {k: cfg[k] for k in sorted(cfg)}, "tool_version": __version__}


def _list_dir(path, suffix) -> list[str]:
    if not os.path.isdir(path):
        raise DataError(f"{path} is not a directory")
    names = sorted(n for n in os.listdir(path) if n.endswith(suffix))
    return [os.path.join(path, n) for n in names]


def cmd_extract(args) -> int:
    cfg = resolve_config(args)
    wavs = _list_dir(args.wav_dir, ".wav")
    if not wavs:
        print(f"error: no .wav files in {args.wav_dir}", file=sys.stderr)
        return EXIT_DATA
    os.makedirs(args.out_dir, exist_ok=True)
    feature_cfg = FeatureConfig()
    mels = []
    failures = []
    for path in wavs:
        try:
            mels.append((path, log_mel(load_wav(path), feature_cfg)))
        except (DataError, FileNotFoundError) as exc:
            failures.append(f"{path}: {exc}")
    for path, m in mels:
        stem = os.path.splitext(os.path.basename(path))[0]
        save_spectrogram(m, os.path.join(args.out_dir, stem + ".melspec"), echo=_echo(cfg))
    if mels:
        stats = compute_stats([m for _, m in mels])
        save_stats(stats, args.stats_out, echo=json.dumps(_echo(cfg), sort_keys=True))
    if failures:
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_DATA
    print(f"extracted {len(mels)} spectrograms -> {args.out_dir}")
    return EXIT_OK


def cmd_toygen(args) -> int:
    cfg = resolve_config(args)
    spec = toy_spec_from(cfg)
    corpus_a, corpus_b, oracle = generate_toy_corpus(spec)
    echo = _echo(cfg)
    for sub, items in [
        ("corpus_a", corpus_a),
        ("corpus_b", corpus_b),
        ("oracle_a", [p.source_a for p in oracle]),
        ("oracle_b", [p.source_b for p in oracle]),
    ]:
        d = os.path.join(args.out_dir, sub)
        os.makedirs(d, exist_ok=True)
        for i, m in enumerate(items):
            save_spectrogram(m, os.path.join(d, f"utt{i:03d}.melspec"), echo=echo)
    for name, corpus in [("stats_a.txt", corpus_a), ("stats_b.txt", corpus_b)]:
        save_stats(
            compute_stats(corpus),
            os.path.join(args.out_dir, name),
            echo=json.dumps(echo, sort_keys=True),
        )
    print(f"toy corpus written to {args.out_dir}")
    return EXIT_OK


def _load_corpus(path) -> list[MelSpectrogram]:
    files = _list_dir(path, ".melspec")
    if not files:
        raise DataError(f"no .melspec files in {path}")
    return [load_spectrogram(f) for f in files]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tcfg = train_config_from(cfg)
    corpus_x = _load_corpus(args.corpus_x)
    corpus_y = _load_corpus(args.corpus_y)
    stats_x = load_stats(args.stats_x) if args.stats_x else compute_stats(corpus_x)
    stats_y = load_stats(args.stats_y) if args.stats_y else compute_stats(corpus_y)
    nx = [apply_norm(m, stats_x).data for m in corpus_x]
    ny = [apply_norm(m, stats_y).data for m in corpus_y]
    final = fit(
        tcfg,
        nx,
        ny,
        args.out_dir,
        resume_from=args.resume,
        stats_x=stats_x,
        stats_y=stats_y,
    )
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _pad_frames_multiple(data: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, int]:
    t = data.shape[1]
    rem = t % multiple
    if rem == 0:
        return data, t
    need = multiple - rem
    pad = data[:, -need - 1 : -1][:, ::-1] if t > need else np.tile(data[:, -1:], (1, need))
    return np.concatenate([data, pad], axis=1), t


def cmd_convert(args) -> int:
    cfg = resolve_config(args)
    state = load_checkpoint(args.checkpoint)
    if args.direction == "xy":
        gen, stats_in, stats_out = state.g_xy, state.stats_x, state.stats_y
    else:
        gen, stats_in, stats_out = state.g_yx, state.stats_y, state.stats_x
    if args.stats_in:
        stats_in = load_stats(args.stats_in)
    if args.stats_out:
        stats_out = load_stats(args.stats_out)
    if stats_in is None or stats_out is None:
        print(
            "error: checkpoint carries no feature stats; pass --stats-in/--stats-out",
            file=sys.stderr,
        )
        return EXIT_DATA
    files = _list_dir(args.src_dir, ".melspec")
    if not files:
        print(f"error: no .melspec files in {args.src_dir}", file=sys.stderr)
        return EXIT_DATA
    os.makedirs(args.out_dir, exist_ok=True)
    echo = _echo(cfg)
    echo["checkpoint"] = os.path.basename(str(args.checkpoint))
    echo["direction"] = args.direction
    for path in files:
        src = load_spectrogram(path)
        normed = apply_norm(src, stats_in)
        padded, orig_t = _pad_frames_multiple(normed.data)
        with ad.no_grad():
            out = gen(Tensor(padded)).data.astype(np.float64)
        out = out[:, :orig_t]
        conv = apply_denorm(
            MelSpectrogram(out, src.mel_bins, src.hop, src.window, src.sample_rate),
            stats_out,
        )
        if not np.all(np.isfinite(conv.data)):
            print(f"error: non-finite conversion for {path}", file=sys.stderr)
            return EXIT_NUMERIC
        stem = os.path.splitext(os.path.basename(path))[0]
        save_spectrogram(conv, os.path.join(args.out_dir, stem + ".melspec"), echo=echo)
        if args.griffin_lim:
            wav = griffin_lim(conv, iters=args.griffin_lim_iters)
            save_wav(wav, os.path.join(args.out_dir, stem + "_gl_approx.wav"))
    print(f"converted {len(files)} utterances -> {args.out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    entries = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    missing = []
    pairs = []
    for conv_path, target_path in entries:
        cp, tp = resolve(conv_path), resolve(target_path)
        if not os.path.exists(cp):
            missing.append(cp)
            continue
        if not os.path.exists(tp):
            missing.append(tp)
            continue
        name = os.path.splitext(os.path.basename(conv_path))[0]
        conv_mc = mel_cepstrum(load_spectrogram(cp), order=35)
        target_mc = mel_cepstrum(load_spectrogram(tp), order=35)
        pairs.append((name, conv_mc, target_mc))
    if missing:
        for m in missing:
            print(f"error: missing file {m}", file=sys.stderr)
        return EXIT_DATA
    report = evaluate_cepstra(pairs)
    report.config_echo = json.dumps(_echo(cfg), sort_keys=True)
    with open(args.out_prefix + ".csv", "w") as fh:
        fh.write(report.to_csv())
    with open(args.out_prefix + ".txt", "w") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def run_ablation(cfg: dict, out_csv, progress=print) -> list[dict]:
    """Train every (depth, position) toy configuration and score it."""
    tspec = toy_spec_from(cfg)
    corpus_a, corpus_b, oracle = generate_toy_corpus(tspec)
    stats_a = compute_stats(corpus_a)
    stats_b = compute_stats(corpus_b)
    na = [apply_norm(m, stats_a).data for m in corpus_a]
    nb = [apply_norm(m, stats_b).data for m in corpus_b]
    rows = []
    for depth in (1, 2, 3, 4):
        for position in ("1d_to_2d", "upsampling", "both"):
            tcfg = TrainConfig(
                iterations=cfg["ablate_iterations"],
                seed=cfg["seed"],
                checkpoint_every=max(cfg["ablate_iterations"], 1),
                gen_spec=GeneratorSpec(
                    input_bins=tspec.mel_bins,
                    base_channels=cfg["ablate_base_channels"],
                    n_residual_blocks=cfg["ablate_residual_blocks"],
                    adanorm=AdaptiveNormConfig(
                        depth=depth, hidden_channels=cfg["ablate_hidden"]
                    ),
                    adanorm_position=position,
                ),
                disc_spec=DiscriminatorSpec(base_channels=cfg["ablate_disc_channels"]),
                weights=LossWeights(
                    cfg["lambda_cyc"], cfg["lambda_id"], cfg["id_cutoff_iters"]
                ),
                dtype=cfg["ablate_dtype"],
            )
            state = new_state(tcfg)
            for _ in range(tcfg.iterations):
                x = sample_segment(na, state.rng, tcfg.segment_frames)
                y = sample_segment(nb, state.rng, tcfg.segment_frames)
                train_step(state, x, y)
            pairs_ab, pairs_ba = [], []
            with ad.no_grad():
                for i, p in enumerate(oracle):
                    a = apply_norm(p.source_a, stats_a).data
                    out = state.g_xy(Tensor(a)).data.astype(np.float64)
                    conv = apply_denorm(MelSpectrogram(out, tspec.mel_bins), stats_b)
                    if not np.all(np.isfinite(conv.data)):
                        raise NumericError(
                            f"non-finite conversion at depth={depth} position={position}"
                        )
                    pairs_ab.append(
                        (f"ab{i}", mel_cepstrum(conv), mel_cepstrum(p.source_b))
                    )
                    b = apply_norm(p.source_b, stats_b).data
                    outb = state.g_yx(Tensor(b)).data.astype(np.float64)
                    convb = apply_denorm(MelSpectrogram(outb, tspec.mel_bins), stats_a)
                    if not np.all(np.isfinite(convb.data)):
                        raise NumericError(
                            f"non-finite conversion at depth={depth} position={position}"
                        )
                    pairs_ba.append(
                        (f"ba{i}", mel_cepstrum(convb), mel_cepstrum(p.source_a))
                    )
            rep_ab = evaluate_cepstra(pairs_ab)
            rep_ba = evaluate_cepstra(pairs_ba)
            row = {
                "depth": depth,
                "position": position,
                "mcd_ab": rep_ab.mean_mcd,
                "msd_ab": rep_ab.mean_msd,
                "mcd_ba": rep_ba.mean_mcd,
                "msd_ba": rep_ba.mean_msd,
            }
            rows.append(row)
            progress(
                f"depth={depth} position={position}: "
                f"A->B {row['mcd_ab']:.3f}/{row['msd_ab']:.3f} "
                f"B->A {row['mcd_ba']:.3f}/{row['msd_ba']:.3f}"
            )
    with open(out_csv, "w") as fh:
        fh.write(f"# {json.dumps(_echo(cfg), sort_keys=True)}\n")
        fh.write("depth,position,mcd_ab_db,msd_ab_db,mcd_ba_db,msd_ba_db\n")
        for r in rows:
            fh.write(
                f"{r['depth']},{r['position']},{repr(r['mcd_ab'])},{repr(r['msd_ab'])},"
                f"{repr(r['mcd_ba'])},{repr(r['msd_ba'])}\n"
            )
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    out_csv = os.path.join(args.out_dir, "ablation.csv")
    run_ablation(cfg, out_csv)
    print(f"ablation table: {out_csv}")
    return EXIT_OK


# five-anchor approximation of a perceptually uniform colormap
_CMAP = np.array(
    [
        (68, 1, 84),
        (59, 82, 139),
        (33, 145, 140),
        (94, 201, 98),
        (253, 231, 37),
    ],
    dtype=float,
)


def _colorize(data: np.ndarray) -> np.ndarray:
    lo, hi = data.min(), data.max()
    norm = (data - lo) / max(hi - lo, 1e-12)
    pos = norm * (len(_CMAP) - 1)
    idx = np.minimum(pos.astype(int), len(_CMAP) - 2)
    frac = pos - idx
    rgb = _CMAP[idx] * (1.0 - frac[..., None]) + _CMAP[idx + 1] * frac[..., None]
    return rgb.astype(np.uint8)


def cmd_plot(args) -> int:
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    cfg = resolve_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    panels = []
    scale = 4
    for path in args.spectrograms:
        m = load_spectrogram(path)
        rgb = _colorize(m.data[::-1, :])  # low bins at the bottom
        rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
        panels.append(rgb)
        stem = os.path.splitext(os.path.basename(path))[0]
        with open(os.path.join(args.out_dir, stem + ".csv"), "w") as fh:
            fh.write(f"# {json.dumps(_echo(cfg), sort_keys=True)}\n")
            for row in m.data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    height = max(p.shape[0] for p in panels)
    sep = 2 * scale
    width = sum(p.shape[1] for p in panels) + sep * (len(panels) - 1)
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    xoff = 0
    for p in panels:
        canvas[: p.shape[0], xoff : xoff + p.shape[1]] = p
        xoff += p.shape[1] + sep
    img = Image.fromarray(canvas)
    meta = PngInfo()
    meta.add_text("melcycle", json.dumps(_echo(cfg), sort_keys=True))
    out_png = os.path.join(args.out_dir, args.image_name)
    img.save(out_png, pnginfo=meta)
    print(f"wrote {out_png} and {len(panels)} csv dumps")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melcycle",
        description="Non-parallel mel-spectrogram voice conversion toolkit",
    )
    parser.add_argument("--version", action="version", version=f"melcycle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="key=value config file overriding built-in defaults")

    p = sub.add_parser("extract", help="WAV directory -> spectrogram files + stats")
    add_config(p)
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stats-out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("toygen", help="generate the synthetic two-domain corpus")
    add_config(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--toy-seed", dest="toy_seed", type=int)
    p.add_argument("--toy-n-utterances", dest="toy_n_utterances", type=int)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("train", help="train conversion models on two corpora")
    add_config(p)
    p.add_argument("--corpus-x", required=True)
    p.add_argument("--corpus-y", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stats-x", help="stats file (default: computed from corpus-x)")
    p.add_argument("--stats-y")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--n-residual-blocks", dest="n_residual_blocks", type=int)
    p.add_argument("--adanorm-position", dest="adanorm_position",
                   choices=["none", "1d_to_2d", "upsampling", "both"])
    p.add_argument("--adanorm-depth", dest="adanorm_depth", type=int)
    p.add_argument("--adanorm-hidden", dest="adanorm_hidden", type=int)
    p.add_argument("--disc-channels", dest="disc_channels", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert spectrograms with a trained checkpoint")
    add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--direction", choices=["xy", "yx"], required=True)
    p.add_argument("--stats-in", help="override input-side stats file")
    p.add_argument("--stats-out", help="override output-side stats file")
    p.add_argument(
        "--griffin-lim",
        action="store_true",
        help="also write approximate waveforms (filename-watermarked)",
    )
    p.add_argument("--griffin-lim-iters", type=int, default=32)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="MCD/MSD report from a pairing manifest")
    add_config(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="depth x position sweep on the toy task")
    add_config(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ablate-iterations", dest="ablate_iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render spectrogram heatmaps + csv dumps")
    add_config(p)
    p.add_argument("spectrograms", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--image-name", default="spectrograms.png")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
