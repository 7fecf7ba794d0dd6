"""Command-line front end.

Subcommands: transform, fit, refit, baseline, separate, eval, render.
Every command validates all of its inputs before creating any output
file, and is deterministic given --seed.  Exit codes: 0 on success, 1 for
validation or configuration errors, 2 for runtime or numeric errors.

Option values resolve as: explicit flag > config-file entry > built-in
default.  The config file is flat `key = value` text, keys matching the
long option names (dashes or underscores).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import factorize, separate, transforms
from .factorize import (
    InnmfModel,
    ModelFormatError,
    TrainConfig,
    TrainingDivergedError,
    innmf_fit,
    kl_pointwise,
    load_model,
    mean_kl,
    nmf_multiplicative,
    points_to_matrix,
    refit_activations,
    save_model,
)
from .separate import SeparationJob, bss_metrics, run_separation
from .tfpoints import PointsFormatError, TFPointSet, load_points, save_points
from .transforms import CqtConfig, cqt_to_points, read_wav, sinusoidal_model_points, stft, stft_to_points, write_wav


class UsageError(Exception):
    """User-facing validation or configuration problem (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(v: float) -> str:
    return repr(float(v))


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


# -------------------------------------------------------------------------
# option resolution
# -------------------------------------------------------------------------

_DEFAULTS = {
    "seed": 0,
    "learning_rate": TrainConfig.learning_rate,
    "epochs": TrainConfig.epochs,
    "batch_size": TrainConfig.batch_size,
    "kl_floor": TrainConfig.kl_floor,
    "optimizer": TrainConfig.optimizer,
    "momentum": TrainConfig.momentum,
    "activation_mode": TrainConfig.activation_mode,
    "num_frequencies": TrainConfig.num_frequencies,
    "hidden": "64,64",
    "iterations": 200,
    "threshold_db": -60.0,
}

_COERCE = {
    "seed": int, "epochs": int, "batch_size": int, "num_frequencies": int,
    "iterations": int, "rank": int, "window": int, "hop": int,
    "t_steps": int, "f_steps": int,
    "learning_rate": float, "kl_floor": float, "momentum": float,
    "nyquist": float, "threshold_db": float,
    "t_min": float, "t_max": float, "f_min": float, "f_max": float,
    "optimizer": str, "activation_mode": str, "hidden": str,
}


def _read_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}: line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            entries[key.replace("-", "_")] = value
    return entries


def _resolve(args, key: str, default=None):
    """flag > config file > default; None when nothing supplies a value."""
    value = getattr(args, key, None)
    if value is None and args._config_entries:
        value = args._config_entries.get(key)
    if value is None:
        value = _DEFAULTS.get(key, default)
    if value is None:
        return None
    coerce = _COERCE.get(key, str)
    try:
        return coerce(value)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {key}: {value!r}") from None


def _train_config(args) -> TrainConfig:
    hidden_text = _resolve(args, "hidden")
    try:
        hidden = tuple(int(h) for h in hidden_text.split(",") if h.strip())
    except ValueError:
        raise UsageError(f"bad hidden layer list: {hidden_text!r}") from None
    try:
        return TrainConfig(
            learning_rate=_resolve(args, "learning_rate"),
            epochs=_resolve(args, "epochs"),
            batch_size=_resolve(args, "batch_size"),
            seed=_resolve(args, "seed"),
            kl_floor=_resolve(args, "kl_floor"),
            optimizer=_resolve(args, "optimizer"),
            momentum=_resolve(args, "momentum"),
            activation_mode=_resolve(args, "activation_mode"),
            num_frequencies=_resolve(args, "num_frequencies"),
            hidden_sizes=hidden,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_path(args, name: str) -> str:
    path = name if os.path.isabs(name) else os.path.join(args.out_dir, name)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_points_checked(path: str) -> TFPointSet:
    _require_file(path, "points file")
    try:
        return load_points(path)
    except PointsFormatError as exc:
        raise UsageError(str(exc)) from None


def _load_model_checked(path: str) -> InnmfModel:
    _require_file(path, "model file")
    try:
        return load_model(path)
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from None


def _write_curve(path: str, curve: np.ndarray, first_epoch: int) -> None:
    lines = ["epoch,mean_kl"]
    for i, v in enumerate(curve):
        lines.append(f"{first_epoch + i},{_fmt(v)}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_matrix(path: str, mat: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        for row in np.atleast_2d(mat):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# -------------------------------------------------------------------------
# transform
# -------------------------------------------------------------------------


def _parse_transform_spec(spec: str):
    """Parse `kind:params` with an optional `@t0-t1` segment suffix."""
    seg = None
    if "@" in spec:
        spec, seg_text = spec.rsplit("@", 1)
        try:
            a, b = (float(x) for x in seg_text.split("-", 1))
        except ValueError:
            raise UsageError(f"bad segment range {seg_text!r}; expected t0-t1") from None
        if not b > a or a < 0.0:
            raise UsageError(f"bad segment range {seg_text!r}; need 0 <= t0 < t1")
        seg = (a, b)
    if ":" not in spec:
        raise UsageError(f"unknown transform spec {spec!r}")
    kind, params = spec.split(":", 1)
    fields = params.split(",")
    try:
        if kind == "stft":
            if len(fields) != 2:
                raise ValueError
            return ("stft", (int(fields[0]), int(fields[1])), seg)
        if kind == "cqt":
            if len(fields) not in (3, 4):
                raise ValueError
            q = float(fields[3]) if len(fields) == 4 else 17.0
            return ("cqt", (float(fields[0]), float(fields[1]), int(fields[2]), q), seg)
        if kind == "sin":
            if len(fields) != 3:
                raise ValueError
            return ("sin", (int(fields[0]), int(fields[1]), float(fields[2])), seg)
    except ValueError:
        raise UsageError(f"bad parameters in transform spec {spec!r}") from None
    raise UsageError(f"unknown transform kind {kind!r}")


def _run_transform_segment(audio, kind, params):
    try:
        if kind == "stft":
            return stft_to_points(stft(audio, params[0], params[1]))
        if kind == "cqt":
            f_min, f_max, bpo, q = params
            return cqt_to_points(audio, CqtConfig(f_min, bpo, f_max, q))
        return sinusoidal_model_points(audio, params[0], params[1], params[2])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_transform(args) -> int:
    _require_file(args.input, "input WAV")
    parts = [p for p in args.spec.split(";") if p.strip()]
    if not parts:
        raise UsageError("empty transform spec")
    parsed = [_parse_transform_spec(p.strip()) for p in parts]
    segments = [p[2] for p in parsed]
    if len(parsed) > 1:
        if any(s is None for s in segments):
            raise UsageError("hybrid specs need a @t0-t1 segment on every part")
        for (_, prev_end), (next_start, _) in zip(segments, segments[1:]):
            if next_start < prev_end:
                raise UsageError("hybrid segments must be ordered and non-overlapping")
    audio = read_wav(args.input)
    point_sets = []
    for (kind, params, seg) in parsed:
        if seg is None:
            piece, offset = audio, 0.0
        else:
            i0 = int(round(seg[0] * audio.sample_rate_hz))
            i1 = min(int(round(seg[1] * audio.sample_rate_hz)), len(audio))
            if i1 <= i0:
                raise UsageError(f"segment {seg[0]}-{seg[1]} lies outside the audio")
            piece = transforms.AudioBuffer(audio.samples[i0:i1], audio.sample_rate_hz)
            offset = i0 / audio.sample_rate_hz
        pts = _run_transform_segment(piece, kind, params)
        if len(pts) == 0:
            continue
        tag = pts.source_tag if seg is None else f"{pts.source_tag}@{seg[0]}-{seg[1]}"
        point_sets.append(TFPointSet(pts.t + offset, pts.f, pts.m, source_tag=tag))
    if not point_sets:
        raise UsageError("no points produced; check the transform spec against the audio")
    merged = TFPointSet.concatenate(point_sets)
    out = _out_path(args, args.output)
    save_points(merged, out)
    _say(args, f"wrote {len(merged)} points to {out}")
    return 0


# -------------------------------------------------------------------------
# fit / refit / baseline
# -------------------------------------------------------------------------


def cmd_fit(args) -> int:
    points = _load_points_checked(args.points)
    rank = _resolve(args, "rank")
    if rank is None or rank < 1:
        raise UsageError("--rank must be a positive integer")
    config = _train_config(args)
    nyquist = _resolve(args, "nyquist")
    try:
        result = innmf_fit(points, rank, config, nyquist_hz=nyquist)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model_out = _out_path(args, args.model_out)
    curve_out = _out_path(args, args.curve_out)
    save_model(result.model, model_out)
    _write_curve(curve_out, result.loss_curve, first_epoch=1)
    _say(args, f"final mean KL {result.loss_curve[-1]:.6g}; wrote {model_out}")
    return 0


def cmd_refit(args) -> int:
    if not args.freeze_spectral:
        raise UsageError("only activation refits are supported; pass --freeze-spectral")
    points = _load_points_checked(args.points)
    donor = _load_model_checked(args.model)
    config = _train_config(args)
    try:
        result = refit_activations(points, donor.spectral, donor.k, config,
                                   f_scale=donor.norm.f_scale)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model_out = _out_path(args, args.model_out)
    curve_out = _out_path(args, args.curve_out)
    save_model(result.model, model_out)
    _write_curve(curve_out, result.loss_curve, first_epoch=1)
    _say(args, f"final mean KL {result.loss_curve[-1]:.6g}; wrote {model_out}")
    return 0


def cmd_baseline(args) -> int:
    rank = _resolve(args, "rank")
    if rank is None or rank < 1:
        raise UsageError("--rank must be a positive integer")
    iterations = _resolve(args, "iterations")
    _require_file(args.source, "spectrogram source")
    if args.source.lower().endswith(".wav"):
        window = _resolve(args, "window")
        hop = _resolve(args, "hop")
        if window is None or hop is None:
            raise UsageError("WAV input needs --window and --hop")
        try:
            v = stft(read_wav(args.source), window, hop).magnitude
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        points = _load_points_checked(args.source)
        try:
            v, _, _ = points_to_matrix(points)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        result = nmf_multiplicative(v, rank, iterations, seed=_resolve(args, "seed"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_matrix(_out_path(args, "W.csv"), result.model.w)
    _write_matrix(_out_path(args, "H.csv"), result.model.h)
    _write_curve(_out_path(args, "loss_curve.csv"), result.loss_curve, first_epoch=0)
    _say(args, f"final mean KL {result.loss_curve[-1]:.6g}")
    return 0


# -------------------------------------------------------------------------
# separate / eval
# -------------------------------------------------------------------------

_METRICS_HEADER = "method,window_size,source,sdr_db,sir_db,sar_db"


def cmd_separate(args) -> int:
    _require_file(args.mixture, "mixture WAV")
    dict1 = _load_model_checked(args.dict1)
    dict2 = _load_model_checked(args.dict2)
    if dict1.k != dict2.k:
        raise UsageError("dictionaries must share the same rank")
    if abs(dict1.norm.f_scale - dict2.norm.f_scale) > 1e-9 * dict1.norm.f_scale:
        raise UsageError("dictionaries were trained with different frequency scales")
    window = _resolve(args, "window")
    hop = _resolve(args, "hop")
    if window is None or hop is None:
        raise UsageError("--window and --hop are required")
    refs = []
    for ref_path in (args.ref1, args.ref2):
        refs.append(read_wav(_require_file(ref_path, "reference WAV")) if ref_path else None)
    mixture = read_wav(args.mixture)
    job = SeparationJob(
        mixture_audio=mixture,
        dict_source1=dict1.spectral,
        dict_source2=dict2.spectral,
        window_size=window,
        hop=hop,
        config=_train_config(args),
        f_scale=dict1.norm.f_scale,
        reference_source1=refs[0],
        reference_source2=refs[1],
    )
    try:
        result = run_separation(job)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_wav(_out_path(args, "source1.wav"), result.estimated_sources[0])
    write_wav(_out_path(args, "source2.wav"), result.estimated_sources[1])
    lines = [_METRICS_HEADER]
    if result.metrics is not None:
        for idx, m in enumerate(result.metrics, start=1):
            lines.append(f"{result.method},{window},{idx},"
                         f"{_fmt(m.sdr_db)},{_fmt(m.sir_db)},{_fmt(m.sar_db)}")
    metrics_path = _out_path(args, "metrics.csv")
    with open(metrics_path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _say(args, f"wrote estimates and {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    est = read_wav(_require_file(args.estimate, "estimate WAV"))
    ref = read_wav(_require_file(args.reference, "reference WAV"))
    interf = read_wav(_require_file(args.interference, "interference WAV"))
    n = min(len(est), len(ref), len(interf))
    try:
        m = bss_metrics(
            transforms.AudioBuffer(est.samples[:n], est.sample_rate_hz),
            transforms.AudioBuffer(ref.samples[:n], ref.sample_rate_hz),
            transforms.AudioBuffer(interf.samples[:n], interf.sample_rate_hz),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print("sdr_db,sir_db,sar_db")
    print(f"{_fmt(m.sdr_db)},{_fmt(m.sir_db)},{_fmt(m.sar_db)}")
    return 0


# -------------------------------------------------------------------------
# render
# -------------------------------------------------------------------------


def _grid_axes(args):
    t0, t1 = _resolve(args, "t_min"), _resolve(args, "t_max")
    f0, f1 = _resolve(args, "f_min"), _resolve(args, "f_max")
    nt, nf = _resolve(args, "t_steps"), _resolve(args, "f_steps")
    if None in (t0, t1, f0, f1, nt, nf):
        raise UsageError("render needs --t-min/--t-max/--f-min/--f-max/--t-steps/--f-steps")
    if not (t1 > t0 and f1 > f0 and nt >= 1 and nf >= 1):
        raise UsageError("empty or inverted render grid")
    return np.linspace(t0, t1, nt), np.linspace(f0, f1, nf)


def _bin_points(points: TFPointSet, ts: np.ndarray, fs: np.ndarray) -> np.ndarray:
    """Nearest-cell max-magnitude reduction of a point set onto a raster."""
    raster = np.zeros((ts.size, fs.size))
    dt = ts[1] - ts[0] if ts.size > 1 else max(ts[0], 1.0)
    df = fs[1] - fs[0] if fs.size > 1 else max(fs[0], 1.0)
    ti = np.round((points.t - ts[0]) / dt).astype(int)
    fi = np.round((points.f - fs[0]) / df).astype(int)
    keep = (ti >= 0) & (ti < ts.size) & (fi >= 0) & (fi < fs.size)
    np.maximum.at(raster, (ti[keep], fi[keep]), points.m[keep])
    return raster


def cmd_render(args) -> int:
    _require_file(args.input, "input file")
    ts, fs = _grid_axes(args)
    compare = None
    if args.compare_points:
        compare = _load_points_checked(args.compare_points)
    if args.input.lower().endswith(".json"):
        model = _load_model_checked(args.input)
        raster = model.predict_grid(ts, fs).T  # (t, f)
        if compare is not None:
            binned = _bin_points(compare, ts, fs)
            occupied = binned > 0.0
            if occupied.any():
                kl = kl_pointwise(binned[occupied], np.maximum(raster[occupied], 1e-12))
                print(f"mean_kl={_fmt(kl.mean())}")
            else:
                print("mean_kl=nan")
    else:
        points = _load_points_checked(args.input)
        raster = _bin_points(points, ts, fs)
    out = _out_path(args, args.output)
    lines = ["t,f,value"]
    for i, t in enumerate(ts):
        for j, f in enumerate(fs):
            lines.append(f"{_fmt(t)},{_fmt(f)},{_fmt(raster[i, j])}")
    with open(out, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _say(args, f"wrote {len(ts) * len(fs)} cells to {out}")
    return 0


# -------------------------------------------------------------------------
# wiring
# -------------------------------------------------------------------------


def _add_train_options(p) -> None:
    p.add_argument("--learning-rate", dest="learning_rate")
    p.add_argument("--epochs")
    p.add_argument("--batch-size", dest="batch_size")
    p.add_argument("--kl-floor", dest="kl_floor")
    p.add_argument("--optimizer")
    p.add_argument("--momentum")
    p.add_argument("--activation-mode", dest="activation_mode")
    p.add_argument("--num-frequencies", dest="num_frequencies")
    p.add_argument("--hidden")


def build_parser() -> _Parser:
    parser = _Parser(prog="innmf", description=__doc__)
    parser.add_argument("--seed")
    parser.add_argument("--config")
    parser.add_argument("--out-dir", dest="out_dir", default=".")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("transform", help="WAV -> points CSV")
    p.add_argument("input")
    p.add_argument("spec", help="e.g. stft:256,64 or a ;-joined hybrid with @t0-t1 segments")
    p.add_argument("-o", "--output", default="points.csv")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("fit", help="points CSV -> trained model")
    p.add_argument("points")
    p.add_argument("--rank")
    p.add_argument("--nyquist")
    p.add_argument("--model-out", dest="model_out", default="model.json")
    p.add_argument("--curve-out", dest="curve_out", default="loss_curve.csv")
    _add_train_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refit", help="re-learn activations with frozen templates")
    p.add_argument("points")
    p.add_argument("model")
    p.add_argument("--freeze-spectral", dest="freeze_spectral", action="store_true")
    p.add_argument("--model-out", dest="model_out", default="model_refit.json")
    p.add_argument("--curve-out", dest="curve_out", default="loss_curve.csv")
    _add_train_options(p)
    p.set_defaults(func=cmd_refit)

    p = sub.add_parser("baseline", help="multiplicative-update NMF on a spectrogram")
    p.add_argument("source", help="grid-shaped points CSV or a WAV (with --window/--hop)")
    p.add_argument("--rank")
    p.add_argument("--iterations")
    p.add_argument("--window")
    p.add_argument("--hop")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("separate", help="two-source separation with trained dictionaries")
    p.add_argument("mixture")
    p.add_argument("dict1")
    p.add_argument("dict2")
    p.add_argument("--window")
    p.add_argument("--hop")
    p.add_argument("--ref1")
    p.add_argument("--ref2")
    _add_train_options(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", help="SDR/SIR/SAR of an estimate against references")
    p.add_argument("estimate")
    p.add_argument("reference")
    p.add_argument("interference")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="sample a model or bin points onto a raster CSV")
    p.add_argument("input", help="model JSON or points CSV")
    p.add_argument("-o", "--output", default="raster.csv")
    p.add_argument("--t-min", dest="t_min")
    p.add_argument("--t-max", dest="t_max")
    p.add_argument("--f-min", dest="f_min")
    p.add_argument("--f-max", dest="f_max")
    p.add_argument("--t-steps", dest="t_steps")
    p.add_argument("--f-steps", dest="f_steps")
    p.add_argument("--compare-points", dest="compare_points")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "command", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        args._config_entries = _read_config_file(args.config) if args.config else {}
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
