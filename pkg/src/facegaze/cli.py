"""Command-line interface: batch subcommands over INI-style config files.

Subcommands: synth, normalize, train, eval, importance, gradcheck.
Exit codes: 0 success, 2 config/validation error, 1 runtime failure.
All randomness flows from seeds in the config (or --seed); outputs are
byte-identical across reruns, including with --jobs > 1.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import imaging
from .dataset import ManifestError, load_manifest, make_splits, normalize_sample
from .geometry import (
    CameraModel,
    NormalizationSpace,
    angles_to_vector,
    normalize_gaze,
    unit,
)
from .network import (
    ConvSpec,
    ModelConfig,
    Network,
    desk_config,
    grad_check,
    init_parameters,
    load_model,
    save_model,
    train,
    write_training_log,
)
from .synth import SynthConfig, generate


class ConfigError(ValueError):
    pass


def _load_ini(path) -> configparser.ConfigParser:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return cp


def _get(cp, section: str, key: str, cast, default=None, required: bool = False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing required key [{section}] {key}")
        return default
    raw = cp.get(section, key).strip()
    try:
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _require_seed(cp, section: str, override: int | None) -> int:
    if override is not None:
        return override
    seed = _get(cp, section, "seed", int)
    if seed is None:
        raise ConfigError(f"missing required key [{section}] seed (no wall-clock defaults)")
    return seed


def parse_synth_config(cp, seed_override=None) -> SynthConfig:
    s = "synth"
    if not cp.has_section(s):
        raise ConfigError("missing [synth] section")
    kwargs = dict(
        persons=_get(cp, s, "persons", int, 15),
        samples_per_person=_get(cp, s, "samples_per_person", int, 200),
        image_size=(_get(cp, s, "image_width", int, 320), _get(cp, s, "image_height", int, 240)),
        focal=_get(cp, s, "focal", float, 380.0),
        gaze_yaw_range=_get(cp, s, "gaze_yaw_range", float, 0.35),
        gaze_pitch_range=_get(cp, s, "gaze_pitch_range", float, 0.30),
        head_yaw_range=_get(cp, s, "head_yaw_range", float, 0.30),
        head_pitch_range=_get(cp, s, "head_pitch_range", float, 0.25),
        head_roll_range=_get(cp, s, "head_roll_range", float, 0.10),
        distance=_get(cp, s, "distance", float, 600.0),
        distance_jitter=_get(cp, s, "distance_jitter", float, 40.0),
        offset=_get(cp, s, "offset", float, 40.0),
        illumination_range=_get(cp, s, "illumination_range", float, 0.8),
        noise_std=_get(cp, s, "noise_std", float, 0.02),
        seed=_require_seed(cp, s, seed_override),
    )
    try:
        return SynthConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from exc


def parse_space(cp) -> NormalizationSpace:
    s = "normalization"
    distance = _get(cp, s, "distance", float, 600.0)
    size = _get(cp, s, "size", int, 64)
    focal = _get(cp, s, "focal", float, 4.0 * size)
    proj = np.array([[focal, 0.0, size / 2.0], [0.0, focal, size / 2.0], [0.0, 0.0, 1.0]])
    try:
        return NormalizationSpace(distance, CameraModel(proj, size, size))
    except ValueError as exc:
        raise ConfigError(f"[normalization] {exc}") from exc


def _parse_conv(raw: str) -> tuple[ConvSpec, ...]:
    layers = []
    for part in raw.split(","):
        nums = [int(v) for v in part.split()]
        if len(nums) not in (4, 6):
            raise ValueError(f"conv layer spec needs 4 or 6 integers, got {part!r}")
        if len(nums) == 4:
            nums += [0, 0]
        layers.append(ConvSpec(*nums))
    return tuple(layers)


def parse_model_config(cp, seed_override=None) -> ModelConfig:
    s = "model"
    base = desk_config()
    kwargs = dict(
        input_size=_get(cp, s, "input_size", int, base.input_size),
        input_channels=_get(cp, s, "input_channels", int, base.input_channels),
        loss="l1",
        optimizer=_get(cp, s, "optimizer", str, base.optimizer),
        learning_rate=_get(cp, s, "learning_rate", float, base.learning_rate),
        momentum=_get(cp, s, "momentum", float, base.momentum),
        batch_size=_get(cp, s, "batch_size", int, base.batch_size),
        epochs=_get(cp, s, "epochs", int, base.epochs),
        seed=_require_seed(cp, s, seed_override) if (cp.has_section(s) or seed_override is not None)
        else base.seed,
    )
    conv_raw = _get(cp, s, "conv", str)
    if conv_raw:
        try:
            kwargs["conv"] = _parse_conv(conv_raw)
        except ValueError as exc:
            raise ConfigError(f"[model] conv: {exc}") from exc
    sw_raw = _get(cp, s, "spatial_weights", str)
    if sw_raw:
        if sw_raw.lower() == "none":
            kwargs["spatial_weights"] = None
        else:
            c1, c2 = (int(v) for v in sw_raw.split())
            kwargs["spatial_weights"] = (c1, c2)
    fc_raw = _get(cp, s, "fc", str)
    if fc_raw:
        kwargs["fc"] = tuple(int(v) for v in fc_raw.split())
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from exc


def _manifest_path(cp, args) -> Path:
    raw = _get(cp, "paths", "manifest", str, required=True)
    path = Path(raw)
    if not path.is_absolute():
        path = Path(args.config).parent / path
    if not path.is_file():
        raise ConfigError(f"[paths] manifest: file not found: {path}")
    return path


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.9g}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cp = _load_ini(args.config)
    cfg = parse_synth_config(cp, args.seed)
    out = _out_dir(args)
    samples, manifest = generate(cfg, out)
    print(f"wrote {len(samples)} samples to {out}")
    print(f"manifest: {manifest}")
    return 0


def cmd_normalize(args) -> int:
    cp = _load_ini(args.config)
    space = parse_space(cp)
    manifest = _manifest_path(cp, args)
    out = _out_dir(args)
    samples = load_manifest(manifest)
    rows = []
    for s in samples:
        ns = normalize_sample(s, space)
        rel = Path(f"person_{s.person_id:02d}") / f"{s.image_path.stem}.png"
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        imaging.write_png(out / rel, ns.image)
        m = ns.transform.conversion.reshape(-1)
        rows.append(
            [str(s.person_id), str(rel)]
            + [repr(float(v)) for v in (*ns.gaze_angles, *ns.head_angles)]
            + [repr(float(v)) for v in m]
            + [repr(float(v)) for v in ns.reference]
        )
    header = (
        ["person_id", "image", "gaze_yaw", "gaze_pitch", "head_yaw", "head_pitch"]
        + [f"m{i}{j}" for i in range(3) for j in range(3)]
        + ["ref_x", "ref_y", "ref_z"]
    )
    with open(out / "normalized_manifest.csv", "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")
    print(f"normalized {len(rows)} samples to {out}")
    return 0


def _prepare(cp, args, samples, space):
    task = args.task or _get(cp, "run", "task", str, "3d")
    variant = args.variant or _get(cp, "run", "variant", str, "face")
    model_cfg = parse_model_config(cp, args.seed)
    try:
        prep = ev.prepare_inputs(samples, space, task, variant, model_cfg.input_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return prep, model_cfg


def cmd_train(args) -> int:
    cp = _load_ini(args.config)
    space = parse_space(cp)
    samples = load_manifest(_manifest_path(cp, args))
    out = _out_dir(args)
    prep, model_cfg = _prepare(cp, args, samples, space)
    model = train(model_cfg, (prep.inputs[:, None], prep.targets))
    save_model(out / "model.bin", model)
    write_training_log(out / "training_log.csv", model.log)
    print(f"trained {model_cfg.epochs} epochs on {len(prep.ids)} samples "
          f"(final loss {model.log[-1][1]:.5f})")
    print(f"model: {out / 'model.bin'}")
    return 0


def cmd_eval(args) -> int:
    cp = _load_ini(args.config)
    space = parse_space(cp)
    samples = load_manifest(_manifest_path(cp, args))
    out = _out_dir(args)
    prep, model_cfg = _prepare(cp, args, samples, space)
    scheme = _get(cp, "split", "scheme", str, "loocv")
    k = _get(cp, "split", "k", int, 5)
    split_seed = args.seed if args.seed is not None else _get(cp, "split", "seed", int, 0)
    try:
        splits = make_splits(samples, scheme, split_seed, k)
    except ValueError as exc:
        raise ConfigError(f"[split] {exc}") from exc
    jobs = args.jobs or _get(cp, "run", "jobs", int, 1)

    results = ev.run_crossvalidation(prep, splits, model_cfg, jobs=jobs)
    for r in results:
        with open(out / f"fold_{r.fold_id:02d}.csv", "w", encoding="utf-8") as f:
            f.write("sample_id,angular_deg,euclid_mm\n")
            for i, sid in enumerate(r.sample_ids):
                mm = _fmt(r.euclid_mm[i]) if r.euclid_mm is not None else ""
                f.write(f"{sid},{_fmt(r.angular_deg[i])},{mm}\n")
    with open(out / "summary.csv", "w", encoding="utf-8") as f:
        f.write("fold_id,n_test,mean_angular_deg,std_angular_deg,mean_euclid_mm,std_euclid_mm\n")
        for r in results:
            f.write(f"{r.fold_id},{len(r.sample_ids)},{_fmt(r.mean_angular)},"
                    f"{_fmt(r.std_angular)},{_fmt(r.mean_euclid)},{_fmt(r.std_euclid)}\n")
        summary = ev.summarize_folds(results)
        f.write(f"mean,{sum(len(r.sample_ids) for r in results)},"
                f"{_fmt(summary['mean_angular_deg'])},,{_fmt(summary['mean_euclid_mm'])},\n")

    if prep.task == "3d":
        base = ev.headpose_baseline_errors(prep, splits)
        const = ev.constant_predictor_errors(prep, splits)
        with open(out / "baselines.csv", "w", encoding="utf-8") as f:
            f.write("fold_id,headpose_naive_deg,headpose_regression_deg,constant_mean_deg\n")
            for i in range(len(splits)):
                f.write(f"{i},{_fmt(base['headpose_naive'][i].mean_angular)},"
                        f"{_fmt(base['headpose_regression'][i].mean_angular)},"
                        f"{_fmt(const[i].mean_angular)}\n")
    summary = ev.summarize_folds(results)
    print(f"{len(results)} folds, mean angular {summary['mean_angular_deg']:.3f} deg"
          + (f", mean euclid {summary['mean_euclid_mm']:.1f} mm"
             if summary["mean_euclid_mm"] is not None else ""))
    return 0


def cmd_importance(args) -> int:
    cp = _load_ini(args.config)
    if args.model is None:
        raise ConfigError("--model is required for importance")
    model_path = Path(args.model)
    if not model_path.is_file():
        raise ConfigError(f"--model: file not found: {model_path}")
    space = parse_space(cp)
    samples = load_manifest(_manifest_path(cp, args))
    out = _out_dir(args)
    feature = _get(cp, "importance", "feature", str, "illumination_diff")
    k = _get(cp, "importance", "k", int, 3)
    seed = _require_seed(cp, "importance", args.seed)
    limit = _get(cp, "importance", "limit", int, 0)
    mask = _get(cp, "importance", "mask", int)
    stride = _get(cp, "importance", "stride", int)
    try:
        spec = ev.ClusterSpec(feature=feature, k=k, seed=seed)
    except ValueError as exc:
        raise ConfigError(f"[importance] {exc}") from exc

    model = load_model(model_path)
    net = Network(model.config, model.params)
    if limit:
        samples = samples[:limit]
    prep = ev.prepare_inputs(samples, space, "3d", "face", model.config.input_size)

    def predict_fn(batch):
        return net.predict(np.asarray(batch)[:, None])

    maps = []
    analysis = []
    for i in range(len(samples)):
        ns = prep.normalized[i]
        m = ev.occlusion_importance(
            predict_fn, prep.inputs[i], ns.gaze_angles,
            mask_size=mask, stride=stride, landmarks2d=ns.landmarks2d)
        maps.append(m)
        pred = predict_fn(prep.inputs[i][None])[0]
        g_est = normalize_gaze(ns.transform, angles_to_vector(pred), "inverse")
        g_true = unit(prep.samples[i].gaze_target - ns.reference)
        model_err = ev.angular_error(g_est, g_true)
        naive_err = ev.angular_error(ev.headpose_as_gaze(prep.samples[i].head), g_true)
        analysis.append(ev.AnalysisSample(
            image=prep.inputs[i],
            landmarks2d=ns.landmarks2d,
            gaze_angles=ns.gaze_angles,
            head_angles=ns.head_angles,
            errors=(model_err, naive_err),
        ))

    summaries, km = ev.cluster_and_average(maps, analysis, spec)
    max_value = max((float(np.max(np.clip(s.mean_map, 0.0, None)))
                     for s in summaries if s.mean_map is not None), default=0.0)
    meta = {
        "feature": feature,
        "k": k,
        "seed": seed,
        "mask_size": maps[0].mask_size,
        "stride": maps[0].stride,
        "samples": len(samples),
        "map_scale_deg": max_value,
        "clusters": [],
    }
    for i, s in enumerate(summaries):
        entry = {
            "centroid": s.centroid,
            "count": s.count,
            "mean_error_model_deg": None if s.mean_errors is None else s.mean_errors[0],
            "mean_error_headpose_deg": None if s.mean_errors is None else s.mean_errors[1],
        }
        if s.mean_map is not None:
            scaled = np.clip(s.mean_map, 0.0, None)
            if max_value > 0:
                scaled = scaled / max_value
            imaging.write_pgm(out / f"cluster_{i}_map.pgm", scaled)
            imaging.write_png(out / f"cluster_{i}_face.png", np.clip(s.mean_face, 0.0, 1.0))
            entry["map"] = f"cluster_{i}_map.pgm"
            entry["face"] = f"cluster_{i}_face.png"
        meta["clusters"].append(entry)
    with open(out / "importance_summary.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {sum(1 for s in summaries if s.mean_map is not None)} cluster maps to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cp = _load_ini(args.config)
        model_cfg = parse_model_config(cp, args.seed)
    else:
        model_cfg = desk_config(seed=args.seed if args.seed is not None else 0)
    rng = np.random.default_rng(model_cfg.seed)
    net = Network(model_cfg, init_parameters(model_cfg, model_cfg.seed))
    shape = (model_cfg.input_channels, model_cfg.input_size, model_cfg.input_size)
    x = rng.random(shape)
    pred = net.forward(x[None])[0]
    target = pred + np.array([0.3, -0.25])
    report = grad_check(net, (x, target), rng=rng)
    print(report)
    if report.max_rel_error >= 1e-3:
        print("FAIL: max relative error >= 1e-3", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facegaze",
        description="Full-face gaze estimation pipeline: synthesize data, "
                    "normalize, train, evaluate, and analyze region importance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("synth", cmd_synth),
        ("normalize", cmd_normalize),
        ("train", cmd_train),
        ("eval", cmd_eval),
        ("importance", cmd_importance),
        ("gradcheck", cmd_gradcheck),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "gradcheck"))
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--task", choices=["2d", "3d"])
        p.add_argument("--variant", choices=list(ev.VARIANTS))
        p.add_argument("--jobs", type=int)
        p.add_argument("--model")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
