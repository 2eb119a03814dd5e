"""Command-line pipeline: demo archives, calibration, attacks, analysis, serving.

Exit codes: 0 on success, 1 for usage or configuration problems, 2 for
failures at runtime. All subcommands that produce files stamp them with the
campaign config hash so downstream steps can refuse mismatched inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .analysis import (
    build_curve,
    mean_magnitude_table,
    status_breakdown,
    threshold_tradeoff,
    write_curve_csv,
    write_summary_json,
)
from .archive import load_archive, save_archive
from .labeling import ImageEntry, LabelingSession
from .network import Network
from .records import RecordStreamError, RecordWriter, config_hash, load_many, read_stream
from .render import save_png, triple_grid
from .search import STATUS_SUCCESS, AttackConfig, AttackRecord, attack, sample_tuples
from .sigma import calibrate


class UsageError(Exception):
    """Bad flags, unreadable config, or inconsistent inputs."""


# ---------------------------------------------------------------------------
# Campaign configuration


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    for key in ("generator", "classifier"):
        if key not in cfg:
            raise UsageError(f"config is missing required key {key!r}")
        target = (p.parent / cfg[key]).resolve() if not Path(cfg[key]).is_absolute() else Path(cfg[key])
        if not target.exists():
            raise UsageError(f"{key} archive {cfg[key]} does not exist")
        cfg[key] = str(target)
    cfg.setdefault("tuple_count", 50)
    cfg.setdefault("seed", 0)
    cfg.setdefault("infer_y", False)
    cfg.setdefault("attack", {})
    cfg.setdefault("layer_subsets", {"all": None})
    cfg.setdefault("calibration", {})
    cfg.setdefault("group_size", 30)
    cfg.setdefault("panel_size", 5)
    return cfg


def _file_sha(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _campaign_hash(cfg: dict) -> str:
    basis = {
        "generator_sha": _file_sha(cfg["generator"]),
        "classifier_sha": _file_sha(cfg["classifier"]),
        "tuple_count": cfg["tuple_count"],
        "seed": cfg["seed"],
        "infer_y": cfg["infer_y"],
        "attack": cfg["attack"],
        "layer_subsets": cfg["layer_subsets"],
    }
    return config_hash(basis)


def _attack_config(cfg: dict, subset) -> AttackConfig:
    fields = dict(cfg.get("attack", {}))
    fields["layer_subset"] = tuple(subset) if subset is not None else None
    try:
        return AttackConfig.from_json(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad attack config: {exc}")


def _resolve_subsets(cfg: dict, generator: Network) -> dict[str, tuple[int, ...] | None]:
    points = generator.spec.injection_points
    out: dict[str, tuple[int, ...] | None] = {}
    for name, subset in cfg["layer_subsets"].items():
        if subset is None:
            out[name] = None
            continue
        bad = [b for b in subset if b not in points]
        if bad:
            raise UsageError(
                f"layer subset {name!r} names non-injection boundaries {bad}; "
                f"the generator declares {list(points)}"
            )
        out[name] = tuple(int(b) for b in subset)
    return out


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("out_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_tuples(cfg: dict, generator: Network, classifier: Network, seed: int):
    """Sampled (y, z, t) tuples, with y optionally taken from the classifier.

    In infer mode the intended label is the classifier's own prediction on
    the clean image (so nothing is skipped), and the target is re-derived
    from the sampled offset so it stays uniform over the other labels.
    """
    from .tensor import Tensor

    classes = classifier.spec.class_count
    tuples = sample_tuples(classes, int(cfg["tuple_count"]), seed, generator.spec.latent_dim)
    if not cfg["infer_y"]:
        return tuples
    resolved = []
    for y, z, t in tuples:
        pred, _ = classifier.predict(
            _image_for(classifier, generator.forward(Tensor(z.reshape(1, -1))))
        )
        offset = (t - y - 1) % classes
        t_new = (pred + 1 + offset) % classes
        resolved.append((pred, z, t_new))
    return resolved


def _image_for(classifier: Network, generated):
    from .search import _as_image

    return _as_image(generated, classifier)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_demo(args) -> int:
    from .demo import write_demo_archives

    out = Path(args.out or "demo")
    out.mkdir(parents=True, exist_ok=True)
    gen_path, clf_path = write_demo_archives(out)
    cfg = {
        "generator": gen_path.name,
        "classifier": clf_path.name,
        "classifier_name": "demo-classifier",
        "tuple_count": 50,
        "seed": 1234,
        "infer_y": True,
        "attack": {"max_steps": 2000},
        "layer_subsets": {
            "all": None,
            "first-half": [1, 4],
            "last-half": [8, 12],
        },
        "calibration": {"num_samples": 256, "seed": 5},
        "group_size": 10,
        "bound_grid": [1, 2, 4, 8, 16, 32, 64, 128],
        "out_dir": "out",
    }
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=2) + "\n")
    print(f"wrote {gen_path}, {clf_path}, {cfg_path}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    generator = load_archive(cfg["generator"])
    if generator.spec.role != "generator":
        raise UsageError(f"{cfg['generator']} is not a generator archive")
    cal = cfg.get("calibration", {})
    seed = args.seed if args.seed is not None else cal.get("seed", 0)
    profile = calibrate(
        generator,
        num_samples=cal.get("num_samples", 256),
        seed=seed,
        floor=cal.get("floor", 1e-6),
    )
    weights = {name: t.data for name, t in generator.weights.items()}
    save_archive(cfg["generator"], generator.spec, weights, sigma=profile)
    shapes = {b: list(s.shape) for b, s in profile.sigmas.items()}
    print(f"calibrated sigma over {profile.sample_count} samples at boundaries {shapes}")
    return 0


def _run_one(payload):
    gen, clf, subset, subset_name, cfg, tuple_id, y, z, t, seed = payload
    config = _attack_config(cfg, subset)
    return attack(
        gen,
        clf,
        gen.sigma,
        z,
        y,
        t,
        config,
        tuple_id=tuple_id,
        seed=seed,
        subset_name=subset_name,
    )


_POOL_STATE: dict = {}


def _pool_init(gen_path: str, clf_path: str) -> None:
    _POOL_STATE["generator"] = load_archive(gen_path)
    _POOL_STATE["classifier"] = load_archive(clf_path)


def _pool_run(payload):
    subset, subset_name, cfg, tuple_id, y, z, t, seed = payload
    gen = _POOL_STATE["generator"]
    clf = _POOL_STATE["classifier"]
    return _run_one((gen, clf, subset, subset_name, cfg, tuple_id, y, z, t, seed))


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    if int(cfg["tuple_count"]) < 1:
        raise UsageError("tuple_count must be at least 1")
    generator = load_archive(cfg["generator"])
    classifier = load_archive(cfg["classifier"])
    if generator.sigma is None:
        raise UsageError(
            f"{cfg['generator']} has no sigma profile; run `latentprobe calibrate` first"
        )
    seed = args.seed if args.seed is not None else int(cfg["seed"])
    subsets = _resolve_subsets(cfg, generator)
    tuples = _resolve_tuples(cfg, generator, classifier, seed)
    out = _out_dir(args, cfg)
    cfg_hash = _campaign_hash(cfg)
    classifier_name = cfg.get("classifier_name") or Path(cfg["classifier"]).stem
    campaign_meta = {
        "classifier": classifier_name,
        "seed": seed,
        "tuple_count": cfg["tuple_count"],
    }

    total = 0
    for subset_name, subset in subsets.items():
        writer = RecordWriter(
            out / f"records_{subset_name}.jsonl",
            cfg_hash,
            campaign={**campaign_meta, "layer_subset": subset_name},
        )
        todo = [
            (subset, subset_name, cfg, i, y, z, t, seed)
            for i, (y, z, t) in enumerate(tuples)
            if i not in writer.done
        ]
        if not todo:
            print(f"{subset_name}: nothing to do ({len(writer.done)} records present)")
            continue
        if args.workers > 1:
            with ProcessPoolExecutor(
                max_workers=args.workers,
                initializer=_pool_init,
                initargs=(cfg["generator"], cfg["classifier"]),
            ) as pool:
                for record in pool.map(_pool_run, todo, chunksize=1):
                    record.classifier = classifier_name
                    writer.append(record)
                    total += 1
        else:
            for payload in todo:
                record = _run_one((generator, classifier, *payload))
                record.classifier = classifier_name
                writer.append(record)
                total += 1
        print(f"{subset_name}: wrote {len(todo)} records -> {writer.path}")
    print(f"attack complete: {total} new records, config hash {cfg_hash}")
    return 0


def _load_dispositions(path: Path, records: list[AttackRecord], panel_size: int):
    """Dispositions from either an exported JSON array or a votes JSONL log."""
    text = path.read_text().lstrip()
    if text.startswith("["):
        entries = json.loads(text)
        return {int(e["image_id"]): e["outcome"] for e in entries}
    images = [
        ImageEntry(image_id=r.tuple_id, label_name=str(r.y))
        for r in records
        if r.status == STATUS_SUCCESS
    ]
    session = LabelingSession(images, panel_size=panel_size, log_path=path)
    return {d.image_id: d.outcome for d in session.dispositions()}


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    paths = sorted(out.glob("records_*.jsonl")) if not args.records else [Path(p) for p in args.records]
    if not paths:
        raise UsageError(f"no record streams found under {out}")
    try:
        meta, _ = load_many(paths, force=args.force)
    except RecordStreamError as exc:
        raise UsageError(str(exc))
    cfg_hash = meta.get("config_hash", "")
    disp_cfg = cfg.get("dispositions", {})

    curves = {}
    all_records: list[AttackRecord] = []
    merged_disp: dict[tuple[int, str], str] = {}
    any_disp = False
    tradeoffs: dict[str, list] = {}
    breakdown_total: dict[str, int] = {}
    for path in paths:
        _, records = read_stream(path)
        subset_name = path.stem.replace("records_", "", 1)
        dispositions = None
        if subset_name in disp_cfg:
            dpath = Path(disp_cfg[subset_name])
            if not dpath.is_absolute():
                dpath = Path(args.config).parent / dpath
            if not dpath.exists():
                raise UsageError(f"dispositions file {dpath} does not exist")
            dispositions = _load_dispositions(dpath, records, int(cfg["panel_size"]))
            any_disp = True
            for tuple_id, outcome in dispositions.items():
                merged_disp[(tuple_id, subset_name)] = outcome
        series = build_curve(records, dispositions, group_size=int(cfg["group_size"]))
        curves[subset_name] = series
        all_records.extend(records)
        for key, val in status_breakdown(records, dispositions).items():
            breakdown_total[key] = breakdown_total.get(key, 0) + val
        write_curve_csv(
            out / f"curve_{subset_name}.csv",
            series,
            meta={"config_hash": cfg_hash, "toolkit_version": __version__, "subset": subset_name},
        )
        if dispositions is not None and cfg.get("bound_grid"):
            tradeoffs[subset_name] = threshold_tradeoff(
                records, dispositions, cfg["bound_grid"]
            )

    judged = set(disp_cfg) & {p.stem.replace("records_", "", 1) for p in paths}
    streamed = {p.stem.replace("records_", "", 1) for p in paths}
    if any_disp and judged != streamed:
        raise UsageError(
            f"dispositions cover subsets {sorted(judged)} but streams exist for "
            f"{sorted(streamed)}; judge every subset or none"
        )
    table = mean_magnitude_table(all_records, merged_disp if any_disp else None)
    write_summary_json(
        out / "summary.json",
        curves,
        table,
        breakdown_total,
        tradeoffs or None,
        meta={"config_hash": cfg_hash, "toolkit_version": __version__},
    )
    print(f"analysis written to {out}/summary.json and per-subset CSV files")
    return 0


def _materialize(cfg: dict, records_path: Path, out_images: Path, limit=None):
    """Replay successful attacks to regenerate their image pairs."""
    generator = load_archive(cfg["generator"])
    classifier = load_archive(cfg["classifier"])
    if generator.sigma is None:
        raise UsageError("generator archive has no sigma profile; calibrate first")
    meta, records = read_stream(records_path)
    expected_hash = _campaign_hash(cfg)
    if meta.get("config_hash") != expected_hash:
        raise UsageError(
            f"records were produced under config hash {meta.get('config_hash')!r}; "
            f"current config hashes to {expected_hash!r}"
        )
    seed = int(meta.get("campaign", {}).get("seed", cfg["seed"]))
    subsets = _resolve_subsets(cfg, generator)
    tuples = _resolve_tuples(cfg, generator, classifier, seed)
    out_images.mkdir(parents=True, exist_ok=True)

    successes = [r for r in records if r.status == STATUS_SUCCESS]
    if limit is not None:
        successes = successes[:limit]
    pairs = []
    for record in successes:
        subset = subsets.get(record.layer_subset)
        if subset is None and record.layer_subset not in subsets:
            raise UsageError(
                f"record subset {record.layer_subset!r} is not defined in the config"
            )
        y, z, t = tuples[record.tuple_id]
        if (y, t) != (record.y, record.t):
            raise UsageError(
                f"tuple {record.tuple_id} resolves to (y={y}, t={t}) but the record "
                f"says (y={record.y}, t={record.t}); wrong seed or config?"
            )
        capture: dict = {}
        replayed = attack(
            generator,
            classifier,
            generator.sigma,
            z,
            y,
            t,
            _attack_config(cfg, subset),
            tuple_id=record.tuple_id,
            seed=seed,
            subset_name=record.layer_subset,
            capture=capture,
        )
        if replayed.status != STATUS_SUCCESS:
            raise RuntimeError(f"replay of tuple {record.tuple_id} did not succeed")
        pairs.append((record, capture))
    return pairs


def cmd_render(args) -> int:
    from .render import png_info

    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    grids = out / "grids"
    grids.mkdir(parents=True, exist_ok=True)
    pairs = _materialize(cfg, Path(args.records), grids, limit=args.count)
    stamp = {"config_hash": _campaign_hash(cfg), "toolkit_version": __version__}
    for record, capture in pairs:
        img = triple_grid(
            capture["unperturbed_image"],
            capture["perturbed_image"],
            diff_scale=args.diff_scale,
        )
        name = f"tuple{record.tuple_id:04d}_{record.layer_subset}_y{record.y}_t{record.t}.png"
        img.save(grids / name, pnginfo=png_info(stamp))
    print(f"rendered {len(pairs)} comparison grids to {grids}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    images_dir = out / "serve_images"
    pairs = _materialize(cfg, Path(args.records), images_dir)
    label_names = cfg.get("label_names") or {}
    stamp = {"config_hash": _campaign_hash(cfg), "toolkit_version": __version__}
    images = []
    for record, capture in pairs:
        save_png(
            capture["unperturbed_image"],
            images_dir / f"{record.tuple_id}_unperturbed.png",
            metadata=stamp,
        )
        save_png(
            capture["perturbed_image"],
            images_dir / f"{record.tuple_id}_perturbed.png",
            metadata=stamp,
        )
        images.append(
            ImageEntry(
                image_id=record.tuple_id,
                label_name=str(label_names.get(str(record.y), record.y)),
            )
        )
    session = LabelingSession(
        images,
        panel_size=int(cfg["panel_size"]),
        judges=cfg.get("judges"),
        log_path=out / "votes.jsonl",
    )
    app = create_app(session, images_dir, ui_dir=args.ui)
    print(f"serving {len(images)} image pairs on {args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentprobe",
        description="Probe classifier robustness via generator activation perturbations.",
    )
    parser.add_argument("--version", action="version", version=f"latentprobe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="write demo generator/classifier archives and a config")
    p.add_argument("--out", default=None, help="output directory (default: demo)")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("calibrate", help="measure sigma and store it in the generator archive")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("attack", help="run the perturbation search over sampled tuples")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("analyze", help="aggregate record streams into curves and tables")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--records", nargs="*", default=None, help="explicit record streams")
    p.add_argument("--force", action="store_true", help="allow mixed config hashes")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="serve the labeling API over a record stream")
    p.add_argument("--config", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--ui", default=None, help="directory with a built labeling UI")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("render", help="write unperturbed/perturbed/difference grids")
    p.add_argument("--config", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--diff-scale", type=float, default=10.0)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
