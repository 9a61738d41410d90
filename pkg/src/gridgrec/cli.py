"""Command-line entry point: ``gridgrec <subcommand>``.

Exit codes: 0 success, 1 validation failure, 2 I/O error, 3 backend unavailable.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import BackendUnavailable, GridGrecError
from .render import annotate, annotations_to_dict, camera_ring, render
from .scene import SceneConfig, dumps_scene, generate_scene, loads_scene, strip_ids
from .template import camera_tag

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_BACKEND = 0, 1, 2, 3


def scene_seeds(seed: int, count: int) -> list[int]:
    """Per-scene seeds; the i-th value does not depend on ``count``."""
    return [int(c.generate_state(1, np.uint64)[0]) for c in np.random.SeedSequence(seed).spawn(count)]


def _scene_config(cfg: dict) -> SceneConfig:
    return SceneConfig(
        archetypes=tuple(cfg["scene.archetypes"]),
        min_blocks=cfg["scene.min_blocks"], max_blocks=cfg["scene.max_blocks"],
        min_structures=cfg["scene.min_structures"], max_structures=cfg["scene.max_structures"],
        height=cfg["scene.height"], require_support=cfg["scene.require_support"],
    )


def _cameras(cfg: dict, count: int | None = None):
    return camera_ring(count or cfg["camera.count"], radius=cfg["camera.radius"],
                       elevation=cfg["camera.elevation"], width=cfg["camera.width"],
                       height=cfg["camera.height"])


def _generate(args, cfg) -> list:
    conf = _scene_config(cfg)
    return [generate_scene(s, conf, scene_id=f"scene_{i:04d}")
            for i, s in enumerate(scene_seeds(args.seed, args.count))]


def _load_scenes(args, cfg) -> list:
    if getattr(args, "scenes", None):
        paths = sorted(Path(args.scenes).glob("*.json"))
        if not paths:
            raise FileNotFoundError(f"no scene files in {args.scenes}")
        return [loads_scene(p.read_text(encoding="utf-8")) for p in paths]
    return _generate(args, cfg)


def _pmap(fn, items, jobs: int) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _say(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(args, cfg) -> int:
    scenes = _generate(args, cfg)
    d = Path(args.out) / "scenes"
    d.mkdir(parents=True, exist_ok=True)
    for sc in scenes:
        (d / f"{sc.scene_id}.json").write_text(dumps_scene(sc) + "\n", encoding="utf-8")
    _say({"scenes": len(scenes), "blocks": sum(len(s.blocks) for s in scenes)})
    return EXIT_OK


def _views(args, cfg):
    scenes = _load_scenes(args, cfg)
    return [(s, c) for s in scenes for c in _cameras(cfg, getattr(args, "cameras", None))]


def cmd_render(args, cfg) -> int:
    d = Path(args.out) / "images"
    d.mkdir(parents=True, exist_ok=True)

    def work(view):
        s, c = view
        render(s, c).save_png(d / f"{s.scene_id}_{camera_tag(c)}.png")

    views = _views(args, cfg)
    _pmap(work, views, args.jobs)
    _say({"images": len(views)})
    return EXIT_OK


def cmd_annotate(args, cfg) -> int:
    d = Path(args.out) / "annotations"

    def work(view):
        s, c = view
        trip = annotate(s, c)
        _write_json(d / f"{s.scene_id}_{camera_tag(c)}.json", annotations_to_dict(s.scene_id, c, trip))
        return len(trip)

    views = _views(args, cfg)
    n = _pmap(work, views, args.jobs)
    _say({"views": len(views), "annotations": sum(n)})
    return EXIT_OK


def cmd_recover_ids(args, cfg) -> int:
    from .recovery import add_uniform_noise, recover_scene_ids

    d = Path(args.out) / "recovery"
    noise = args.noise if args.noise is not None else cfg["recover.noise"]
    views = _views(args, cfg)
    seeds = scene_seeds(args.seed, len(views))

    def work(item):
        (s, c), nseed = item
        img = render(s, c)
        if noise > 0:
            img = add_uniform_noise(img, noise, np.random.default_rng(nseed))
        rec = recover_scene_ids(img, strip_ids(s))
        truth = {b.coord: b.id for b in s.blocks}
        correct = sum(r.recovered_id == truth[r.block_coord] for r in rec.results)
        _write_json(d / f"{s.scene_id}_{camera_tag(c)}.json", {
            "scene_id": s.scene_id, "camera": c.to_dict(),
            "results": [r.to_dict() for r in rec.results],
            "skipped": [{"coord": list(k.coord.as_tuple()), "reason": k.reason} for k in rec.skipped],
        })
        illegible = sum(k.reason == "illegible" for k in rec.skipped)
        return len(rec.results), correct, illegible

    rows = _pmap(work, list(zip(views, seeds)), args.jobs)
    read, correct, illegible = (sum(r[i] for r in rows) for i in range(3))
    summary = {"views": len(views), "noise": noise, "recovered": read, "correct": correct,
               "illegible_skipped": illegible, "accuracy": correct / read if read else 0.0}
    _write_json(d / "summary.json", summary)
    _say(summary)
    return EXIT_OK


def _make_backend(kind: str, scenes, seed: int, margin: float):
    from .prompted import AdversarialBackend, RemoteHTTPBackend, RuleBackend

    if kind == "rule":
        return RuleBackend(scenes, seed=seed, margin_fraction=margin)
    if kind == "adversarial":
        return AdversarialBackend(RuleBackend(scenes, seed=seed, margin_fraction=margin), scenes, seed=seed)
    if kind == "remote":
        return RemoteHTTPBackend()
    raise ValueError(f"unknown backend {kind!r}")


def _shares(n: int, k: int) -> list[int]:
    return [n // k + (i < n % k) for i in range(k)]


def cmd_synth(args, cfg) -> int:
    from .dataset import write_dataset

    scenes = _load_scenes(args, cfg)
    cams = _cameras(cfg, args.cameras)
    views = [(s, c) for s in scenes for c in cams]
    out = Path(args.out)
    extra: dict = {}
    if args.tier == "template":
        from .template import synthesize_templates

        per_view = cfg["template.per_view"] or None
        samples = synthesize_templates(scenes, cams, args.n, args.seed, per_view=per_view)
    elif args.tier == "prompted":
        from .prompted import RejectionStats, synthesize_prompted

        backend = _make_backend(args.backend or cfg["prompted.backend"], scenes, args.seed,
                                cfg["prompted.margin"])
        seeds = scene_seeds(args.seed, len(views))
        jobs = [(v, k, s) for v, k, s in zip(views, _shares(args.n, len(views)), seeds) if k]
        runs = [synthesize_prompted(sc, cam, backend, k, s, max_in_flight=args.jobs,
                                    margin_fraction=cfg["prompted.margin"]) for (sc, cam), k, s in jobs]
        samples, stats = [], RejectionStats()
        for got, st in runs:
            samples.extend(got)
            stats.add(st)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rejections.jsonl", "w", encoding="utf-8") as f:
            for row in stats.log:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        extra = {"backend": backend.describe(), "rejection_stats": stats.to_dict()}
    else:
        from .dialogue import synthesize_dialogues

        seeds = scene_seeds(args.seed, len(views))
        jobs = [(v, k, s) for v, k, s in zip(views, _shares(args.n, len(views)), seeds) if k]
        runs = _pmap(lambda j: synthesize_dialogues(j[0][0], j[0][1], j[1], j[2]), jobs, args.jobs)
        samples = [s for r in runs for s in r]
    m = write_dataset(samples, out, name=args.name or args.tier, seed=args.seed, scenes=scenes, extra=extra)
    _say({"tier": args.tier, "n_samples": m.n_samples, **({"rejections": extra["rejection_stats"]} if extra else {})})
    return EXIT_OK


def _parse_quotas(items) -> dict:
    quotas = {}
    for it in items or []:
        tier, _, count = it.partition("=")
        if not count:
            raise ValueError(f"quota must look like tier=count, got {it!r}")
        quotas[tier.strip()] = int(count)
    return quotas


def cmd_mix(args, cfg) -> int:
    from .dataset import load_manifest, mix_tiers

    quotas = _parse_quotas(args.quota)
    manifests = [load_manifest(p) for p in args.inputs]
    m = mix_tiers(manifests, quotas, args.seed, args.out, name=args.name or "mix")
    _say({"n_samples": m.n_samples, "tiers": m.tiers})
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .dataset import ingest_mdcr, read_dataset
    from .evaluation import evaluate, read_predictions, write_report

    if args.mdcr:
        data = ingest_mdcr(args.mdcr)
    else:
        _, data = read_dataset(args.dataset)
    report = evaluate(read_predictions(args.predictions), data, args.setting, args.threshold)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_report(report, Path(args.out) / "report.json")
    _say({"setting": report.setting, "n_samples": report.n_samples, "mean_f1": report.mean_f1,
          "precision_at_f1_1": report.precision_at_f1_1})
    return EXIT_OK


def cmd_stats(args, cfg) -> int:
    from .dataset import dataset_stats, read_dataset

    m, samples = read_dataset(args.dataset)
    _say({"name": m.name, **dataset_stats(samples)})
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def globals_(parser, suppress: bool):
        # subcommands accept the globals too; SUPPRESS keeps their defaults
        # from clobbering values given before the subcommand name
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(0), help="master seed (default 0)")
        parser.add_argument("--config", default=d(None), help="key = value config file")
        parser.add_argument("--out", default=d("gridgrec-out"), help="output directory")
        parser.add_argument("--jobs", type=int, default=d(1), help="parallelism cap")

    common = argparse.ArgumentParser(add_help=False)
    globals_(common, suppress=True)
    p = argparse.ArgumentParser(prog="gridgrec", description="Synthetic GREC data for grid-world block scenes.")
    globals_(p, suppress=False)
    p.add_argument("--version", action="version", version=f"gridgrec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_source(sp):
        sp.add_argument("--scenes", help="directory of scene JSON files (default: generate)")
        sp.add_argument("--count", type=int, default=20, help="scenes to generate when --scenes is absent")
        sp.add_argument("--cameras", type=int, help="views per scene (default: camera.count)")

    sp = sub.add_parser("gen-scenes", parents=[common], help="generate scene JSON files")
    sp.add_argument("--count", type=int, default=20)
    sp.set_defaults(fn=cmd_gen_scenes)

    sp = sub.add_parser("render", parents=[common], help="render scenes to PNG")
    scene_source(sp)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("annotate", parents=[common], help="write (coord, bbox, id) triplets")
    scene_source(sp)
    sp.set_defaults(fn=cmd_annotate)

    sp = sub.add_parser("recover-ids", parents=[common], help="render-and-compare letter recovery")
    scene_source(sp)
    sp.add_argument("--noise", type=float, help="uniform noise amplitude in byte units")
    sp.set_defaults(fn=cmd_recover_ids)

    sp = sub.add_parser("synth", parents=[common], help="synthesize a dataset tier")
    sp.add_argument("tier", choices=("template", "prompted", "dialogue"))
    scene_source(sp)
    sp.add_argument("--n", type=int, required=True, help="samples (template, dialogue) or backend calls (prompted)")
    sp.add_argument("--backend", choices=("rule", "adversarial", "remote"), help="prompted backend")
    sp.add_argument("--name", help="dataset name in the manifest")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("mix", parents=[common], help="stratified mix of datasets")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--quota", action="append", help="tier=count, repeatable")
    sp.add_argument("--name")
    sp.set_defaults(fn=cmd_mix)

    sp = sub.add_parser("eval", parents=[common], help="score a prediction file")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--mdcr", help="external benchmark directory (records.jsonl)")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--setting", choices=("full-dialogue", "mention-only"), default="full-dialogue")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("stats", parents=[common], help="summarize a dataset")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except BackendUnavailable as e:
        print(f"gridgrec: backend unavailable: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (GridGrecError, ValueError) as e:
        print(f"gridgrec: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"gridgrec: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
