"""Command-line entry point.

Every command works inside one run directory (``--out``, default
``$CORTEXCOMP_OUT`` or ``./runs/default``). The resolved configuration is
written to ``config.yaml`` on every call and ``manifest.json`` records the
artifacts each command produced.

Exit codes: 0 success, 1 unexpected I/O failure, 2 invalid configuration,
3 missing artifact, 4 divergence / non-finite gradient, 5 fingerprint
mismatch, 6 too few samples or degenerate input, 7 shape or index error.
"""
import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ae_fingerprint, lfcm_fingerprint, load_config, save_config
from .errors import CortexCompError, InvalidConfig

log = logging.getLogger("cortexcomp")

OUT_ENV = "CORTEXCOMP_OUT"


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in row.items()})


class RunDir:
    def __init__(self, root, cfg, command):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.files = {}
        save_config(cfg, self.root / "config.yaml")

    def path(self, name):
        return self.root / name

    def record(self, role, name):
        self.files[role] = name
        return self.path(name)

    def finish(self, status="ok", **extra):
        manifest_path = self.path("manifest.json")
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"runs": []}
        manifest.setdefault("artifacts", {}).update(self.files)
        manifest["runs"].append({
            "command": self.command, "status": status, "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "ae_fingerprint": ae_fingerprint(self.cfg), "lfcm_fingerprint": lfcm_fingerprint(self.cfg),
            "outputs": self.files, "config": self.cfg.to_dict(), **extra,
        })
        _write_json(manifest_path, manifest)


def _world(cfg):
    from .synthworld import gen_world

    return gen_world(cfg.world, cfg.surface)


def _load_models(run, cfg, args):
    from .lfcm import load_lfcm
    from .training import load_stats
    from .univae import load_autoencoder

    ae = load_autoencoder(args.ae or run.path("ae.npz"), cfg)
    lfcm = load_lfcm(args.lfcm or run.path("lfcm.npz"), cfg)
    stats = load_stats(args.stats or run.path("stats.npz"), cfg)
    return ae, lfcm, stats


def _apply_inference_flags(cfg, args):
    overrides = {}
    if getattr(args, "no_sweep", False):
        overrides["inference.sweep"] = False
    if getattr(args, "no_rescale", False):
        overrides["inference.rescale"] = False
    if getattr(args, "subjects", None):
        try:
            overrides["inference.subjects"] = [int(s) for s in args.subjects.split(",")]
        except ValueError as exc:
            raise InvalidConfig(f"--subjects expects comma-separated integers, got {args.subjects!r}") from exc
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_world(cfg, run, args):
    from .synthworld import split_manifest
    from .tensorio import save_tensors

    world = _world(cfg)
    run.record("world_summary", "world.json")
    run.path("world.json").write_text(world.summary_json() + "\n")
    _write_json(run.record("split", "split.json"), split_manifest(world))
    save_tensors(run.record("world", "world.npz"), {
        "stimulus_bank": world.stimulus_bank, "modes": world.modes,
        "population_mixer": world.population_mixer, "mixer_coeffs": world.mixer_coeffs,
        "bias_coeffs": world.bias_coeffs, "offset_coeffs": world.offset_coeffs,
        "dataset_gains": world.dataset_gains, "subject_dataset": world.subject_dataset,
        "target_expansion": world.target_expansion, "active": world.mask.active,
    }, kind="world", fingerprint=ae_fingerprint(cfg), world=cfg.world.__dict__)
    log.info("world: %d stimuli, %d subjects, %d active pixels", world.n_stimuli, world.n_subjects, world.n_pixels)
    return 0


def cmd_train_ae(cfg, run, args):
    from .univae import heldout_maps, reconstruction_r2, save_autoencoder, train_autoencoder

    world = _world(cfg)
    rows = []
    model, history, status = train_autoencoder(world, cfg.univae, steps=args.steps, log_fn=rows.append)
    _write_csv(run.record("ae_log", "ae_log.csv"), history)
    save_autoencoder(run.record("ae", "ae.npz"), model, cfg)
    r2 = reconstruction_r2(model, heldout_maps(world, cfg.univae.n_heldout))
    _write_json(run.record("ae_report", "ae_report.json"), {"heldout_r2": r2, "status": status,
                                                            "steps": len(history)})
    log.info("autoencoder: held-out R^2 %.4f (%s)", r2, status)
    return 0


def cmd_train_lfcm(cfg, run, args):
    from .lfcm import save_lfcm
    from .training import save_stats, train_lfcm
    from .univae import load_autoencoder

    world = _world(cfg)
    ae = load_autoencoder(args.ae or run.path("ae.npz"), cfg)
    lfcm, history, stats = train_lfcm(world, ae, cfg, steps=args.steps)
    _write_csv(run.record("lfcm_log", "lfcm_log.csv"), history)
    save_lfcm(run.record("lfcm", "lfcm.npz"), lfcm, cfg)
    save_stats(run.record("stats", "stats.npz"), stats, cfg)
    if history:
        log.info("lfcm: final total loss %.4f", history[-1]["total"])
    return 0


def cmd_decode(cfg, run, args):
    import torch

    from .experiments import evaluation_subject_sets
    from .inference import decode_codes, readout
    from .synthworld import split_manifest, targets_for
    from .univae import encode_maps

    cfg = _apply_inference_flags(cfg, args)
    world = _world(cfg)
    ae, lfcm, stats = _load_models(run, cfg, args)
    manifest = split_manifest(world)
    test = np.asarray(manifest["test_stimuli"])
    if args.limit is not None:
        test = test[: args.limit]
    bank = targets_for(world, manifest["test_stimuli"])
    subject_sets = evaluation_subject_sets(cfg, world)
    results = []
    for u in manifest["unseen_subjects"]:
        d = int(world.subject_dataset[u])
        seeds = [(cfg.eval.trial_seed, int(k), int(u), 0) for k in test]
        maps = world.render_batch(test, [u] * len(test), [d] * len(test), seeds).astype(np.float32)
        z = encode_maps(ae, maps)
        with torch.no_grad():
            c_final, _ = decode_codes(z, np.full(len(test), d), lfcm, stats, subject_sets,
                                      sweep=cfg.inference.sweep, rescale_codes=cfg.inference.rescale,
                                      axis=cfg.inference.rescale_axis)
        for i, k in enumerate(test):
            ranked = readout(c_final[i], bank, manifest["test_stimuli"])
            rank = next(r for r, (sid, _) in enumerate(ranked) if sid == int(k))
            entry = {"subject": int(u), "dataset": d, "stimulus_id": int(k), "true_rank": rank,
                     "top": [[sid, score] for sid, score in ranked[: args.top]]}
            if args.include_code:
                entry["c_final"] = c_final[i].tolist()
            results.append(entry)
    provenance = {"ae_fingerprint": ae_fingerprint(cfg), "lfcm_fingerprint": lfcm_fingerprint(cfg),
                  "sweep": cfg.inference.sweep, "rescale": cfg.inference.rescale,
                  "rescale_axis": cfg.inference.rescale_axis,
                  "subject_sets": {str(k): v for k, v in subject_sets.items()}}
    _write_json(run.record("decode", args.name + ".json"), {"provenance": provenance, "results": results})
    top1 = float(np.mean([r["true_rank"] == 0 for r in results])) if results else float("nan")
    log.info("decoded %d samples, top-1 %.3f", len(results), top1)
    return 0


def cmd_eval(cfg, run, args):
    import jsonschema

    from .evalkit import METRICS_SCHEMA
    from .experiments import evaluate

    cfg = _apply_inference_flags(cfg, args)
    world = _world(cfg)
    ae, lfcm, stats = _load_models(run, cfg, args)
    report = evaluate(cfg, world, ae, lfcm, stats)
    payload = json.loads(report.to_json())
    jsonschema.validate(payload, METRICS_SCHEMA)
    _write_json(run.record("metrics", args.name + ".json"), payload)
    run.record("metrics_csv", args.name + ".csv").write_text(report.to_csv())
    log.info("unseen two-way %.4f, top-1 %.4f, pixcorr %.4f", report.two_way, report.top1, report.pixcorr)
    return 0


def cmd_ablate(cfg, run, args):
    from .experiments import ablate

    names = cfg.experiment.ablations if args.ablations is None else [a for a in args.ablations.split(",") if a]
    rows, summary = ablate(cfg, names, log_fn=lambda r: log.info("%s seed %d: two-way %.4f",
                                                                  r["variant"], r["seed"], r["two_way"]))
    _write_csv(run.record("ablation_runs", "ablation_runs.csv"), rows)
    _write_csv(run.record("ablation", "ablation.csv"), summary)
    _write_json(run.record("ablation_json", "ablation.json"), {"runs": rows, "summary": summary})
    return 0


def cmd_subject_scale(cfg, run, args):
    from .experiments import subject_scale

    counts = None if args.counts is None else [int(c) for c in args.counts.split(",")]
    rows, table = subject_scale(cfg, counts, args.repeats,
                                log_fn=lambda r: log.info("count %d repeat %d: two-way %.4f",
                                                          r["count"], r["repeat"], r["two_way"]))
    _write_csv(run.record("subject_scale_runs", "subject_scale_runs.csv"), rows)
    _write_csv(run.record("subject_scale", "subject_scale.csv"), table)
    _write_json(run.record("subject_scale_json", "subject_scale.json"), {"runs": rows, "table": table})
    return 0


def cmd_grad_check(cfg, run, args):
    from .experiments import gradient_suite

    start = time.perf_counter()
    reports = gradient_suite(seed=args.seed, step=args.step, tol=args.tol)
    out = {name: {"max_rel_err": r.max_rel_err, "passed": r.passed, "tol": r.tol} for name, r in reports.items()}
    _write_json(run.record("grad_check", "grad_check.json"),
                {"checks": out, "seconds": time.perf_counter() - start})
    for name, r in reports.items():
        log.info("%-10s max rel err %.2e %s", name, r.max_rel_err, "ok" if r.passed else "FAIL")
    return 0 if all(r.passed for r in reports.values()) else 4


COMMANDS = {
    "gen-world": cmd_gen_world,
    "train-ae": cmd_train_ae,
    "train-lfcm": cmd_train_lfcm,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "subject-scale": cmd_subject_scale,
    "grad-check": cmd_grad_check,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. --set training.steps=200 (repeatable)")
    common.add_argument("--out", default=None,
                        help=f"run directory (default: ${OUT_ENV} or ./runs/default)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="force single-threaded deterministic kernels (config default: on)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cortexcomp", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-world", parents=[common], help="generate the synthetic world and split manifest")
    p = sub.add_parser("train-ae", parents=[common], help="pretrain the universal autoencoder")
    p.add_argument("--steps", type=int, default=None)
    p = sub.add_parser("train-lfcm", parents=[common], help="train the factorization-composition module")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ae", default=None, help="autoencoder checkpoint (default: <out>/ae.npz)")

    for name, helptext in (("decode", "zero-shot decode unseen-subject test maps"),
                           ("eval", "unseen- and seen-subject metrics report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--ae", default=None)
        p.add_argument("--lfcm", default=None)
        p.add_argument("--stats", default=None)
        p.add_argument("--no-sweep", action="store_true", help="use the initial default-subject code directly")
        p.add_argument("--no-rescale", action="store_true", help="skip per-dataset rescaling")
        p.add_argument("--subjects", default=None, help="comma-separated sweep subjects (-1 = default subject)")
        p.add_argument("--name", default=name if name == "decode" else "metrics", help="output file stem")
        if name == "decode":
            p.add_argument("--limit", type=int, default=None, help="decode only the first N test stimuli")
            p.add_argument("--top", type=int, default=5, help="ranked entries kept per sample")
            p.add_argument("--include-code", action="store_true", help="store c_final in the JSON")

    p = sub.add_parser("ablate", parents=[common], help="ablation table over seeds")
    p.add_argument("--ablations", default=None, help="comma-separated names (default: config list)")
    p = sub.add_parser("subject-scale", parents=[common], help="metrics versus number of training subjects")
    p.add_argument("--counts", default=None, help="comma-separated subject counts")
    p.add_argument("--repeats", type=int, default=None)
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference checks of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    run = None
    try:
        cfg = load_config(args.config, args.overrides)
        if args.deterministic is not None:
            cfg = cfg.replace(deterministic=args.deterministic)
        from .experiments import set_determinism

        set_determinism(cfg.deterministic)
        out = args.out or os.environ.get(OUT_ENV) or os.path.join("runs", "default")
        run = RunDir(out, cfg, args.command)
        code = COMMANDS[args.command](cfg, run, args)
        run.finish("ok" if code == 0 else "failed", exit_code=code)
        return code
    except CortexCompError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if run is not None:
            run.finish("error", error=type(exc).__name__, exit_code=exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
