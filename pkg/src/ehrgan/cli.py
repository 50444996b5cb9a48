"""Command-line pipeline: simulate, clean, train, generate, evaluate, attack, sparsity, report.

Every subcommand writes ``report.json`` (plus CSV/SVG artifacts) under
``--out-dir``.  Reports carry config hashes, seeds, the schema hash and package
versions, and no timestamps or absolute paths, so reruns are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import bvae as bv
from . import hgan
from . import metrics as mt
from . import privacy as pv
from .cohort import DataError, SimConfig, clean, load_cpt_mapping, load_csv, rollup, save_csv, simulate_cohort, split

log = logging.getLogger("ehrgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
ALL_METRICS = ("dws", "dwp", "cvt", "far", "ccd", "lsr")
VARIANTS = {"hgan": "relu_norm_relu", "hgan-u": "norm_relu"}

# desk-scale training defaults; full-scale values stay in GanConfig
DESK_GAN = {"epochs": 200, "batch_size": 1000, "lr_g": 1e-3, "lr_d": 1e-3, "dtype": "float32"}
DESK_SHRINK = 4
DESK_BVAE = {"epochs": 20}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# report helpers


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _file_digest(path) -> dict:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return {"name": os.path.basename(str(path)), "sha256": h.hexdigest()}


def provenance(config: dict, seeds: dict, schema=None, inputs: dict | None = None) -> dict:
    return {
        "config": config,
        "config_hash": _hash(config),
        "seeds": seeds,
        "schema_hash": schema.hash() if schema is not None else None,
        "inputs": {k: _file_digest(v) for k, v in (inputs or {}).items() if v},
        "versions": {
            "ehrgan": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(doc), fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_text(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"config {path} must be a JSON object")
    return doc


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _load_cohort(path, schema=None, what: str = "cohort"):
    if not path:
        raise UsageError(f"--{what} is required")
    try:
        cohort, errors = load_csv(path, schema)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for e in errors[:20]:
        log.warning("%s line %d: %s", os.path.basename(path), e.line, e.reason)
    return cohort, errors


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise UsageError("--out-dir is required")
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    sim = dict(cfg.get("sim", {}))
    if args.n is not None:
        sim["n_records"] = args.n
    config = SimConfig.from_dict(sim)
    config.validate()
    seed = _seed(args, cfg)
    out = _out_dir(args)
    cohort, truth = simulate_cohort(config, seed)
    save_csv(cohort, out / "cohort.csv")
    write_json(out / "ground_truth.json", truth.to_dict())
    doc = provenance({"sim": config.__dict__}, {"simulate": seed}, cohort.schema)
    doc["n_records"] = len(cohort)
    write_json(out / "report.json", doc)
    return EXIT_OK


def cmd_clean(args) -> int:
    cfg = _load_config(args.config)
    ccfg = dict(cfg.get("clean", {}))
    for key in ("min_prevalence", "min_codes", "holdout_fraction"):
        v = getattr(args, key)
        if v is not None:
            ccfg[key] = v
    seed = _seed(args, cfg)
    out = _out_dir(args)
    cohort, errors = _load_cohort(args.real, what="real")
    mapping = load_cpt_mapping(args.cpt_map) if args.cpt_map else None
    if args.rollup or mapping:
        cohort = rollup(cohort, mapping)
    cleaned, report = clean(cohort, ccfg.get("min_prevalence", 1 / 1000), int(ccfg.get("min_codes", 5)))
    hold = float(ccfg.get("holdout_fraction", 0.0))
    doc = provenance(ccfg, {"split": seed}, cleaned.schema, {"real": args.real})
    doc["cleaning"] = report.to_dict()
    doc["rejected_rows"] = len(errors)
    if hold > 0:
        holdout, train = split(cleaned, hold, seed)
        save_csv(train, out / "cohort.csv")
        save_csv(holdout, out / "holdout.csv")
        doc["n_train"], doc["n_holdout"] = len(train), len(holdout)
    else:
        save_csv(cleaned, out / "cohort.csv")
        doc["n_train"] = len(cleaned)
    write_json(out / "report.json", doc)
    return EXIT_OK


def gan_config(cfg: dict, width: int, args) -> hgan.GanConfig:
    g = {**DESK_GAN, **cfg.get("gan", {})}
    shrink = int(g.pop("shrink", DESK_SHRINK))
    if args.epochs is not None:
        g["epochs"] = args.epochs
    if args.batch_size is not None:
        g["batch_size"] = args.batch_size
    if args.beta is not None:
        g["beta"] = args.beta
    if getattr(args, "lam", None) is not None:
        g["lam"] = args.lam
    if args.variant:
        g["filter_order"] = VARIANTS[args.variant]
    if "g_widths" in g or "d_widths" in g:
        return hgan.GanConfig.from_dict(g)
    return hgan.GanConfig.for_width(width, shrink=shrink, **{k: v for k, v in g.items() if k in hgan.GanConfig.__dataclass_fields__})


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    cohort, _ = _load_cohort(args.real, what="real")
    config = gan_config(cfg, cohort.schema.width, args)

    def progress(e):
        log.info("epoch %d d=%.4f g=%.4f w=%.4f viol=%.4f", e.epoch, e.d_loss, e.g_loss, e.wasserstein, e.violation_rate)

    model = hgan.train(config, cohort, seed, progress=progress)
    hgan.save_checkpoint(model, out / "model.json")
    doc = provenance(config.to_dict(), {"train": seed}, cohort.schema, {"real": args.real})
    doc["variant"] = "hgan" if config.filter_order == "relu_norm_relu" else "hgan-u"
    doc["constraint_space"] = "scaled"
    doc["history"] = model.history
    write_json(out / "report.json", doc)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    if not args.model:
        raise UsageError("--model is required")
    try:
        model = hgan.load_checkpoint(args.model)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load model {args.model}: {exc}") from exc
    n = args.n if args.n is not None else len(model.cond_ages)
    synth = hgan.generate(model, n, seed)
    save_csv(synth, out / "synth.csv")
    doc = provenance(model.config.to_dict(), {"generate": seed}, model.schema, {"model": args.model})
    doc["n_records"] = n
    doc["violation_rate"] = hgan.violation_rate(synth)
    write_json(out / "report.json", doc)
    return EXIT_OK


def _series_artifacts(out: Path, series: mt.ScatterSeries) -> dict:
    series.to_csv(out / f"{series.name}.csv")
    _write_text(out / f"{series.name}.svg", mt.scatter_svg(series))
    return series.to_dict()


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    ecfg = cfg.get("evaluate", {})
    chosen = args.metrics or ",".join(ecfg.get("metrics", ALL_METRICS))
    names = [m.strip() for m in chosen.split(",") if m.strip()]
    unknown = sorted(set(names) - set(ALL_METRICS))
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; choose from {list(ALL_METRICS)}")
    real, _ = _load_cohort(args.real, what="real")
    synth, _ = _load_cohort(args.synth, real.schema, what="synth")
    if not len(real) or not len(synth):
        raise DataError("evaluation needs non-empty real and synthetic cohorts")
    doc = provenance({"evaluate": ecfg, "bvae": cfg.get("bvae", {})}, {"evaluate": seed}, real.schema, {"real": args.real, "synth": args.synth})
    res: dict = {}
    if "dws" in names:
        res["dws"] = _series_artifacts(out, mt.dws(real, synth))
    if "dwp" in names:
        test, train = split(real, float(ecfg.get("test_fraction", 0.2)), seed)
        s = mt.dwp(train, synth, test)
        res["dwp"] = {**_series_artifacts(out, s), "histogram": s.histogram()}
    if "cvt" in names:
        c = mt.cvt(real, synth)
        for d in c.distributions:
            h = d.histograms()
            _write_text(out / f"cvt_{d.name}.svg", mt.histogram_svg(f"cvt {d.name}", h["edges"], {"real": h["real"], "synth": h["synth"]}))
        res["cvt"] = c.to_dict()
    if "far" in names:
        res["far"] = mt.far(real, synth).to_dict()
    if "ccd" in names:
        ccd = {**mt.ccd_demographics(real, synth), **mt.ccd_vitals(real, synth)}
        res["ccd"] = {k: _series_artifacts(out, s) for k, s in ccd.items()}
    if "lsr" in names:
        bcfg = bv.BvaeConfig.from_dict({**DESK_BVAE, **cfg.get("bvae", {})})
        model = bv.train_bvae(real, bcfg, seed)
        lsr = bv.lsr_compare(model, real, synth)
        for dim, hr, hs in zip(lsr.dims, lsr.real_histograms, lsr.synth_histograms):
            _write_text(out / f"lsr_dim{dim}.svg", mt.histogram_svg(f"posterior variance, dim {dim}", hr["edges"], {"real": hr["counts"], "synth": hs["counts"]}))
        res["lsr"] = {"config": bcfg.to_dict(), **lsr.to_dict()}
    doc["metrics"] = res
    write_json(out / "report.json", doc)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    train, _ = _load_cohort(args.real, what="real")
    holdout, _ = _load_cohort(args.holdout, train.schema, what="holdout")
    synth, _ = _load_cohort(args.synth, train.schema, what="synth")
    pcfg = pv.PrivacyConfig.from_dict(cfg.get("privacy", {}))
    try:
        rep = pv.attack_suite(train, holdout, synth, pcfg, seed)
    except pv.InsufficientRecords as exc:
        raise DataError(str(exc)) from exc
    doc = provenance(pcfg.to_dict(), {"attack": seed}, train.schema, {"real": args.real, "holdout": args.holdout, "synth": args.synth})
    doc["known_set"] = "50% training members / 50% holdout non-members"
    doc.update({k: rep[k] for k in ("membership", "attribute")})
    write_json(out / "report.json", doc)
    return EXIT_OK


def sparsity_report(models: list, n: int, seed: int, bins: int = 10) -> tuple[dict, dict[str, str]]:
    """Per-layer activation-rate comparison of an HGAN and an HGAN-U generator."""
    by_variant = {}
    for m in models:
        key = "hgan" if m.config.filter_order == "relu_norm_relu" else "hgan-u"
        if key in by_variant:
            raise UsageError("sparsity needs one HGAN and one HGAN-U model")
        by_variant[key] = m
    if set(by_variant) != {"hgan", "hgan-u"}:
        raise UsageError("sparsity needs one HGAN and one HGAN-U model")
    rates = {k: hgan.generator_activation_rates(m, n, seed) for k, m in by_variant.items()}
    edges = np.linspace(0.0, 1.0, bins + 1)
    layers, svgs = [], {}
    for i, (a, b) in enumerate(zip(rates["hgan"], rates["hgan-u"])):
        ha = np.histogram(a, edges)[0]
        hb = np.histogram(b, edges)[0]
        layers.append(
            {"layer": i, "hgan_mean": float(a.mean()), "hgan_u_mean": float(b.mean()), "hgan_hist": ha, "hgan_u_hist": hb, "hgan_lower": bool(a.mean() < b.mean())}
        )
        svgs[f"sparsity_layer{i}.svg"] = mt.histogram_svg(f"activation rate, layer {i}", edges, {"HGAN": ha, "HGAN-U": hb})
    lower = sum(l["hgan_lower"] for l in layers)
    doc = {"bins": edges, "layers": layers, "hgan_lower_layers": lower, "n_layers": len(layers), "hgan_lower_in_majority": lower * 2 > len(layers)}
    if not doc["hgan_lower_in_majority"]:
        doc["deviation_note"] = (
            f"HGAN had the lower mean activation rate in only {lower} of {len(layers)} generator layers; "
            "the expected sparsity ordering was not reproduced at this scale."
        )
    return doc, svgs


def cmd_sparsity(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    if not args.model or len(args.model) != 2:
        raise UsageError("sparsity needs --model twice (one HGAN, one HGAN-U)")
    try:
        models = [hgan.load_checkpoint(p) for p in args.model]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load model: {exc}") from exc
    body, svgs = sparsity_report(models, args.n or 2000, seed)
    for name, text in svgs.items():
        _write_text(out / name, text)
    doc = provenance({"n": args.n or 2000}, {"sparsity": seed}, models[0].schema, {f"model{i}": p for i, p in enumerate(args.model)})
    doc["sparsity"] = body
    write_json(out / "report.json", doc)
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    if not args.inputs:
        raise UsageError("report needs --inputs")
    merged = {}
    for path in args.inputs:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        key = Path(path).parent.name or Path(path).stem
        if key in merged:
            key = f"{key}_{len(merged)}"
        merged[key] = doc
        for name, body in (doc.get("metrics") or {}).items():
            for series in _find_series(body):
                s = mt.ScatterSeries(
                    series["name"], [p["id"] for p in series["points"]], [_nan(p["x"]) for p in series["points"]], [_nan(p["y"]) for p in series["points"]]
                )
                _write_text(out / f"{key}_{s.name}.svg", mt.scatter_svg(s))
    write_json(out / "report.json", {"reports": merged, "versions": provenance({}, {})["versions"]})
    return EXIT_OK


def _nan(v):
    return float("nan") if v is None else v


def _find_series(body):
    if isinstance(body, dict):
        if "points" in body and "name" in body:
            yield body
        else:
            for v in body.values():
                yield from _find_series(v)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ehrgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, real=False, synth=False):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        if real:
            sp.add_argument("--real")
        if synth:
            sp.add_argument("--synth")
        return sp

    sp = common(sub.add_parser("simulate", help="simulate a cohort to CSV"))
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("clean", help="roll up and clean a cohort"), real=True)
    sp.add_argument("--cpt-map")
    sp.add_argument("--rollup", action="store_true", help="roll ICD codes up to their 3-digit prefix")
    sp.add_argument("--min-prevalence", type=float)
    sp.add_argument("--min-codes", type=int)
    sp.add_argument("--holdout-fraction", type=float)
    sp.set_defaults(func=cmd_clean)

    sp = common(sub.add_parser("train", help="train HGAN or HGAN-U"), real=True)
    sp.add_argument("--variant", choices=sorted(VARIANTS))
    sp.add_argument("--beta", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("generate", help="sample a synthetic cohort"))
    sp.add_argument("--model")
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("evaluate", help="utility metrics"), real=True, synth=True)
    sp.add_argument("--metrics", help=f"comma-separated subset of {','.join(ALL_METRICS)}")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("attack", help="membership and attribute inference"), real=True, synth=True)
    sp.add_argument("--holdout")
    sp.set_defaults(func=cmd_attack)

    sp = common(sub.add_parser("sparsity", help="HGAN vs HGAN-U activation rates"))
    sp.add_argument("--model", action="append")
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_sparsity)

    sp = sub.add_parser("report", help="merge reports and render SVGs")
    sp.add_argument("--inputs", nargs="+")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required (try --help)")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except hgan.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
