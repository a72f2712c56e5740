"""Command-line front end: simulate / estimate / sensitivity / config-dump.

All diagnostics go to standard error; result data goes to files only. Exit
codes: 0 success, 1 user error (bad arguments, malformed config or data),
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyFile,
    MissingColumn,
    NonNumericCell,
    ParseError,
    SemanticError,
    WeakfuseError,
)
from .estimator import (
    EstimatorVariant,
    one_step_estimate,
    sensitivity_interval,
    wald_interval,
)
from .gradients import EstimandSpec
from .model import BetaParam, Dataset, FusionDesign, layout_from_design, validate_design
from .nuisance import BandwidthRule, NuisanceOptions
from .simulation import (
    ALIGNMENT_LEVELS,
    named_scenario,
    run_monte_carlo,
    summary_to_csv,
)
from .weights import WeightSpec

_DEFAULT_VARIANTS = "target_only,naive_fusion,efficient_fusion"


# ---------------------------------------------------------------- config ----

@dataclass
class RunConfig:
    design: FusionDesign
    estimand: EstimandSpec
    variant: EstimatorVariant
    options: NuisanceOptions
    level: float
    seed: int | None
    beta0: BetaParam | None
    columns: dict
    raw: dict


def _expect_keys(obj: dict, allowed: set, path: str):
    for key in obj:
        if key not in allowed:
            raise ParseError(f"{path}.{key}: unknown key")


def _as_int_list(val, path: str) -> list[int]:
    if not isinstance(val, list) or not all(isinstance(v, int) for v in val):
        raise ParseError(f"{path}: expected a list of integers")
    return val


def parse_config_dict(cfg: dict) -> RunConfig:
    if not isinstance(cfg, dict):
        raise ParseError("config root must be an object")
    _expect_keys(cfg, {"design", "estimand", "variant", "options", "level",
                       "seed", "columns"}, "config")
    dsn = cfg.get("design")
    if not isinstance(dsn, dict):
        raise ParseError("config.design: required object")
    _expect_keys(dsn, {"d", "k", "relevant", "aligned", "weak", "weight_specs"},
                 "config.design")
    try:
        d = int(dsn["d"])
        k = int(dsn["k"])
    except (KeyError, TypeError, ValueError):
        raise ParseError("config.design: d and k must be integers") from None
    relevant = _as_int_list(dsn.get("relevant", []), "config.design.relevant")

    def _index_map(block, path):
        out = {}
        if block is None:
            return out
        if not isinstance(block, dict):
            raise ParseError(f"{path}: expected an object keyed by index")
        for jtxt, sources in block.items():
            try:
                j = int(jtxt)
            except ValueError:
                raise ParseError(f"{path}.{jtxt}: index keys must be integers") from None
            out[j] = set(_as_int_list(sources, f"{path}.{jtxt}"))
        return out

    aligned = _index_map(dsn.get("aligned"), "config.design.aligned")
    weak = _index_map(dsn.get("weak"), "config.design.weak")

    specs = {}
    thresholds = {}
    spec_block = dsn.get("weight_specs") or {}
    if not isinstance(spec_block, dict):
        raise ParseError("config.design.weight_specs: expected an object")
    for key, body in spec_block.items():
        parts = key.split(",")
        if len(parts) != 2:
            raise ParseError(f'config.design.weight_specs.{key}: keys look like "j,s"')
        try:
            j, s = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(f"config.design.weight_specs.{key}: non-integer pair") from None
        if not isinstance(body, dict):
            raise ParseError(f"config.design.weight_specs.{key}: expected an object")
        _expect_keys(body, {"family", "terms", "threshold"},
                     f"config.design.weight_specs.{key}")
        family = body.get("family")
        if family == "exponential_tilt":
            terms = body.get("terms")
            if not isinstance(terms, list) or not all(isinstance(t, str) for t in terms):
                raise ParseError(
                    f"config.design.weight_specs.{key}.terms: expected a list of strings")
            try:
                specs[(j, s)] = WeightSpec.tilt(j, terms)
            except WeakfuseError as exc:
                raise ParseError(
                    f"config.design.weight_specs.{key}.terms: {exc}") from None
        elif family == "truncated_above_threshold":
            specs[(j, s)] = WeightSpec("truncated_above_threshold", j)
            thr = body.get("threshold", 0.0)
            if not isinstance(thr, (int, float)):
                raise ParseError(
                    f"config.design.weight_specs.{key}.threshold: expected a number")
            thresholds[(j, s)] = float(thr)
        else:
            raise ParseError(
                f"config.design.weight_specs.{key}.family: unknown family {family!r}")

    try:
        design = FusionDesign(d=d, k=k, relevant=tuple(relevant), aligned=aligned,
                              weak=weak, weight_specs=specs)
    except WeakfuseError as exc:
        raise SemanticError(f"config.design: {exc}") from None

    est = cfg.get("estimand") or {"kind": "ate"}
    if not isinstance(est, dict):
        raise ParseError("config.estimand: expected an object")
    _expect_keys(est, {"kind", "coefficient", "index", "power"}, "config.estimand")
    try:
        estimand = EstimandSpec(
            kind=est.get("kind", "ate"),
            coefficient=est.get("coefficient", "slope"),
            index=int(est.get("index", 1)),
            power=int(est.get("power", 1)),
        )
    except WeakfuseError as exc:
        raise SemanticError(f"config.estimand: {exc}") from None

    var = cfg.get("variant") or {"kind": "efficient_fusion"}
    if isinstance(var, str):
        var = {"kind": var}
    if not isinstance(var, dict):
        raise ParseError("config.variant: expected an object or string")
    _expect_keys(var, {"kind", "extra_terms"}, "config.variant")
    try:
        variant = EstimatorVariant(kind=var.get("kind", "efficient_fusion"),
                                   extra_terms=int(var.get("extra_terms", 0)))
    except ValueError as exc:
        raise SemanticError(f"config.variant: {exc}") from None

    opt = cfg.get("options") or {}
    if not isinstance(opt, dict):
        raise ParseError("config.options: expected an object")
    _expect_keys(opt, {"bandwidth", "ratio_clip", "propensity_clip", "grid_points",
                       "cross_fit"}, "config.options")
    try:
        options = NuisanceOptions(
            bandwidth_rule=BandwidthRule.parse(opt.get("bandwidth", "silverman")),
            ratio_clip=tuple(opt.get("ratio_clip", (1e-3, 1e3))),
            propensity_clip=tuple(opt.get("propensity_clip", (0.01, 0.99))),
            grid_points=int(opt.get("grid_points", 301)),
            cross_fit=bool(opt.get("cross_fit", False)),
        )
    except WeakfuseError as exc:
        raise ParseError(f"config.options: {exc}") from None

    level = cfg.get("level", 0.95)
    if not isinstance(level, (int, float)) or not 0 < level < 1:
        raise ParseError("config.level: expected a number in (0, 1)")
    seed = cfg.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ParseError("config.seed: expected an integer or null")

    beta0 = None
    if thresholds:
        layout = layout_from_design(design)
        values = np.zeros(sum(c for _, _, c in layout))
        b = BetaParam(values, layout)
        offs = b.offsets()
        for (j, s), thr in thresholds.items():
            values[offs[(j, s)]] = thr
        beta0 = BetaParam(values, layout)

    columns = cfg.get("columns") or {}
    if not isinstance(columns, dict):
        raise ParseError("config.columns: expected an object")
    _expect_keys(columns, {"z", "source"}, "config.columns")

    return RunConfig(design=design, estimand=estimand, variant=variant,
                     options=options, level=float(level), seed=seed, beta0=beta0,
                     columns=columns, raw=cfg)


def parse_config(path: str) -> RunConfig:
    """Load and validate a JSON run configuration."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    if not text.strip():
        raise EmptyFile(f"config {path} is empty")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config_dict(cfg)


def default_config_dict() -> dict:
    """The canonical study configuration (round-trips through parse_config)."""
    return {
        "design": {
            "d": 3,
            "k": 4,
            "relevant": [1, 3],
            "aligned": {"1": [1], "2": [1, 2, 3, 4], "3": [1]},
            "weak": {"3": [2, 3, 4]},
            "weight_specs": {
                "3,2": {"family": "exponential_tilt",
                        "terms": ["z1*log(z3)", "z1*z2*log(z3)"]},
                "3,3": {"family": "exponential_tilt", "terms": ["z1*log1m(z3)"]},
                "3,4": {"family": "exponential_tilt", "terms": ["z1*z2*log(z3)"]},
            },
        },
        "estimand": {"kind": "ate"},
        "variant": {"kind": "efficient_fusion", "extra_terms": 0},
        "options": {"bandwidth": "silverman", "ratio_clip": [1e-3, 1e3],
                    "propensity_clip": [0.01, 0.99], "grid_points": 301,
                    "cross_fit": False},
        "level": 0.95,
        "seed": None,
        "columns": {"z": ["z1", "z2", "z3"], "source": "source"},
    }


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ data ----

def ingest_csv(path: str, mapping: dict) -> tuple[Dataset, dict]:
    """Read a dataset from CSV using a column mapping.

    mapping: {"z": [column names for z1..zd in order], "source": column name}.
    Source labels are remapped to 1..k by sorted string order; the map is
    returned alongside the dataset so reports can echo it.
    """
    zcols = mapping.get("z")
    scol = mapping.get("source")
    if not zcols or not isinstance(zcols, list) or not scol:
        raise ParseError('column mapping needs "z" (list) and "source" (name)')
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise ParseError(f"cannot read data {path}: {exc}") from None
    if not rows:
        raise EmptyFile(f"{path} has no header row")
    header = [h.strip() for h in rows[0]]
    index = {}
    for col in list(zcols) + [scol]:
        if col not in header:
            raise MissingColumn(f"column {col!r} not in header {header}")
        index[col] = header.index(col)
    body = rows[1:]
    if not body:
        raise EmptyFile(f"{path} has a header but no data rows")
    z = np.empty((len(body), len(zcols)))
    raw_labels = []
    for i, row in enumerate(body):
        line_no = i + 2
        for cidx, col in enumerate(zcols):
            cell = row[index[col]] if index[col] < len(row) else ""
            try:
                z[i, cidx] = float(cell)
            except ValueError:
                raise NonNumericCell(line_no, col, cell) from None
        raw_labels.append(row[index[scol]].strip() if index[scol] < len(row) else "")
    uniq = sorted(set(raw_labels))
    label_map = {lab: i + 1 for i, lab in enumerate(uniq)}
    source = np.array([label_map[lab] for lab in raw_labels], dtype=int)
    data = Dataset(z, source, k=len(uniq))
    return data, {lab: label_map[lab] for lab in uniq}


# ------------------------------------------------------------- commands -----

def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _parse_variants(text: str) -> list[EstimatorVariant]:
    out = [EstimatorVariant.parse(item) for item in text.split(",") if item.strip()]
    if not out:
        raise ValueError("no variants given")
    return out


def cmd_simulate(args) -> int:
    variants = _parse_variants(args.variants)
    scenario = named_scenario(args.scenario, covariate_shift=args.shift,
                              n_per_source=args.n, variants=variants)
    rows = run_monte_carlo([scenario], reps=args.reps, master_seed=args.seed,
                           threads=args.threads)
    _write_text(args.out, summary_to_csv(rows))
    print(f"wrote {len(rows)} summary rows to {args.out}", file=sys.stderr)
    return 0


def _load_run(args):
    cfg = parse_config(args.config)
    mapping = cfg.columns or {"z": [f"z{i}" for i in range(1, cfg.design.d + 1)],
                              "source": "source"}
    data, label_map = ingest_csv(args.data, mapping)
    try:
        validate_design(cfg.design, data)
    except WeakfuseError as exc:
        raise SemanticError(str(exc)) from None
    return cfg, data, label_map


def cmd_estimate(args) -> int:
    cfg, data, label_map = _load_run(args)
    report = one_step_estimate(data, cfg.design, cfg.estimand, variant=cfg.variant,
                               options=cfg.options, level=cfg.level,
                               beta0=cfg.beta0, seed_value=cfg.seed)
    payload = report.to_json_dict()
    payload["source_map"] = label_map
    payload["config_hash"] = config_hash(cfg.raw)
    _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"estimate {report.estimate:.6g} (se {report.se:.3g}) -> {args.out}",
          file=sys.stderr)
    return 0


def _parse_grid(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError('delta grid looks like "start:stop:step"')
    start, stop, step = (float(p) for p in parts)
    if step <= 0:
        raise ValueError("delta grid step must be positive")
    out = []
    v = start
    while v <= stop + 1e-12:
        out.append(round(v, 12))
        v += step
    return out


def cmd_sensitivity(args) -> int:
    cfg, data, label_map = _load_run(args)
    grid = _parse_grid(args.delta_grid)
    fused = one_step_estimate(data, cfg.design, cfg.estimand, variant=cfg.variant,
                              options=cfg.options, level=cfg.level,
                              beta0=cfg.beta0, seed_value=cfg.seed)
    target = one_step_estimate(data, cfg.design, cfg.estimand,
                               variant=EstimatorVariant("target_only"),
                               options=cfg.options, level=cfg.level,
                               seed_value=cfg.seed)
    t_lo, t_hi = wald_interval(target.estimate, target.se, cfg.level)
    t_width = t_hi - t_lo
    lines = ["delta,estimate,se,ci_lo,ci_hi,width,target_only_width"]
    for dlt in grid:
        lo, hi = sensitivity_interval(fused.estimate, fused.se, dlt, cfg.level)
        lines.append(",".join([
            repr(dlt), repr(fused.estimate), repr(fused.se),
            repr(lo), repr(hi), repr(hi - lo), repr(t_width)]))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(grid)} sensitivity rows to {args.out}", file=sys.stderr)
    return 0


def cmd_config_dump(args) -> int:
    _write_text(args.out, json.dumps(default_config_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote default config to {args.out}", file=sys.stderr)
    return 0


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits 2 on usage problems; those are user errors here
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="weakfuse",
                description="One-step fusion estimation across weakly aligned sources")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run the Monte Carlo study for one scenario")
    ps.add_argument("--scenario", required=True, choices=sorted(ALIGNMENT_LEVELS))
    ps.add_argument("--shift", default="none", choices=["none", "beta_shift"])
    ps.add_argument("--reps", type=int, default=300)
    ps.add_argument("--n", type=int, default=2000)
    ps.add_argument("--seed", type=int, required=True)
    ps.add_argument("--variants", default=_DEFAULT_VARIANTS)
    ps.add_argument("--threads", type=int, default=1)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_simulate)

    pe = sub.add_parser("estimate", help="one-step estimate on a CSV dataset")
    pe.add_argument("--config", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_estimate)

    pn = sub.add_parser("sensitivity", help="delta-band sensitivity sweep")
    pn.add_argument("--config", required=True)
    pn.add_argument("--data", required=True)
    pn.add_argument("--delta-grid", required=True, dest="delta_grid")
    pn.add_argument("--out", required=True)
    pn.set_defaults(func=cmd_sensitivity)

    pc = sub.add_parser("config-dump", help="write the default study config")
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_config_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (WeakfuseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
