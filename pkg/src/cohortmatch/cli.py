"""Command-line front end.

Subcommands::

    cohortmatch match         --config run.cfg [overrides]
    cohortmatch balance       --input units.csv --pairs pairs.csv [--config run.cfg] [--out balance.csv]
    cohortmatch simulate      --grid grid.cfg --out report.csv [--workers N]
    cohortmatch dump-network  --config run.cfg --out network.dimacs

Configuration files are flat ``key = value`` text; lists are comma-separated
and ``#`` starts a comment.  Command-line flags override file values.
Exit codes: 0 success, 1 usage or data error, 2 infeasible match.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from cohortmatch.flownet import NetworkError, to_dimacs
from cohortmatch.statdist import CovariateTable, DataError, standardized_mean_differences
from cohortmatch.templatematch import (
    DELTA_KINDS,
    PAIRING_KINDS,
    Caliper,
    FineBalance,
    MatchedSample,
    MatchError,
    TemplateMatchSpec,
    build_template_network,
    compute_distances,
    solve_template_match,
)

log = logging.getLogger("cohortmatch")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
ROLE_VALUES = ("template", "treated", "control")


class ConfigError(ValueError):
    pass


def _list(value) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


@dataclass
class RunConfig:
    input: Optional[str] = None
    id_column: str = "id"
    role_column: str = "role"
    shared: tuple = ()
    extended: tuple = ()
    categorical: tuple = ()
    k: int = 1
    lam: float = 100.0
    delta_kind: str = "participation_abs_diff"
    Delta_kind: str = "robust_mahalanobis"
    caliper: Optional[float] = 0.05
    caliper_mode: str = "hard"
    caliper_penalty: float = 1000.0
    sparsify: int = 0
    exact: tuple = ()
    fine_balance_column: Optional[str] = None
    fine_balance_targets: dict = field(default_factory=dict)
    fine_balance_penalty: float = 1000.0
    forced: tuple = ()
    forced_penalty: float = 1000.0
    cost_scale: int = 10**5
    seed: int = 0
    output_dir: str = "."

    # config-file key -> attribute name, where they differ
    ALIASES = {"lambda": "lam", "delta": "delta_kind", "Delta": "Delta_kind"}

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        cfg = cls()
        for key, raw in values.items():
            cfg.set(key, raw)
        return cfg

    def set(self, key: str, raw) -> None:
        name = self.ALIASES.get(key, key)
        known = {f.name: f for f in fields(self)}
        if name not in known:
            raise ConfigError(f"unknown configuration key {key!r}")
        try:
            if name in ("shared", "extended", "categorical", "exact", "forced"):
                value = _list(raw)
            elif name == "fine_balance_targets":
                value = _parse_targets(raw)
            elif name in ("k", "sparsify", "cost_scale", "seed"):
                value = int(raw)
            elif name in ("lam", "caliper_penalty", "fine_balance_penalty", "forced_penalty"):
                value = float(raw)
            elif name == "caliper":
                value = None if str(raw).strip().lower() in ("", "none", "off") else float(raw)
            else:
                value = None if raw is None else str(raw).strip()
        except ValueError:
            raise ConfigError(f"invalid value {raw!r} for {key!r}") from None
        setattr(self, name, value)

    def validate(self) -> None:
        if not self.input:
            raise ConfigError("no input file configured (key 'input' or --input)")
        if not self.shared:
            raise ConfigError("no shared covariates configured (key 'shared')")
        if self.delta_kind not in DELTA_KINDS:
            raise ConfigError(f"delta_kind must be one of {DELTA_KINDS}")
        if self.Delta_kind not in PAIRING_KINDS:
            raise ConfigError(f"Delta_kind must be one of {PAIRING_KINDS}")
        if self.caliper_mode not in ("hard", "penalty"):
            raise ConfigError("caliper_mode must be 'hard' or 'penalty'")

    @property
    def string_columns(self) -> tuple:
        cols = list(self.categorical) + list(self.exact)
        if self.fine_balance_column:
            cols.append(self.fine_balance_column)
        return tuple(dict.fromkeys(cols))

    def spec(self) -> TemplateMatchSpec:
        fb = None
        if self.fine_balance_column:
            fb = FineBalance(self.fine_balance_column, self.fine_balance_targets, self.fine_balance_penalty)
        return TemplateMatchSpec(
            k=self.k,
            lam=self.lam,
            cost_scale=self.cost_scale,
            exact_columns=self.exact,
            fine_balance=fb,
            sparsify=self.sparsify,
            forced_include=self.forced,
            forced_penalty=self.forced_penalty if self.forced else 0.0,
            Delta_caliper=self.caliper_obj(),
        )

    def caliper_obj(self) -> Optional[Caliper]:
        if self.caliper is None:
            return None
        return Caliper(self.caliper, self.caliper_mode, self.caliper_penalty)


def _parse_targets(raw) -> dict:
    if isinstance(raw, dict):
        return {str(k): int(v) for k, v in raw.items()}
    out = {}
    for item in _list(raw):
        name, sep, count = item.rpartition(":")
        if not sep:
            raise ValueError(item)
        out[name.strip()] = int(count)
    return out


def read_key_values(path) -> dict:
    """Parse a flat ``key = value`` file."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
    return values


# --------------------------------------------------------------------------
# data I/O


def load_units_csv(path, cfg: RunConfig) -> CovariateTable:
    """Read a cohort file: one row per unit with id, role and covariate columns."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        rows = list(reader)
    numeric = list(cfg.shared) + list(cfg.extended)
    needed = [cfg.id_column, cfg.role_column] + numeric + list(cfg.string_columns)
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    pos = {h: i for i, h in enumerate(header)}
    ids, roles = [], []
    shared = np.empty((len(rows), len(cfg.shared)))
    extended = np.empty((len(rows), len(cfg.extended)))
    strings = {c: [] for c in cfg.string_columns}
    for i, row in enumerate(rows):
        lineno = i + 2
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        role = row[pos[cfg.role_column]].strip()
        if role not in ROLE_VALUES:
            raise DataError(f"{path}:{lineno}: unknown role {role!r} (expected one of {ROLE_VALUES})")
        uid = row[pos[cfg.id_column]].strip()
        if not uid:
            raise DataError(f"{path}:{lineno}: empty unit id")
        ids.append(uid)
        roles.append(role)
        for j, col in enumerate(numeric):
            text = row[pos[col]].strip()
            if text == "":
                if role == "template" and j >= len(cfg.shared):
                    value = math.nan  # extended covariates are not observed in the template
                else:
                    raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
            else:
                try:
                    value = float(text)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: cannot parse {text!r} in column {col!r} as a number") from None
                if not math.isfinite(value):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {col!r}")
            if j < len(cfg.shared):
                shared[i, j] = value
            else:
                extended[i, j - len(cfg.shared)] = value
        for col in cfg.string_columns:
            text = row[pos[col]].strip()
            if text == "" and role != "template":
                raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
            strings[col].append(text)
    if len(set(ids)) != len(ids):
        seen = set()
        for i, uid in enumerate(ids):
            if uid in seen:
                raise DataError(f"{path}:{i + 2}: duplicate unit id {uid!r}")
            seen.add(uid)
    return CovariateTable(
        tuple(ids), np.array(roles, dtype=object), shared, extended, cfg.shared, cfg.extended,
        categorical={c: np.array(v, dtype=object) for c, v in strings.items()},
    )


def write_units_csv(path, table: CovariateTable, id_column: str = "id", role_column: str = "role") -> None:
    """Inverse of :func:`load_units_csv`; unobserved template values are left blank."""
    names = list(table.covariate_names) + list(table.categorical)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_column, role_column] + names)
        X = table.features(np.arange(len(table)))
        for i, uid in enumerate(table.unit_ids):
            nums = ["" if math.isnan(x) else repr(float(x)) for x in X[i]]
            cats = [str(table.categorical[c][i]) for c in table.categorical]
            w.writerow([uid, table.roles[i]] + nums + cats)


def write_pairs_csv(path, sample: MatchedSample) -> None:
    template_of = sample.template_of()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair_index", "treated_id", "control_id", "template_id"])
        for i, (t, c) in enumerate(sample.pairs, 1):
            w.writerow([i, t, c, template_of.get(t, "")])


def read_pairs_csv(path, table: CovariateTable) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"treated_id", "control_id"} <= set(reader.fieldnames):
            raise DataError(f"{path}: needs treated_id and control_id columns")
        pairs = []
        for lineno, row in enumerate(reader, 2):
            t, c = row["treated_id"].strip(), row["control_id"].strip()
            for uid in (t, c):
                if uid not in table._index:
                    raise DataError(f"{path}:{lineno}: unit id {uid!r} not found in the cohort")
            pairs.append((t, c))
    if not pairs:
        raise DataError(f"{path}: no pairs")
    return pairs


def _f(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def balance_rows(table: CovariateTable, pairs: Sequence) -> list:
    """Wide balance table: means per group plus SMD before, after and versus template."""
    ids = table.unit_ids
    treated = [ids[i] for i in table.rows("treated")]
    control = [ids[i] for i in table.rows("control")]
    template = [ids[i] for i in table.rows("template")]
    mt = [t for t, _ in pairs]
    mc = [c for _, c in pairs]
    names = table.covariate_names
    before = standardized_mean_differences(table, treated, control, names, ("treated", "control"))
    after = standardized_mean_differences(table, mt, mc, names, ("matched_treated", "matched_control"))
    vs_template = None
    if template:
        vs_template = standardized_mean_differences(table, mt, template, table.shared_names,
                                                    ("matched_treated", "template"))
    out = []
    for name in names:
        b, a = before[name], after[name]
        shared = vs_template is not None and name in table.shared_names
        out.append([
            name,
            _f(vs_template[name].mean_b) if shared else "",
            _f(b.mean_a), _f(b.mean_b), _f(a.mean_a), _f(a.mean_b),
            _f(b.smd), _f(a.smd), _f(vs_template[name].smd) if shared else "",
        ])
    return out


BALANCE_HEADER = [
    "covariate", "mean_template", "mean_treated_all", "mean_control_all", "mean_matched_treated",
    "mean_matched_control", "smd_before", "smd_after", "smd_matched_treated_vs_template",
]


def write_balance_csv(path, table: CovariateTable, pairs: Sequence) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BALANCE_HEADER)
        w.writerows(balance_rows(table, pairs))


def write_summary(path, sample: MatchedSample, cfg: RunConfig, warnings: Sequence[str]) -> None:
    lines = [
        f"feasible = {str(sample.feasible).lower()}",
        f"k = {cfg.k}",
        f"lambda = {cfg.lam:g}",
        f"pairs = {len(sample.pairs)}",
        f"s1_template_cost = {_f(sample.s1_template_cost)}",
        f"s2_pairing_cost = {_f(sample.s2_pairing_cost)}",
        f"objective = {_f(sample.objective)}",
    ]
    lines += [f"warning = {w}" for w in warnings]
    lines += [f"diagnostic = {d}" for d in sample.diagnostics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def _run_config(args) -> RunConfig:
    values = read_key_values(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_mapping(values)
    for key in ("input", "k", "lambda", "caliper", "caliper_mode", "sparsify", "exact", "forced",
                "forced_penalty", "delta_kind", "Delta_kind", "cost_scale", "output_dir",
                "fine_balance_column", "fine_balance_targets", "fine_balance_penalty"):
        value = getattr(args, key.replace("lambda", "lam"), None)
        if value is not None:
            cfg.set(key, value)
    cfg.validate()
    return cfg


def _build(cfg: RunConfig):
    table = load_units_csv(cfg.input, cfg)
    spec = cfg.spec()
    dist = compute_distances(table, cfg.delta_kind, cfg.Delta_kind, spec.Delta_caliper)
    return table, spec, build_template_network(table, dist, spec)


def cmd_match(args) -> int:
    cfg = _run_config(args)
    table, spec, tn = _build(cfg)
    sample = solve_template_match(tn, spec)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(out / "summary.txt", sample, cfg, tn.warnings)
    for w in tn.warnings:
        log.warning(w)
    if not sample.feasible:
        for d in sample.diagnostics:
            print(f"infeasible: {d}", file=sys.stderr)
        return EXIT_INFEASIBLE
    write_pairs_csv(out / "pairs.csv", sample)
    write_balance_csv(out / "balance.csv", table, sample.pairs)
    print(f"{len(sample.pairs)} pairs; objective {sample.objective:.6f} "
          f"(s1 {sample.s1_template_cost:.6f}, s2 {sample.s2_pairing_cost:.6f}) -> {out}")
    return EXIT_OK


def cmd_balance(args) -> int:
    values = read_key_values(args.config) if args.config else {}
    cfg = RunConfig.from_mapping(values)
    if args.input:
        cfg.set("input", args.input)
    cfg.validate()
    table = load_units_csv(cfg.input, cfg)
    pairs = read_pairs_csv(args.pairs, table)
    write_balance_csv(args.out, table, pairs)
    print(f"balance for {len(pairs)} pairs -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from cohortmatch.simlab import SimError, SimGrid, run_factorial

    values = read_key_values(args.grid)
    if args.replicates is not None:
        values["replicates"] = str(args.replicates)
    try:
        grid = SimGrid.from_mapping(values)
    except SimError as exc:
        raise ConfigError(str(exc)) from None

    def progress(done, total):
        log.info("replicate %d/%d", done, total)

    report = run_factorial(grid, workers=args.workers, progress=progress)
    report.write_csv(args.out)
    print(f"{len(report.records)} rows -> {args.out}")
    return EXIT_OK


def cmd_dump_network(args) -> int:
    cfg = _run_config(args)
    table, spec, tn = _build(cfg)
    text = to_dimacs(tn.net, comment=f"template match k={cfg.k} lambda={cfg.lam:g} cost_scale={cfg.cost_scale}")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _add_match_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--input", help="cohort CSV (overrides 'input')")
    p.add_argument("--k", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--caliper", help="propensity caliper width, or 'none'")
    p.add_argument("--caliper-mode", dest="caliper_mode", choices=["hard", "penalty"])
    p.add_argument("--sparsify", type=int)
    p.add_argument("--exact", help="comma-separated exact-match columns")
    p.add_argument("--forced", help="comma-separated treated ids to force into the match")
    p.add_argument("--forced-penalty", dest="forced_penalty", type=float)
    p.add_argument("--delta-kind", dest="delta_kind", choices=DELTA_KINDS)
    p.add_argument("--Delta-kind", dest="Delta_kind", choices=PAIRING_KINDS)
    p.add_argument("--cost-scale", dest="cost_scale", type=int)
    p.add_argument("--fine-balance-column", dest="fine_balance_column")
    p.add_argument("--fine-balance-targets", dest="fine_balance_targets", help="e.g. a:2,b:1")
    p.add_argument("--fine-balance-penalty", dest="fine_balance_penalty", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohortmatch", description="Template-guided matched-pair designs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="build and solve a template match")
    _add_match_flags(p)
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("balance", help="balance table for an existing set of pairs")
    p.add_argument("--config")
    p.add_argument("--input")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", default="balance.csv")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("simulate", help="run the factorial bias simulation")
    p.add_argument("--grid", required=True, help="key = value grid file")
    p.add_argument("--out", required=True)
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default from COHORTMATCH_WORKERS, else 1)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dump-network", help="write the flow network in DIMACS format")
    _add_match_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_network)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    from cohortmatch.simlab import SimError

    try:
        return args.func(args)
    except (ConfigError, DataError, MatchError, NetworkError, SimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
