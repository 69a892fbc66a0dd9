"""Command-line experiment runner.

Subcommands
-----------
* ``run``          — execute a sweep from a config file (bundled name or
  path), write the CSV rows and the resolved config JSON, optionally export
  a protocol trace.
* ``verify``       — replay the safety checks over a previously exported
  trace file, offline.
* ``flare-repro``  — the reachability-under-partial-knowledge experiment;
  emits a ``mean ± 2σ`` accessible-nodes table.
* ``list-configs`` — show the bundled experiment configs.

Conventions
-----------
* Config files are YAML trees; any leaf can be overridden on the command
  line with ``--set section.key=value``.  The fully resolved config is
  echoed to standard out as JSON and written next to the CSV, and feeding
  that JSON back in as a config file reproduces the run exactly.
* Progress and diagnostics go to standard error only; data (CSV, tables,
  resolved config) goes to files or standard out, never mixed.
* Exit codes: 0 success, 1 config/usage error, 2 invariant violation
  detected during runs or trace verification, 3 internal fault.
* ``CHANSIM_OUT_DIR`` sets the default output directory.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click
import yaml

from .chainenv import ChainFault
from .linkedpay import HTLC, SPRITES
from .netsim.engine import NetsimInvariant, RunConfig, World
from .netsim.experiments import (ExperimentConfig, FlareRepro,
                                 flare_accessibility, flare_table,
                                 rows_to_csv_text, sweep)
from .netsim.topology import AttributeProfiles
from .trace import (TraceFormatError, sample_runs, trace_lines,
                    verify_trace_file)

log = logging.getLogger("chansim")

ENV_OUT_DIR = "CHANSIM_OUT_DIR"
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_INTERNAL = 3

CONFIG_DIR = Path(__file__).parent / "configs"

_MODEL_BY_NAME = {"sprites": SPRITES, "htlc": HTLC}


class ConfigError(Exception):
    """A config file or override is invalid; message carries the field path."""


# --------------------------------------------------------------------------
# config tree: defaults, merge, validation


# axis values are owned by the sweep section; the request rate by the search
_WORLD_EXCLUDED = {"topology", "model", "routing", "incremental", "revive",
                   "petty_rate", "seed", "request_rate", "profiles"}

_CHOICES = {
    "sweep.models": tuple(_MODEL_BY_NAME),
    "sweep.topologies": ("ba", "ws"),
    "sweep.routings": ("sp", "flare"),
    "world.fidelity": ("abstract", "full"),
}

# leaves whose value may be null
_NULLABLE = {"out_dir", "search.fixed_rate"}


def _dataclass_defaults(cls, exclude=()) -> Dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        v = (f.default_factory() if f.default is dataclasses.MISSING
             else f.default)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> Dict:
    """The full config tree with every leaf at its default."""
    return {
        "id": "default",
        "description": "",
        "out_dir": None,
        "sweep": {
            "models": ["sprites"],
            "topologies": ["ba"],
            "routings": ["sp"],
            "incremental": [True],
            "revive": [False],
            "petty_rates": [0.0],
            "seeds": [0],
        },
        "world": _dataclass_defaults(RunConfig, exclude=_WORLD_EXCLUDED),
        "profiles": _dataclass_defaults(AttributeProfiles),
        "search": {
            "fixed_rate": None,
            "lo": 0.25,
            "hi": 4.0,
            "iters": 7,
            "target": 0.98,
            "tolerance_pp": 0.25,
            "resolution": 0.01,
        },
        "trace": {
            "runs": 0,
            "max_parties": 5,
            "delta": 6,
            "amount": 250,
            "seed": 0,
        },
    }


def _coerce_leaf(path: str, default, value):
    """Type-check ``value`` against the default leaf; returns the value to
    store.  Raises ConfigError with the offending field path."""
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"{path}: null is not allowed here")
    if default is None:                  # nullable leaf being set
        if path == "out_dir":
            if not isinstance(value, str):
                raise ConfigError(f"{path}: expected a string, got {value!r}")
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(f"{path}: {value!r} is not one of "
                              f"{list(_CHOICES[path])}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]         # a lone scalar means a one-element axis
        if not value:
            raise ConfigError(f"{path}: empty list")
        elem_default = default[0] if default else 0
        elem_path = path  # choices tables are keyed by the list itself
        out = []
        for i, item in enumerate(value):
            try:
                out.append(_coerce_leaf(elem_path, elem_default, item))
            except ConfigError as exc:
                raise ConfigError(f"{path}[{i}]: {str(exc).split(': ', 1)[1]}")
        return out
    raise ConfigError(f"{path}: unsupported config leaf")


def _merge(base: Dict, override: Dict, prefix: str = "") -> None:
    """Deep-merge ``override`` into ``base`` in place, validating every key
    and value against the default tree shape."""
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section, got {value!r}")
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = _coerce_leaf(path, default_config_leaf(path), value)


_DEFAULT_TREE = None


def default_config_leaf(path: str):
    global _DEFAULT_TREE
    if _DEFAULT_TREE is None:
        _DEFAULT_TREE = default_config()
    node = _DEFAULT_TREE
    for part in path.split("."):
        node = node[part]
    return node


def _parse_override(raw: str) -> Tuple[List[str], object]:
    if "=" not in raw:
        raise ConfigError(f"override {raw!r}: expected key.path=value")
    key, text = raw.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {raw!r}: empty key")
    try:
        value = yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError:
        value = text
    if isinstance(value, str) and "," in value:
        value = [yaml.safe_load(part) for part in value.split(",")]
    return key.split("."), value


def resolve_config(source: Optional[str], overrides: Sequence[str]) -> Dict:
    """Load + merge + validate; returns the fully resolved config tree."""
    cfg = default_config()
    if source is not None:
        path = _find_config(source)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})")
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a key-value tree")
        if "id" not in loaded:
            loaded["id"] = path.stem
        _merge(cfg, loaded)
    for raw in overrides:
        parts, value = _parse_override(raw)
        tree: Dict = {}
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        _merge(cfg, tree)
    return cfg


def _find_config(source: str) -> Path:
    p = Path(source)
    if p.exists():
        return p
    bundled = CONFIG_DIR / f"{source}.yaml"
    if bundled.exists():
        return bundled
    names = sorted(c.stem for c in CONFIG_DIR.glob("*.yaml"))
    raise ConfigError(f"no config file {source!r} and no bundled config of "
                      f"that name (bundled: {', '.join(names)})")


def experiment_from_config(cfg: Dict) -> ExperimentConfig:
    profiles = {k: tuple(v) if isinstance(v, list) else v
                for k, v in cfg["profiles"].items()}
    base = RunConfig(profiles=AttributeProfiles(**profiles), **cfg["world"])
    sw, search = cfg["sweep"], cfg["search"]
    return ExperimentConfig(
        config_id=cfg["id"],
        base=base,
        models=tuple(_MODEL_BY_NAME[m] for m in sw["models"]),
        topologies=tuple(sw["topologies"]),
        routings=tuple(sw["routings"]),
        incremental_options=tuple(sw["incremental"]),
        revive_options=tuple(sw["revive"]),
        petty_rates=tuple(sw["petty_rates"]),
        seeds=tuple(sw["seeds"]),
        fixed_rate=search["fixed_rate"],
        rate_lo=search["lo"],
        rate_hi=search["hi"],
        search_iters=search["iters"],
        target_success=search["target"],
        tolerance_pp=search["tolerance_pp"],
        resolution=search["resolution"],
    )


def _out_dir(cli_value: Optional[str], cfg: Dict) -> Path:
    chosen = cli_value or cfg.get("out_dir") or os.environ.get(ENV_OUT_DIR) or "."
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# commands


@click.group()
@click.option("-v", "--verbose", count=True,
              help="More stderr detail (-v debug).")
def cli(verbose: int) -> None:
    """Deterministic payment-network experiments."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command("run")
@click.option("--config", "config_source", default=None,
              help="Config file path or bundled config name.")
@click.option("--set", "overrides", multiple=True, metavar="KEY.PATH=VALUE",
              help="Override one config leaf; repeatable.")
@click.option("--out-dir", default=None,
              help=f"Output directory (default: config, then ${ENV_OUT_DIR}, "
                   "then the working directory).")
@click.option("--trace-out", default=None,
              help="Also export a protocol trace to this path (enables "
                   "tracing even when the config has trace.runs = 0).")
@click.option("--inject-fault", type=click.Choice(["coin"]), default=None,
              help="Self-test hook: tamper with one world's ledger before "
                   "running; the conservation audit must catch it.")
def cmd_run(config_source, overrides, out_dir, trace_out, inject_fault) -> int:
    """Run a sweep: CSV rows + resolved-config JSON (+ optional trace)."""
    cfg = resolve_config(config_source, overrides)
    exp = experiment_from_config(cfg)
    out = _out_dir(out_dir, cfg)

    resolved_text = json.dumps(cfg, indent=2, sort_keys=True)
    click.echo(resolved_text)                       # data: stdout
    resolved_path = out / f"{cfg['id']}_resolved.json"
    resolved_path.write_text(resolved_text + "\n", encoding="utf-8")

    if inject_fault == "coin":
        _tampered_world(exp)                        # raises NetsimInvariant

    cells = (len(exp.models) * len(exp.topologies) * len(exp.routings)
             * len(exp.incremental_options) * len(exp.revive_options)
             * len(exp.petty_rates) * len(exp.seeds))
    log.info("running %d cells for config %r", cells, cfg["id"])
    done = [0]

    def progress(cell, row):
        done[0] += 1
        log.info("cell %d/%d %s: rate=%s success=%s", done[0], cells,
                 cell, row["request_rate"], row["success_rate"])

    rows = sweep(exp, progress=progress)
    csv_path = out / f"{cfg['id']}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv_text(rows))
    log.info("wrote %d rows to %s", len(rows), csv_path)

    trace_cfg = cfg["trace"]
    if trace_out is not None or trace_cfg["runs"] > 0:
        n_runs = trace_cfg["runs"] or 4
        results = sample_runs(
            n_runs, max_parties=trace_cfg["max_parties"],
            delta=trace_cfg["delta"], amount=trace_cfg["amount"],
            seed=trace_cfg["seed"])
        problems = [p for res in results for p in res.problems]
        if problems:
            raise ChainFault(
                "protocol audit failed during trace export: "
                + "; ".join(problems))
        trace_path = Path(trace_out) if trace_out else (
            out / f"{cfg['id']}_trace.jsonl")
        with open(trace_path, "w", encoding="utf-8", newline="") as fh:
            for line in trace_lines(results):
                fh.write(line + "\n")
        log.info("wrote trace of %d runs to %s", len(results), trace_path)
    return EXIT_OK


def _tampered_world(exp: ExperimentConfig) -> None:
    cfg = dataclasses.replace(
        exp.base, topology=exp.topologies[0], model=exp.models[0],
        petty_rate=exp.petty_rates[0], seed=exp.seeds[0],
        request_rate=exp.fixed_rate or exp.rate_lo)
    world = World(cfg)
    edge = sorted(world.topo.balances)[0]
    node = sorted(world.topo.balances[edge])[0]
    world.topo.balances[edge][node] += 1     # unrecorded coin
    world.audit()
    raise NetsimInvariant("tampered ledger escaped the conservation audit")


@cli.command("verify")
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
def cmd_verify(trace_path: str) -> int:
    """Replay conservation/timing/settlement checks over a trace file."""
    report = verify_trace_file(trace_path)
    for line in report.lines():                     # data: stdout
        click.echo(line)
    if not report.ok:
        log.error("%d check(s) failed in %s", len(report.problems),
                  trace_path)
        return EXIT_INVARIANT
    return EXIT_OK


@cli.command("flare-repro")
@click.option("--n", default=500, show_default=True)
@click.option("--k", default=4, show_default=True,
              help="Ring-lattice neighbour count.")
@click.option("--p", default=0.3, show_default=True,
              help="Edge rewire probability.")
@click.option("--rho", default=2, show_default=True,
              help="Neighborhood radius (hops).")
@click.option("--queries", default=10, show_default=True)
@click.option("--beacons", default="0,6,12", show_default=True,
              help="Comma-separated beacon counts to sweep.")
@click.option("--reps", default=30, show_default=True)
@click.option("--sources", default=10, show_default=True,
              help="Random route sources per repetition.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", default=None,
              help="Also write the table to this file.")
def cmd_flare_repro(n, k, p, rho, queries, beacons, reps, sources, seed,
                    out_path) -> int:
    """Accessible-nodes table (mean ± 2σ) vs. beacon count."""
    try:
        beacon_list = tuple(int(b) for b in str(beacons).split(","))
    except ValueError:
        raise ConfigError(f"--beacons: expected comma-separated integers, "
                          f"got {beacons!r}")
    params = FlareRepro(n=n, ws_k=k, ws_p=p, rho=rho, queries=queries,
                        beacons=beacon_list, reps=reps, sources=sources,
                        seed=seed)

    def progress(rep, b, pct):
        log.info("rep %d/%d beacons=%d accessible=%.2f%%",
                 rep + 1, params.reps, b, pct)

    results = flare_accessibility(params, progress=progress)
    table = flare_table(results)
    for line in table:                              # data: stdout
        click.echo(line)
    if out_path:
        Path(out_path).write_text("\n".join(table) + "\n", encoding="utf-8")
    return EXIT_OK


@cli.command("list-configs")
def cmd_list_configs() -> int:
    """Show the bundled experiment configs."""
    paths = sorted(CONFIG_DIR.glob("*.yaml"))
    for path in paths:
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            desc = str(loaded.get("description", ""))
        except yaml.YAMLError:
            desc = "(unreadable)"
        click.echo(f"{path.stem:<24} {desc}")
    if not paths:
        click.echo("(no bundled configs)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point with the documented exit-code contract


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        rv = cli.main(args=argv, standalone_mode=False)
        return int(rv) if isinstance(rv, int) else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return EXIT_CONFIG
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return EXIT_CONFIG
    except click.Abort:
        print("aborted", file=sys.stderr)
        return EXIT_CONFIG
    except (NetsimInvariant, ChainFault) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:                        # noqa: BLE001
        import traceback
        traceback.print_exc(file=sys.stderr)
        print(f"internal fault: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":                          # pragma: no cover
    sys.exit(main())
